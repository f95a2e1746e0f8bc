#include "segmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace segmoe {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;
using BackwardFn = std::function<void(detail::Node&)>;

Tensor make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                   BackwardFn backward) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

Shape strides_of(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[i] = da == 1 ? db : da;
    }
    return out;
}

// Flat index into `in` for every flat index of `out`, where in broadcasts to out.
std::vector<std::size_t> broadcast_map(const Shape& in, const Shape& out) {
    const std::size_t nd = out.size();
    const std::size_t offset = nd - in.size();
    const Shape in_strides = strides_of(in);
    Shape eff(nd, 0);
    for (std::size_t i = 0; i < in.size(); ++i) eff[i + offset] = in[i] == 1 ? 0 : in_strides[i];
    const std::size_t total = shape_numel(out);
    std::vector<std::size_t> map(total);
    Shape counter(nd, 0);
    std::size_t pos = 0;
    for (std::size_t o = 0; o < total; ++o) {
        map[o] = pos;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            pos += eff[d];
            if (counter[d] < out[d]) break;
            pos -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    return map;
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// C[m,n] += A[m,k] * B[k,n]; every C entry sums over k in ascending order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + p] += acc;
        }
    }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* drow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
    }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    const auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    return make_result(a.shape(), std::move(out), {a.node()}, [deriv](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        auto& g = parent.grad_buffer();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            g[i] += self.grad[i] * deriv(parent.data[i], self.data[i]);
        }
    });
}

// deriv_a/deriv_b receive (x, y, out) and return the local partial.
template <class Fwd, class DerivA, class DerivB>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, DerivA deriv_a, DerivB deriv_b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const auto x = a.data();
    const auto y = b.data();
    if (sa == sb) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
        return make_result(sa, std::move(out), {a.node(), b.node()},
                           [deriv_a, deriv_b](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               const std::size_t n = self.data.size();
                               if (pa.requires_grad) {
                                   auto& g = pa.grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                       g[i] += self.grad[i] *
                                               deriv_a(pa.data[i], pb.data[i], self.data[i]);
                               }
                               if (pb.requires_grad) {
                                   auto& g = pb.grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                       g[i] += self.grad[i] *
                                               deriv_b(pa.data[i], pb.data[i], self.data[i]);
                               }
                           });
    }
    Shape so = broadcast_shapes(sa, sb);
    auto ma = std::make_shared<std::vector<std::size_t>>(broadcast_map(sa, so));
    auto mb = std::make_shared<std::vector<std::size_t>>(broadcast_map(sb, so));
    std::vector<double> out(shape_numel(so));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[(*ma)[i]], y[(*mb)[i]]);
    return make_result(std::move(so), std::move(out), {a.node(), b.node()},
                       [ma, mb, deriv_a, deriv_b](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           const std::size_t n = self.data.size();
                           if (pa.requires_grad) {
                               auto& g = pa.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t ia = (*ma)[i];
                                   g[ia] += self.grad[i] *
                                            deriv_a(pa.data[ia], pb.data[(*mb)[i]], self.data[i]);
                               }
                           }
                           if (pb.requires_grad) {
                               auto& g = pb.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                   const std::size_t ib = (*mb)[i];
                                   g[ib] += self.grad[i] *
                                            deriv_b(pa.data[(*ma)[i]], pb.data[ib], self.data[i]);
                               }
                           }
                       });
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::size_t normalize_axis(int axis, std::size_t ndim) {
    const long a = axis < 0 ? static_cast<long>(ndim) + axis : axis;
    if (a < 0 || a >= static_cast<long>(ndim)) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(ndim));
    }
    return static_cast<std::size_t>(a);
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int axis) const { return node_->shape[normalize_axis(axis, ndim())]; }

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != ndim()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t d = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[d]) throw ShapeError("index out of range for " + shape_str(shape()));
        flat = flat * node_->shape[d] + i;
        ++d;
    }
    return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
    // Post-order DFS gives a topological order; walk it backwards.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double x, double y, double) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor ln(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw std::domain_error("ln of non-positive value " + std::to_string(v));
    }
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}

Tensor pow(const Tensor& a, double exponent) {
    return unary(a, [exponent](double x) { return std::pow(x, exponent); },
                 [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor abs(const Tensor& a) {
    return unary(a, [](double x) { return std::fabs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
    return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](double x, double) {
                     const double s = 1.0 / (1.0 + std::exp(-x));
                     return s * (1.0 + x * (1.0 - s));
                 });
}

Tensor gelu(const Tensor& a) {
    return unary(a, [](double x) { return x * normal_cdf(x); },
                 [](double x, double) { return normal_cdf(x) + x * normal_pdf(x); });
}

Tensor mask_fill(const Tensor& t, const Tensor& mask, double value) {
    const Shape& so = t.shape();
    if (broadcast_shapes(so, mask.shape()) != so) {
        throw ShapeError("mask " + shape_str(mask.shape()) + " does not broadcast to " +
                         shape_str(so));
    }
    auto keep = std::make_shared<std::vector<char>>(t.numel());
    const auto map = broadcast_map(mask.shape(), so);
    const auto md = mask.data();
    const auto td = t.data();
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool fill = md[map[i]] != 0.0;
        (*keep)[i] = fill ? 0 : 1;
        out[i] = fill ? value : td[i];
    }
    return make_result(so, std::move(out), {t.node()}, [keep](detail::Node& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if ((*keep)[i]) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2 || sa.back() != sb[sb.size() - 2]) {
        throw ShapeError("matmul dimension mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t n = sb.back();

    if (sb.size() == 2) {
        // Fold all leading dims of a into rows: one GEMM.
        const std::size_t rows = a.numel() / k;
        Shape so = sa;
        so.back() = n;
        std::vector<double> out(rows * n, 0.0);
        gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
        return make_result(std::move(so), std::move(out), {a.node(), b.node()},
                           [rows, k, n](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (pa.requires_grad)
                                   gemm_nt(self.grad.data(), pb.data.data(),
                                           pa.grad_buffer().data(), rows, k, n);
                               if (pb.requires_grad)
                                   gemm_tn(pa.data.data(), self.grad.data(),
                                           pb.grad_buffer().data(), rows, k, n);
                           });
    }

    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    Shape batch_o;
    try {
        batch_o = broadcast_shapes(batch_a, batch_b);
    } catch (const ShapeError&) {
        throw ShapeError("matmul batch mismatch: " + shape_str(sa) + " x " + shape_str(sb));
    }
    auto ma = std::make_shared<std::vector<std::size_t>>(broadcast_map(batch_a, batch_o));
    auto mb = std::make_shared<std::vector<std::size_t>>(broadcast_map(batch_b, batch_o));
    const std::size_t batches = shape_numel(batch_o);
    Shape so = batch_o;
    so.push_back(m);
    so.push_back(n);
    std::vector<double> out(batches * m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t t = 0; t < batches; ++t) {
        gemm_nn(ad + (*ma)[t] * m * k, bd + (*mb)[t] * k * n, out.data() + t * m * n, m, k, n);
    }
    return make_result(std::move(so), std::move(out), {a.node(), b.node()},
                       [ma, mb, batches, m, k, n](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           for (std::size_t t = 0; t < batches; ++t) {
                               const double* g = self.grad.data() + t * m * n;
                               if (pa.requires_grad)
                                   gemm_nt(g, pb.data.data() + (*mb)[t] * k * n,
                                           pa.grad_buffer().data() + (*ma)[t] * m * k, m, k, n);
                               if (pb.requires_grad)
                                   gemm_tn(pa.data.data() + (*ma)[t] * m * k, g,
                                           pb.grad_buffer().data() + (*mb)[t] * k * n, m, k, n);
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sw.size() != 2 || sx.empty() || sx.back() != sw[0]) {
        throw ShapeError("linear dimension mismatch: " + shape_str(sx) + " x " + shape_str(sw));
    }
    const std::size_t in = sw[0];
    const std::size_t out_dim = sw[1];
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_dim)) {
        throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(sw));
    }
    const std::size_t rows = x.numel() / in;
    Shape so = sx;
    so.back() = out_dim;
    std::vector<double> out(rows * out_dim, 0.0);
    gemm_nn(x.data().data(), w.data().data(), out.data(), rows, in, out_dim);
    if (bias.defined()) {
        const auto bd = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bd[j];
    }
    std::vector<NodePtr> parents{x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    return make_result(std::move(so), std::move(out), std::move(parents),
                       [rows, in, out_dim](detail::Node& self) {
                           auto& px = *self.parents[0];
                           auto& pw = *self.parents[1];
                           if (px.requires_grad)
                               gemm_nt(self.grad.data(), pw.data.data(),
                                       px.grad_buffer().data(), rows, in, out_dim);
                           if (pw.requires_grad)
                               gemm_tn(px.data.data(), self.grad.data(),
                                       pw.grad_buffer().data(), rows, in, out_dim);
                           if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                               auto& gb = self.parents[2]->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < out_dim; ++j)
                                       gb[j] += self.grad[r * out_dim + j];
                           }
                       });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& t, Shape shape) {
    if (shape_numel(shape) != t.numel()) {
        throw ShapeError("cannot reshape " + shape_str(t.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(t.data().begin(), t.data().end());
    return make_result(std::move(shape), std::move(out), {t.node()}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& t, const std::vector<std::size_t>& order) {
    const Shape& si = t.shape();
    const std::size_t nd = si.size();
    if (order.size() != nd) throw ShapeError("permute order rank mismatch for " + shape_str(si));
    std::vector<bool> seen(nd, false);
    for (std::size_t o : order) {
        if (o >= nd || seen[o]) throw ShapeError("invalid permutation for " + shape_str(si));
        seen[o] = true;
    }
    Shape so(nd);
    for (std::size_t i = 0; i < nd; ++i) so[i] = si[order[i]];
    const Shape in_strides = strides_of(si);
    Shape eff(nd);
    for (std::size_t i = 0; i < nd; ++i) eff[i] = in_strides[order[i]];
    const std::size_t total = t.numel();
    auto map = std::make_shared<std::vector<std::size_t>>(total);
    Shape counter(nd, 0);
    std::size_t pos = 0;
    for (std::size_t o = 0; o < total; ++o) {
        (*map)[o] = pos;
        for (std::size_t d = nd; d-- > 0;) {
            ++counter[d];
            pos += eff[d];
            if (counter[d] < so[d]) break;
            pos -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    const auto td = t.data();
    std::vector<double> out(total);
    for (std::size_t o = 0; o < total; ++o) out[o] = td[(*map)[o]];
    return make_result(std::move(so), std::move(out), {t.node()}, [map](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < map->size(); ++o) g[(*map)[o]] += self.grad[o];
    });
}

Tensor transpose(const Tensor& t, int axis_a, int axis_b) {
    const std::size_t a = normalize_axis(axis_a, t.ndim());
    const std::size_t b = normalize_axis(axis_b, t.ndim());
    std::vector<std::size_t> order(t.ndim());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[a], order[b]);
    return permute(t, order);
}

Tensor slice(const Tensor& t, int axis, std::size_t start, std::size_t length) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    if (start + length > s.extent) {
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + shape_str(t.shape()));
    }
    Shape so = t.shape();
    so[ax] = length;
    const auto td = t.data();
    std::vector<double> out(s.outer * length * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(td.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                    out.begin() + o * length * s.inner);
    return make_result(std::move(so), std::move(out), {t.node()}, [s, start, length](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = g.data() + (o * s.extent + start) * s.inner;
            const double* src = self.grad.data() + o * length * s.inner;
            for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor pad_zeros(const Tensor& t, int axis, std::size_t after) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    const std::size_t ext = s.extent + after;
    Shape so = t.shape();
    so[ax] = ext;
    const auto td = t.data();
    std::vector<double> out(s.outer * ext * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(td.begin() + o * s.extent * s.inner, s.extent * s.inner,
                    out.begin() + o * ext * s.inner);
    return make_result(std::move(so), std::move(out), {t.node()}, [s, ext](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = g.data() + o * s.extent * s.inner;
            const double* src = self.grad.data() + o * ext * s.inner;
            for (std::size_t i = 0; i < s.extent * s.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor repeat_interleave(const Tensor& t, int axis, std::size_t times) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    Shape so = t.shape();
    so[ax] = s.extent * times;
    const auto td = t.data();
    std::vector<double> out(t.numel() * times);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t r = 0; r < times; ++r)
                std::copy_n(td.begin() + (o * s.extent + e) * s.inner, s.inner,
                            out.begin() + ((o * s.extent + e) * times + r) * s.inner);
    return make_result(std::move(so), std::move(out), {t.node()}, [s, times](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t r = 0; r < times; ++r) {
                    double* dst = g.data() + (o * s.extent + e) * s.inner;
                    const double* src = self.grad.data() + ((o * s.extent + e) * times + r) * s.inner;
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                }
    });
}

Tensor index_select_rows(const Tensor& t, std::span<const std::size_t> rows) {
    if (t.ndim() != 2) throw ShapeError("index_select_rows expects 2-D, got " + shape_str(t.shape()));
    const std::size_t n_rows = t.dim(0);
    const std::size_t width = t.dim(1);
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    const auto td = t.data();
    std::vector<double> out(idx->size() * width);
    for (std::size_t r = 0; r < idx->size(); ++r) {
        if ((*idx)[r] >= n_rows) throw ShapeError("row index out of range in index_select_rows");
        std::copy_n(td.begin() + (*idx)[r] * width, width, out.begin() + r * width);
    }
    return make_result({idx->size(), width}, std::move(out), {t.node()}, [idx, width](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < idx->size(); ++r)
            for (std::size_t j = 0; j < width; ++j) g[(*idx)[r] * width + j] += self.grad[r * width + j];
    });
}

Tensor index_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& src) {
    if (base.ndim() != 2 || src.ndim() != 2 || src.dim(1) != base.dim(1) || src.dim(0) != rows.size()) {
        throw ShapeError("index_add_rows mismatch: base " + shape_str(base.shape()) + ", src " +
                         shape_str(src.shape()));
    }
    const std::size_t width = base.dim(1);
    auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
    std::vector<double> out(base.data().begin(), base.data().end());
    const auto sd = src.data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
        if ((*idx)[r] >= base.dim(0)) throw ShapeError("row index out of range in index_add_rows");
        for (std::size_t j = 0; j < width; ++j) out[(*idx)[r] * width + j] += sd[r * width + j];
    }
    return make_result(base.shape(), std::move(out), {base.node(), src.node()},
                       [idx, width](detail::Node& self) {
                           auto& pb = *self.parents[0];
                           auto& ps = *self.parents[1];
                           if (pb.requires_grad) {
                               auto& g = pb.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (ps.requires_grad) {
                               auto& g = ps.grad_buffer();
                               for (std::size_t r = 0; r < idx->size(); ++r)
                                   for (std::size_t j = 0; j < width; ++j)
                                       g[r * width + j] += self.grad[(*idx)[r] * width + j];
                           }
                       });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) acc += v;
    return make_result({1}, {acc}, {t.node()}, [](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor sum(const Tensor& t, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    if (s.extent == 0) throw ShapeError("sum over empty axis of " + shape_str(t.shape()));
    Shape so = t.shape();
    if (keepdim) so[ax] = 1;
    else so.erase(so.begin() + static_cast<long>(ax));
    if (so.empty()) so.push_back(1);
    const auto td = t.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += td[(o * s.extent + e) * s.inner + i];
    return make_result(std::move(so), std::move(out), {t.node()}, [s](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t i = 0; i < s.inner; ++i)
                    g[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

Tensor mean(const Tensor& t) {
    if (t.numel() == 0) throw ShapeError("mean of empty tensor");
    return mul_scalar(sum(t), 1.0 / static_cast<double>(t.numel()));
}

Tensor mean(const Tensor& t, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    return mul_scalar(sum(t, axis, keepdim), 1.0 / static_cast<double>(t.shape()[ax]));
}

MaxResult max_with_indices(const Tensor& t, int axis) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    if (s.extent == 0) throw ShapeError("max over empty axis of " + shape_str(t.shape()));
    Shape so = t.shape();
    so.erase(so.begin() + static_cast<long>(ax));
    if (so.empty()) so.push_back(1);
    const auto td = t.data();
    std::vector<double> out(s.outer * s.inner);
    auto idx = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = 0;
            double bv = td[o * s.extent * s.inner + i];
            for (std::size_t e = 1; e < s.extent; ++e) {
                const double v = td[(o * s.extent + e) * s.inner + i];
                if (v > bv) {
                    bv = v;
                    best = e;
                }
            }
            out[o * s.inner + i] = bv;
            (*idx)[o * s.inner + i] = best;
        }
    Tensor values = make_result(std::move(so), std::move(out), {t.node()}, [s, idx](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i)
                g[(o * s.extent + (*idx)[o * s.inner + i]) * s.inner + i] += self.grad[o * s.inner + i];
    });
    return {values, *idx};
}

Tensor softmax(const Tensor& t, int axis) {
    const std::size_t ax = normalize_axis(axis, t.ndim());
    const AxisSplit s = split_axis(t.shape(), ax);
    const auto td = t.data();
    std::vector<double> out(t.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double mx = td[base];
            for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, td[base + e * s.inner]);
            double total = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                const double v = std::exp(td[base + e * s.inner] - mx);
                out[base + e * s.inner] = v;
                total += v;
            }
            for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
        }
    return make_result(t.shape(), std::move(out), {t.node()}, [s](detail::Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                double dot = 0.0;
                for (std::size_t e = 0; e < s.extent; ++e)
                    dot += self.grad[base + e * s.inner] * self.data[base + e * s.inner];
                for (std::size_t e = 0; e < s.extent; ++e) {
                    const std::size_t k = base + e * s.inner;
                    g[k] += self.data[k] * (self.grad[k] - dot);
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Fused layers

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    const std::size_t d = x.shape().back();
    if (gain.numel() != d) {
        throw ShapeError("rmsnorm gain " + shape_str(gain.shape()) + " does not match input " +
                         shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto xd = x.data();
    const auto gd = gain.data();
    auto inv = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        double ms = 0.0;
        for (std::size_t j = 0; j < d; ++j) ms += xd[r * d + j] * xd[r * d + j];
        const double iv = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
        (*inv)[r] = iv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] * iv * gd[j];
    }
    return make_result(x.shape(), std::move(out), {x.node(), gain.node()},
                       [inv, rows, d](detail::Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           const double* xv = px.data.data();
                           const double* gv = pg.data.data();
                           const double* go = self.grad.data();
                           if (pg.requires_grad) {
                               auto& gg = pg.grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gg[j] += go[r * d + j] * xv[r * d + j] * (*inv)[r];
                           }
                           if (px.requires_grad) {
                               auto& gx = px.grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double iv = (*inv)[r];
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < d; ++j)
                                       dot += go[r * d + j] * gv[j] * xv[r * d + j];
                                   const double coef = iv * iv * iv * dot / static_cast<double>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[r * d + j] += iv * go[r * d + j] * gv[j] - coef * xv[r * d + j];
                               }
                           }
                       });
}

Tensor rope(const Tensor& x, std::span<const double> positions, double base) {
    if (x.ndim() < 2) throw ShapeError("rope expects [..., positions, head_dim], got " + shape_str(x.shape()));
    const std::size_t hd = x.shape().back();
    const std::size_t seq = x.shape()[x.ndim() - 2];
    if (hd % 2 != 0) throw ShapeError("rope requires an even head_dim, got " + std::to_string(hd));
    if (positions.size() != seq) {
        throw ShapeError("rope positions (" + std::to_string(positions.size()) +
                         ") do not match sequence length of " + shape_str(x.shape()));
    }
    const std::size_t half = hd / 2;
    auto cs = std::make_shared<std::vector<double>>(seq * half);
    auto sn = std::make_shared<std::vector<double>>(seq * half);
    for (std::size_t p = 0; p < seq; ++p)
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double angle = positions[p] * freq;
            (*cs)[p * half + i] = std::cos(angle);
            (*sn)[p * half + i] = std::sin(angle);
        }
    const std::size_t lead = x.numel() / (seq * hd);
    const auto xd = x.data();
    std::vector<double> out(x.numel());
    for (std::size_t l = 0; l < lead; ++l)
        for (std::size_t p = 0; p < seq; ++p) {
            const std::size_t off = (l * seq + p) * hd;
            for (std::size_t i = 0; i < half; ++i) {
                const double c = (*cs)[p * half + i];
                const double s = (*sn)[p * half + i];
                const double a = xd[off + 2 * i];
                const double b = xd[off + 2 * i + 1];
                out[off + 2 * i] = a * c - b * s;
                out[off + 2 * i + 1] = a * s + b * c;
            }
        }
    return make_result(x.shape(), std::move(out), {x.node()},
                       [cs, sn, lead, seq, hd, half](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t l = 0; l < lead; ++l)
                               for (std::size_t p = 0; p < seq; ++p) {
                                   const std::size_t off = (l * seq + p) * hd;
                                   for (std::size_t i = 0; i < half; ++i) {
                                       const double c = (*cs)[p * half + i];
                                       const double s = (*sn)[p * half + i];
                                       const double ga = self.grad[off + 2 * i];
                                       const double gb = self.grad[off + 2 * i + 1];
                                       g[off + 2 * i] += ga * c + gb * s;
                                       g[off + 2 * i + 1] += -ga * s + gb * c;
                                   }
                               }
                       });
}

Tensor huber(const Tensor& pred, const Tensor& target, double delta) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("huber shape mismatch: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    }
    if (!(delta > 0.0)) throw std::invalid_argument("huber delta must be positive");
    const auto pd = pred.data();
    const auto td = target.data();
    const std::size_t n = pd.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = std::fabs(pd[i] - td[i]);
        acc += e <= delta ? 0.5 * e * e : delta * (e - 0.5 * delta);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    return make_result({1}, {acc * inv_n}, {pred.node(), target.node()},
                       [delta, n, inv_n](detail::Node& self) {
                           auto& pp = *self.parents[0];
                           auto& pt = *self.parents[1];
                           const double g0 = self.grad[0] * inv_n;
                           for (std::size_t i = 0; i < n; ++i) {
                               const double d = std::clamp(pp.data[i] - pt.data[i], -delta, delta);
                               if (pp.requires_grad) pp.grad_buffer()[i] += g0 * d;
                               if (pt.requires_grad) pt.grad_buffer()[i] -= g0 * d;
                           }
                       });
}

}  // namespace segmoe
