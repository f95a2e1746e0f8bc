#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segmoe {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads self.grad, accumulates into parents' grads.
    std::function<void(Node& self)> backward;

    std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 array that records the operations producing it so
/// that gradients of a scalar can be pulled back to every leaf with
/// requires_grad set. Copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim(int axis) const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Direct write access. Only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    /// Gradient buffer; zeros when nothing was accumulated.
    std::vector<double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Reverse-mode sweep from this scalar. Gradients accumulate into leaves.
    void backward() const;

    /// Copy of the values with no graph history.
    Tensor detach() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// Throws std::domain_error on any non-positive entry.
Tensor ln(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow(const Tensor& a, double exponent);
Tensor abs(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& a);
/// Writes `value` wherever `mask` (broadcastable to t) is nonzero; those
/// positions receive zero gradient.
Tensor mask_fill(const Tensor& t, const Tensor& mask, double value);

/// a[..., m, k] x b[..., k, n] with broadcast batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * w[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& t, int axis_a, int axis_b);
Tensor slice(const Tensor& t, int axis, std::size_t start, std::size_t length);
/// Appends `after` zero entries along axis.
Tensor pad_zeros(const Tensor& t, int axis, std::size_t after);
/// Repeats every entry along axis `times` times consecutively.
Tensor repeat_interleave(const Tensor& t, int axis, std::size_t times);
/// Rows of a 2-D tensor.
Tensor index_select_rows(const Tensor& t, std::span<const std::size_t> rows);
/// base with src rows added into the listed rows (2-D).
Tensor index_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& src);

Tensor sum(const Tensor& t);
Tensor sum(const Tensor& t, int axis, bool keepdim = false);
Tensor mean(const Tensor& t);
Tensor mean(const Tensor& t, int axis, bool keepdim = false);

struct MaxResult {
    Tensor values;
    std::vector<std::size_t> indices;  // position along the reduced axis
};
/// Gradient flows to the argmax; ties resolve to the lowest index.
MaxResult max_with_indices(const Tensor& t, int axis);

/// Max-subtracted softmax along axis.
Tensor softmax(const Tensor& t, int axis);

/// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

/// Rotary embedding over x[..., positions, head_dim]. Pair (2i, 2i+1) at
/// position p rotates by p * base^(-2i/head_dim).
Tensor rope(const Tensor& x, std::span<const double> positions, double base = 10000.0);

/// Mean elementwise Huber loss.
Tensor huber(const Tensor& pred, const Tensor& target, double delta);

std::size_t normalize_axis(int axis, std::size_t ndim);

}  // namespace segmoe
