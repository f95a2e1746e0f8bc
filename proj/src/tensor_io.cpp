#include "segmoe/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace segmoe {

namespace {

constexpr const char* kMagic = "segmoe-tensors 1";

void check_token(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
        throw std::invalid_argument(std::string("tensor file ") + what + " must be a non-empty token: '" + s + "'");
    }
}

std::string shape_token(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

Shape parse_shape(const std::string& token) {
    Shape shape;
    std::stringstream ss(token);
    std::string part;
    while (std::getline(ss, part, 'x')) shape.push_back(std::stoull(part));
    if (shape.empty()) throw std::runtime_error("tensor file: empty shape '" + token + "'");
    return shape;
}

void put_le(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
    out.write(bytes, 8);
}

double get_le(const unsigned char* bytes) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.tensor;
    throw std::out_of_range("tensor file has no tensor named '" + name + "'");
}

bool TensorFile::has_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return true;
    return false;
}

const std::string& TensorFile::meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    throw std::out_of_range("tensor file has no metadata key '" + key + "'");
}

void write_tensor_file(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& meta,
                       const std::vector<NamedTensor>& tensors) {
    out << kMagic << '\n';
    for (const auto& [k, v] : meta) {
        check_token(k, "metadata key");
        if (v.find('\n') != std::string::npos) throw std::invalid_argument("metadata value contains a newline");
        out << "meta " << k << ' ' << v << '\n';
    }
    out << "tensors " << tensors.size() << '\n';
    std::size_t offset = 0;
    for (const auto& t : tensors) {
        check_token(t.name, "tensor name");
        out << t.name << ' ' << shape_token(t.tensor.shape()) << ' ' << t.tensor.numel() << ' ' << offset
            << '\n';
        offset += t.tensor.numel() * 8;
    }
    out << "end\n";
    for (const auto& t : tensors)
        for (double v : t.tensor.data()) put_le(out, v);
    if (!out) throw std::runtime_error("failed writing tensor file");
}

void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_tensor_file(out, meta, tensors);
}

TensorFile read_tensor_file(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kMagic) throw std::runtime_error("not a segmoe tensor file");
    TensorFile file;
    std::size_t declared = 0;
    bool have_count = false;
    while (std::getline(in, line)) {
        if (line == "end") break;
        std::istringstream ls(line);
        std::string head;
        ls >> head;
        if (head == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            file.meta.emplace_back(key, value);
        } else if (head == "tensors") {
            ls >> declared;
            have_count = true;
        } else {
            TensorManifestEntry e;
            e.name = head;
            std::string shape;
            ls >> shape >> e.count >> e.offset;
            if (!ls) throw std::runtime_error("malformed manifest line: '" + line + "'");
            e.shape = parse_shape(shape);
            if (shape_numel(e.shape) != e.count)
                throw std::runtime_error("manifest count mismatch for '" + e.name + "'");
            file.manifest.push_back(std::move(e));
        }
    }
    if (line != "end" || !have_count || declared != file.manifest.size()) {
        throw std::runtime_error("truncated or inconsistent tensor file header");
    }
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& e : file.manifest) {
        if (e.offset + e.count * 8 > blob.size())
            throw std::runtime_error("tensor '" + e.name + "' extends past end of file");
        std::vector<double> values(e.count);
        for (std::size_t i = 0; i < e.count; ++i) values[i] = get_le(blob.data() + e.offset + 8 * i);
        file.tensors.push_back({e.name, Tensor::from(e.shape, std::move(values))});
    }
    return file;
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read_tensor_file(in);
}

}  // namespace segmoe
