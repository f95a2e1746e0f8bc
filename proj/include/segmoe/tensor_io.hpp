#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "segmoe/tensor.hpp"

namespace segmoe {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorManifestEntry {
    std::string name;
    Shape shape;
    std::size_t count = 0;
    std::size_t offset = 0;  // bytes from the start of the blob section
};

/// Text header (free-form metadata lines plus one manifest line per tensor)
/// followed by raw little-endian float64 values.
struct TensorFile {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<TensorManifestEntry> manifest;
    std::vector<NamedTensor> tensors;

    const Tensor& get(const std::string& name) const;
    const std::string& meta_value(const std::string& key) const;
    bool has_meta(const std::string& key) const;
};

void write_tensor_file(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& meta,
                       const std::vector<NamedTensor>& tensors);
void save_tensor_file(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& meta,
                      const std::vector<NamedTensor>& tensors);

TensorFile read_tensor_file(std::istream& in);
TensorFile load_tensor_file(const std::string& path);

}  // namespace segmoe
