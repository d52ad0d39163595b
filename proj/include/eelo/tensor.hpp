#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace eelo {

struct Tensor {
    std::vector<size_t> shape;
    std::vector<float> data;

    size_t numel() const {
        size_t n = 1;
        for (size_t d : shape) {
            n *= d;
        }
        return shape.empty() ? 0 : n;
    }
};

Tensor make_tensor(std::vector<size_t> shape, float fill = 0.0f);

// Named dense f32 tensors, row-major. On disk: a directory with manifest.json
// (name, shape, dtype, file, byte offset) plus one flat little-endian f32
// binary file per tensor.
class TensorStore {
public:
    void add(const std::string& name, Tensor t);
    bool has(const std::string& name) const;
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    // Shape-checked lookup; throws StoreError{shape_mismatch} on disagreement.
    const Tensor& get(const std::string& name, const std::vector<size_t>& expect) const;
    std::vector<std::string> names() const; // sorted
    size_t count() const { return tensors_.size(); }

    void save(const std::filesystem::path& dir) const;
    static TensorStore load(const std::filesystem::path& dir);

private:
    std::map<std::string, Tensor> tensors_;
};

uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull);

// Order-independent-of-insertion digest over (name, shape, raw bytes) of every
// tensor, walked in sorted name order. Used by the freeze checks.
uint64_t fingerprint(const TensorStore& store);

} // namespace eelo
