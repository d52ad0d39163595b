#include "eelo/tensor.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "eelo/errors.hpp"

namespace eelo {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

Tensor make_tensor(std::vector<size_t> shape, float fill) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(t.numel(), fill);
    return t;
}

void TensorStore::add(const std::string& name, Tensor t) {
    if (t.data.size() != t.numel()) {
        throw InputError("tensor '" + name + "': data size does not match shape");
    }
    if (!tensors_.emplace(name, std::move(t)).second) {
        throw InputError("duplicate tensor name '" + name + "'");
    }
}

bool TensorStore::has(const std::string& name) const {
    return tensors_.count(name) != 0;
}

Tensor& TensorStore::get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
        throw StoreError(StoreErrorCode::missing_tensor, "tensor '" + name + "' not in store");
    }
    return it->second;
}

const Tensor& TensorStore::get(const std::string& name) const {
    return const_cast<TensorStore*>(this)->get(name);
}

const Tensor& TensorStore::get(const std::string& name, const std::vector<size_t>& expect) const {
    const Tensor& t = get(name);
    if (t.shape != expect) {
        std::string msg = "tensor '" + name + "' shape [";
        for (size_t d : t.shape) {
            msg += std::to_string(d) + ",";
        }
        msg += "] does not match expected [";
        for (size_t d : expect) {
            msg += std::to_string(d) + ",";
        }
        msg += "]";
        throw StoreError(StoreErrorCode::shape_mismatch, msg);
    }
    return t;
}

std::vector<std::string> TensorStore::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& [name, _] : tensors_) {
        out.push_back(name);
    }
    return out;
}

void TensorStore::save(const fs::path& dir) const {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["format"] = 1;
    manifest["tensors"] = ordered_json::array();
    for (const auto& [name, t] : tensors_) {
        const std::string file = name + ".bin";
        const size_t bytes = t.data.size() * sizeof(float);
        ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        entry["file"] = file;
        entry["offset"] = 0;
        entry["byte_length"] = bytes;
        manifest["tensors"].push_back(std::move(entry));

        std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw RuntimeFailure("cannot open '" + (dir / file).string() + "' for writing");
        }
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(bytes));
        if (!out) {
            throw RuntimeFailure("short write to '" + (dir / file).string() + "'");
        }
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) {
        throw RuntimeFailure("cannot open manifest for writing in '" + dir.string() + "'");
    }
    out << manifest.dump(2) << "\n";
}

TensorStore TensorStore::load(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw StoreError(StoreErrorCode::bad_manifest,
                         "cannot open manifest '" + manifest_path.string() + "'");
    }
    ordered_json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw StoreError(StoreErrorCode::bad_manifest,
                         "manifest parse error: " + std::string(e.what()));
    }
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
        throw StoreError(StoreErrorCode::bad_manifest, "manifest has no tensor list");
    }

    TensorStore store;
    for (const auto& entry : manifest["tensors"]) {
        std::string name, file, dtype;
        std::vector<size_t> shape;
        size_t offset = 0, byte_length = 0;
        try {
            name = entry.at("name").get<std::string>();
            file = entry.at("file").get<std::string>();
            dtype = entry.at("dtype").get<std::string>();
            shape = entry.at("shape").get<std::vector<size_t>>();
            offset = entry.at("offset").get<size_t>();
            byte_length = entry.at("byte_length").get<size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw StoreError(StoreErrorCode::bad_manifest,
                             "bad manifest entry: " + std::string(e.what()));
        }
        if (dtype != "f32") {
            throw StoreError(StoreErrorCode::bad_manifest,
                             "tensor '" + name + "': unsupported dtype '" + dtype + "'");
        }
        if (shape.empty()) {
            throw StoreError(StoreErrorCode::bad_manifest, "tensor '" + name + "': empty shape");
        }
        size_t numel = 1;
        for (size_t d : shape) {
            if (d == 0) {
                throw StoreError(StoreErrorCode::bad_manifest,
                                 "tensor '" + name + "': zero dimension");
            }
            numel *= d;
        }
        if (byte_length != numel * sizeof(float)) {
            throw StoreError(StoreErrorCode::bad_manifest,
                             "tensor '" + name + "': byte length disagrees with shape");
        }

        const fs::path bin_path = dir / file;
        std::ifstream bin(bin_path, std::ios::binary | std::ios::ate);
        if (!bin) {
            throw StoreError(StoreErrorCode::missing_tensor,
                             "tensor file '" + bin_path.string() + "' missing");
        }
        const auto file_size = static_cast<size_t>(bin.tellg());
        if (file_size < offset + byte_length) {
            throw StoreError(StoreErrorCode::corrupt_file,
                             "tensor file '" + bin_path.string() + "' too short (" +
                                 std::to_string(file_size) + " bytes, need " +
                                 std::to_string(offset + byte_length) + ")");
        }
        bin.seekg(static_cast<std::streamoff>(offset));
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(numel);
        bin.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(byte_length));
        if (!bin) {
            throw StoreError(StoreErrorCode::corrupt_file,
                             "read failure on '" + bin_path.string() + "'");
        }
        store.add(name, std::move(t));
    }
    return store;
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fingerprint(const TensorStore& store) {
    uint64_t h = 14695981039346656037ull;
    for (const std::string& name : store.names()) {
        const Tensor& t = store.get(name);
        h = fnv1a64(name.data(), name.size(), h);
        for (size_t d : t.shape) {
            uint64_t v = d;
            h = fnv1a64(&v, sizeof(v), h);
        }
        h = fnv1a64(t.data.data(), t.data.size() * sizeof(float), h);
    }
    return h;
}

} // namespace eelo
