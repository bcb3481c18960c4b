#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "icft/errors.hpp"
#include "icft/tensor.hpp"

namespace icft {

// Self-describing container for named tensors: a versioned JSON header (kind,
// free-form meta, tensor directory) followed by raw little-endian data. Used
// for model checkpoints, adapters, and cache exports.
struct TensorRecord {
    std::string name;
    std::string dtype;  // "f32" or "f64"
    std::vector<int> shape;
    std::vector<unsigned char> raw;
};

struct CheckpointFile {
    std::string kind;
    nlohmann::json meta;
    std::vector<TensorRecord> tensors;

    const TensorRecord& find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw validation_error("checkpoint is missing tensor '" + name + "'");
    }
};

void save_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile load_checkpoint(const std::string& path);

template <class Real>
TensorRecord to_record(const std::string& name, const Tensor<Real>& t) {
    TensorRecord r;
    r.name = name;
    r.dtype = sizeof(Real) == 4 ? "f32" : "f64";
    r.shape = t.shape;
    r.raw.resize(t.data.size() * sizeof(Real));
    std::memcpy(r.raw.data(), t.data.data(), r.raw.size());
    return r;
}

template <class Real>
Tensor<Real> from_record(const TensorRecord& r) {
    const bool f32 = r.dtype == "f32";
    if (!f32 && r.dtype != "f64") throw validation_error("unknown dtype " + r.dtype);
    int64_t n = 1;
    for (int d : r.shape) n *= d;
    if (r.raw.size() != static_cast<size_t>(n) * (f32 ? 4 : 8))
        throw validation_error("tensor '" + r.name + "' byte count mismatch");
    Tensor<Real> out = Tensor<Real>::zeros(r.shape);
    if (f32) {
        const float* src = reinterpret_cast<const float*>(r.raw.data());
        for (int64_t i = 0; i < n; ++i) out.data[i] = static_cast<Real>(src[i]);
    } else {
        const double* src = reinterpret_cast<const double*>(r.raw.data());
        for (int64_t i = 0; i < n; ++i) out.data[i] = static_cast<Real>(src[i]);
    }
    return out;
}

}  // namespace icft
