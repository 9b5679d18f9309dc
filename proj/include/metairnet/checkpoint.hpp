#pragma once

// Versioned binary container: an architecture descriptor (JSON) followed by
// named parameter blobs stored as little-endian float64.
//
//   "MIRNCKPT" | u32 version | u64 len | descriptor JSON
//   u64 count | { u32 len | name | u32 rank | u64 dims[rank] | f64 values[] }*

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "metairnet/nn.hpp"

namespace metairnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    nlohmann::json descriptor;
    std::vector<Blob> blobs;

    const Blob* find(std::string_view name) const {
        for (const auto& b : blobs)
            if (b.name == name) return &b;
        return nullptr;
    }
    const Blob& at(std::string_view name) const {
        if (const Blob* b = find(name)) return *b;
        throw CheckpointError("checkpoint has no blob named '" + std::string(name) + "'");
    }
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// `origin` names the source in error messages.
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename S>
Blob to_blob(std::string name, const Tensor<S>& t) {
    Blob b{std::move(name), t.shape, std::vector<double>(static_cast<std::size_t>(t.size()))};
    for (Index i = 0; i < t.size(); ++i) b.values[static_cast<std::size_t>(i)] = static_cast<double>(t.data[i]);
    return b;
}

template <typename S>
void from_blob(const Blob& b, Tensor<S>& dst) {
    if (b.shape != dst.shape)
        throw ShapeError("blob '" + b.name + "' has shape " + to_string(b.shape) + ", expected " + to_string(dst.shape));
    for (Index i = 0; i < dst.size(); ++i) dst.data[i] = static_cast<S>(b.values[static_cast<std::size_t>(i)]);
}

template <typename S>
void append_parameters(Checkpoint& ckpt, const ParamList<S>& params, BufferList<S> buffers, const std::string& prefix = "") {
    for (const auto& p : params) ckpt.blobs.push_back(to_blob(prefix + p.name, p.var.value()));
    for (const auto& b : buffers) ckpt.blobs.push_back(to_blob(prefix + b.name, *b.tensor));
}

template <typename S>
void restore_parameters(const Checkpoint& ckpt, const ParamList<S>& params, BufferList<S> buffers,
                        const std::string& prefix = "") {
    for (const auto& p : params) {
        Var<S> v = p.var;
        from_blob(ckpt.at(prefix + p.name), v.mutable_value());
    }
    for (const auto& b : buffers) from_blob(ckpt.at(prefix + b.name), *b.tensor);
}

}  // namespace metairnet
