#include "metairnet/checkpoint.hpp"

#include <cstring>

#include "metairnet/fsutil.hpp"

namespace metairnet {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'R', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    Reader(std::string_view bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError("truncated checkpoint " + origin_);
    }

    std::string_view bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string desc = ckpt.descriptor.dump();
    put<std::uint64_t>(out, desc.size());
    out += desc;
    put<std::uint64_t>(out, ckpt.blobs.size());
    for (const auto& b : ckpt.blobs) {
        if (static_cast<Index>(b.values.size()) != numel(b.shape))
            throw CheckpointError("blob '" + b.name + "' size does not match its shape");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
        out += b.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
        for (Index d : b.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        out.append(reinterpret_cast<const char*>(b.values.data()), b.values.size() * sizeof(double));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin) {
    Reader r(bytes, origin);
    if (r.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic)))
        throw CheckpointError("not a checkpoint file: " + origin);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + origin);

    Checkpoint ckpt;
    const auto desc_len = r.get<std::uint64_t>();
    try {
        ckpt.descriptor = nlohmann::json::parse(r.take(desc_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt descriptor in " + origin + ": " + e.what());
    }
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        Blob b;
        b.name = std::string(r.take(r.get<std::uint32_t>()));
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw CheckpointError("corrupt blob header in " + origin);
        for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
        const auto n = static_cast<std::size_t>(numel(b.shape));
        const auto raw = r.take(n * sizeof(double));
        b.values.resize(n);
        std::memcpy(b.values.data(), raw.data(), raw.size());
        ckpt.blobs.push_back(std::move(b));
    }
    if (!r.at_end()) throw CheckpointError("trailing bytes in checkpoint " + origin);
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const Error& e) {
        throw CheckpointError(e.what());
    }
    return parse_checkpoint(bytes, path.string());
}

}  // namespace metairnet
