#pragma once

// Class-conditional upsampling CNN generator. The input is a latent code made
// of a noise part and a class-embedding part; every block after the input
// projection is batch-normalized, and the BN scale/shift parameters are kept
// addressable so they can be tuned in isolation.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "metairnet/checkpoint.hpp"
#include "metairnet/image.hpp"
#include "metairnet/nn.hpp"

namespace metairnet {

struct GeneratorConfig {
    Index noise_dim = 128;
    Index embed_dim = 16;
    Index num_classes = 1;
    Index channels = 3;
    Index resolution = 64;
    /// Channel widths of the BN blocks; each block doubles the spatial size.
    std::vector<Index> widths{64, 32, 16};

    Index latent_dim() const { return noise_dim + embed_dim; }
    Index base_resolution() const { return resolution >> widths.size(); }

    void validate() const {
        if (noise_dim < 1 || embed_dim < 0 || num_classes < 1 || channels < 1 || widths.empty())
            throw PreconditionError("invalid generator config");
        if (base_resolution() < 1 || (base_resolution() << widths.size()) != resolution)
            throw PreconditionError("generator resolution " + std::to_string(resolution) + " is not divisible by 2^" +
                                    std::to_string(widths.size()));
    }

    bool operator==(const GeneratorConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"noise_dim", c.noise_dim}, {"embed_dim", c.embed_dim}, {"num_classes", c.num_classes},
         {"channels", c.channels},   {"resolution", c.resolution}, {"widths", c.widths}};
}
inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.channels = j.value("channels", c.channels);
    c.resolution = j.value("resolution", c.resolution);
    c.widths = j.value("widths", c.widths);
}

/// Generator input: noise followed by a class embedding, both optimized as
/// one vector.
template <typename S>
struct LatentCode {
    Vector<S> noise;
    Vector<S> class_embedding;

    Index dim() const { return noise.size() + class_embedding.size(); }
    bool all_finite() const { return noise.allFinite() && class_embedding.allFinite(); }

    Vector<S> concat() const {
        Vector<S> v(dim());
        v << noise, class_embedding;
        return v;
    }
    static LatentCode split(const Eigen::Ref<const Vector<S>>& v, Index noise_dim) {
        return {v.head(noise_dim), v.tail(v.size() - noise_dim)};
    }
    Tensor<S> as_tensor() const {
        const Vector<S> v = concat();
        return Tensor<S>({1, dim()}, v.array());
    }
};

template <typename S>
class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& config, Rng& rng) : config_(config) {
        config.validate();
        const Index s0 = config.base_resolution();
        fc_ = Linear<S>(config.latent_dim(), config.widths[0] * s0 * s0, rng);
        bns_.emplace_back(config.widths[0]);
        for (std::size_t i = 1; i < config.widths.size(); ++i) {
            convs_.emplace_back(config.widths[i - 1], config.widths[i], 3, rng);
            bns_.emplace_back(config.widths[i]);
        }
        to_image_ = Conv2d<S>(config.widths.back(), config.channels, 3, rng);
        embed_table = Parameter<S>(randn<S>({config.num_classes, config.embed_dim}, rng));
    }

    const GeneratorConfig& config() const { return config_; }

    /// latent [N, latent_dim] -> images [N, C, H, W] in [-1, 1]. Training mode
    /// uses batch statistics and updates the running ones.
    Var<S> forward(const Var<S>& latent, bool training) { return run(*this, latent, training); }
    Var<S> forward(const Var<S>& latent) const { return run(*this, latent, false); }

    /// Inference-mode synthesis of one image.
    Image<S> generate(const LatentCode<S>& z) const {
        if (z.noise.size() != config_.noise_dim || z.class_embedding.size() != config_.embed_dim)
            throw ShapeError("latent code of dims (" + std::to_string(z.noise.size()) + ", " +
                             std::to_string(z.class_embedding.size()) + ") does not match generator (" +
                             std::to_string(config_.noise_dim) + ", " + std::to_string(config_.embed_dim) + ")");
        if (!z.all_finite()) throw PreconditionError("latent code has non-finite entries");
        NoGradGuard guard;
        return image_from_batch(forward(Var<S>(z.as_tensor())).value(), 0);
    }

    Vector<S> class_embedding(Index cls) const { return embed_table.value().matrix().row(cls).transpose(); }
    Vector<S> mean_class_embedding() const { return embed_table.value().matrix().colwise().mean().transpose(); }

    void parameters(ParamList<S>& out) const {
        fc_.parameters(out, "fc.");
        for (std::size_t i = 0; i < bns_.size(); ++i) {
            if (i > 0) convs_[i - 1].parameters(out, "block" + std::to_string(i) + ".conv.");
            bns_[i].parameters(out, "block" + std::to_string(i) + ".bn.");
        }
        to_image_.parameters(out, "to_image.");
        out.push_back({"embedding", embed_table.var(), ParamKind::embedding});
    }
    ParamList<S> parameters() const {
        ParamList<S> out;
        parameters(out);
        return out;
    }

    BufferList<S> buffers() {
        BufferList<S> out;
        for (std::size_t i = 0; i < bns_.size(); ++i) bns_[i].buffers(out, "block" + std::to_string(i) + ".bn.");
        return out;
    }

    const std::vector<BatchNorm<S>>& batch_norms() const { return bns_; }

    Parameter<S> embed_table;

private:
    template <typename Self>
    static Var<S> run(Self& self, const Var<S>& latent, bool training) {
        const auto& cfg = self.config_;
        if (latent.value().rank() != 2 || latent.dim(1) != cfg.latent_dim())
            throw ShapeError("generator: latent of shape " + to_string(latent.shape()) + ", expected [N, " +
                             std::to_string(cfg.latent_dim()) + "]");
        auto bn = [&](std::size_t i, const Var<S>& h) {
            if constexpr (std::is_const_v<Self>) {
                return self.bns_[i].infer(h);
            } else {
                return self.bns_[i](h, training);
            }
        };
        const Index s0 = cfg.base_resolution();
        Var<S> h = reshape(self.fc_(latent), {latent.dim(0), cfg.widths[0], s0, s0});
        h = relu(bn(0, h));
        for (std::size_t i = 1; i < cfg.widths.size(); ++i) {
            h = self.convs_[i - 1](upsample2x(h));
            h = relu(bn(i, h));
        }
        return tanh(self.to_image_(upsample2x(h)));
    }

    GeneratorConfig config_;
    Linear<S> fc_;
    std::vector<Conv2d<S>> convs_;
    std::vector<BatchNorm<S>> bns_;
    Conv2d<S> to_image_;
};

/// Two disjoint handles over the generator's learnable parameters: batch-norm
/// scale/shift, and everything else.
template <typename S>
struct BnParameterView {
    ParamList<S> bn;
    ParamList<S> other;
};

template <typename S>
BnParameterView<S> bn_parameter_view(const Generator<S>& g) {
    BnParameterView<S> view;
    for (auto& p : g.parameters()) (is_batch_norm(p.kind) ? view.bn : view.other).push_back(p);
    return view;
}

/// Concatenated parameter values, in list order.
template <typename S>
Vector<S> flatten(const ParamList<S>& params) {
    Vector<S> v(count_scalars(params));
    Index off = 0;
    for (const auto& p : params) {
        v.segment(off, p.var.size()) = p.var.value().data.matrix();
        off += p.var.size();
    }
    return v;
}

template <typename S>
void assign(const ParamList<S>& params, const Vector<S>& values) {
    if (values.size() != count_scalars(params)) throw ShapeError("assign: parameter count mismatch");
    Index off = 0;
    for (const auto& p : params) {
        Var<S> v = p.var;
        v.mutable_value().data = values.segment(off, v.size()).array();
        off += v.size();
    }
}

inline nlohmann::json generator_descriptor(const GeneratorConfig& c) {
    return {{"kind", "generator"}, {"config", c}};
}

template <typename S>
Checkpoint to_checkpoint(Generator<S>& g) {
    Checkpoint ckpt{generator_descriptor(g.config()), {}};
    append_parameters(ckpt, g.parameters(), g.buffers());
    return ckpt;
}

template <typename S>
void save_checkpoint(Generator<S>& g, const std::filesystem::path& path, nlohmann::json extra = {}) {
    Checkpoint ckpt = to_checkpoint(g);
    if (!extra.is_null()) ckpt.descriptor["extra"] = std::move(extra);
    write_checkpoint(path, ckpt);
}

/// Restore into an existing generator; refuses checkpoints whose architecture
/// descriptor differs.
template <typename S>
void load_checkpoint(Generator<S>& g, const Checkpoint& ckpt) {
    if (ckpt.descriptor.value("kind", "") != "generator")
        throw CheckpointError("checkpoint does not hold a generator");
    const auto found = ckpt.descriptor.at("config").template get<GeneratorConfig>();
    if (!(found == g.config()))
        throw ShapeError("generator architecture mismatch: checkpoint " + ckpt.descriptor.at("config").dump() +
                         " vs " + nlohmann::json(g.config()).dump());
    restore_parameters(ckpt, g.parameters(), g.buffers());
}

template <typename S>
Generator<S> load_generator(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.descriptor.value("kind", "") != "generator") throw CheckpointError(path.string() + " does not hold a generator");
    GeneratorConfig cfg;
    try {
        cfg = ckpt.descriptor.at("config").template get<GeneratorConfig>();
        cfg.validate();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("bad generator descriptor in " + path.string() + ": " + e.what());
    }
    Rng rng(0);
    Generator<S> g(cfg, rng);
    load_checkpoint(g, ckpt);
    return g;
}

}  // namespace metairnet
