#pragma once

#include <vector>

#include <json.hpp>

#include "metairnet/nn.hpp"

namespace metairnet {

/// Conv-4 style extractor: `depth` blocks of 3x3 conv, batch norm, ReLU and
/// 2x2 max pooling, followed by global average pooling.
struct BackboneConfig {
    Index in_channels = 3;
    Index width = 32;
    int depth = 4;

    bool operator==(const BackboneConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = {{"in_channels", c.in_channels}, {"width", c.width}, {"depth", c.depth}};
}
inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.width = j.value("width", c.width);
    c.depth = j.value("depth", c.depth);
}

template <typename S>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
        if (config.depth < 1 || config.width < 1) throw PreconditionError("backbone needs depth >= 1 and width >= 1");
        Index in = config.in_channels;
        for (int i = 0; i < config.depth; ++i) {
            convs_.emplace_back(in, config.width, 3, rng);
            bns_.emplace_back(config.width);
            in = config.width;
        }
    }

    const BackboneConfig& config() const { return config_; }
    Index embedding_dim() const { return config_.width; }

    /// Outputs of the first `count` blocks (all blocks when count < 0).
    std::vector<Var<S>> blocks(const Var<S>& x, bool training, int count = -1) {
        return run(*this, x, training, count);
    }
    std::vector<Var<S>> blocks(const Var<S>& x, int count = -1) const { return run(*this, x, false, count); }

    /// Globally pooled embedding [N, width].
    Var<S> embed(const Var<S>& x, bool training) { return global_avg_pool(blocks(x, training).back()); }
    Var<S> embed(const Var<S>& x) const { return global_avg_pool(blocks(x).back()); }

    void parameters(ParamList<S>& out, const std::string& prefix = "") const {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].parameters(out, prefix + "block" + std::to_string(i) + ".conv.");
            bns_[i].parameters(out, prefix + "block" + std::to_string(i) + ".bn.");
        }
    }
    ParamList<S> parameters() const {
        ParamList<S> out;
        parameters(out);
        return out;
    }

    void buffers(BufferList<S>& out, const std::string& prefix = "") {
        for (std::size_t i = 0; i < bns_.size(); ++i) bns_[i].buffers(out, prefix + "block" + std::to_string(i) + ".bn.");
    }

private:
    template <typename Self>
    static std::vector<Var<S>> run(Self& self, const Var<S>& x, bool training, int count) {
        if (x.value().rank() != 4 || x.dim(1) != self.config_.in_channels)
            throw ShapeError("backbone: expected [N, " + std::to_string(self.config_.in_channels) + ", H, W], got " +
                             to_string(x.shape()));
        const int n = count < 0 ? self.config_.depth : std::min(count, self.config_.depth);
        std::vector<Var<S>> outs;
        Var<S> h = x;
        for (int i = 0; i < n; ++i) {
            h = self.convs_[static_cast<std::size_t>(i)](h);
            if constexpr (std::is_const_v<Self>) {
                h = self.bns_[static_cast<std::size_t>(i)].infer(h);
            } else {
                h = self.bns_[static_cast<std::size_t>(i)](h, training);
            }
            h = relu(h);
            if (h.dim(2) >= 2 && h.dim(3) >= 2) h = max_pool2(h);
            outs.push_back(h);
        }
        return outs;
    }

    BackboneConfig config_;
    std::vector<Conv2d<S>> convs_;
    std::vector<BatchNorm<S>> bns_;
};

}  // namespace metairnet
