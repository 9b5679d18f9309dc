#pragma once

// Image fusion: a grid of mixing weights w in [0, 1] predicted from an
// (original, generated) pair, expanded blockwise to the image size and used
// as w * original + (1 - w) * generated.

#include <random>
#include <string>

#include <json.hpp>

#include "metairnet/backbone.hpp"
#include "metairnet/image.hpp"

namespace metairnet {

template <typename S>
struct FusionWeights {
    RowMatrix<S> grid;

    FusionWeights() : grid(RowMatrix<S>::Zero(3, 3)) {}
    explicit FusionWeights(RowMatrix<S> g) : grid(std::move(g)) { validate(); }

    static FusionWeights constant(S value, Index g = 3) { return FusionWeights(RowMatrix<S>::Constant(g, g, value)); }

    Index size() const { return grid.rows(); }

    void validate() const {
        if (grid.rows() != grid.cols() || grid.rows() < 1)
            throw ShapeError("fusion weights must form a square grid, got " + std::to_string(grid.rows()) + "x" +
                             std::to_string(grid.cols()));
        if (!grid.allFinite() || grid.minCoeff() < S(0) || grid.maxCoeff() > S(1))
            throw PreconditionError("fusion weights must lie in [0, 1]");
    }

    /// Row-major cells as a [1, g*g] tensor.
    Tensor<S> as_tensor() const {
        Tensor<S> t({1, grid.size()});
        Eigen::Map<RowMatrix<S>>(t.ptr(), grid.rows(), grid.cols()) = grid;
        return t;
    }
};

/// Blockwise-constant [H, W, 1] weight map; block edges follow block_edges().
template <typename S>
Image<S> upsample_grid(const FusionWeights<S>& w, Index H, Index W) {
    w.validate();
    if (H < w.size() || W < w.size())
        throw PreconditionError("upsample_grid: " + std::to_string(H) + "x" + std::to_string(W) +
                                " is smaller than the grid");
    NoGradGuard guard;
    const auto map = grid_upsample(Var<S>(w.as_tensor()), H, W, w.size()).value();
    Image<S> out(H, W, 1);
    out.data = map.data;
    return out;
}

/// Per-pixel convex combination of two same-shape images.
template <typename S>
Image<S> fuse(const Image<S>& original, const Image<S>& generated, const FusionWeights<S>& w) {
    require_same_shape(original, generated, "fuse");
    w.validate();
    NoGradGuard guard;
    const Index H = original.height, W = original.width;
    const auto out = blend(Var<S>(stack_images(std::vector<const Image<S>*>{&original})),
                           Var<S>(stack_images(std::vector<const Image<S>*>{&generated})),
                           grid_upsample(Var<S>(w.as_tensor()), H, W, w.size()));
    return image_from_batch(out.value(), 0);
}

/// Random binary grid used by the fixed-mixing pilot.
template <typename S>
FusionWeights<S> random_binary_grid(Rng& rng, Index g = 3) {
    std::bernoulli_distribution coin(0.5);
    RowMatrix<S> m(g, g);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = coin(rng) ? S(1) : S(0);
    return FusionWeights<S>(std::move(m));
}

struct FusionConfig {
    BackboneConfig extractor{3, 32, 4};
    Index grid = 3;

    bool operator==(const FusionConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const FusionConfig& c) { j = {{"extractor", c.extractor}, {"grid", c.grid}}; }
inline void from_json(const nlohmann::json& j, FusionConfig& c) {
    c.extractor = j.value("extractor", c.extractor);
    c.grid = j.value("grid", c.grid);
}

/// Two separate extractors (original, generated) and a fully connected head
/// from their concatenated embeddings to grid*grid logits.
template <typename S>
class FusionNet {
public:
    FusionNet() = default;
    FusionNet(const FusionConfig& config, Rng& rng)
        : config_(config),
          original_(config.extractor, rng),
          generated_(config.extractor, rng),
          head_(2 * config.extractor.width, config.grid * config.grid, rng) {
        if (config.grid < 1) throw PreconditionError("fusion grid must be >= 1");
    }

    const FusionConfig& config() const { return config_; }
    Index cells() const { return config_.grid * config_.grid; }

    /// [N, C, H, W] pairs -> [N, grid*grid] logits.
    Var<S> logits(const Var<S>& original, const Var<S>& generated, bool training) {
        check(original, generated);
        return head_(concat_cols(original_.embed(original, training), generated_.embed(generated, training)));
    }
    Var<S> logits(const Var<S>& original, const Var<S>& generated) const {
        check(original, generated);
        return head_(concat_cols(original_.embed(original), generated_.embed(generated)));
    }

    /// Fused images from per-sample cell logits.
    Var<S> fuse_with_logits(const Var<S>& original, const Var<S>& generated, const Var<S>& cell_logits) const {
        return blend(original, generated, grid_upsample(sigmoid(cell_logits), original.dim(2), original.dim(3), config_.grid));
    }

    Var<S> operator()(const Var<S>& original, const Var<S>& generated, bool training) {
        return fuse_with_logits(original, generated, logits(original, generated, training));
    }
    Var<S> operator()(const Var<S>& original, const Var<S>& generated) const {
        return fuse_with_logits(original, generated, logits(original, generated));
    }

    FusionWeights<S> predict_weights(const Image<S>& original, const Image<S>& generated) const {
        require_same_shape(original, generated, "predict_weights");
        NoGradGuard guard;
        const auto w = sigmoid(logits(Var<S>(stack_images(std::vector<const Image<S>*>{&original})),
                                      Var<S>(stack_images(std::vector<const Image<S>*>{&generated}))))
                           .value();
        return FusionWeights<S>(Eigen::Map<const RowMatrix<S>>(w.ptr(), config_.grid, config_.grid));
    }

    void parameters(ParamList<S>& out, const std::string& prefix = "") const {
        original_.parameters(out, prefix + "original.");
        generated_.parameters(out, prefix + "generated.");
        head_.parameters(out, prefix + "head.");
    }
    ParamList<S> parameters() const {
        ParamList<S> out;
        parameters(out);
        return out;
    }
    void buffers(BufferList<S>& out, const std::string& prefix = "") {
        original_.buffers(out, prefix + "original.");
        generated_.buffers(out, prefix + "generated.");
    }

    Linear<S>& head() { return head_; }

private:
    void check(const Var<S>& a, const Var<S>& b) const {
        if (a.shape() != b.shape())
            throw ShapeError("fusion: original " + to_string(a.shape()) + " and generated " + to_string(b.shape()) +
                             " differ");
    }

    FusionConfig config_;
    Backbone<S> original_;
    Backbone<S> generated_;
    Linear<S> head_;
};

}  // namespace metairnet
