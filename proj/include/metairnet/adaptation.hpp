#pragma once

// Single-image generator fine-tuning: the latent code and the generator's
// batch-norm scale/shift are fitted to one target image under
//   L = L1 + lambda_p * perceptual + lambda_z * EM(z, r),
// and perturbed latents then yield the image's synthetic variants.

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "metairnet/backbone.hpp"
#include "metairnet/generator.hpp"

namespace metairnet {

struct AdaptConfig {
    double lambda_p = 0.1;
    double lambda_z = 0.1;
    int steps = 500;
    double lr_z = 0.01;
    double lr_bn = 0.0005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    /// Standard deviation of the Gaussian latent perturbation for variants.
    double epsilon_scale = 0.1;
    int n_variants = 10;
    /// Blocks of the perceptual extractor whose activations are compared.
    std::vector<int> perceptual_layers{0, 1};

    void validate() const {
        if (!(lambda_p >= 0) || !(lambda_z >= 0)) throw PreconditionError("adapt: loss weights must be >= 0");
        if (steps < 1) throw PreconditionError("adapt: steps must be >= 1, got " + std::to_string(steps));
        if (n_variants < 1) throw PreconditionError("adapt: n_variants must be >= 1");
        if (!(lr_z >= 0) || !(lr_bn >= 0) || !(epsilon_scale >= 0))
            throw PreconditionError("adapt: learning rates and epsilon_scale must be >= 0");
        if (perceptual_layers.empty() && lambda_p > 0) throw PreconditionError("adapt: no perceptual layers configured");
    }
};

inline void to_json(nlohmann::json& j, const AdaptConfig& c) {
    j = {{"lambda_p", c.lambda_p}, {"lambda_z", c.lambda_z},           {"steps", c.steps},
         {"lr_z", c.lr_z},         {"lr_bn", c.lr_bn},                 {"beta1", c.beta1},
         {"beta2", c.beta2},       {"epsilon_scale", c.epsilon_scale}, {"n_variants", c.n_variants},
         {"perceptual_layers", c.perceptual_layers}};
}
inline void from_json(const nlohmann::json& j, AdaptConfig& c) {
    c.lambda_p = j.value("lambda_p", c.lambda_p);
    c.lambda_z = j.value("lambda_z", c.lambda_z);
    c.steps = j.value("steps", c.steps);
    c.lr_z = j.value("lr_z", c.lr_z);
    c.lr_bn = j.value("lr_bn", c.lr_bn);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon_scale = j.value("epsilon_scale", c.epsilon_scale);
    c.n_variants = j.value("n_variants", c.n_variants);
    c.perceptual_layers = j.value("perceptual_layers", c.perceptual_layers);
}

/// Frozen feature extractor; the perceptual distance is the mean over the
/// selected blocks of the mean squared activation difference.
template <typename S>
class PerceptualLoss {
public:
    PerceptualLoss() = default;
    PerceptualLoss(Backbone<S> extractor, std::vector<int> layers)
        : extractor_(std::move(extractor)), layers_(std::move(layers)) {
        set_requires_grad(extractor_.parameters(), false);
        for (int l : layers_)
            if (l < 0 || l >= extractor_.config().depth)
                throw PreconditionError("perceptual layer " + std::to_string(l) + " outside extractor depth");
        depth_ = layers_.empty() ? 0 : *std::max_element(layers_.begin(), layers_.end()) + 1;
    }

    /// Randomly initialized Conv-4 extractor.
    static PerceptualLoss random(Index channels, std::vector<int> layers, std::uint64_t seed, Index width = 32) {
        Rng rng(seed);
        return PerceptualLoss(Backbone<S>({channels, width, 4}, rng), std::move(layers));
    }

    const std::vector<int>& layers() const { return layers_; }

    std::vector<Tensor<S>> features(const Tensor<S>& images) const {
        NoGradGuard guard;
        std::vector<Tensor<S>> out;
        if (depth_ == 0) return out;
        const auto blocks = extractor_.blocks(Var<S>(images), depth_);
        for (int l : layers_) out.push_back(blocks[static_cast<std::size_t>(l)].value());
        return out;
    }

    Var<S> operator()(const Var<S>& generated, const std::vector<Tensor<S>>& target_features) const {
        if (target_features.size() != layers_.size()) throw ShapeError("perceptual: wrong number of target feature maps");
        if (layers_.empty()) return Var<S>(Tensor<S>({1}));
        const auto blocks = extractor_.blocks(generated, depth_);
        Var<S> total;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            Var<S> term = mean_sq_diff(blocks[static_cast<std::size_t>(layers_[i])], Var<S>(target_features[i]));
            total = i == 0 ? term : total + term;
        }
        return static_cast<S>(1.0 / double(layers_.size())) * total;
    }

private:
    Backbone<S> extractor_;
    std::vector<int> layers_;
    int depth_ = 0;
};

template <typename S>
struct ReconstructionTerms {
    Var<S> total;
    Var<S> l1;
    Var<S> perceptual;
    Var<S> em;
};

struct LossRecord {
    double total = 0;
    double l1 = 0;
    double perceptual = 0;
    double em = 0;
};

inline void to_json(nlohmann::json& j, const LossRecord& r) {
    j = {{"total", r.total}, {"l1", r.l1}, {"perceptual", r.perceptual}, {"em", r.em}};
}
inline void from_json(const nlohmann::json& j, LossRecord& r) {
    r.total = j.at("total").get<double>();
    r.l1 = j.at("l1").get<double>();
    r.perceptual = j.at("perceptual").get<double>();
    r.em = j.at("em").get<double>();
}

template <typename S>
LossRecord record(const ReconstructionTerms<S>& t) {
    return {double(t.total.item()), double(t.l1.item()), double(t.perceptual.item()), double(t.em.item())};
}

/// Earth-mover distance between the entries of z and a reference sample r,
/// computed as exact 1-D optimal transport.
template <typename S>
Var<S> em_regularizer(const Var<S>& z, const Tensor<S>& r) {
    return em_distance_1d(z, r);
}

/// generated [1, C, H, W]; target [1, C, H, W]; z [1, D]; r [D].
template <typename S>
ReconstructionTerms<S> reconstruction_loss(const Var<S>& generated, const Tensor<S>& target,
                                           const PerceptualLoss<S>& perceptual,
                                           const std::vector<Tensor<S>>& target_features, const Var<S>& z,
                                           const Tensor<S>& r, const AdaptConfig& config) {
    if (generated.shape() != target.shape)
        throw ShapeError("reconstruction_loss: generated " + to_string(generated.shape()) + " vs target " +
                         to_string(target.shape));
    ReconstructionTerms<S> t;
    t.l1 = mean_abs_diff(generated, Var<S>(target));
    t.perceptual = config.lambda_p > 0 ? perceptual(generated, target_features) : Var<S>(Tensor<S>({1}));
    t.em = em_regularizer(z, r);
    t.total = t.l1 + static_cast<S>(config.lambda_p) * t.perceptual + static_cast<S>(config.lambda_z) * t.em;
    return t;
}

template <typename S>
struct AdaptResult {
    LatentCode<S> tuned_z;
    Vector<S> tuned_bn;
    std::vector<LossRecord> loss_trace;
    LossRecord final_loss;
    /// Set when no step ever improved on the initial loss.
    bool warning = false;
    Generator<S> generator;
    Image<S> reconstruction;
    std::vector<Image<S>> variants;
};

/// Fit latent and BN scale/shift of a private copy of `generator` to
/// `target`. Running BN statistics stay frozen.
template <typename S>
AdaptResult<S> adapt(const Generator<S>& generator, const Image<S>& target, const AdaptConfig& config,
                     std::uint64_t seed, const PerceptualLoss<S>& perceptual) {
    config.validate();
    const auto& gc = generator.config();
    if (target.height != gc.resolution || target.width != gc.resolution || target.channels != gc.channels)
        throw ShapeError("adapt: target " + to_string(target.shape()) + " does not match generator output " +
                         std::to_string(gc.channels) + "x" + std::to_string(gc.resolution) + "x" +
                         std::to_string(gc.resolution));

    AdaptResult<S> res;
    res.generator = generator;
    auto& g = res.generator;
    const auto view = bn_parameter_view(g);
    set_requires_grad(view.other, false);
    set_requires_grad(view.bn, true);

    Rng rng(seed);
    const Index D = gc.latent_dim();
    Tensor<S> z0({1, D});
    z0.data.head(gc.noise_dim) = randn<S>({gc.noise_dim}, rng).data;
    z0.data.tail(gc.embed_dim) = g.mean_class_embedding().array();
    Var<S> z(std::move(z0), true);

    Adam<S> opt(config.beta1, config.beta2);
    opt.add(z, config.lr_z);
    opt.add(view.bn, config.lr_bn);

    const Tensor<S> target_batch = stack_images(std::vector<const Image<S>*>{&target});
    const auto target_features =
        config.lambda_p > 0 ? perceptual.features(target_batch) : std::vector<Tensor<S>>(perceptual.layers().size());

    auto evaluate = [&](int step) {
        const Tensor<S> r = randn<S>({D}, rng);
        auto terms = reconstruction_loss(g.forward(z, false), target_batch, perceptual, target_features, z, r, config);
        if (!std::isfinite(double(terms.total.item())))
            throw AdaptationError("adaptation diverged with a non-finite loss", step);
        return terms;
    };

    res.loss_trace.reserve(static_cast<std::size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        auto terms = evaluate(step);
        res.loss_trace.push_back(record(terms));
        opt.zero_grad();
        backward(terms.total);
        opt.step();
    }
    {
        NoGradGuard guard;
        res.final_loss = record(evaluate(config.steps));
    }
    const double initial = res.loss_trace.front().total;
    bool improved = res.final_loss.total < initial;
    for (const auto& r : res.loss_trace) improved = improved || r.total < initial;
    res.warning = !improved;

    set_requires_grad(view.bn, false);
    z.set_requires_grad(false);
    const Vector<S> zv = z.value().data.matrix().transpose();
    res.tuned_z = LatentCode<S>::split(zv, gc.noise_dim);
    res.tuned_bn = flatten(view.bn);
    res.reconstruction = g.generate(res.tuned_z);
    return res;
}

/// n images G(z + eps), eps ~ N(0, epsilon_scale^2 I) over the whole latent.
template <typename S>
std::vector<Image<S>> sample_variants(const Generator<S>& generator, const LatentCode<S>& z, double epsilon_scale,
                                      int n_variants, std::uint64_t seed) {
    if (n_variants < 1) throw PreconditionError("sample_variants: n_variants must be >= 1");
    if (!(epsilon_scale >= 0)) throw PreconditionError("sample_variants: epsilon_scale must be >= 0");
    Rng rng(seed);
    const Vector<S> base = z.concat();
    std::vector<Image<S>> out;
    out.reserve(static_cast<std::size_t>(n_variants));
    for (int i = 0; i < n_variants; ++i) {
        const Vector<S> eps = randn<S>({base.size()}, rng, epsilon_scale).data.matrix();
        out.push_back(generator.generate(LatentCode<S>::split(base + eps, z.noise.size())));
    }
    return out;
}

template <typename S>
std::vector<Image<S>> sample_variants(const AdaptResult<S>& result, double epsilon_scale, int n_variants,
                                      std::uint64_t seed) {
    return sample_variants(result.generator, result.tuned_z, epsilon_scale, n_variants, seed);
}

/// Mean absolute pixel difference over all variant pairs.
template <typename S>
double mean_pairwise_distance(const std::vector<Image<S>>& images) {
    double acc = 0;
    long pairs = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t j = i + 1; j < images.size(); ++j, ++pairs)
            acc += double((images[i].data - images[j].data).abs().mean());
    return pairs ? acc / double(pairs) : 0.0;
}

}  // namespace metairnet
