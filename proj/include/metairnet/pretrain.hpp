#pragma once

// Scratch training of the toy generator by latent-table reconstruction: every
// training image owns a learnable noise code, every class owns a row of the
// generator's embedding table, and generator weights and codes are fitted
// jointly under L1 reconstruction.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "metairnet/data.hpp"
#include "metairnet/generator.hpp"

namespace metairnet {

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    double lr = 0.002;
    double lr_latent = 0.01;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 0) throw PreconditionError("pretrain: steps must be >= 0");
        if (batch_size < 2) throw PreconditionError("pretrain: batch_size must be >= 2 for batch statistics");
        if (!(lr >= 0) || !(lr_latent >= 0)) throw PreconditionError("pretrain: learning rates must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"steps", c.steps}, {"batch_size", c.batch_size}, {"lr", c.lr},  {"lr_latent", c.lr_latent},
         {"beta1", c.beta1}, {"beta2", c.beta2},           {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_latent = j.value("lr_latent", c.lr_latent);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.seed = j.value("seed", c.seed);
}

template <typename S>
struct PretrainResult {
    Generator<S> generator;
    /// Mean L1 of each optimization step's batch.
    std::vector<double> loss_curve;
};

/// Project every row of a code table onto the sphere of radius sqrt(dim).
template <typename S>
void project_rows(Tensor<S>& table) {
    auto m = table.matrix();
    const S radius = std::sqrt(static_cast<S>(m.cols()));
    for (Index i = 0; i < m.rows(); ++i) {
        const S norm = m.row(i).norm();
        if (norm > S(0)) m.row(i) *= radius / norm;
    }
}

/// The generator a pretraining run with this seed starts from.
template <typename S>
Generator<S> initial_generator(const GeneratorConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "pretrain"));
    return Generator<S>(config, rng);
}

template <typename S>
PretrainResult<S> pretrain_toy_generator(const std::vector<Image<S>>& images, const std::vector<Index>& labels,
                                         const GeneratorConfig& config, const PretrainConfig& pc) {
    pc.validate();
    config.validate();
    if (images.size() != labels.size()) throw ShapeError("pretrain: images and labels differ in length");
    if (images.size() < 2) throw PreconditionError("pretrain: need at least two training images");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].height != config.resolution || images[i].width != config.resolution ||
            images[i].channels != config.channels)
            throw ShapeError("pretrain: image " + std::to_string(i) + " has shape " + to_string(images[i].shape()));
        if (labels[i] < 0 || labels[i] >= config.num_classes)
            throw PreconditionError("pretrain: label " + std::to_string(labels[i]) + " outside the class table");
    }

    PretrainResult<S> res;
    res.generator = initial_generator<S>(config, pc.seed);
    Rng rng(derive_seed(pc.seed, "pretrain-codes"));
    auto& g = res.generator;
    const Index N = static_cast<Index>(images.size());
    Tensor<S> codes0 = randn<S>({N, config.noise_dim}, rng);
    project_rows(codes0);
    Var<S> codes(std::move(codes0), true);

    Adam<S> opt(pc.beta1, pc.beta2);
    ParamList<S> weights;
    for (auto& p : g.parameters())
        if (p.kind != ParamKind::embedding) weights.push_back(p);
    opt.add(weights, pc.lr);
    opt.add(g.embed_table.var(), pc.lr_latent);
    opt.add(codes, pc.lr_latent);

    const Index B = std::min<Index>(pc.batch_size, N);
    std::vector<Index> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), Index{0});
    std::size_t cursor = order.size();
    for (int step = 0; step < pc.steps; ++step) {
        std::vector<Index> batch, cls;
        std::vector<const Image<S>*> targets;
        while (static_cast<Index>(batch.size()) < B) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const Index i = order[cursor++];
            batch.push_back(i);
            cls.push_back(labels[static_cast<std::size_t>(i)]);
            targets.push_back(&images[static_cast<std::size_t>(i)]);
        }
        const Var<S> latent = concat_cols(gather_rows(codes, batch), gather_rows(g.embed_table.var(), cls));
        const Var<S> loss = mean_abs_diff(g.forward(latent, true), Var<S>(stack_images(targets)));
        const double value = double(loss.item());
        if (!std::isfinite(value)) throw TrainingError("generator pretraining diverged with a non-finite loss", step);
        res.loss_curve.push_back(value);
        opt.zero_grad();
        backward(loss);
        opt.step();
        project_rows(codes.mutable_value());
    }
    set_requires_grad(g.parameters(), false);
    return res;
}

/// Load every image of `index` at the generator resolution and train on it;
/// class labels follow the index order.
PretrainResult<float> pretrain_toy_generator(const DatasetIndex& index, GeneratorConfig config,
                                             const PretrainConfig& pc);

}  // namespace metairnet
