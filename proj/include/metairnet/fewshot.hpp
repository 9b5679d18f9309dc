#pragma once

// Prototype classifier over pooled backbone embeddings. Support images may be
// reinforced with fused or otherwise augmented copies; queries never are.
// Class probabilities are a softmax over negative Euclidean distances to the
// per-class mean embeddings.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <filesystem>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Cholesky>
#include <json.hpp>

#include "metairnet/backbone.hpp"
#include "metairnet/data.hpp"
#include "metairnet/fusion.hpp"

namespace metairnet {

enum class Augmentation { none, fusion, flip, gaussian, mixup, finetunegan };

std::string to_string(Augmentation a);
Augmentation parse_augmentation(const std::string& name);

/// Whether the augmentation draws generated variants from the cache.
inline bool uses_variants(Augmentation a) {
    return a == Augmentation::fusion || a == Augmentation::mixup || a == Augmentation::finetunegan;
}

enum class Origin { real, fused, flipped, gaussian, mixed, generated };

std::string to_string(Origin o);

/// Images of one episode, plus generated variants drawn for its support.
template <typename S>
struct EpisodeImages {
    int n = 0;
    int m = 0;
    int q = 0;
    Tensor<S> support;  // [n*m, C, H, W]
    std::vector<int> support_labels;
    Tensor<S> query;    // [n*q, C, H, W]
    std::vector<int> query_labels;
    Tensor<S> generated;                  // [k, C, H, W]
    std::vector<Index> generated_source;  // support row of each generated image
};

struct EpisodeOptions {
    Augmentation augmentation = Augmentation::fusion;
    /// Synthetic entries per real support image.
    int n_aug = 1;
    bool squared_distance = false;
    double gaussian_sigma = 0.01;

    void validate() const {
        if (n_aug < 0) throw PreconditionError("n_aug must be >= 0");
        if (!(gaussian_sigma >= 0)) throw PreconditionError("gaussian_sigma must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const EpisodeOptions& o) {
    j = {{"augmentation", to_string(o.augmentation)},
         {"n_aug", o.n_aug},
         {"squared_distance", o.squared_distance},
         {"gaussian_sigma", o.gaussian_sigma}};
}

namespace detail {

template <typename S>
Var<S> embed(Backbone<S>& b, const Var<S>& x, bool training) {
    return b.embed(x, training);
}
template <typename S>
Var<S> embed(const Backbone<S>& b, const Var<S>& x, bool) {
    return b.embed(x);
}
template <typename S>
Var<S> fuse_batch(FusionNet<S>& f, const Var<S>& a, const Var<S>& b, bool training) {
    return f(a, b, training);
}
template <typename S>
Var<S> fuse_batch(const FusionNet<S>& f, const Var<S>& a, const Var<S>& b, bool) {
    return f(a, b);
}

template <typename S>
Tensor<S> take_rows(const Tensor<S>& batch, const std::vector<Index>& rows) {
    Shape shape = batch.shape;
    shape[0] = static_cast<Index>(rows.size());
    Tensor<S> out(shape);
    const Index stride = batch.size() / batch.dim(0);
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.data.segment(Index(i) * stride, stride) = batch.data.segment(rows[i] * stride, stride);
    return out;
}

}  // namespace detail

/// Augmented support batch. `images` may carry a graph through the fusion
/// network; Gaussian copies are produced later, in feature space.
template <typename S>
struct SupportBatch {
    Var<S> images;
    std::vector<int> labels;
    std::vector<Origin> origins;
};

template <typename S, typename FusionT>
SupportBatch<S> build_support(const EpisodeImages<S>& ep, FusionT* fusion, const EpisodeOptions& opt, bool training,
                              Rng& rng) {
    opt.validate();
    SupportBatch<S> out;
    const Index ns = ep.support.dim(0);
    out.labels = ep.support_labels;
    out.origins.assign(static_cast<std::size_t>(ns), Origin::real);
    std::vector<Var<S>> parts{Var<S>(ep.support)};
    auto add_labels = [&](const std::vector<Index>& src, Origin origin) {
        for (Index s : src) {
            out.labels.push_back(ep.support_labels[static_cast<std::size_t>(s)]);
            out.origins.push_back(origin);
        }
    };

    if (opt.n_aug > 0) {
        switch (opt.augmentation) {
            case Augmentation::none:
            case Augmentation::gaussian: break;
            case Augmentation::flip: {
                parts.push_back(flip_horizontal(Var<S>(ep.support)));
                std::vector<Index> src(static_cast<std::size_t>(ns));
                std::iota(src.begin(), src.end(), Index{0});
                add_labels(src, Origin::flipped);
                break;
            }
            case Augmentation::fusion:
            case Augmentation::mixup:
            case Augmentation::finetunegan: {
                if (ep.generated_source.size() != static_cast<std::size_t>(ns) * static_cast<std::size_t>(opt.n_aug))
                    throw AugmentationError("episode carries " + std::to_string(ep.generated_source.size()) +
                                            " generated images, expected " + std::to_string(ns * opt.n_aug));
                const Var<S> gen(ep.generated);
                if (opt.augmentation == Augmentation::finetunegan) {
                    parts.push_back(gen);
                    add_labels(ep.generated_source, Origin::generated);
                    break;
                }
                const Var<S> orig(detail::take_rows(ep.support, ep.generated_source));
                if (opt.augmentation == Augmentation::fusion) {
                    if (!fusion) throw PreconditionError("fusion augmentation needs a fusion network");
                    parts.push_back(detail::fuse_batch(*fusion, orig, gen, training));
                    add_labels(ep.generated_source, Origin::fused);
                } else {
                    // One scalar weight per pair, i.e. a 1x1 grid.
                    std::uniform_real_distribution<double> u(0, 1);
                    Tensor<S> w({orig.dim(0), 1});
                    for (Index i = 0; i < w.size(); ++i) w.data[i] = static_cast<S>(u(rng));
                    parts.push_back(blend(orig, gen, grid_upsample(Var<S>(w), orig.dim(2), orig.dim(3), 1)));
                    add_labels(ep.generated_source, Origin::mixed);
                }
                break;
            }
        }
    }
    out.images = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return out;
}

/// Row-stochastic averaging matrix [n, labels.size()].
template <typename S>
Tensor<S> averaging_matrix(const std::vector<int>& labels, int n) {
    std::vector<int> count(static_cast<std::size_t>(n), 0);
    for (int l : labels) {
        if (l < 0 || l >= n) throw ShapeError("label " + std::to_string(l) + " outside 0.." + std::to_string(n - 1));
        ++count[static_cast<std::size_t>(l)];
    }
    for (int c = 0; c < n; ++c)
        if (count[static_cast<std::size_t>(c)] == 0)
            throw PreconditionError("class " + std::to_string(c) + " has no support entries");
    Tensor<S> a({n, static_cast<Index>(labels.size())});
    auto m = a.matrix();
    for (std::size_t i = 0; i < labels.size(); ++i)
        m(labels[i], Index(i)) = S(1) / static_cast<S>(count[static_cast<std::size_t>(labels[i])]);
    return a;
}

template <typename S>
struct EpisodeOutput {
    Var<S> logits;  // [n*q, n] negative distances
    Var<S> loss;    // mean cross-entropy over queries
    double accuracy = 0;
};

/// Forward pass of one episode: support augmentation, a single backbone pass
/// over support and query images, prototypes and distance logits.
template <typename S, typename BackboneT, typename FusionT>
EpisodeOutput<S> run_episode(const EpisodeImages<S>& ep, BackboneT& backbone, FusionT* fusion,
                             const EpisodeOptions& opt, bool training, Rng& rng) {
    auto sb = build_support<S>(ep, fusion, opt, training, rng);
    const Index ns = sb.images.dim(0), nq = ep.query.dim(0);
    const Var<S> emb = detail::embed(backbone, concat_rows<S>({sb.images, Var<S>(ep.query)}), training);
    Var<S> es = slice_rows(emb, 0, ns);
    const Var<S> eq = slice_rows(emb, ns, nq);

    if (opt.augmentation == Augmentation::gaussian && opt.n_aug > 0) {
        std::vector<Index> rows;
        const Index n_real = ep.support.dim(0);
        for (int k = 0; k < opt.n_aug; ++k)
            for (Index i = 0; i < n_real; ++i) {
                rows.push_back(i);
                sb.labels.push_back(sb.labels[static_cast<std::size_t>(i)]);
                sb.origins.push_back(Origin::gaussian);
            }
        const Var<S> noise(randn<S>({Index(rows.size()), es.dim(1)}, rng, opt.gaussian_sigma));
        es = concat_rows<S>({es, gather_rows(es, rows) + noise});
    }

    EpisodeOutput<S> out;
    const Var<S> protos = matmul(Var<S>(averaging_matrix<S>(sb.labels, ep.n)), es);
    out.logits = -pairwise_distance(eq, protos, opt.squared_distance);
    out.loss = cross_entropy(out.logits, ep.query_labels);
    const auto lg = out.logits.value().matrix();
    int correct = 0;
    for (Index i = 0; i < lg.rows(); ++i) {
        Index arg;
        lg.row(i).maxCoeff(&arg);
        correct += arg == ep.query_labels[static_cast<std::size_t>(i)];
    }
    out.accuracy = lg.rows() ? double(correct) / double(lg.rows()) : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Image- and embedding-level API

template <typename S>
struct SupportEntry {
    Image<S> image;
    int label;
    Origin origin;
};

template <typename S>
struct AugmentedSupportSet {
    int n = 0;
    std::vector<SupportEntry<S>> entries;

    std::size_t size() const { return entries.size(); }
    std::vector<int> labels() const {
        std::vector<int> l;
        for (const auto& e : entries) l.push_back(e.label);
        return l;
    }
};

/// Real support images followed by their synthetic companions. Gaussian
/// augmentation acts on features and is not available here.
template <typename S>
AugmentedSupportSet<S> augment_support(const EpisodeImages<S>& ep, const FusionNet<S>* fusion,
                                       const EpisodeOptions& opt, Rng& rng) {
    if (opt.augmentation == Augmentation::gaussian)
        throw PreconditionError("gaussian augmentation acts on features; use run_episode");
    NoGradGuard guard;
    const auto sb = build_support<S>(ep, fusion, opt, false, rng);
    AugmentedSupportSet<S> set;
    set.n = ep.n;
    for (Index i = 0; i < sb.images.dim(0); ++i)
        set.entries.push_back({image_from_batch(sb.images.value(), i), sb.labels[std::size_t(i)], sb.origins[std::size_t(i)]});
    return set;
}

template <typename S>
struct Prototype {
    int label;
    Vector<S> centroid;
};

/// Mean embedding per class; embeddings are rows.
template <typename S>
std::vector<Prototype<S>> compute_prototypes(const RowMatrix<S>& embeddings, const std::vector<int>& labels, int n) {
    if (embeddings.rows() != static_cast<Index>(labels.size()))
        throw ShapeError("compute_prototypes: " + std::to_string(embeddings.rows()) + " embeddings, " +
                         std::to_string(labels.size()) + " labels");
    const RowMatrix<S> protos = averaging_matrix<S>(labels, n).matrix() * embeddings;
    std::vector<Prototype<S>> out;
    for (int c = 0; c < n; ++c) out.push_back({c, protos.row(c).transpose()});
    return out;
}

template <typename S>
RowMatrix<S> embed_images(const Backbone<S>& backbone, const std::vector<const Image<S>*>& images) {
    NoGradGuard guard;
    return backbone.embed(Var<S>(stack_images(images))).value().matrix();
}

template <typename S>
std::vector<Prototype<S>> compute_prototypes(const AugmentedSupportSet<S>& support, const Backbone<S>& backbone) {
    if (support.entries.empty()) throw PreconditionError("compute_prototypes: empty support set");
    std::vector<const Image<S>*> images;
    for (const auto& e : support.entries) images.push_back(&e.image);
    return compute_prototypes<S>(embed_images(backbone, images), support.labels(), support.n);
}

/// Softmax over negative (optionally squared) Euclidean distances.
template <typename S>
Vector<S> class_probabilities(const Vector<S>& query, const std::vector<Prototype<S>>& prototypes,
                              bool squared = false) {
    if (prototypes.empty()) throw PreconditionError("class_probabilities: no prototypes");
    Vector<S> logits(static_cast<Index>(prototypes.size()));
    for (std::size_t c = 0; c < prototypes.size(); ++c) {
        if (prototypes[c].centroid.size() != query.size()) throw ShapeError("class_probabilities: dimension mismatch");
        const S d2 = (query - prototypes[c].centroid).squaredNorm();
        logits[Index(c)] = -(squared ? d2 : std::sqrt(d2));
    }
    const Vector<S> e = (logits.array() - logits.maxCoeff()).exp().matrix();
    return e / e.sum();
}

template <typename S>
Vector<S> classify_query(const Image<S>& query, const std::vector<Prototype<S>>& prototypes,
                         const Backbone<S>& backbone, bool squared = false) {
    const RowMatrix<S> e = embed_images(backbone, std::vector<const Image<S>*>{&query});
    return class_probabilities<S>(e.row(0).transpose(), prototypes, squared);
}

// ---------------------------------------------------------------------------
// Frozen-feature baselines

enum class BaselineKind { nn, logistic_ova, softmax_reg };

/// L2 strength of the logistic and softmax regression baselines.
inline constexpr double kBaselineL2 = 1e-2;

namespace detail {

inline int count_classes(const std::vector<int>& labels) {
    int n = 0;
    for (int l : labels) {
        if (l < 0) throw PreconditionError("negative support label");
        n = std::max(n, l + 1);
    }
    return n;
}

/// Newton iterations on an L2-regularised, convex multinomial (or binary)
/// logistic objective. X carries a trailing bias column.
template <typename S>
RowMatrix<S> fit_softmax(const RowMatrix<S>& X, const std::vector<int>& y, int classes, int max_iter = 50) {
    const Index n = X.rows(), d = X.cols(), K = classes - 1;  // last class is the reference
    Eigen::Matrix<S, Eigen::Dynamic, 1> w = Eigen::Matrix<S, Eigen::Dynamic, 1>::Zero(d * K);
    RowMatrix<S> Y = RowMatrix<S>::Zero(n, K);
    for (Index i = 0; i < n; ++i)
        if (y[std::size_t(i)] < K) Y(i, y[std::size_t(i)]) = 1;
    for (int it = 0; it < max_iter; ++it) {
        const RowMatrix<S> W = Eigen::Map<const RowMatrix<S>>(w.data(), K, d);
        RowMatrix<S> logits(n, K + 1);
        logits.leftCols(K) = X * W.transpose();
        logits.col(K).setZero();
        RowMatrix<S> P(n, K + 1);
        for (Index i = 0; i < n; ++i) {
            const auto row = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
            P.row(i) = row / row.sum();
        }
        const RowMatrix<S> R = P.leftCols(K) - Y;
        RowMatrix<S> G = R.transpose() * X;
        Eigen::Matrix<S, Eigen::Dynamic, 1> grad = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(G.data(), d * K);
        grad += S(kBaselineL2) * w;
        RowMatrix<S> H = RowMatrix<S>::Zero(d * K, d * K);
        for (Index i = 0; i < n; ++i) {
            const RowMatrix<S> xx = X.row(i).transpose() * X.row(i);
            for (Index a = 0; a < K; ++a)
                for (Index b = 0; b < K; ++b) {
                    const S pab = (a == b ? P(i, a) : S(0)) - P(i, a) * P(i, b);
                    H.block(a * d, b * d, d, d) += pab * xx;
                }
        }
        H.diagonal().array() += S(kBaselineL2);
        const Eigen::Matrix<S, Eigen::Dynamic, 1> step = H.ldlt().solve(grad);
        w -= step;
        if (step.norm() < S(1e-10) * (S(1) + w.norm())) break;
    }
    RowMatrix<S> W = RowMatrix<S>::Zero(classes, d);
    W.topRows(K) = Eigen::Map<const RowMatrix<S>>(w.data(), K, d);
    return W;
}

template <typename S>
RowMatrix<S> with_bias(const RowMatrix<S>& X) {
    RowMatrix<S> out(X.rows(), X.cols() + 1);
    out << X, RowMatrix<S>::Ones(X.rows(), 1);
    return out;
}

}  // namespace detail

/// Per-query labels predicted from support features only. Nearest-neighbour
/// ties go to the lowest class index.
template <typename S>
std::vector<int> baseline_classifiers(const RowMatrix<S>& support, const std::vector<int>& support_labels,
                                      const RowMatrix<S>& query, BaselineKind kind) {
    if (support.rows() != static_cast<Index>(support_labels.size()))
        throw ShapeError("baseline: support features and labels differ in length");
    if (support.cols() != query.cols()) throw ShapeError("baseline: feature dimensions differ");
    const int n = detail::count_classes(support_labels);
    {
        std::vector<bool> present(static_cast<std::size_t>(n), false);
        for (int l : support_labels) present[std::size_t(l)] = true;
        int distinct = 0;
        for (bool p : present) distinct += p;
        if (distinct < 2) throw PreconditionError("baseline classifiers need at least two support classes");
    }
    std::vector<int> pred(static_cast<std::size_t>(query.rows()));
    if (kind == BaselineKind::nn) {
        for (Index i = 0; i < query.rows(); ++i) {
            S best = std::numeric_limits<S>::infinity();
            int label = -1;
            for (Index j = 0; j < support.rows(); ++j) {
                const S d = (query.row(i) - support.row(j)).squaredNorm();
                const int l = support_labels[std::size_t(j)];
                if (d < best || (d == best && l < label)) {
                    best = d;
                    label = l;
                }
            }
            pred[std::size_t(i)] = label;
        }
        return pred;
    }

    const RowMatrix<S> X = detail::with_bias(support), Xq = detail::with_bias(query);
    RowMatrix<S> scores(query.rows(), n);
    if (kind == BaselineKind::softmax_reg) {
        scores = Xq * detail::fit_softmax<S>(X, support_labels, n).transpose();
    } else {
        for (int c = 0; c < n; ++c) {
            std::vector<int> y(support_labels.size());
            for (std::size_t i = 0; i < y.size(); ++i) y[i] = support_labels[i] == c ? 0 : 1;
            scores.col(c) = Xq * detail::fit_softmax<S>(X, y, 2).row(0).transpose();
        }
    }
    for (Index i = 0; i < scores.rows(); ++i) {
        Index arg;
        scores.row(i).maxCoeff(&arg);
        pred[std::size_t(i)] = int(arg);
    }
    return pred;
}

// ---------------------------------------------------------------------------
// Episode materialisation

/// Decode an episode's images at the store's resolution and draw `n_variants`
/// cached variants per support image (without replacement while possible).
/// `index` must have its generation cache attached when n_variants > 0.
EpisodeImages<float> load_episode(const Episode& episode, const DatasetIndex& index, ImageStore& store,
                                  const std::filesystem::path& cache_root, int n_variants, Rng& rng);

}  // namespace metairnet
