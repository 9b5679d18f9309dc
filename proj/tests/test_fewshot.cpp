#include "doctest.h"

#include "gradcheck.hpp"
#include "metairnet/cache.hpp"
#include "metairnet/fewshot.hpp"
#include "metairnet/generator.hpp"
#include "testutil.hpp"

using namespace metairnet;
using metairnet::testing::check_gradients;

namespace {

EpisodeImages<double> random_episode(int n, int m, int q, int n_aug, Index res, Rng& rng) {
    EpisodeImages<double> ep;
    ep.n = n;
    ep.m = m;
    ep.q = q;
    ep.support = rand_uniform<double>({n * m, 3, res, res}, rng, -1, 1);
    ep.query = rand_uniform<double>({n * q, 3, res, res}, rng, -1, 1);
    for (int c = 0; c < n; ++c) {
        for (int i = 0; i < m; ++i) ep.support_labels.push_back(c);
        for (int i = 0; i < q; ++i) ep.query_labels.push_back(c);
    }
    if (n_aug > 0) {
        ep.generated = rand_uniform<double>({n * m * n_aug, 3, res, res}, rng, -1, 1);
        for (Index s = 0; s < n * m; ++s)
            for (int k = 0; k < n_aug; ++k) ep.generated_source.push_back(s);
    }
    return ep;
}

// Loop-based reference: class means, then softmax over negative distances.
std::vector<double> oracle_probabilities(const RowMatrix<double>& support, const std::vector<int>& labels,
                                         const Eigen::VectorXd& query, int n) {
    std::vector<double> logits;
    for (int c = 0; c < n; ++c) {
        Eigen::VectorXd centre = Eigen::VectorXd::Zero(support.cols());
        int count = 0;
        for (Index i = 0; i < support.rows(); ++i)
            if (labels[std::size_t(i)] == c) {
                centre += support.row(i).transpose();
                ++count;
            }
        centre /= count;
        double d = 0;
        for (Index k = 0; k < centre.size(); ++k) d += (query[k] - centre[k]) * (query[k] - centre[k]);
        logits.push_back(-std::sqrt(d));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    for (double& l : logits) l /= z;
    return logits;
}

BackboneConfig small_backbone() { return {3, 6, 2}; }
FusionConfig small_fusion() { return {{3, 4, 2}, 3}; }

}  // namespace

TEST_CASE("prototype classifier agrees with a loop oracle over 200 episodes") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + trial % 5, per = 1 + trial % 4, d = 1 + trial % 7;
        const RowMatrix<double> emb = randn<double>({n * per, d}, rng).matrix();
        std::vector<int> labels;
        for (int c = 0; c < n; ++c)
            for (int i = 0; i < per; ++i) labels.push_back(c);
        std::shuffle(labels.begin(), labels.end(), rng);
        const auto protos = compute_prototypes<double>(emb, labels, n);
        const Eigen::VectorXd query = randn<double>({d}, rng).data.matrix();
        const auto p = class_probabilities<double>(query, protos);
        const auto ref = oracle_probabilities(emb, labels, query, n);
        REQUIRE(p.size() == n);
        for (int c = 0; c < n; ++c) CHECK(std::abs(p[c] - ref[std::size_t(c)]) < 1e-9);
        CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    }
}

TEST_CASE("hand-computed probability") {
    std::vector<Prototype<double>> protos{{0, Eigen::VectorXd::Constant(1, 1.0)}, {1, Eigen::VectorXd::Constant(1, 4.0)}};
    const auto p = class_probabilities<double>(Eigen::VectorXd::Zero(1), protos);
    CHECK(p[0] == doctest::Approx(0.9526).epsilon(1e-4));
    const auto sq = class_probabilities<double>(Eigen::VectorXd::Zero(1), protos, true);
    CHECK(sq[0] == doctest::Approx(1.0 / (1.0 + std::exp(-15.0))));
    CHECK_THROWS_AS(compute_prototypes<double>(RowMatrix<double>::Zero(2, 1), {0, 0}, 2), PreconditionError);
    CHECK_THROWS_AS(class_probabilities<double>(Eigen::VectorXd::Zero(2), protos), ShapeError);
}

TEST_CASE("episode logits match the image-level API") {
    Rng rng(12);
    Backbone<double> net(small_backbone(), rng);
    auto ep = random_episode(4, 2, 3, 0, 8, rng);
    EpisodeOptions opt;
    opt.augmentation = Augmentation::none;
    const Backbone<double>& frozen = net;
    const auto out = run_episode<double>(ep, frozen, static_cast<const FusionNet<double>*>(nullptr), opt, false, rng);
    const RowMatrix<double> probs = softmax_rows<double>(out.logits.value().matrix());

    AugmentedSupportSet<double> set;
    set.n = 4;
    for (Index i = 0; i < ep.support.dim(0); ++i)
        set.entries.push_back({image_from_batch(ep.support, i), ep.support_labels[std::size_t(i)], Origin::real});
    const auto protos = compute_prototypes(set, net);
    for (Index i = 0; i < ep.query.dim(0); ++i) {
        const auto p = classify_query(image_from_batch(ep.query, i), protos, net);
        CHECK((p.transpose() - probs.row(i)).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("augmented support sizes and origins") {
    Rng rng(13);
    FusionNet<double> fusion(small_fusion(), rng);
    EpisodeOptions opt;

    SUBCASE("5-way 1-shot, one fused image each") {
        const auto ep = random_episode(5, 1, 2, 1, 8, rng);
        const auto set = augment_support<double>(ep, &fusion, opt, rng);
        CHECK(set.size() == 10);
        CHECK(std::count_if(set.entries.begin(), set.entries.end(), [](const auto& e) { return e.origin == Origin::fused; }) == 5);
        const auto labels = set.labels();
        for (int c = 0; c < 5; ++c) CHECK(std::count(labels.begin(), labels.end(), c) == 2);
    }
    SUBCASE("5-way 1-shot with ten fused images each") {
        opt.n_aug = 10;
        const auto ep = random_episode(5, 1, 2, 10, 8, rng);
        CHECK(augment_support<double>(ep, &fusion, opt, rng).size() == 55);
    }
    SUBCASE("n_aug 0 keeps the real support") {
        opt.n_aug = 0;
        const auto ep = random_episode(5, 5, 2, 0, 8, rng);
        const auto set = augment_support<double>(ep, &fusion, opt, rng);
        CHECK(set.size() == 25);
        CHECK(std::all_of(set.entries.begin(), set.entries.end(), [](const auto& e) { return e.origin == Origin::real; }));
    }
    SUBCASE("fused images lie between original and generated") {
        const auto ep = random_episode(3, 2, 1, 1, 8, rng);
        const auto set = augment_support<double>(ep, &fusion, opt, rng);
        for (std::size_t i = 6; i < set.size(); ++i) {
            const auto a = image_from_batch(ep.support, ep.generated_source[i - 6]);
            const auto b = image_from_batch(ep.generated, Index(i - 6));
            CHECK((set.entries[i].image.data >= a.data.min(b.data) - 1e-12).all());
            CHECK((set.entries[i].image.data <= a.data.max(b.data) + 1e-12).all());
        }
    }
    SUBCASE("baseline augmentations") {
        const auto ep = random_episode(3, 2, 1, 2, 8, rng);
        opt.n_aug = 2;
        opt.augmentation = Augmentation::flip;
        const auto flip = augment_support<double>(ep, nullptr, opt, rng);
        CHECK(flip.size() == 12);
        CHECK(flip.entries[7].image.at(0, 0, 1) == image_from_batch(ep.support, 1).at(0, 7, 1));
        opt.augmentation = Augmentation::finetunegan;
        const auto gan = augment_support<double>(ep, nullptr, opt, rng);
        CHECK(gan.size() == 18);
        CHECK((gan.entries[17].image.data == image_from_batch(ep.generated, 11).data).all());
        opt.augmentation = Augmentation::mixup;
        CHECK(augment_support<double>(ep, nullptr, opt, rng).entries[10].origin == Origin::mixed);
        opt.augmentation = Augmentation::gaussian;
        CHECK_THROWS_AS(augment_support<double>(ep, nullptr, opt, rng), PreconditionError);
        opt.augmentation = Augmentation::fusion;
        CHECK_THROWS_AS(augment_support<double>(ep, nullptr, opt, rng), PreconditionError);
        opt.n_aug = 3;
        CHECK_THROWS_AS(augment_support<double>(ep, &fusion, opt, rng), AugmentationError);
    }
}

TEST_CASE("gaussian copies enter the prototypes") {
    Rng rng(14);
    Backbone<double> net(small_backbone(), rng);
    const auto ep = random_episode(3, 2, 2, 0, 8, rng);
    EpisodeOptions opt;
    opt.augmentation = Augmentation::gaussian;
    opt.n_aug = 4;
    opt.gaussian_sigma = 0;
    const Backbone<double>& frozen = net;
    const auto noisy = run_episode<double>(ep, frozen, static_cast<const FusionNet<double>*>(nullptr), opt, false, rng);
    opt.augmentation = Augmentation::none;
    const auto plain = run_episode<double>(ep, frozen, static_cast<const FusionNet<double>*>(nullptr), opt, false, rng);
    CHECK((noisy.logits.value().data - plain.logits.value().data).abs().maxCoeff() < 1e-12);
}

TEST_CASE("episode loss gradient w.r.t. the fusion head") {
    Rng rng(15);
    Backbone<double> net(small_backbone(), rng);
    FusionNet<double> fusion(small_fusion(), rng);
    const auto ep = random_episode(3, 1, 2, 2, 8, rng);
    EpisodeOptions opt;
    opt.n_aug = 2;
    const auto gc = check_gradients(
        [&] {
            Rng local(7);
            return run_episode<double>(ep, net, &fusion, opt, true, local).loss;
        },
        {fusion.head().weight.var(), fusion.head().bias.var()});
    CHECK(gc.analytic_norm > 0);
    CHECK(gc.rel_error < 1e-4);
}

TEST_CASE("generator parameters receive no gradient from the episode loss") {
    Rng rng(16);
    GeneratorConfig gc;
    gc.noise_dim = 4;
    gc.embed_dim = 2;
    gc.resolution = 8;
    gc.widths = {4, 4};
    Generator<double> gen(gc, rng);
    Backbone<double> net(small_backbone(), rng);
    FusionNet<double> fusion(small_fusion(), rng);
    auto ep = random_episode(2, 1, 1, 1, 8, rng);
    // Variants produced with gradient recording on, as if straight from the generator.
    LatentCode<double> z{randn<double>({4}, rng).data.matrix(), gen.class_embedding(0)};
    const Var<double> produced = gen.forward(Var<double>(z.as_tensor()), false);
    ep.generated = concat_rows<double>({produced, produced}).value();
    for (const auto& p : gen.parameters()) REQUIRE(p.var.requires_grad());

    const auto out = run_episode<double>(ep, net, &fusion, EpisodeOptions{}, true, rng);
    backward(out.loss);
    for (const auto& p : gen.parameters()) CHECK_FALSE(p.var.has_grad());
    CHECK(fusion.head().weight.var().has_grad());
    CHECK(out.logits.dim(0) == 2);
}

TEST_CASE("baselines") {
    SUBCASE("nearest neighbour breaks ties toward the lowest class") {
        RowMatrix<double> s(3, 1), q(1, 1);
        s << 1, -1, 3;
        q << 0;
        CHECK(baseline_classifiers<double>(s, {2, 1, 0}, q, BaselineKind::nn) == std::vector<int>{1});
        CHECK(baseline_classifiers<double>(s, {1, 2, 0}, q, BaselineKind::nn) == std::vector<int>{1});
    }
    SUBCASE("1-shot nearest neighbour equals the prototype argmax") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            const RowMatrix<double> s = randn<double>({5, 4}, rng).matrix(), q = randn<double>({10, 4}, rng).matrix();
            const std::vector<int> labels{0, 1, 2, 3, 4};
            const auto nn = baseline_classifiers<double>(s, labels, q, BaselineKind::nn);
            const auto protos = compute_prototypes<double>(s, labels, 5);
            for (Index i = 0; i < q.rows(); ++i) {
                Index arg;
                class_probabilities<double>(q.row(i).transpose(), protos).maxCoeff(&arg);
                CHECK(nn[std::size_t(i)] == int(arg));
            }
        }
    }
    SUBCASE("regression baselines separate clustered classes") {
        Rng rng(18);
        const int n = 4, per = 5;
        RowMatrix<double> centres = 4 * randn<double>({n, 6}, rng).matrix();
        RowMatrix<double> s(n * per, 6), q(n * 3, 6);
        std::vector<int> ls, lq;
        for (int c = 0; c < n; ++c) {
            for (int i = 0; i < per; ++i) {
                s.row(c * per + i) = centres.row(c) + 0.3 * randn<double>({1, 6}, rng).matrix();
                ls.push_back(c);
            }
            for (int i = 0; i < 3; ++i) {
                q.row(c * 3 + i) = centres.row(c) + 0.3 * randn<double>({1, 6}, rng).matrix();
                lq.push_back(c);
            }
        }
        CHECK(baseline_classifiers<double>(s, ls, q, BaselineKind::logistic_ova) == lq);
        CHECK(baseline_classifiers<double>(s, ls, q, BaselineKind::softmax_reg) == lq);
        CHECK(baseline_classifiers<double>(s, ls, q, BaselineKind::nn) == lq);
    }
    SUBCASE("degenerate support") {
        RowMatrix<double> s = RowMatrix<double>::Ones(2, 2), q = RowMatrix<double>::Ones(1, 2);
        CHECK_THROWS_AS(baseline_classifiers<double>(s, {0, 0}, q, BaselineKind::softmax_reg), PreconditionError);
        CHECK_THROWS_AS(baseline_classifiers<double>(s, {0}, q, BaselineKind::nn), ShapeError);
    }
}

TEST_CASE("load_episode draws cached variants") {
    metairnet::testing::TempDir dir;
    metairnet::testing::make_image_tree(dir / "data", 3, 4, 8);
    const auto index = index_classes(dir / "data", {"c0", "c1", "c2"});
    const auto ep = sample_episode(index, 3, 2, 1, 5);
    ImageStore store(8);
    Rng rng(1);

    const auto plain = load_episode(ep, index, store, dir / "cache", 0, rng);
    CHECK(plain.support.shape == Shape{6, 3, 8, 8});
    CHECK(plain.query.dim(0) == 3);
    CHECK(plain.generated.empty());
    try {
        load_episode(ep, index, store, dir / "cache", 2, rng);
        FAIL("expected AugmentationError");
    } catch (const AugmentationError& e) {
        CHECK(std::string(e.what()).find(index.classes[ep.support[0].class_index].images[ep.support[0].image_index].path) !=
              std::string::npos);
    }

    GeneratorConfig gc;
    gc.noise_dim = 4;
    gc.embed_dim = 2;
    gc.resolution = 8;
    gc.widths = {4, 4};
    Rng grng(2);
    CacheConfig cc;
    cc.root = dir / "cache";
    cc.adapt.steps = 1;
    cc.adapt.n_variants = 3;
    cc.perceptual_width = 4;
    const auto built = build_generation_cache(index, Generator<float>(gc, grng), cc);
    const auto full = load_episode(ep, built.index, store, cc.root, 3, rng);
    CHECK(full.generated.dim(0) == 18);
    CHECK(full.generated_source.front() == 0);
    CHECK(full.generated_source.back() == 5);
    // Three variants drawn from three: all distinct.
    for (Index s = 0; s < 6; ++s) {
        const auto a = image_from_batch(full.generated, 3 * s), b = image_from_batch(full.generated, 3 * s + 1);
        CHECK((a.data != b.data).any());
    }
    CHECK(load_episode(ep, built.index, store, cc.root, 5, rng).generated.dim(0) == 30);
}

TEST_CASE("prototype and probability properties") {
    RowMatrix<double> e(2, 2);
    e << 0, 0, 2, 4;
    const auto p = compute_prototypes<double>(e, {0, 0}, 1);
    CHECK(p[0].centroid == Eigen::Vector2d(1, 2));
    RowMatrix<double> swapped(2, 2);
    swapped << 2, 4, 0, 0;
    CHECK(compute_prototypes<double>(swapped, {0, 0}, 1)[0].centroid == p[0].centroid);

    std::vector<Prototype<double>> square{{0, Eigen::Vector2d(1, 0)}, {1, Eigen::Vector2d(-1, 0)},
                                          {2, Eigen::Vector2d(0, 1)}, {3, Eigen::Vector2d(0, -1)}};
    const auto uniform = class_probabilities<double>(Eigen::Vector2d::Zero(), square);
    CHECK((uniform.array() - 0.25).abs().maxCoeff() < 1e-12);

    std::vector<Prototype<double>> two{{0, Eigen::Vector2d(0, 0)}, {1, Eigen::Vector2d(3, 0)}};
    CHECK(class_probabilities<double>(Eigen::Vector2d(3, 0), two)[1] == doctest::Approx(0.9526).epsilon(1e-4));

    Rng rng(19);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Prototype<double>> protos;
        for (int c = 0; c < 5; ++c) protos.push_back({c, randn<double>({3}, rng).data.matrix()});
        const Eigen::VectorXd q = randn<double>({3}, rng).data.matrix();
        const auto base = class_probabilities<double>(q, protos);
        CHECK(std::abs(base.sum() - 1) < 1e-6);
        auto perm = protos;
        std::reverse(perm.begin(), perm.end());
        const auto reversed = class_probabilities<double>(q, perm);
        for (int c = 0; c < 5; ++c) CHECK(std::abs(reversed[4 - c] - base[c]) < 1e-12);
        // Shifting every distance by the same constant.
        Eigen::VectorXd d(5);
        for (int c = 0; c < 5; ++c) d[c] = (q - protos[std::size_t(c)].centroid).norm();
        const Eigen::VectorXd shifted = (-(d.array() + 2.5)).exp().matrix();
        CHECK(((shifted / shifted.sum()) - base).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("episode loss limits") {
    Rng rng(20);
    SUBCASE("untrained backbone, 5-way, is close to ln 5") {
        Backbone<double> net(small_backbone(), rng);
        double total = 0;
        const int trials = 20;
        EpisodeOptions opt;
        opt.augmentation = Augmentation::none;
        for (int t = 0; t < trials; ++t) {
            const auto ep = random_episode(5, 1, 4, 0, 8, rng);
            total += run_episode<double>(ep, net, static_cast<FusionNet<double>*>(nullptr), opt, true, rng).loss.item();
        }
        CHECK(total / trials == doctest::Approx(std::log(5.0)).epsilon(0.1));
    }
    SUBCASE("separable logits drive the loss to zero") {
        Tensor<double> logits({3, 3});
        logits.matrix() << 0, -100, -100, -100, 0, -100, -100, -100, 0;
        CHECK(cross_entropy(Var<double>(logits), {0, 1, 2}).item() < 1e-12);
    }
    SUBCASE("flip is an involution") {
        const auto ep = random_episode(2, 1, 1, 0, 6, rng);
        const auto twice = flip_horizontal(flip_horizontal(Var<double>(ep.support))).value();
        CHECK((twice.data == ep.support.data).all());
    }
}
