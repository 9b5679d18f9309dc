#include "doctest.h"

#include <algorithm>
#include <limits>
#include <numeric>

#include "gradcheck.hpp"
#include "metairnet/adaptation.hpp"
#include "metairnet/synthetic.hpp"

using namespace metairnet;
using metairnet::testing::check_gradients;

namespace {

GeneratorConfig mini_config(Index resolution = 8) {
    GeneratorConfig c;
    c.noise_dim = 5;
    c.embed_dim = 3;
    c.num_classes = 2;
    c.resolution = resolution;
    c.widths = {6, 4};
    return c;
}

GeneratorConfig small_config() {
    GeneratorConfig c;
    c.noise_dim = 64;
    c.embed_dim = 8;
    c.num_classes = 4;
    c.resolution = 16;
    c.widths = {32, 16};
    return c;
}

std::string serialize(const ParamList<float>& params) {
    Checkpoint c{nlohmann::json::object(), {}};
    append_parameters<float>(c, params, {});
    return serialize_checkpoint(c);
}

double brute_force_em(const std::vector<double>& z, std::vector<double> r) {
    std::sort(r.begin(), r.end());
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (std::size_t i = 0; i < z.size(); ++i) s += std::abs(z[i] - r[i]);
        best = std::min(best, s / double(z.size()));
    } while (std::next_permutation(r.begin(), r.end()));
    return best;
}

Var<double> row(const std::vector<double>& v) {
    Tensor<double> t({1, Index(v.size())});
    for (std::size_t i = 0; i < v.size(); ++i) t.data[Index(i)] = v[i];
    return Var<double>(t);
}

Tensor<double> vec(const std::vector<double>& v) {
    Tensor<double> t({Index(v.size())});
    for (std::size_t i = 0; i < v.size(); ++i) t.data[Index(i)] = v[i];
    return t;
}

Image<float> target_for(const GeneratorConfig& c, int k) {
    return render_synthetic(class_style(k, 1), c.resolution, 1000 + std::uint64_t(k));
}

}  // namespace

TEST_CASE("earth-mover regularizer") {
    Rng rng(1);
    SUBCASE("zero on identical samples and on any permutation of them") {
        const auto r = randn<double>({7}, rng);
        CHECK(em_regularizer(Var<double>(r), r).item() == 0.0);
        Tensor<double> shuffled = r;
        std::reverse(shuffled.data.data(), shuffled.data.data() + 7);
        CHECK(em_regularizer(Var<double>(shuffled), r).item() == 0.0);
    }
    SUBCASE("constant shift costs |c|") {
        const auto r = randn<double>({6}, rng);
        Tensor<double> z = r;
        z.data += 0.375;
        CHECK(em_regularizer(Var<double>(z), r).item() == doctest::Approx(0.375).epsilon(1e-12));
        z.data -= 1.0;
        CHECK(em_regularizer(Var<double>(z), r).item() == doctest::Approx(0.625).epsilon(1e-12));
    }
    SUBCASE("sorted matching equals the best assignment over all permutations") {
        std::uniform_int_distribution<int> eighths(-24, 24);
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t d = 1 + std::size_t(trial % 6);
            std::vector<double> z(d), r(d);
            for (std::size_t i = 0; i < d; ++i) {
                z[i] = eighths(rng) / 8.0;
                r[i] = eighths(rng) / 8.0;
            }
            REQUIRE(em_regularizer(row(z), vec(r)).item() == brute_force_em(z, r));
        }
    }
    SUBCASE("permutation invariant and nonnegative") {
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> z(9), r(9);
            for (auto& x : z) x = std::normal_distribution<double>()(rng);
            for (auto& x : r) x = std::normal_distribution<double>()(rng);
            const double base = em_regularizer(row(z), vec(r)).item();
            CHECK(base >= 0);
            std::shuffle(z.begin(), z.end(), rng);
            CHECK(em_regularizer(row(z), vec(r)).item() == doctest::Approx(base).epsilon(1e-14));
        }
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(em_regularizer(row({1, 2, 3}), vec({1, 2})), ShapeError);
    }
}

TEST_CASE("reconstruction loss terms") {
    const auto perceptual = PerceptualLoss<double>::random(1, {0, 1}, 3);
    AdaptConfig cfg;

    SUBCASE("hand-built 2x2 images give l1 = 0.5") {
        Tensor<double> gen({1, 1, 2, 2}), tgt({1, 1, 2, 2});
        gen.data << 0, 0, 1, 1;
        tgt.data << 1, 1, 1, 1;
        const auto terms = reconstruction_loss(Var<double>(gen), tgt, perceptual, perceptual.features(tgt),
                                               row({0.5, -0.5}), vec({0.5, -0.5}), cfg);
        CHECK(terms.l1.item() == 0.5);
        CHECK(terms.em.item() == 0.0);
        CHECK(terms.perceptual.item() >= 0.0);
    }
    SUBCASE("identical inputs with z on the reference sample") {
        Rng rng(4);
        const auto img = randn<double>({1, 1, 6, 6}, rng);
        auto r = randn<double>({5}, rng);
        Tensor<double> z({1, 5});
        z.data = r.data;
        std::sort(z.data.data(), z.data.data() + 5);
        const auto t = reconstruction_loss(Var<double>(img), img, perceptual, perceptual.features(img), Var<double>(z),
                                           r, cfg);
        CHECK(t.l1.item() == 0.0);
        CHECK(t.perceptual.item() == 0.0);
        CHECK(t.em.item() == 0.0);
        CHECK(t.total.item() == 0.0);
    }
    SUBCASE("zero weights leave exactly the L1 term") {
        Rng rng(5);
        AdaptConfig zero = cfg;
        zero.lambda_p = zero.lambda_z = 0;
        const auto a = randn<double>({1, 1, 4, 4}, rng), b = randn<double>({1, 1, 4, 4}, rng);
        const auto t = reconstruction_loss(Var<double>(a), b, perceptual, perceptual.features(b),
                                           Var<double>(randn<double>({1, 3}, rng)), randn<double>({3}, rng), zero);
        CHECK(t.total.item() == t.l1.item());
    }
    SUBCASE("total equals the weighted sum of the reported terms") {
        Rng rng(6);
        std::uniform_real_distribution<double> w(0, 2);
        for (int trial = 0; trial < 50; ++trial) {
            AdaptConfig c = cfg;
            c.lambda_p = w(rng);
            c.lambda_z = w(rng);
            const auto a = randn<double>({1, 1, 8, 8}, rng), b = randn<double>({1, 1, 8, 8}, rng);
            const auto t = reconstruction_loss(Var<double>(a), b, perceptual, perceptual.features(b),
                                               Var<double>(randn<double>({1, 4}, rng)), randn<double>({4}, rng), c);
            const auto rec = record(t);
            CHECK(std::abs(rec.total - (rec.l1 + c.lambda_p * rec.perceptual + c.lambda_z * rec.em)) < 1e-6);
            CHECK(rec.l1 >= 0);
            CHECK(rec.perceptual >= 0);
            CHECK(rec.em >= 0);
        }
    }
    SUBCASE("shape mismatch") {
        Tensor<double> a({1, 1, 2, 2}), b({1, 1, 3, 3});
        CHECK_THROWS_AS(reconstruction_loss(Var<double>(a), b, perceptual, perceptual.features(b), row({0}),
                                            vec({0}), cfg),
                        ShapeError);
    }
}

TEST_CASE("loss gradient w.r.t. latent and BN parameters matches finite differences") {
    Rng rng(7);
    Generator<double> g(mini_config(), rng);
    for (auto& b : g.buffers()) b.tensor->data = rand_uniform<double>(b.tensor->shape, rng, 0.5, 1.5).data;
    const auto view = bn_parameter_view(g);
    set_requires_grad(view.other, false);
    const auto perceptual = PerceptualLoss<double>::random(3, {0, 1}, 8, 4);
    const auto target = rand_uniform<double>({1, 3, 8, 8}, rng, -1, 1);
    const auto features = perceptual.features(target);
    const auto r = randn<double>({8}, rng);
    Var<double> z(randn<double>({1, 8}, rng), true);
    AdaptConfig cfg;
    cfg.lambda_p = 0.7;
    cfg.lambda_z = 0.3;

    std::vector<Var<double>> wrt{z};
    for (const auto& p : view.bn) wrt.push_back(p.var);
    const auto gc = check_gradients(
        [&] { return reconstruction_loss(g.forward(z, false), target, perceptual, features, z, r, cfg).total; }, wrt);
    CHECK(gc.analytic_norm > 0);
    CHECK(gc.rel_error < 1e-4);
}

TEST_CASE("adapt") {
    Rng rng(8);
    const auto cfg = small_config();
    Generator<float> g(cfg, rng);
    const auto perceptual = PerceptualLoss<float>::random(3, {0, 1}, 9);
    const auto target = target_for(cfg, 2);
    AdaptConfig ac;
    ac.steps = 60;

    SUBCASE("steps = 0 is rejected") {
        ac.steps = 0;
        CHECK_THROWS_AS(adapt(g, target, ac, 1, perceptual), PreconditionError);
    }
    SUBCASE("wrong target resolution") {
        CHECK_THROWS_AS(adapt(g, render_synthetic(class_style(0, 1), 8, 1), ac, 1, perceptual), ShapeError);
    }
    SUBCASE("non-finite target reports the step") {
        auto bad = target;
        bad.data[5] = std::numeric_limits<float>::quiet_NaN();
        try {
            adapt(g, bad, ac, 1, perceptual);
            FAIL("expected an adaptation error");
        } catch (const AdaptationError& e) {
            CHECK(e.iteration() == 0);
        }
    }
    SUBCASE("trace, determinism and frozen weights") {
        const auto before = serialize(bn_parameter_view(g).other);
        const auto bn_before = flatten(bn_parameter_view(g).bn);
        const auto a = adapt(g, target, ac, 42, perceptual);
        const auto b = adapt(g, target, ac, 42, perceptual);
        CHECK(a.loss_trace.size() == 60);
        CHECK(std::isfinite(a.final_loss.total));
        CHECK(a.final_loss.total < a.loss_trace.front().total);
        CHECK_FALSE(a.warning);
        for (std::size_t i = 0; i < a.loss_trace.size(); ++i) CHECK(a.loss_trace[i].total == b.loss_trace[i].total);
        CHECK(serialize(bn_parameter_view(a.generator).other) == before);
        CHECK(serialize(bn_parameter_view(g).other) == before);
        CHECK((flatten(bn_parameter_view(g).bn).array() == bn_before.array()).all());
        CHECK_FALSE((a.tuned_bn.array() == bn_before.array()).all());
        CHECK((a.reconstruction.data == a.generator.generate(a.tuned_z).data).all());
    }
    SUBCASE("a zero learning rate run is flagged") {
        ac.lr_z = ac.lr_bn = 0;
        ac.lambda_z = 0;
        CHECK(adapt(g, target, ac, 3, perceptual).warning);
    }
}

TEST_CASE("500 default steps more than halve L1 on the reference toy setup") {
    GeneratorConfig cfg;
    cfg.resolution = 32;
    cfg.num_classes = 5;
    Rng rng(derive_seed(3, "pretrain"));
    Generator<float> g(cfg, rng);
    const auto perceptual = PerceptualLoss<float>::random(3, {0, 1}, 7);
    for (int k : {0, 1}) {
        const auto r = adapt(g, target_for(cfg, k), AdaptConfig{}, 11 + std::uint64_t(k), perceptual);
        CHECK(r.loss_trace.size() == 500);
        CHECK(r.final_loss.l1 < 0.5 * r.loss_trace.front().l1);
    }
}

TEST_CASE("variants") {
    Rng rng(9);
    const auto cfg = small_config();
    Generator<float> g(cfg, rng);
    const auto perceptual = PerceptualLoss<float>::random(3, {0, 1}, 9);
    AdaptConfig ac;
    ac.steps = 20;
    const auto res = adapt(g, target_for(cfg, 1), ac, 5, perceptual);

    SUBCASE("epsilon 0 reproduces the reconstruction") {
        const auto v = sample_variants(res, 0.0, 4, 1);
        REQUIRE(v.size() == 4);
        for (const auto& im : v) CHECK((im.data == res.reconstruction.data).all());
    }
    SUBCASE("ten variants per image") {
        CHECK(sample_variants(res, ac.epsilon_scale, 10, 1).size() == 10);
    }
    SUBCASE("spread grows with epsilon") {
        const double a = mean_pairwise_distance(sample_variants(res, 0.01, 10, 2));
        const double b = mean_pairwise_distance(sample_variants(res, 0.1, 10, 2));
        const double c = mean_pairwise_distance(sample_variants(res, 0.5, 10, 2));
        CHECK(0 < a);
        CHECK(a < b);
        CHECK(b < c);
    }
}
