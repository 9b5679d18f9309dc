#include "doctest.h"

#include "metairnet/cache.hpp"
#include "metairnet/fsutil.hpp"
#include "metairnet/harness.hpp"
#include "metairnet/synthetic.hpp"
#include "testutil.hpp"

using namespace metairnet;
using metairnet::testing::TempDir;

namespace {

std::vector<ClassId> ids(int k) {
    std::vector<ClassId> out;
    for (int i = 0; i < k; ++i) out.push_back("c" + std::to_string(i));
    return out;
}

RunConfig tiny_run() {
    RunConfig c;
    c.n = 3;
    c.m = 1;
    c.q = 2;
    c.epochs = 1;
    c.episodes_train = 10;
    c.episodes_val = 4;
    c.episodes_eval = 6;
    c.backbone = {3, 4, 2};
    c.fusion = {{3, 4, 2}, 3};
    c.resolution = 8;
    c.seed = 9;
    return c;
}

struct World {
    TempDir dir;
    DatasetSplits splits;
    std::filesystem::path cache;

    World() {
        SyntheticConfig sc;
        sc.base_classes = 4;
        sc.val_classes = 3;
        sc.novel_classes = 3;
        sc.images_per_class = 5;
        sc.resolution = 8;
        sc.seed = 3;
        write_synthetic_dataset(dir / "data", dir / "split.txt", sc);
        splits = load_dataset(dir / "data", dir / "split.txt");
        cache = dir / "cache";
    }

    void build_cache() {
        GeneratorConfig gc;
        gc.noise_dim = 4;
        gc.embed_dim = 2;
        gc.resolution = 8;
        gc.widths = {4, 4};
        Rng rng(1);
        const Generator<float> g(gc, rng);
        CacheConfig cc;
        cc.root = cache;
        cc.adapt.steps = 1;
        cc.adapt.n_variants = 2;
        cc.perceptual_width = 4;
        for (auto* split : {&splits.base, &splits.val, &splits.novel}) *split = build_generation_cache(*split, g, cc).index;
    }
};

TrainOptions into(const std::filesystem::path& dir, bool resume = false) {
    TrainOptions o;
    o.out_dir = dir;
    o.resume = resume;
    return o;
}

}  // namespace

TEST_CASE("confidence interval formula") {
    const auto r = summarize("hand", {50, 60, 70});
    CHECK(r.mean == doctest::Approx(60.0).epsilon(1e-12));
    CHECK(std::abs(r.ci95 - 11.316) < 1e-3);
    CHECK(summarize("one", {42}).ci95 == 0);
    CHECK_THROWS_AS(summarize("none", {}), PreconditionError);
}

TEST_CASE("stub predictors over 1000 episodes") {
    TempDir dir;
    metairnet::testing::make_image_tree(dir / "data", 8, 17, 4);
    const auto index = index_classes(dir / "data", ids(8));
    EvalSpec spec{5, 1, 16, 1000, 3, "test", 1};

    const auto perfect = summarize("oracle", run_episodes(index, spec, [](const Episode& ep, std::uint64_t) {
        std::vector<int> out;
        for (const auto& it : ep.query) out.push_back(it.label);
        return out;
    }));
    CHECK(perfect.mean == 100.0);
    CHECK(perfect.ci95 == 0.0);

    const Predictor guess = [](const Episode& ep, std::uint64_t seed) {
        Rng rng(seed);
        std::uniform_int_distribution<int> u(0, ep.n - 1);
        std::vector<int> out;
        for (std::size_t i = 0; i < ep.query.size(); ++i) out.push_back(u(rng));
        return out;
    };
    const auto random = summarize("random", run_episodes(index, spec, guess));
    CHECK(random.accuracies.size() == 1000);
    CHECK(std::abs(random.mean - 20.0) <= 1.5);

    SUBCASE("threads do not change results") {
        auto threaded = spec;
        threaded.threads = 3;
        CHECK(run_episodes(index, threaded, guess) == random.accuracies);
    }
    SUBCASE("forbidden classes are caught") {
        CHECK_THROWS_AS(run_episodes(index, spec, guess, {"c3"}), ValidationError);
    }
    SUBCASE("predictor size mismatch") {
        CHECK_THROWS_AS(run_episodes(index, spec, [](const Episode&, std::uint64_t) { return std::vector<int>{0}; }),
                        ShapeError);
    }
}

TEST_CASE("run config") {
    RunConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.method() == "metairnet");
    nlohmann::json j = c;
    CHECK(j.get<RunConfig>() == c);

    SUBCASE("partial override") {
        RunConfig d;
        from_json(nlohmann::json{{"n", 3}, {"augmentation", "flip"}}, d);
        CHECK(d.n == 3);
        CHECK(d.m == 1);
        CHECK(d.method() == "protonet+flip");
    }
    SUBCASE("invalid values") {
        auto bad = c;
        bad.episodes_eval = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = c;
        bad.n_aug = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad.augmentation = Augmentation::none;
        CHECK_NOTHROW(bad.validate());
        CHECK(bad.method() == "protonet");
        RunConfig e;
        CHECK_THROWS_AS(from_json(nlohmann::json{{"shots", 5}}, e), UsageError);
        CHECK_THROWS_AS(from_json(nlohmann::json{{"augmentation", "rotate"}}, e), UsageError);
    }
}

TEST_CASE("report table") {
    auto a = summarize("metairnet", {50, 60, 70}, tiny_run());
    auto b = summarize("protonet", {40, 50}, tiny_run());
    const auto table = report({a, b});
    CHECK(table.json.at("rows").size() == 2);
    CHECK(table.mismatches.empty());
    CHECK(table.text.find("metairnet") != std::string::npos);
    CHECK(table.text.find("60.00 +/- 11.32") != std::string::npos);

    auto other = tiny_run();
    other.m = 5;
    b.config = other;
    const auto flagged = report({a, b});
    CHECK(flagged.mismatches == std::vector<std::string>{"m"});
    CHECK(flagged.text.find("warning") != std::string::npos);
    CHECK_THROWS_AS(report({}), UsageError);

    nlohmann::json j = a;
    CHECK(same_results(j.get<EvalReport>(), a));
}

TEST_CASE("meta-training and testing") {
    World world;
    auto cfg = tiny_run();

    SUBCASE("refuses an incomplete cache") {
        try {
            meta_train(cfg, world.splits.base, world.splits.val, world.cache);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(world.splits.base.classes[0].images[0].path) != std::string::npos);
        }
    }

    world.build_cache();
    const auto out = world.dir / "run";
    const auto trained = meta_train(cfg, world.splits.base, world.splits.val, world.cache, into(out));
    REQUIRE(trained.history.size() == 1);
    CHECK(trained.history[0].losses.size() == 10);
    CHECK(std::isfinite(trained.history[0].mean_loss));
    CHECK(std::filesystem::exists(out / "model.ckpt"));
    CHECK(std::filesystem::exists(out / "state.ckpt"));
    CHECK(read_file(out / "metrics.jsonl").find("\"val_accuracy\"") != std::string::npos);

    SUBCASE("identical seeds give identical logs") {
        const auto again = meta_train(cfg, world.splits.base, world.splits.val, world.cache, into(world.dir / "run2"));
        CHECK(read_file(out / "metrics.jsonl") == read_file(world.dir / "run2/metrics.jsonl"));
    }
    SUBCASE("checkpointed model evaluates like the in-memory one") {
        const auto loaded = load_model(out / "model.ckpt");
        CHECK(loaded.config == cfg);
        const auto a = meta_test(trained.best, world.splits.novel, world.cache, world.splits.spec.base);
        const auto b = meta_test(loaded, world.splits.novel, world.cache, world.splits.spec.base);
        CHECK(same_results(a, b));
        CHECK(a.accuracies.size() == 6);
        CHECK(a.method == "metairnet");
        CHECK_THROWS_AS(meta_test(loaded, world.splits.novel, world.cache, world.splits.spec.novel), ValidationError);
    }
    SUBCASE("resuming reproduces an uninterrupted run") {
        auto two = cfg;
        two.epochs = 2;
        const auto full = meta_train(two, world.splits.base, world.splits.val, world.cache, into(world.dir / "full"));
        meta_train(cfg, world.splits.base, world.splits.val, world.cache, into(world.dir / "part"));
        // Rewrite the stored config so the one-epoch state can continue under the two-epoch run.
        auto state = read_checkpoint(world.dir / "part/state.ckpt");
        state.descriptor["config"] = two;
        write_checkpoint(world.dir / "part/state.ckpt", state);
        const auto resumed =
            meta_train(two, world.splits.base, world.splits.val, world.cache, into(world.dir / "part", true));
        CHECK(read_file(world.dir / "full/metrics.jsonl") == read_file(world.dir / "part/metrics.jsonl"));
        CHECK(resumed.best_epoch == full.best_epoch);
    }
    SUBCASE("baseline methods") {
        auto proto = cfg;
        proto.augmentation = Augmentation::none;
        proto.n_aug = 0;
        const auto model = meta_train(proto, world.splits.base, world.splits.val, world.cache).best;
        CHECK(meta_test(model, world.splits.novel, world.cache).method == "protonet");
        for (auto kind : {Classifier::nn, Classifier::logistic_ova, Classifier::softmax_reg}) {
            auto variant = model;
            variant.config.classifier = kind;
            const auto r = meta_test(variant, world.splits.novel, world.cache);
            CHECK(r.mean >= 0);
            CHECK(r.mean <= 100);
        }
        for (auto aug : {Augmentation::flip, Augmentation::gaussian, Augmentation::mixup, Augmentation::finetunegan}) {
            auto c = cfg;
            c.augmentation = aug;
            const auto r = meta_train(c, world.splits.base, world.splits.val, world.cache);
            CHECK(std::isfinite(r.history[0].mean_loss));
        }
    }
}
