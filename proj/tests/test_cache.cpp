#include "doctest.h"

#include "metairnet/cache.hpp"
#include "metairnet/fsutil.hpp"
#include "testutil.hpp"

using namespace metairnet;
using metairnet::testing::TempDir;
using metairnet::testing::make_image_tree;

namespace {

Generator<float> tiny_generator() {
    GeneratorConfig c;
    c.noise_dim = 6;
    c.embed_dim = 2;
    c.num_classes = 2;
    c.resolution = 8;
    c.widths = {8, 4};
    Rng rng(1);
    return Generator<float>(c, rng);
}

CacheConfig tiny_cache(const std::filesystem::path& root) {
    CacheConfig c;
    c.root = root;
    c.adapt.steps = 3;
    c.adapt.n_variants = 10;
    c.perceptual_width = 4;
    c.seed = 17;
    return c;
}

}  // namespace

TEST_CASE("generation cache over 50 images") {
    TempDir dir;
    make_image_tree(dir / "data", 5, 10, 8);
    const auto index = index_classes(dir / "data", {"c0", "c1", "c2", "c3", "c4"});
    const auto g = tiny_generator();
    const auto cfg = tiny_cache(dir / "cache");

    const auto first = build_generation_cache(index, g, cfg);
    CHECK(first.summary.adapted == 50);
    CHECK(first.summary.variants_written == 500);
    CHECK(first.summary.failures.empty());
    CHECK(missing_cache_entries(first.index).empty());
    const auto& rec = first.index.classes[2].images[4];
    REQUIRE(rec.variants.size() == 10);
    CHECK(rec.variants[9] == "c2/img_04/variant_09.ppm");
    CHECK(read_image(cfg.root / rec.variants[0]).height == 8);
    const auto latent = read_cached_latent(cfg.root / rec.latent);
    CHECK(latent.dim() == g.config().latent_dim());
    const auto trace = nlohmann::json::parse(read_file(cache_entry_dir(cfg.root, rec.path) / "trace.json"));
    CHECK(trace.at("loss_trace").size() == 3);
    const auto manifest = nlohmann::json::parse(read_file(cfg.root / "manifest.json"));
    CHECK(manifest.at("entries").size() == 50);

    SUBCASE("re-running a complete cache does no work") {
        const auto again = build_generation_cache(index, g, cfg);
        CHECK(again.summary.adapted == 0);
        CHECK(again.summary.skipped == 50);
        CHECK(again.summary.variants_written == 0);
    }
    SUBCASE("a different configuration is refused") {
        auto other = cfg;
        other.adapt.steps = 4;
        CHECK_THROWS_AS(build_generation_cache(index, g, other), ValidationError);
    }
    SUBCASE("attach_cache sees the same entries") {
        const auto attached = attach_cache(index, cfg.root);
        CHECK(attached.classes[2].images[4].variants == rec.variants);
        CHECK(missing_cache_entries(index).size() == 50);
    }
}

TEST_CASE("an unreadable image is recorded as a failure") {
    TempDir dir;
    make_image_tree(dir / "data", 5, 10, 8);
    write_file_atomic(dir / "data/c3/img_07.ppm", "P6\n8 8\n255\nshort");
    const auto index = index_classes(dir / "data", {"c0", "c1", "c2", "c3", "c4"});
    const auto out = build_generation_cache(index, tiny_generator(), tiny_cache(dir / "cache"));
    CHECK(out.summary.adapted == 49);
    REQUIRE(out.summary.failures.size() == 1);
    CHECK(out.summary.failures[0].image == "c3/img_07.ppm");
    CHECK(missing_cache_entries(out.index) == std::vector<std::string>{"c3/img_07.ppm"});
    CHECK(to_json(out.summary).at("failure_count") == 1);
}

TEST_CASE("parallel cache building matches the serial result") {
    TempDir dir;
    make_image_tree(dir / "data", 2, 4, 8);
    const auto index = index_classes(dir / "data", {"c0", "c1"});
    auto serial = tiny_cache(dir / "serial");
    auto parallel = tiny_cache(dir / "parallel");
    parallel.threads = 3;
    build_generation_cache(index, tiny_generator(), serial);
    build_generation_cache(index, tiny_generator(), parallel);
    for (const auto& c : attach_cache(index, serial.root).classes)
        for (const auto& r : c.images)
            for (const auto& v : r.variants) CHECK(read_file(serial.root / v) == read_file(parallel.root / v));
}
