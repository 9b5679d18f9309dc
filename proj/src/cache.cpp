#include "metairnet/cache.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>
#include <thread>

#include "metairnet/fsutil.hpp"

namespace fs = std::filesystem;

namespace metairnet {

namespace {

std::string variant_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "variant_%02d.ppm", i);
    return buf;
}

std::string entry_rel(const std::string& source_path) {
    fs::path p(source_path);
    return (p.parent_path() / p.stem()).generic_string();
}

nlohmann::json cache_identity(const Generator<float>& g, const CacheConfig& c) {
    return {{"generator", g.config()}, {"adapt", c.adapt}, {"seed", c.seed}, {"perceptual_width", c.perceptual_width}};
}

std::vector<std::string> entry_variants(const fs::path& cache_root, const std::string& source_path) {
    const auto rel = entry_rel(source_path);
    const auto dir = cache_root / rel;
    std::vector<std::string> out;
    if (!fs::is_directory(dir) || !fs::exists(dir / "latent.ckpt")) return out;
    for (int i = 0;; ++i) {
        const auto name = variant_name(i);
        if (!fs::exists(dir / name)) break;
        out.push_back(rel + "/" + name);
    }
    return out;
}

void write_entry(const fs::path& target, const std::string& source, std::uint64_t seed, const AdaptResult<float>& res,
                 const std::vector<Image<float>>& variants) {
    const fs::path staging = staging_path(target);
    fs::create_directories(staging);
    for (std::size_t i = 0; i < variants.size(); ++i) write_image(staging / variant_name(int(i)), variants[i]);

    Checkpoint latent{{{"kind", "latent"}, {"source", source}, {"seed", seed}}, {}};
    auto as_tensor = [](const Vector<float>& v) { return Tensor<float>({v.size()}, v.array()); };
    latent.blobs.push_back(to_blob("noise", as_tensor(res.tuned_z.noise)));
    latent.blobs.push_back(to_blob("class_embedding", as_tensor(res.tuned_z.class_embedding)));
    latent.blobs.push_back(to_blob("bn", as_tensor(res.tuned_bn)));
    write_checkpoint(staging / "latent.ckpt", latent);

    const nlohmann::json trace{{"source", source},       {"seed", seed},
                               {"loss_trace", res.loss_trace}, {"final", res.final_loss},
                               {"warning", res.warning}};
    write_file_atomic(staging / "trace.json", trace.dump());

    fs::create_directories(target.parent_path());
    std::error_code ec;
    fs::rename(staging, target, ec);
    if (ec) {
        // Another writer completed the same entry first.
        fs::remove_all(staging, ec);
        if (!fs::is_directory(target)) throw Error("cannot publish cache entry " + target.string());
    }
}

void write_manifest(const fs::path& root, const DatasetIndex& index, const nlohmann::json& identity) {
    nlohmann::json entries = nlohmann::json::object();
    for (const auto& c : index.classes)
        for (const auto& r : c.images)
            if (!r.variants.empty()) entries[r.path] = r.variants;
    // Preserve entries of other splits built into the same cache.
    if (fs::exists(root / "manifest.json")) {
        try {
            const auto old = nlohmann::json::parse(read_file(root / "manifest.json"));
            const auto old_entries = old.value("entries", nlohmann::json::object());
            for (const auto& [k, v] : old_entries.items())
                if (!entries.contains(k)) entries[k] = v;
        } catch (const nlohmann::json::exception&) {
        }
    }
    write_file_atomic(root / "manifest.json", nlohmann::json{{"config", identity}, {"entries", entries}}.dump(1));
}

}  // namespace

nlohmann::json to_json(const CacheSummary& s) {
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : s.failures) failures.push_back({{"image", f.image}, {"reason", f.reason}});
    return {{"adapted", s.adapted},
            {"skipped", s.skipped},
            {"variants_written", s.variants_written},
            {"failure_count", s.failures.size()},
            {"failures", failures}};
}

fs::path cache_entry_dir(const fs::path& cache_root, const std::string& source_path) {
    return cache_root / entry_rel(source_path);
}

CacheBuild build_generation_cache(const DatasetIndex& index, const Generator<float>& generator,
                                  const CacheConfig& config) {
    config.adapt.validate();
    if (config.root.empty()) throw PreconditionError("generation cache root is empty");
    fs::create_directories(config.root);
    const auto identity = cache_identity(generator, config);
    if (fs::exists(config.root / "manifest.json")) {
        nlohmann::json old;
        try {
            old = nlohmann::json::parse(read_file(config.root / "manifest.json"));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("unreadable cache manifest in " + config.root.string() + ": " + e.what());
        }
        if (old.value("config", nlohmann::json()) != identity)
            throw ValidationError("cache at " + config.root.string() +
                                  " was built with a different generator or adaptation configuration");
    }

    const auto perceptual = PerceptualLoss<float>::random(generator.config().channels, config.adapt.perceptual_layers,
                                                          derive_seed(config.seed, "perceptual"),
                                                          config.perceptual_width);
    const Index res = generator.config().resolution;

    struct Job {
        const ImageRecord* record;
        fs::path source;
    };
    std::vector<Job> jobs;
    CacheBuild out;
    out.index = index;
    for (const auto& c : index.classes)
        for (const auto& r : c.images) {
            if (entry_variants(config.root, r.path).size() >= std::size_t(config.adapt.n_variants))
                ++out.summary.skipped;
            else
                jobs.push_back({&r, index.absolute(r)});
        }

    std::mutex mutex;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++) {
            const auto& job = jobs[j];
            const auto& src = job.record->path;
            try {
                Image<float> target = read_image(job.source);
                if (target.height != res || target.width != res) target = resize_bilinear(target, res, res);
                const std::uint64_t seed = derive_seed(config.seed, src);
                const auto result = adapt(generator, target, config.adapt, seed, perceptual);
                const auto variants =
                    sample_variants(result, config.adapt.epsilon_scale, config.adapt.n_variants, derive_seed(seed, "variants"));
                const auto dir = cache_entry_dir(config.root, src);
                if (fs::exists(dir)) fs::remove_all(dir);
                write_entry(dir, src, seed, result, variants);
                std::lock_guard lock(mutex);
                ++out.summary.adapted;
                out.summary.variants_written += variants.size();
            } catch (const std::exception& e) {
                std::lock_guard lock(mutex);
                out.summary.failures.push_back({src, e.what()});
            }
        }
    };
    const int threads = std::max(1, std::min<int>(config.threads, int(jobs.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    std::sort(out.summary.failures.begin(), out.summary.failures.end(),
              [](const CacheFailure& a, const CacheFailure& b) { return a.image < b.image; });

    out.index = attach_cache(index, config.root);
    write_manifest(config.root, out.index, identity);
    return out;
}

DatasetIndex attach_cache(const DatasetIndex& index, const fs::path& cache_root) {
    DatasetIndex out = index;
    for (auto& c : out.classes)
        for (auto& r : c.images) {
            r.variants = entry_variants(cache_root, r.path);
            r.latent = r.variants.empty() ? std::string() : entry_rel(r.path) + "/latent.ckpt";
        }
    return out;
}

std::vector<std::string> missing_cache_entries(const DatasetIndex& index) {
    std::vector<std::string> missing;
    for (const auto& c : index.classes)
        for (const auto& r : c.images)
            if (r.variants.empty()) missing.push_back(r.path);
    return missing;
}

LatentCode<float> read_cached_latent(const fs::path& path) {
    const auto ckpt = read_checkpoint(path);
    if (ckpt.descriptor.value("kind", "") != "latent") throw CheckpointError(path.string() + " does not hold a latent");
    auto vec = [&](const char* name) {
        const auto& b = ckpt.at(name);
        Vector<float> v(Index(b.values.size()));
        for (std::size_t i = 0; i < b.values.size(); ++i) v[Index(i)] = float(b.values[i]);
        return v;
    };
    return {vec("noise"), vec("class_embedding")};
}

}  // namespace metairnet
