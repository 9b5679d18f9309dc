#pragma once

// Generation cache: per source image, a directory
//   <cache>/<class>/<stem>/variant_00.ppm ... variant_{n-1}.ppm
//                          latent.ckpt   tuned latent and BN values
//                          trace.json    adaptation loss trace
// plus <cache>/manifest.json mapping each source image to its variants.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "metairnet/adaptation.hpp"
#include "metairnet/data.hpp"

namespace metairnet {

struct CacheConfig {
    std::filesystem::path root;
    AdaptConfig adapt;
    std::uint64_t seed = 0;
    /// Width of the frozen perceptual extractor.
    Index perceptual_width = 32;
    int threads = 1;
};

struct CacheFailure {
    std::string image;
    std::string reason;
};

struct CacheSummary {
    std::size_t adapted = 0;
    std::size_t skipped = 0;
    std::size_t variants_written = 0;
    std::vector<CacheFailure> failures;
};

nlohmann::json to_json(const CacheSummary& s);

struct CacheBuild {
    DatasetIndex index;
    CacheSummary summary;
};

/// Adapt the generator to every image of `index` that has no complete cache
/// entry yet. Failures are collected, not thrown.
CacheBuild build_generation_cache(const DatasetIndex& index, const Generator<float>& generator,
                                  const CacheConfig& config);

/// Fill ImageRecord::variants / latent from existing cache entries.
DatasetIndex attach_cache(const DatasetIndex& index, const std::filesystem::path& cache_root);

/// Dataset-relative paths of records without cached variants.
std::vector<std::string> missing_cache_entries(const DatasetIndex& index);

std::filesystem::path cache_entry_dir(const std::filesystem::path& cache_root, const std::string& source_path);

/// Serialized tuned latent of one cache entry.
LatentCode<float> read_cached_latent(const std::filesystem::path& path);

}  // namespace metairnet
