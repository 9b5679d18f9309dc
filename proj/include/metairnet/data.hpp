#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "metairnet/image.hpp"

namespace metairnet {

using ClassId = std::string;

/// One source image. Paths are relative to the dataset root (variants and
/// latent are relative to the generation cache root).
struct ImageRecord {
    std::string path;
    std::vector<std::string> variants;
    std::string latent;
};

struct ClassImages {
    ClassId id;
    std::vector<ImageRecord> images;
};

struct DatasetIndex {
    std::filesystem::path root;
    std::vector<ClassImages> classes;

    std::size_t image_count() const;
    const ClassImages* find(const ClassId& id) const;
    std::vector<ClassId> class_ids() const;
    std::filesystem::path absolute(const ImageRecord& r) const { return root / r.path; }
    /// Throws ValidationError on duplicate classes or image records.
    void validate() const;
};

/// Class partition into base (meta-train), val (model selection) and novel
/// (meta-test) sets.
struct SplitSpec {
    std::vector<ClassId> base;
    std::vector<ClassId> val;
    std::vector<ClassId> novel;

    /// Non-empty, duplicate-free and pairwise disjoint partitions.
    void validate() const;
    std::vector<ClassId> all() const;

    /// Sections `[base]`, `[val]`, `[novel]` (aliases: train/training,
    /// validation, test) each followed by comma- or whitespace-separated IDs.
    /// `#` starts a comment.
    static SplitSpec parse(std::string_view text);
    static SplitSpec from_file(const std::filesystem::path& path);
    std::string to_text() const;
};

struct DatasetSplits {
    SplitSpec spec;
    DatasetIndex base;
    DatasetIndex val;
    DatasetIndex novel;
};

/// Index `root/<class_id>/*.{ppm,pgm}` for the given classes.
DatasetIndex index_classes(const std::filesystem::path& root, const std::vector<ClassId>& ids);

/// Read the split file, check it against the class directories under `root`
/// and index the three partitions.
DatasetSplits load_dataset(const std::filesystem::path& root, const std::filesystem::path& split_file);

struct EpisodeItem {
    std::size_t class_index;  // into DatasetIndex::classes
    std::size_t image_index;  // into ClassImages::images
    int label;                // local label 0..n-1
};

/// One n-way m-shot task with q queries per class. Classes are relabelled
/// 0..n-1 in sampling order.
struct Episode {
    int n = 0;
    int m = 0;
    int q = 0;
    std::vector<ClassId> classes;
    std::vector<EpisodeItem> support;
    std::vector<EpisodeItem> query;
};

Episode sample_episode(const DatasetIndex& index, int n, int m, int q, std::uint64_t seed);

/// Throws ValidationError unless counts, label balance and support/query
/// disjointness hold.
void check_episode(const Episode& episode);

nlohmann::json episode_manifest(const Episode& episode, const DatasetIndex& index);

/// Thread-safe loader that memoizes decoded images, optionally resizing them
/// to a square resolution.
class ImageStore {
public:
    explicit ImageStore(Index resolution = 0) : resolution_(resolution) {}

    const Image<float>& get(const std::filesystem::path& path);
    Index resolution() const { return resolution_; }

private:
    Index resolution_;
    std::mutex mutex_;
    std::unordered_map<std::string, std::unique_ptr<Image<float>>> cache_;
};

}  // namespace metairnet
