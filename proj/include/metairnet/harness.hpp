#pragma once

// Meta-training, meta-testing and reporting over episodes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metairnet/checkpoint.hpp"
#include "metairnet/fewshot.hpp"

namespace metairnet {

enum class Classifier { prototype, nn, logistic_ova, softmax_reg };

std::string to_string(Classifier c);
Classifier parse_classifier(const std::string& name);

struct RunConfig {
    int n = 5;
    int m = 1;
    int q = 16;
    int epochs = 5;
    int episodes_train = 100;
    int episodes_val = 100;
    int episodes_eval = 1000;
    int n_aug = 1;
    Augmentation augmentation = Augmentation::fusion;
    Classifier classifier = Classifier::prototype;
    BackboneConfig backbone{3, 32, 4};
    FusionConfig fusion{};
    /// Square working resolution for every image; 0 keeps the stored size.
    Index resolution = 32;
    double lr = 1e-3;
    bool squared_distance = false;
    double gaussian_sigma = 0.01;
    std::uint64_t seed = 0;
    int threads = 1;

    /// Throws ValidationError on non-positive counts or bad combinations.
    void validate() const;
    EpisodeOptions episode_options() const;
    /// Cached variants drawn per support image.
    int variants_per_image() const { return uses_variants(augmentation) ? n_aug : 0; }
    /// "metairnet" with fusion, "protonet" without augmentation, else the
    /// augmentation name; non-prototype classifiers are appended.
    std::string method() const;

    bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Keys absent from `j` keep their current value.
void from_json(const nlohmann::json& j, RunConfig& c);

/// Backbone plus, for fusion runs, the fusion network.
struct FewShotModel {
    RunConfig config;
    Backbone<float> backbone;
    std::optional<FusionNet<float>> fusion;

    ParamList<float> parameters() const;
    BufferList<float> buffers();
};

FewShotModel make_model(const RunConfig& config);

Checkpoint to_checkpoint(FewShotModel& model, const nlohmann::json& extra = {});
FewShotModel load_model(const Checkpoint& ckpt);
FewShotModel load_model(const std::filesystem::path& path);

struct EvalReport {
    std::string method;
    double mean = 0;  // percent
    double ci95 = 0;  // percent
    std::vector<double> accuracies;
    nlohmann::json config;
    double wall_clock_seconds = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Mean and 1.96 * sample standard deviation / sqrt(N) of per-episode
/// accuracies (ci95 is 0 for a single episode).
EvalReport summarize(std::string method, std::vector<double> accuracies, nlohmann::json config = {});

/// Reports compare equal up to wall-clock time and thread count.
bool same_results(const EvalReport& a, const EvalReport& b);

struct EvalSpec {
    int n = 5;
    int m = 1;
    int q = 16;
    int episodes = 1000;
    std::uint64_t seed = 0;
    std::string stage = "test";
    int threads = 1;
};

/// Query predictions for one episode; `seed` is the episode's own seed.
using Predictor = std::function<std::vector<int>(const Episode& episode, std::uint64_t seed)>;

/// Per-episode accuracies (percent). Episodes are independent of thread
/// count. Any episode drawing a class listed in `forbidden` raises
/// ValidationError.
std::vector<double> run_episodes(const DatasetIndex& index, const EvalSpec& spec, const Predictor& predict,
                                 const std::vector<ClassId>& forbidden = {});

/// Throws ValidationError unless `index` holds n classes with m + q images.
void require_episodes(const DatasetIndex& index, int n, int m, int q, const std::string& split);

/// Predictor backed by a trained model. `store` must outlive it.
Predictor model_predictor(const FewShotModel& model, const DatasetIndex& index, ImageStore& store,
                          const std::filesystem::path& cache_root);

/// Evaluate on `novel` with config.episodes_eval episodes. Classes in
/// `base_classes` must never appear.
EvalReport meta_test(const FewShotModel& model, const DatasetIndex& novel, const std::filesystem::path& cache_root,
                     const std::vector<ClassId>& base_classes = {});

struct EpochMetrics {
    int epoch = 0;
    std::vector<double> losses;
    double mean_loss = 0;
    double train_accuracy = 0;
    double val_accuracy = 0;
    double val_ci95 = 0;
};

void to_json(nlohmann::json& j, const EpochMetrics& m);
void from_json(const nlohmann::json& j, EpochMetrics& m);

struct TrainResult {
    FewShotModel best;
    int best_epoch = 0;
    std::vector<EpochMetrics> history;
};

struct TrainOptions {
    /// Receives model.ckpt (best by validation accuracy), state.ckpt and
    /// metrics.jsonl. Empty keeps everything in memory.
    std::filesystem::path out_dir;
    /// Continue from out_dir/state.ckpt when present.
    bool resume = false;
    std::function<void(const EpochMetrics&)> on_epoch;
};

/// Episodic training on `base` with model selection on `val`. Refuses to start
/// when augmentation needs variants that the attached caches lack.
TrainResult meta_train(const RunConfig& config, const DatasetIndex& base, const DatasetIndex& val,
                       const std::filesystem::path& cache_root, const TrainOptions& options = {});

struct ReportTable {
    std::string text;
    nlohmann::json json;
    std::vector<std::string> mismatches;
};

/// Method x accuracy table. Protocol settings that differ across reports are
/// listed in `mismatches` and flagged in the text. Throws UsageError when
/// empty.
ReportTable report(const std::vector<EvalReport>& reports);

}  // namespace metairnet
