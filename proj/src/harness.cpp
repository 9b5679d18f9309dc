#include "metairnet/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "metairnet/cache.hpp"
#include "metairnet/fsutil.hpp"

namespace fs = std::filesystem;

namespace metairnet {

namespace {

constexpr std::pair<Classifier, const char*> kClassifiers[] = {
    {Classifier::prototype, "prototype"},
    {Classifier::nn, "nn"},
    {Classifier::logistic_ova, "logistic"},
    {Classifier::softmax_reg, "softmax"},
};

std::string join(const std::vector<std::string>& items, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
    return out;
}

std::vector<int> argmax_rows(const RowMatrix<float>& m) {
    std::vector<int> out(static_cast<std::size_t>(m.rows()));
    for (Index i = 0; i < m.rows(); ++i) {
        Index arg;
        m.row(i).maxCoeff(&arg);
        out[std::size_t(i)] = int(arg);
    }
    return out;
}

BaselineKind baseline_kind(Classifier c) {
    switch (c) {
        case Classifier::nn: return BaselineKind::nn;
        case Classifier::logistic_ova: return BaselineKind::logistic_ova;
        default: return BaselineKind::softmax_reg;
    }
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

std::string to_string(Classifier c) {
    for (const auto& [k, name] : kClassifiers)
        if (k == c) return name;
    return "unknown";
}

Classifier parse_classifier(const std::string& name) {
    for (const auto& [k, n] : kClassifiers)
        if (name == n) return k;
    throw UsageError("unknown classifier '" + name + "' (prototype, nn, logistic, softmax)");
}

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw ValidationError(std::string(name) + " must be >= 1, got " + std::to_string(v));
    };
    positive(n, "n");
    positive(m, "m");
    positive(q, "q");
    positive(epochs, "epochs");
    positive(episodes_train, "episodes_train");
    positive(episodes_val, "episodes_val");
    positive(episodes_eval, "episodes_eval");
    positive(threads, "threads");
    if (n < 2) throw ValidationError("n must be >= 2 for classification");
    if (n_aug < 0) throw ValidationError("n_aug must be >= 0");
    if (augmentation == Augmentation::fusion && n_aug < 1) throw ValidationError("fusion needs n_aug >= 1");
    if (resolution < 0) throw ValidationError("resolution must be >= 0");
    if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("lr must be positive");
    if (!(gaussian_sigma >= 0)) throw ValidationError("gaussian_sigma must be >= 0");
    if (backbone.depth < 1 || backbone.width < 1) throw ValidationError("backbone needs depth and width >= 1");
    if (fusion.extractor.in_channels != backbone.in_channels)
        throw ValidationError("fusion extractor and backbone disagree on input channels");
    if (fusion.grid < 1) throw ValidationError("fusion grid must be >= 1");
    if (resolution > 0 && resolution < fusion.grid) throw ValidationError("resolution is smaller than the fusion grid");
}

EpisodeOptions RunConfig::episode_options() const {
    EpisodeOptions o;
    o.augmentation = augmentation;
    o.n_aug = n_aug;
    o.squared_distance = squared_distance;
    o.gaussian_sigma = gaussian_sigma;
    return o;
}

std::string RunConfig::method() const {
    std::string name;
    if (augmentation == Augmentation::fusion)
        name = "metairnet";
    else if (augmentation == Augmentation::none || n_aug == 0)
        name = "protonet";
    else
        name = "protonet+" + to_string(augmentation);
    if (classifier != Classifier::prototype) name += "/" + to_string(classifier);
    return name;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"n", c.n},
         {"m", c.m},
         {"q", c.q},
         {"epochs", c.epochs},
         {"episodes_train", c.episodes_train},
         {"episodes_val", c.episodes_val},
         {"episodes_eval", c.episodes_eval},
         {"n_aug", c.n_aug},
         {"augmentation", to_string(c.augmentation)},
         {"classifier", to_string(c.classifier)},
         {"backbone", c.backbone},
         {"fusion", c.fusion},
         {"resolution", c.resolution},
         {"lr", c.lr},
         {"squared_distance", c.squared_distance},
         {"gaussian_sigma", c.gaussian_sigma},
         {"seed", c.seed},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    if (!j.is_object()) throw UsageError("run config must be a JSON object");
    static const std::set<std::string> known{"n",          "m",          "q",
                                             "epochs",     "episodes_train", "episodes_val",
                                             "episodes_eval", "n_aug",   "augmentation",
                                             "classifier", "backbone",   "fusion",
                                             "resolution", "lr",         "squared_distance",
                                             "gaussian_sigma", "seed",   "threads"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw UsageError("unknown run config key '" + key + "'");
    c.n = j.value("n", c.n);
    c.m = j.value("m", c.m);
    c.q = j.value("q", c.q);
    c.epochs = j.value("epochs", c.epochs);
    c.episodes_train = j.value("episodes_train", c.episodes_train);
    c.episodes_val = j.value("episodes_val", c.episodes_val);
    c.episodes_eval = j.value("episodes_eval", c.episodes_eval);
    c.n_aug = j.value("n_aug", c.n_aug);
    if (j.contains("augmentation")) c.augmentation = parse_augmentation(j.at("augmentation").get<std::string>());
    if (j.contains("classifier")) c.classifier = parse_classifier(j.at("classifier").get<std::string>());
    c.backbone = j.value("backbone", c.backbone);
    c.fusion = j.value("fusion", c.fusion);
    c.resolution = j.value("resolution", c.resolution);
    c.lr = j.value("lr", c.lr);
    c.squared_distance = j.value("squared_distance", c.squared_distance);
    c.gaussian_sigma = j.value("gaussian_sigma", c.gaussian_sigma);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
}

// ---------------------------------------------------------------------------
// Model

ParamList<float> FewShotModel::parameters() const {
    ParamList<float> out;
    backbone.parameters(out, "backbone.");
    if (fusion) fusion->parameters(out, "fusion.");
    return out;
}

BufferList<float> FewShotModel::buffers() {
    BufferList<float> out;
    backbone.buffers(out, "backbone.");
    if (fusion) fusion->buffers(out, "fusion.");
    return out;
}

FewShotModel make_model(const RunConfig& config) {
    config.validate();
    FewShotModel model;
    model.config = config;
    Rng rng(derive_seed(config.seed, "init"));
    model.backbone = Backbone<float>(config.backbone, rng);
    if (config.augmentation == Augmentation::fusion) model.fusion.emplace(config.fusion, rng);
    return model;
}

Checkpoint to_checkpoint(FewShotModel& model, const nlohmann::json& extra) {
    Checkpoint ckpt{{{"kind", "fewshot-model"}, {"config", model.config}}, {}};
    if (extra.is_object())
        for (const auto& [k, v] : extra.items()) ckpt.descriptor[k] = v;
    append_parameters(ckpt, model.parameters(), model.buffers());
    return ckpt;
}

FewShotModel load_model(const Checkpoint& ckpt) {
    if (ckpt.descriptor.value("kind", "") != "fewshot-model")
        throw CheckpointError("checkpoint does not hold a few-shot model");
    RunConfig config;
    from_json(ckpt.descriptor.at("config"), config);
    FewShotModel model = make_model(config);
    restore_parameters(ckpt, model.parameters(), model.buffers());
    return model;
}

FewShotModel load_model(const fs::path& path) { return load_model(read_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Evaluation

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = {{"method", r.method},
         {"mean", r.mean},
         {"ci95", r.ci95},
         {"episodes", r.accuracies.size()},
         {"accuracies", r.accuracies},
         {"config", r.config},
         {"wall_clock_seconds", r.wall_clock_seconds}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
    r.method = j.at("method").get<std::string>();
    r.mean = j.at("mean").get<double>();
    r.ci95 = j.at("ci95").get<double>();
    r.accuracies = j.value("accuracies", std::vector<double>{});
    r.config = j.value("config", nlohmann::json::object());
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
}

EvalReport summarize(std::string method, std::vector<double> accuracies, nlohmann::json config) {
    if (accuracies.empty()) throw PreconditionError("summarize: no episodes");
    EvalReport r;
    r.method = std::move(method);
    r.config = std::move(config);
    const Eigen::Map<const Eigen::ArrayXd> a(accuracies.data(), Index(accuracies.size()));
    r.mean = a.mean();
    if (a.size() > 1) {
        const double var = (a - r.mean).square().sum() / double(a.size() - 1);
        r.ci95 = 1.96 * std::sqrt(var) / std::sqrt(double(a.size()));
    }
    r.accuracies = std::move(accuracies);
    return r;
}

bool same_results(const EvalReport& a, const EvalReport& b) {
    auto settings = [](nlohmann::json c) {
        if (c.is_object()) c.erase("threads");
        return c;
    };
    return a.method == b.method && a.mean == b.mean && a.ci95 == b.ci95 && a.accuracies == b.accuracies &&
           settings(a.config) == settings(b.config);
}

std::vector<double> run_episodes(const DatasetIndex& index, const EvalSpec& spec, const Predictor& predict,
                                 const std::vector<ClassId>& forbidden) {
    if (spec.episodes < 1) throw ValidationError("need at least one episode");
    const std::set<ClassId> banned(forbidden.begin(), forbidden.end());
    const std::uint64_t stage_seed = derive_seed(spec.seed, spec.stage);
    std::vector<double> acc(static_cast<std::size_t>(spec.episodes));

    std::atomic<int> next{0};
    std::mutex mutex;
    std::exception_ptr failure;
    auto worker = [&] {
        for (int e = next++; e < spec.episodes; e = next++) {
            try {
                const std::uint64_t seed = derive_seed(stage_seed, std::uint64_t(e));
                const Episode ep = sample_episode(index, spec.n, spec.m, spec.q, seed);
                check_episode(ep);
                for (const auto& c : ep.classes)
                    if (banned.count(c))
                        throw ValidationError("episode " + std::to_string(e) + " draws class " + c +
                                              " from a forbidden split");
                const auto pred = predict(ep, seed);
                if (pred.size() != ep.query.size())
                    throw ShapeError("predictor returned " + std::to_string(pred.size()) + " labels for " +
                                     std::to_string(ep.query.size()) + " queries");
                int correct = 0;
                for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ep.query[i].label;
                acc[std::size_t(e)] = 100.0 * correct / double(pred.size());
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!failure) failure = std::current_exception();
                next = spec.episodes;
            }
        }
    };
    const int threads = std::max(1, std::min(spec.threads, spec.episodes));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return acc;
}

Predictor model_predictor(const FewShotModel& model, const DatasetIndex& index, ImageStore& store,
                          const fs::path& cache_root) {
    return [&model, &index, &store, cache_root](const Episode& episode, std::uint64_t seed) {
        const RunConfig& cfg = model.config;
        Rng rng(derive_seed(seed, "augment"));
        const auto images = load_episode(episode, index, store, cache_root, cfg.variants_per_image(), rng);
        const auto opt = cfg.episode_options();
        const FusionNet<float>* fusion = model.fusion ? &*model.fusion : nullptr;
        NoGradGuard guard;
        if (cfg.classifier == Classifier::prototype)
            return argmax_rows(run_episode<float>(images, model.backbone, fusion, opt, false, rng).logits.value().matrix());

        auto sb = build_support<float>(images, fusion, opt, false, rng);
        RowMatrix<double> support = model.backbone.embed(sb.images).value().matrix().cast<double>();
        if (cfg.augmentation == Augmentation::gaussian && cfg.n_aug > 0) {
            const Index real = images.support.dim(0);
            RowMatrix<double> noisy(real * cfg.n_aug, support.cols());
            for (int k = 0; k < cfg.n_aug; ++k)
                noisy.middleRows(k * real, real) =
                    support.topRows(real) + randn<double>({real, support.cols()}, rng, cfg.gaussian_sigma).matrix();
            for (int k = 0; k < cfg.n_aug; ++k)
                for (Index i = 0; i < real; ++i) sb.labels.push_back(sb.labels[std::size_t(i)]);
            RowMatrix<double> all(support.rows() + noisy.rows(), support.cols());
            all << support, noisy;
            support = std::move(all);
        }
        const RowMatrix<double> query = model.backbone.embed(Var<float>(images.query)).value().matrix().cast<double>();
        return baseline_classifiers<double>(support, sb.labels, query, baseline_kind(cfg.classifier));
    };
}

EvalReport meta_test(const FewShotModel& model, const DatasetIndex& novel, const fs::path& cache_root,
                     const std::vector<ClassId>& base_classes) {
    const RunConfig& cfg = model.config;
    cfg.validate();
    require_episodes(novel, cfg.n, cfg.m, cfg.q, "evaluation");
    if (cfg.variants_per_image() > 0) {
        const auto missing = missing_cache_entries(novel);
        if (!missing.empty())
            throw ValidationError("generation cache incomplete for the evaluation split: " +
                                  std::to_string(missing.size()) + " images lack variants, e.g. " + missing.front());
    }
    const auto start = std::chrono::steady_clock::now();
    ImageStore store(cfg.resolution);
    const EvalSpec spec{cfg.n, cfg.m, cfg.q, cfg.episodes_eval, cfg.seed, "test", cfg.threads};
    auto acc = run_episodes(novel, spec, model_predictor(model, novel, store, cache_root), base_classes);
    EvalReport r = summarize(cfg.method(), std::move(acc), cfg);
    r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

// ---------------------------------------------------------------------------
// Training

void to_json(nlohmann::json& j, const EpochMetrics& m) {
    j = {{"epoch", m.epoch},
         {"mean_loss", m.mean_loss},
         {"train_accuracy", m.train_accuracy},
         {"val_accuracy", m.val_accuracy},
         {"val_ci95", m.val_ci95},
         {"losses", m.losses}};
}

void from_json(const nlohmann::json& j, EpochMetrics& m) {
    m.epoch = j.at("epoch").get<int>();
    m.mean_loss = j.at("mean_loss").get<double>();
    m.train_accuracy = j.value("train_accuracy", 0.0);
    m.val_accuracy = j.at("val_accuracy").get<double>();
    m.val_ci95 = j.value("val_ci95", 0.0);
    m.losses = j.value("losses", std::vector<double>{});
}

namespace {

void require_cache(const DatasetIndex& index, const char* split) {
    const auto missing = missing_cache_entries(index);
    if (missing.empty()) return;
    std::vector<std::string> shown(missing.begin(), missing.begin() + std::min<std::size_t>(missing.size(), 10));
    throw ValidationError("generation cache incomplete for the " + std::string(split) + " split (" +
                          std::to_string(missing.size()) + " images): " + join(shown, ", ") +
                          (missing.size() > shown.size() ? ", ..." : ""));
}

}  // namespace

void require_episodes(const DatasetIndex& index, int n, int m, int q, const std::string& split) {
    int usable = 0;
    for (const auto& c : index.classes) usable += int(c.images.size()) >= m + q;
    if (usable < n)
        throw ValidationError("the " + split + " split has " + std::to_string(usable) + " classes with at least " +
                              std::to_string(m + q) + " images; " + std::to_string(n) + "-way episodes need " +
                              std::to_string(n));
}

namespace {

Checkpoint training_state(FewShotModel& model, const Adam<float>& adam, const TrainResult& result, double best_val) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : result.history) history.push_back(h);
    Checkpoint ckpt{{{"kind", "training-state"},
                     {"config", model.config},
                     {"epochs_done", result.history.size()},
                     {"adam_steps", adam.steps()},
                     {"best_epoch", result.best_epoch},
                     {"best_val", best_val},
                     {"history", history}},
                    {}};
    append_parameters(ckpt, model.parameters(), model.buffers(), "model.");
    const auto& slots = adam.slots();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        ckpt.blobs.push_back(to_blob("adam." + std::to_string(i) + ".m", slots[i].m));
        ckpt.blobs.push_back(to_blob("adam." + std::to_string(i) + ".v", slots[i].v));
    }
    return ckpt;
}

void write_metrics(const fs::path& path, const std::vector<EpochMetrics>& history) {
    std::string text;
    for (const auto& h : history) text += nlohmann::json(h).dump() + "\n";
    write_file_atomic(path, text);
}

}  // namespace

TrainResult meta_train(const RunConfig& config, const DatasetIndex& base, const DatasetIndex& val,
                       const fs::path& cache_root, const TrainOptions& options) {
    config.validate();
    require_episodes(base, config.n, config.m, config.q, "base");
    require_episodes(val, config.n, config.m, config.q, "validation");
    if (config.variants_per_image() > 0) {
        require_cache(base, "base");
        require_cache(val, "validation");
    }
    const bool persist = !options.out_dir.empty();
    if (persist) fs::create_directories(options.out_dir);

    FewShotModel model = make_model(config);
    Adam<float> adam;
    adam.add(model.parameters(), config.lr);

    TrainResult result{model, 0, {}};
    double best_val = -1;
    const fs::path state_path = options.out_dir / "state.ckpt", model_path = options.out_dir / "model.ckpt";
    if (persist && options.resume && fs::exists(state_path)) {
        const auto state = read_checkpoint(state_path);
        if (state.descriptor.value("kind", "") != "training-state")
            throw CheckpointError(state_path.string() + " is not a training state");
        if (state.descriptor.at("config") != nlohmann::json(config))
            throw ValidationError("cannot resume: " + state_path.string() + " was written with a different run config");
        restore_parameters(state, model.parameters(), model.buffers(), "model.");
        auto& slots = adam.slots();
        for (std::size_t i = 0; i < slots.size(); ++i) {
            from_blob(state.at("adam." + std::to_string(i) + ".m"), slots[i].m);
            from_blob(state.at("adam." + std::to_string(i) + ".v"), slots[i].v);
        }
        adam.set_steps(state.descriptor.at("adam_steps").get<long>());
        result.best_epoch = state.descriptor.at("best_epoch").get<int>();
        best_val = state.descriptor.at("best_val").get<double>();
        for (const auto& h : state.descriptor.at("history")) result.history.push_back(h.get<EpochMetrics>());
        result.best = fs::exists(model_path) ? load_model(model_path) : model;
    }

    ImageStore store(config.resolution);
    const auto opt = config.episode_options();
    const std::uint64_t train_seed = derive_seed(config.seed, "train");
    const EvalSpec val_spec{config.n, config.m, config.q, config.episodes_val, config.seed, "val", config.threads};
    FusionNet<float>* fusion = model.fusion ? &*model.fusion : nullptr;

    for (int epoch = int(result.history.size()); epoch < config.epochs; ++epoch) {
        EpochMetrics metrics;
        metrics.epoch = epoch + 1;
        double correct = 0;
        for (int i = 0; i < config.episodes_train; ++i) {
            const long step = long(epoch) * config.episodes_train + i;
            const std::uint64_t seed = derive_seed(train_seed, std::uint64_t(step));
            const Episode ep = sample_episode(base, config.n, config.m, config.q, seed);
            Rng rng(derive_seed(seed, "augment"));
            const auto images = load_episode(ep, base, store, cache_root, config.variants_per_image(), rng);
            const auto out = run_episode<float>(images, model.backbone, fusion, opt, true, rng);
            const double loss = out.loss.item();
            if (!std::isfinite(loss)) throw TrainingError("meta-training loss is not finite", step);
            backward(out.loss);
            adam.step();
            adam.zero_grad();
            metrics.losses.push_back(loss);
            correct += out.accuracy;
        }
        metrics.mean_loss = Eigen::Map<const Eigen::ArrayXd>(metrics.losses.data(), Index(metrics.losses.size())).mean();
        metrics.train_accuracy = 100.0 * correct / config.episodes_train;

        const auto val_report =
            summarize("val", run_episodes(val, val_spec, model_predictor(model, val, store, cache_root)));
        metrics.val_accuracy = val_report.mean;
        metrics.val_ci95 = val_report.ci95;
        const bool improved = metrics.val_accuracy > best_val;
        if (improved) {
            best_val = metrics.val_accuracy;
            result.best = model;
            result.best_epoch = metrics.epoch;
        }
        result.history.push_back(metrics);
        if (persist) {
            if (improved)
                write_checkpoint(model_path, to_checkpoint(result.best, {{"epoch", metrics.epoch},
                                                                          {"val_accuracy", metrics.val_accuracy}}));
            write_checkpoint(state_path, training_state(model, adam, result, best_val));
            write_metrics(options.out_dir / "metrics.jsonl", result.history);
        }
        if (options.on_epoch) options.on_epoch(metrics);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reporting

ReportTable report(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw UsageError("report needs at least one evaluation report");
    ReportTable table;
    static const char* protocol[] = {"n", "m", "q", "episodes_eval", "resolution", "seed", "backbone"};
    for (const char* key : protocol) {
        std::set<std::string> values;
        for (const auto& r : reports) values.insert(r.config.contains(key) ? r.config.at(key).dump() : "null");
        if (values.size() > 1) table.mismatches.push_back(key);
    }

    std::size_t width = 6;
    for (const auto& r : reports) width = std::max(width, r.method.size());
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(w, s.size()), ' ');
        return s;
    };
    std::ostringstream text;
    text << pad("method", width) << "  accuracy (%)     episodes  setting\n";
    text << std::string(width, '-') << "  ---------------  --------  -------\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : reports) {
        const std::string setting = r.config.contains("n") ? std::to_string(r.config.value("n", 0)) + "-way " +
                                                                 std::to_string(r.config.value("m", 0)) + "-shot"
                                                           : "?";
        text << pad(r.method, width) << "  " << pad(fmt("%.2f", r.mean) + " +/- " + fmt("%.2f", r.ci95), 15) << "  "
             << pad(std::to_string(r.accuracies.size()), 8) << "  " << setting << "\n";
        rows.push_back({{"method", r.method},
                        {"mean", r.mean},
                        {"ci95", r.ci95},
                        {"episodes", r.accuracies.size()},
                        {"setting", setting}});
    }
    if (!table.mismatches.empty()) text << "warning: reports differ in " << join(table.mismatches, ", ") << "\n";
    table.text = text.str();
    table.json = {{"rows", rows}, {"mismatches", table.mismatches}};
    return table;
}

}  // namespace metairnet
