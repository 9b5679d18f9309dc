// metairnet: command-line driver.
//
//   synth-data    write the synthetic shapes-and-textures dataset
//   pretrain-gan  train the toy generator on the base split
//   adapt         build the generation cache (per-image adaptation + variants)
//   meta-train    episodic training with validation-based selection
//   meta-test     evaluate a trained model on the novel split
//   report        compare evaluation reports
//
// Every subcommand takes --config FILE (JSON); its keys override flags.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "metairnet/cache.hpp"
#include "metairnet/fsutil.hpp"
#include "metairnet/harness.hpp"
#include "metairnet/pretrain.hpp"
#include "metairnet/synthetic.hpp"

namespace fs = std::filesystem;
using namespace metairnet;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kValidation = 3 };

nlohmann::json read_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(read_file(path));
        if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("cannot parse config file " + path + ": " + e.what());
    }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw UsageError("unknown " + what + " key '" + key + "'");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

DatasetIndex& pick_split(DatasetSplits& splits, const std::string& name) {
    if (name == "base") return splits.base;
    if (name == "val") return splits.val;
    if (name == "novel") return splits.novel;
    throw UsageError("unknown split '" + name + "' (base, val, novel)");
}

struct Paths {
    std::string data;
    std::string split;
    std::string cache;
};

void add_data_flags(CLI::App* cmd, Paths& p, bool cache) {
    cmd->add_option("--data", p.data, "dataset root (one directory per class)")->required();
    cmd->add_option("--split", p.split, "split file with [base] [val] [novel] sections")->required();
    if (cache) cmd->add_option("--cache", p.cache, "generation cache directory")->required();
}

DatasetSplits load_with_cache(const Paths& p) {
    auto splits = load_dataset(p.data, p.split);
    if (!p.cache.empty()) {
        splits.base = attach_cache(splits.base, p.cache);
        splits.val = attach_cache(splits.val, p.cache);
        splits.novel = attach_cache(splits.novel, p.cache);
    }
    return splits;
}

void add_run_flags(CLI::App* cmd, RunConfig& c, std::string& augmentation, std::string& classifier) {
    cmd->add_option("--n", c.n, "classes per episode")->capture_default_str();
    cmd->add_option("--m", c.m, "support images per class")->capture_default_str();
    cmd->add_option("--q", c.q, "query images per class")->capture_default_str();
    cmd->add_option("--epochs", c.epochs)->capture_default_str();
    cmd->add_option("--episodes-train", c.episodes_train, "episodes per epoch")->capture_default_str();
    cmd->add_option("--episodes-val", c.episodes_val)->capture_default_str();
    cmd->add_option("--episodes-eval", c.episodes_eval)->capture_default_str();
    cmd->add_option("--n-aug", c.n_aug, "synthetic images per support image")->capture_default_str();
    cmd->add_option("--augmentation", augmentation, "none|fusion|flip|gaussian|mixup|finetunegan")
        ->capture_default_str();
    cmd->add_option("--classifier", classifier, "prototype|nn|logistic|softmax")->capture_default_str();
    cmd->add_option("--backbone-width", c.backbone.width)->capture_default_str();
    cmd->add_option("--backbone-depth", c.backbone.depth)->capture_default_str();
    cmd->add_option("--fusion-width", c.fusion.extractor.width)->capture_default_str();
    cmd->add_option("--fusion-depth", c.fusion.extractor.depth)->capture_default_str();
    cmd->add_option("--grid", c.fusion.grid, "fusion weight grid size")->capture_default_str();
    cmd->add_option("--resolution", c.resolution, "working resolution, 0 keeps stored size")->capture_default_str();
    cmd->add_option("--lr", c.lr)->capture_default_str();
    cmd->add_flag("--squared-distance", c.squared_distance, "squared Euclidean distance in the softmax");
    cmd->add_option("--gaussian-sigma", c.gaussian_sigma)->capture_default_str();
    cmd->add_option("--seed", c.seed)->capture_default_str();
    cmd->add_option("--threads", c.threads)->capture_default_str();
}

void finish_run_config(RunConfig& c, const std::string& augmentation, const std::string& classifier,
                       const std::string& config_file) {
    c.augmentation = parse_augmentation(augmentation);
    c.classifier = parse_classifier(classifier);
    from_json(read_config(config_file), c);
    c.validate();
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MetaIRNet few-shot classification with fused generated images"};
    app.require_subcommand(1);
    std::string config_file;

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "write the synthetic benchmark dataset");
    SyntheticConfig sc;
    std::string synth_out, synth_split;
    synth->add_option("--out", synth_out, "dataset root")->required();
    synth->add_option("--split-file", synth_split, "defaults to <out>/split.txt");
    synth->add_option("--base-classes", sc.base_classes)->capture_default_str();
    synth->add_option("--val-classes", sc.val_classes)->capture_default_str();
    synth->add_option("--novel-classes", sc.novel_classes)->capture_default_str();
    synth->add_option("--images-per-class", sc.images_per_class)->capture_default_str();
    synth->add_option("--resolution", sc.resolution)->capture_default_str();
    synth->add_option("--seed", sc.seed)->capture_default_str();

    // pretrain-gan
    auto* pretrain = app.add_subcommand("pretrain-gan", "train the toy generator from scratch on the base split");
    Paths pretrain_paths;
    GeneratorConfig gc;
    PretrainConfig pc;
    std::string gen_out;
    add_data_flags(pretrain, pretrain_paths, false);
    pretrain->add_option("--out", gen_out, "generator checkpoint")->required();
    pretrain->add_option("--noise-dim", gc.noise_dim)->capture_default_str();
    pretrain->add_option("--embed-dim", gc.embed_dim)->capture_default_str();
    pretrain->add_option("--gen-resolution", gc.resolution)->capture_default_str();
    pretrain->add_option("--widths", gc.widths, "channel widths, coarse to fine")->delimiter(',')->capture_default_str();
    pretrain->add_option("--steps", pc.steps)->capture_default_str();
    pretrain->add_option("--batch-size", pc.batch_size)->capture_default_str();
    pretrain->add_option("--lr", pc.lr)->capture_default_str();
    pretrain->add_option("--lr-latent", pc.lr_latent)->capture_default_str();
    pretrain->add_option("--seed", pc.seed)->capture_default_str();

    // adapt
    auto* adapt_cmd = app.add_subcommand("adapt", "adapt the generator to every image and cache variants");
    Paths adapt_paths;
    CacheConfig cc;
    std::string generator_path, adapt_splits = "base,val,novel";
    add_data_flags(adapt_cmd, adapt_paths, true);
    adapt_cmd->add_option("--generator", generator_path, "generator checkpoint")->required();
    adapt_cmd->add_option("--splits", adapt_splits, "comma-separated splits to cache")->capture_default_str();
    adapt_cmd->add_option("--steps", cc.adapt.steps)->capture_default_str();
    adapt_cmd->add_option("--lambda-p", cc.adapt.lambda_p, "perceptual weight")->capture_default_str();
    adapt_cmd->add_option("--lambda-z", cc.adapt.lambda_z, "earth-mover weight")->capture_default_str();
    adapt_cmd->add_option("--lr-z", cc.adapt.lr_z)->capture_default_str();
    adapt_cmd->add_option("--lr-bn", cc.adapt.lr_bn)->capture_default_str();
    adapt_cmd->add_option("--epsilon", cc.adapt.epsilon_scale, "latent perturbation scale")->capture_default_str();
    adapt_cmd->add_option("--variants", cc.adapt.n_variants)->capture_default_str();
    adapt_cmd->add_option("--perceptual-width", cc.perceptual_width)->capture_default_str();
    adapt_cmd->add_option("--seed", cc.seed)->capture_default_str();
    adapt_cmd->add_option("--threads", cc.threads)->capture_default_str();

    // meta-train
    auto* train = app.add_subcommand("meta-train", "episodic training on the base split");
    Paths train_paths;
    RunConfig train_cfg;
    std::string train_aug = "fusion", train_cls = "prototype", train_out;
    bool resume = false;
    add_data_flags(train, train_paths, true);
    add_run_flags(train, train_cfg, train_aug, train_cls);
    train->add_option("--out", train_out, "output directory")->required();
    train->add_flag("--resume", resume, "continue from <out>/state.ckpt");

    // meta-test
    auto* test = app.add_subcommand("meta-test", "evaluate a trained model on the novel split");
    Paths test_paths;
    std::string model_path, report_out, test_cls;
    int test_episodes = 0, test_threads = 0;
    std::uint64_t test_seed = 0;
    add_data_flags(test, test_paths, true);
    test->add_option("--model", model_path, "model checkpoint from meta-train")->required();
    test->add_option("--out", report_out, "write the EvalReport JSON here");
    auto* episodes_opt = test->add_option("--episodes-eval", test_episodes);
    auto* classifier_opt = test->add_option("--classifier", test_cls, "prototype|nn|logistic|softmax");
    auto* threads_opt = test->add_option("--threads", test_threads);
    auto* seed_opt = test->add_option("--seed", test_seed);

    // report
    auto* rep = app.add_subcommand("report", "compare EvalReport files");
    std::vector<std::string> report_files;
    std::string table_out;
    rep->add_option("reports", report_files, "EvalReport JSON files");
    rep->add_option("--json", table_out, "write the machine-readable table here");

    for (auto* cmd : {synth, pretrain, adapt_cmd, train, test, rep})
        cmd->add_option("--config", config_file, "JSON file whose keys override flags");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*synth) {
            const auto cfg = read_config(config_file);
            reject_unknown(cfg, {"base_classes", "val_classes", "novel_classes", "images_per_class", "resolution", "seed"},
                           "synth-data");
            sc.base_classes = cfg.value("base_classes", sc.base_classes);
            sc.val_classes = cfg.value("val_classes", sc.val_classes);
            sc.novel_classes = cfg.value("novel_classes", sc.novel_classes);
            sc.images_per_class = cfg.value("images_per_class", sc.images_per_class);
            sc.resolution = cfg.value("resolution", sc.resolution);
            sc.seed = cfg.value("seed", sc.seed);
            const fs::path split = synth_split.empty() ? fs::path(synth_out) / "split.txt" : fs::path(synth_split);
            const auto spec = write_synthetic_dataset(synth_out, split, sc);
            print_json({{"root", synth_out},
                        {"split", split.string()},
                        {"base", spec.base.size()},
                        {"val", spec.val.size()},
                        {"novel", spec.novel.size()}});
        } else if (*pretrain) {
            const auto cfg = read_config(config_file);
            reject_unknown(cfg, {"generator", "pretrain"}, "pretrain-gan");
            if (cfg.contains("generator")) from_json(cfg.at("generator"), gc);
            if (cfg.contains("pretrain")) from_json(cfg.at("pretrain"), pc);
            const auto splits = load_dataset(pretrain_paths.data, pretrain_paths.split);
            auto result = pretrain_toy_generator(splits.base, gc, pc);
            const auto& curve = result.loss_curve;
            nlohmann::json extra{{"pretrain", pc}, {"loss_curve", curve}};
            save_checkpoint(result.generator, gen_out, extra);
            print_json({{"checkpoint", gen_out},
                        {"steps", curve.size()},
                        {"first_loss", curve.empty() ? 0.0 : curve.front()},
                        {"last_loss", curve.empty() ? 0.0 : curve.back()}});
        } else if (*adapt_cmd) {
            const auto cfg = read_config(config_file);
            reject_unknown(cfg, {"adapt", "seed", "threads", "perceptual_width"}, "adapt");
            if (cfg.contains("adapt")) from_json(cfg.at("adapt"), cc.adapt);
            cc.seed = cfg.value("seed", cc.seed);
            cc.threads = cfg.value("threads", cc.threads);
            cc.perceptual_width = cfg.value("perceptual_width", cc.perceptual_width);
            cc.root = adapt_paths.cache;
            auto splits = load_dataset(adapt_paths.data, adapt_paths.split);
            const auto generator = load_generator<float>(generator_path);
            nlohmann::json summary = nlohmann::json::object();
            std::size_t failures = 0;
            for (const auto& name : split_list(adapt_splits)) {
                const auto built = build_generation_cache(pick_split(splits, name), generator, cc);
                summary[name] = to_json(built.summary);
                failures += built.summary.failures.size();
            }
            print_json(summary);
            if (failures) {
                std::cerr << "error: " << failures << " images could not be adapted\n";
                return kValidation;
            }
        } else if (*train) {
            finish_run_config(train_cfg, train_aug, train_cls, config_file);
            const auto splits = load_with_cache(train_paths);
            TrainOptions opts;
            opts.out_dir = train_out;
            opts.resume = resume;
            opts.on_epoch = [](const EpochMetrics& m) {
                std::printf("epoch %d  loss %.4f  train %.2f%%  val %.2f +/- %.2f%%\n", m.epoch, m.mean_loss,
                            m.train_accuracy, m.val_accuracy, m.val_ci95);
                std::fflush(stdout);
            };
            const auto result = meta_train(train_cfg, splits.base, splits.val, train_paths.cache, opts);
            std::printf("best epoch %d -> %s\n", result.best_epoch, (fs::path(train_out) / "model.ckpt").c_str());
        } else if (*test) {
            auto model = load_model(model_path);
            nlohmann::json overrides = nlohmann::json::object();
            if (*episodes_opt) overrides["episodes_eval"] = test_episodes;
            if (*classifier_opt) overrides["classifier"] = test_cls;
            if (*threads_opt) overrides["threads"] = test_threads;
            if (*seed_opt) overrides["seed"] = test_seed;
            const auto file = read_config(config_file);
            reject_unknown(file, {"episodes_eval", "classifier", "threads", "seed"}, "meta-test");
            overrides.update(file);
            from_json(overrides, model.config);
            model.config.validate();
            const auto splits = load_with_cache(test_paths);
            const auto r = meta_test(model, splits.novel, test_paths.cache, splits.spec.base);
            if (!report_out.empty()) write_file_atomic(report_out, nlohmann::json(r).dump(1));
            std::printf("%s: %.2f +/- %.2f%% over %zu episodes (%.1f s)\n", r.method.c_str(), r.mean, r.ci95,
                        r.accuracies.size(), r.wall_clock_seconds);
        } else if (*rep) {
            std::vector<EvalReport> reports;
            for (const auto& f : report_files) {
                try {
                    reports.push_back(nlohmann::json::parse(read_file(f)).get<EvalReport>());
                } catch (const nlohmann::json::exception& e) {
                    throw ValidationError("cannot read report " + f + ": " + e.what());
                }
            }
            const auto table = report(reports);
            std::cout << table.text;
            if (!table_out.empty()) write_file_atomic(table_out, table.json.dump(1));
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
