#include "metairnet/fewshot.hpp"

#include <algorithm>

namespace fs = std::filesystem;

namespace metairnet {

namespace {

constexpr std::pair<Augmentation, const char*> kAugmentations[] = {
    {Augmentation::none, "none"},         {Augmentation::fusion, "fusion"}, {Augmentation::flip, "flip"},
    {Augmentation::gaussian, "gaussian"}, {Augmentation::mixup, "mixup"},   {Augmentation::finetunegan, "finetunegan"},
};

}  // namespace

std::string to_string(Augmentation a) {
    for (const auto& [k, name] : kAugmentations)
        if (k == a) return name;
    return "unknown";
}

Augmentation parse_augmentation(const std::string& name) {
    for (const auto& [k, n] : kAugmentations)
        if (name == n) return k;
    throw UsageError("unknown augmentation '" + name + "' (none, fusion, flip, gaussian, mixup, finetunegan)");
}

std::string to_string(Origin o) {
    switch (o) {
        case Origin::real: return "real";
        case Origin::fused: return "fused";
        case Origin::flipped: return "flipped";
        case Origin::gaussian: return "gaussian";
        case Origin::mixed: return "mixed";
        case Origin::generated: return "generated";
    }
    return "unknown";
}

EpisodeImages<float> load_episode(const Episode& episode, const DatasetIndex& index, ImageStore& store,
                                  const fs::path& cache_root, int n_variants, Rng& rng) {
    if (n_variants < 0) throw PreconditionError("n_variants must be >= 0");
    EpisodeImages<float> out;
    out.n = episode.n;
    out.m = episode.m;
    out.q = episode.q;

    auto record = [&](const EpisodeItem& it) -> const ImageRecord& {
        if (it.class_index >= index.classes.size() || it.image_index >= index.classes[it.class_index].images.size())
            throw ShapeError("episode item outside the dataset index");
        return index.classes[it.class_index].images[it.image_index];
    };
    auto stack = [&](const std::vector<EpisodeItem>& items, std::vector<int>& labels) {
        std::vector<const Image<float>*> images;
        for (const auto& it : items) {
            images.push_back(&store.get(index.absolute(record(it))));
            labels.push_back(it.label);
        }
        return stack_images(images);
    };
    out.support = stack(episode.support, out.support_labels);
    out.query = stack(episode.query, out.query_labels);

    if (n_variants == 0) return out;
    std::vector<const Image<float>*> generated;
    for (std::size_t s = 0; s < episode.support.size(); ++s) {
        const auto& r = record(episode.support[s]);
        if (r.variants.empty())
            throw AugmentationError("no cached variants for support image " + r.path + "; build the generation cache first");
        std::vector<std::size_t> order(r.variants.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (int k = 0; k < n_variants; ++k) {
            const auto pick = k < int(order.size()) ? order[std::size_t(k)]
                                                    : std::uniform_int_distribution<std::size_t>(0, order.size() - 1)(rng);
            const auto path = cache_root / r.variants[pick];
            if (!fs::exists(path)) throw AugmentationError("cached variant missing for " + r.path + ": " + path.string());
            generated.push_back(&store.get(path));
            out.generated_source.push_back(Index(s));
        }
    }
    out.generated = stack_images(generated);
    return out;
}

}  // namespace metairnet
