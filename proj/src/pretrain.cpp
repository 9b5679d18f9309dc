#include "metairnet/pretrain.hpp"

namespace metairnet {

PretrainResult<float> pretrain_toy_generator(const DatasetIndex& index, GeneratorConfig config,
                                             const PretrainConfig& pc) {
    config.num_classes = static_cast<Index>(index.classes.size());
    ImageStore store(config.resolution);
    std::vector<Image<float>> images;
    std::vector<Index> labels;
    for (std::size_t c = 0; c < index.classes.size(); ++c)
        for (const auto& rec : index.classes[c].images) {
            images.push_back(store.get(index.absolute(rec)));
            labels.push_back(static_cast<Index>(c));
        }
    if (images.empty()) throw PreconditionError("pretrain: index has no images");
    return pretrain_toy_generator(images, labels, config, pc);
}

}  // namespace metairnet
