#pragma once

#include <cstdint>
#include <filesystem>

#include "metairnet/data.hpp"

namespace metairnet {

/// Procedural shapes-and-textures dataset. A class fixes a shape, a texture
/// and a palette; images vary position, scale, texture phase, colour and
/// background.
struct SyntheticConfig {
    int base_classes = 20;
    int val_classes = 5;
    int novel_classes = 10;
    int images_per_class = 30;
    Index resolution = 16;
    std::uint64_t seed = 0;
};

struct ClassStyle {
    int shape = 0;    // disk, square, triangle, cross, ring, diamond
    int texture = 0;  // solid, stripes, checker, dots
    float angle = 0;  // stripe orientation
    float frequency = 1;
    float fg[3] = {0, 0, 0};
    float accent[3] = {0, 0, 0};
};

ClassStyle class_style(int class_index, std::uint64_t seed);

/// Image in [-1, 1].
Image<float> render_synthetic(const ClassStyle& style, Index resolution, std::uint64_t seed);

/// Writes root/<class>/img_XX.ppm plus the split file and returns the split.
SplitSpec write_synthetic_dataset(const std::filesystem::path& root, const std::filesystem::path& split_file,
                                  const SyntheticConfig& config);

}  // namespace metairnet
