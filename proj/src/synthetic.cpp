#include "metairnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>

#include "metairnet/fsutil.hpp"
#include "metairnet/random.hpp"

namespace fs = std::filesystem;

namespace metairnet {

namespace {

constexpr int kShapes = 6;
constexpr int kTextures = 4;

bool inside(int shape, float x, float y) {
    const float ax = std::abs(x), ay = std::abs(y);
    switch (shape) {
        case 0: return x * x + y * y <= 1.f;
        case 1: return ax <= 0.8f && ay <= 0.8f;
        case 2: return y >= -0.9f && y <= 0.8f && ax <= (y + 0.9f) / 1.7f * 0.9f;
        case 3: return (ax <= 0.3f && ay <= 1.f) || (ay <= 0.3f && ax <= 1.f);
        case 4: {
            const float r2 = x * x + y * y;
            return r2 <= 1.f && r2 >= 0.36f;
        }
        default: return ax + ay <= 1.f;
    }
}

float texture_value(const ClassStyle& s, float u, float v, float phase) {
    const float c = std::cos(s.angle), sn = std::sin(s.angle);
    const float t = (c * u + sn * v) * s.frequency + phase;
    switch (s.texture) {
        case 0: return 0.f;
        case 1: return std::sin(t * 2.f * std::numbers::pi_v<float>) > 0 ? 1.f : 0.f;
        case 2: {
            const int a = static_cast<int>(std::floor(u * s.frequency + phase));
            const int b = static_cast<int>(std::floor(v * s.frequency + phase));
            return ((a + b) & 1) ? 1.f : 0.f;
        }
        default: {
            const float fu = u * s.frequency + phase - std::floor(u * s.frequency + phase) - 0.5f;
            const float fv = v * s.frequency + phase - std::floor(v * s.frequency + phase) - 0.5f;
            return fu * fu + fv * fv < 0.08f ? 1.f : 0.f;
        }
    }
}

}  // namespace

ClassStyle class_style(int class_index, std::uint64_t seed) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(class_index)));
    std::uniform_real_distribution<float> u(0.f, 1.f);
    ClassStyle s;
    s.shape = class_index % kShapes;
    s.texture = (class_index / kShapes) % kTextures;
    s.angle = u(rng) * std::numbers::pi_v<float>;
    s.frequency = 1.5f + 1.5f * u(rng);
    for (int c = 0; c < 3; ++c) {
        s.fg[c] = 0.2f + 0.8f * u(rng);
        s.accent[c] = 0.8f * u(rng);
    }
    return s;
}

Image<float> render_synthetic(const ClassStyle& s, Index resolution, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    std::normal_distribution<float> noise(0.f, 0.05f);
    const float scale = 0.55f + 0.3f * u(rng);
    const float cx = (u(rng) - 0.5f) * 0.5f, cy = (u(rng) - 0.5f) * 0.5f;
    const float phase = u(rng);
    const float jitter = 0.15f;
    float fg[3], accent[3], bg[3];
    for (int c = 0; c < 3; ++c) {
        fg[c] = std::clamp(s.fg[c] + jitter * (u(rng) - 0.5f), 0.f, 1.f);
        accent[c] = std::clamp(s.accent[c] + jitter * (u(rng) - 0.5f), 0.f, 1.f);
        bg[c] = 0.35f * u(rng);
    }
    Image<float> im(resolution, resolution, 3);
    for (Index y = 0; y < resolution; ++y)
        for (Index x = 0; x < resolution; ++x) {
            const float px = (2.f * (float(x) + 0.5f) / float(resolution) - 1.f - cx) / scale;
            const float py = (2.f * (float(y) + 0.5f) / float(resolution) - 1.f - cy) / scale;
            const bool in = inside(s.shape, px, py);
            const float t = in ? texture_value(s, px, py, phase) : 0.f;
            for (int c = 0; c < 3; ++c) {
                const float v = in ? (t > 0 ? accent[c] : fg[c]) : bg[c];
                im.at(y, x, c) = std::clamp(v + noise(rng), 0.f, 1.f) * 2.f - 1.f;
            }
        }
    return im;
}

SplitSpec write_synthetic_dataset(const fs::path& root, const fs::path& split_file, const SyntheticConfig& config) {
    if (config.base_classes < 1 || config.val_classes < 1 || config.novel_classes < 1 || config.images_per_class < 1 ||
        config.resolution < 4)
        throw PreconditionError("synthetic dataset: all counts must be positive and resolution >= 4");
    SplitSpec spec;
    const int total = config.base_classes + config.val_classes + config.novel_classes;
    std::vector<int> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, "synthetic-split"));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (int i = 0; i < total; ++i) {
        const int k = order[static_cast<std::size_t>(i)];
        char id[16];
        std::snprintf(id, sizeof id, "s%03d", k);
        const fs::path dir = root / id;
        fs::create_directories(dir);
        const ClassStyle style = class_style(k, config.seed);
        for (int j = 0; j < config.images_per_class; ++j) {
            char name[32];
            std::snprintf(name, sizeof name, "img_%02d.ppm", j);
            const auto seed = derive_seed(derive_seed(config.seed, static_cast<std::uint64_t>(k)), static_cast<std::uint64_t>(j) + 1);
            write_image(dir / name, render_synthetic(style, config.resolution, seed));
        }
        auto& part = i < config.base_classes ? spec.base
                     : i < config.base_classes + config.val_classes ? spec.val
                                                                    : spec.novel;
        part.push_back(id);
    }
    spec.validate();
    write_file_atomic(split_file, spec.to_text());
    return spec;
}

}  // namespace metairnet
