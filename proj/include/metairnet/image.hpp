#pragma once

#include <algorithm>
#include <filesystem>
#include <vector>

#include "metairnet/tensor.hpp"

namespace metairnet {

/// H x W x C raster. Values live in [-1, 1] in memory and are mapped to
/// [0, 1] only at file I/O. Storage is channel-planar:
/// data[(c * height + y) * width + x].
template <typename S>
struct Image {
    Index height = 0;
    Index width = 0;
    Index channels = 0;
    Eigen::Array<S, Eigen::Dynamic, 1> data;

    Image() = default;
    Image(Index h, Index w, Index c) : height(h), width(w), channels(c), data(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(h * w * c)) {}

    S& at(Index y, Index x, Index c) { return data[(c * height + y) * width + x]; }
    S at(Index y, Index x, Index c) const { return data[(c * height + y) * width + x]; }

    Shape shape() const { return {height, width, channels}; }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
    Index size() const { return data.size(); }

    template <typename T>
    Image<T> cast() const {
        Image<T> out;
        out.height = height;
        out.width = width;
        out.channels = channels;
        out.data = data.template cast<T>();
        return out;
    }
};

template <typename S>
void require_same_shape(const Image<S>& a, const Image<S>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": image shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
}

/// Stack images into an [N, C, H, W] batch.
template <typename S>
Tensor<S> stack_images(const std::vector<const Image<S>*>& images) {
    if (images.empty()) throw ShapeError("stack_images: empty batch");
    const Image<S>& first = *images.front();
    Tensor<S> out({static_cast<Index>(images.size()), first.channels, first.height, first.width});
    for (std::size_t i = 0; i < images.size(); ++i) {
        require_same_shape(first, *images[i], "stack_images");
        out.data.segment(static_cast<Index>(i) * first.size(), first.size()) = images[i]->data;
    }
    return out;
}

template <typename S>
Tensor<S> stack_images(const std::vector<Image<S>>& images) {
    std::vector<const Image<S>*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    return stack_images(ptrs);
}

/// Item n of an [N, C, H, W] batch.
template <typename S>
Image<S> image_from_batch(const Tensor<S>& batch, Index n) {
    if (batch.rank() != 4) throw ShapeError("image_from_batch: expected rank 4, got " + to_string(batch.shape));
    Image<S> im(batch.dim(2), batch.dim(3), batch.dim(1));
    im.data = batch.data.segment(n * im.size(), im.size());
    return im;
}

template <typename S>
Image<S> flip_horizontal(const Image<S>& im) {
    Image<S> out(im.height, im.width, im.channels);
    for (Index r = 0; r < im.height * im.channels; ++r)
        out.data.segment(r * im.width, im.width) = im.data.segment(r * im.width, im.width).reverse();
    return out;
}

/// Bilinear resampling with pixel-center alignment.
template <typename S>
Image<S> resize_bilinear(const Image<S>& im, Index h, Index w) {
    if (im.height == h && im.width == w) return im;
    Image<S> out(h, w, im.channels);
    const double sy = double(im.height) / double(h), sx = double(im.width) / double(w);
    for (Index y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(im.height - 1));
        const Index y0 = static_cast<Index>(fy), y1 = std::min(y0 + 1, im.height - 1);
        const double ty = fy - double(y0);
        for (Index x = 0; x < w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(im.width - 1));
            const Index x0 = static_cast<Index>(fx), x1 = std::min(x0 + 1, im.width - 1);
            const double tx = fx - double(x0);
            for (Index c = 0; c < im.channels; ++c) {
                const double top = (1 - tx) * im.at(y0, x0, c) + tx * im.at(y0, x1, c);
                const double bot = (1 - tx) * im.at(y1, x0, c) + tx * im.at(y1, x1, c);
                out.at(y, x, c) = static_cast<S>((1 - ty) * top + ty * bot);
            }
        }
    }
    return out;
}

/// Read a binary PPM (P6) or PGM (P5) file. Grayscale is replicated to three
/// channels. Throws IngestionError on unreadable or malformed files.
Image<float> read_image(const std::filesystem::path& path);

/// Write as binary PPM, clamping to the valid range.
void write_image(const std::filesystem::path& path, const Image<float>& image);

}  // namespace metairnet
