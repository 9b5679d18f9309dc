#include "metairnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "metairnet/error.hpp"
#include "metairnet/fsutil.hpp"

namespace metairnet {

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

long parse_positive(const std::string& tok, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw IngestionError("malformed image header in " + path.string());
    }
}

}  // namespace

Image<float> read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open image " + path.string());
    const std::string magic = next_token(in);
    if (magic != "P6" && magic != "P5") throw IngestionError("unsupported image format in " + path.string());
    const long w = parse_positive(next_token(in), path);
    const long h = parse_positive(next_token(in), path);
    const long maxval = parse_positive(next_token(in), path);
    if (maxval > 255) throw IngestionError("16-bit images are not supported: " + path.string());

    const long src_c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * src_c));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IngestionError("truncated image data in " + path.string());

    Image<float> im(h, w, 3);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
            for (long c = 0; c < 3; ++c) {
                const long sc = src_c == 3 ? c : 0;
                const float v01 = float(raw[static_cast<std::size_t>((y * w + x) * src_c + sc)]) / float(maxval);
                im.at(y, x, c) = 2.0f * v01 - 1.0f;
            }
    return im;
}

void write_image(const std::filesystem::path& path, const Image<float>& image) {
    if (image.channels != 3 && image.channels != 1)
        throw ShapeError("write_image: unsupported channel count " + std::to_string(image.channels));
    std::string bytes = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) + " " +
                        std::to_string(image.height) + "\n255\n";
    for (Index y = 0; y < image.height; ++y)
        for (Index x = 0; x < image.width; ++x)
            for (Index c = 0; c < image.channels; ++c) {
                const float v01 = std::clamp((image.at(y, x, c) + 1.0f) * 0.5f, 0.0f, 1.0f);
                bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v01 * 255.0f))));
            }
    write_file_atomic(path, bytes);
}

}  // namespace metairnet
