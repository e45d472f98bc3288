#pragma once

// 8-bit RGB PNG encode/decode and conversions between byte images and
// [-1, 1] tensors.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "layerdiff/numerics/tensor.hpp"

namespace layerdiff {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Interleaved RGB bytes, row-major.
struct Rgb8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;
};

inline Rgb8 read_png(const std::string& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ImageError(path + ": " + msg);
    }
    img.format = PNG_FORMAT_RGB;
    Rgb8 out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ImageError(path + ": " + msg);
    }
    return out;
}

inline void write_png(const std::string& path, const Rgb8& image) {
    if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
        throw ImageError(path + ": pixel buffer does not match " + std::to_string(image.width) + "x" +
                         std::to_string(image.height));
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw ImageError(path + ": " + msg);
    }
}

/// [-1, 1] -> [0, 255] affine map, rounded half to even, clamped.
inline std::uint8_t to_byte(double v) {
    const double s = std::nearbyint((std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0);
    return static_cast<std::uint8_t>(s);
}

inline double from_byte(std::uint8_t b) { return static_cast<double>(b) / 255.0 * 2.0 - 1.0; }

/// Tensor[3,H,W] in [-1, 1] to interleaved bytes.
template <typename T>
Rgb8 to_rgb8(const Tensor<T>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("to_rgb8: expected [3,H,W], got " + shape_str(image.shape()));
    }
    Rgb8 out{static_cast<int>(image.dim(2)), static_cast<int>(image.dim(1)), {}};
    out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.pixels[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] =
                    to_byte(static_cast<double>(image.at3(c, y, x)));
    return out;
}

template <typename T>
Tensor<T> from_rgb8(const Rgb8& image) {
    Tensor<T> out(Shape{3, image.height, image.width});
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at3(c, y, x) =
                    static_cast<T>(from_byte(image.pixels[(static_cast<std::size_t>(y) * image.width + x) * 3 + c]));
    return out;
}

/// Bilinear resampling of the last two axes with pixel-centre alignment;
/// an exact factor-2 reduction averages 2x2 blocks.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::int64_t out_h, std::int64_t out_w) {
    if (image.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W]");
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == out_h && w == out_w) return image;
    Tensor<T> out(Shape{c, out_h, out_w});
    auto axis = [](std::int64_t o, std::int64_t n_in, std::int64_t n_out) {
        const double src = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
        const double cl = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
        const auto i0 = static_cast<std::int64_t>(std::floor(cl));
        const auto i1 = std::min(i0 + 1, n_in - 1);
        return std::tuple<std::int64_t, std::int64_t, double>{i0, i1, cl - static_cast<double>(i0)};
    };
    // Downscaling by more than 2 is done in factor-2 steps so every source
    // pixel contributes.
    if (h >= 4 * out_h && w >= 4 * out_w) return resize_bilinear(resize_bilinear(image, h / 2, w / 2), out_h, out_w);
    for (std::int64_t y = 0; y < out_h; ++y) {
        const auto [y0, y1, fy] = axis(y, h, out_h);
        for (std::int64_t x = 0; x < out_w; ++x) {
            const auto [x0, x1, fx] = axis(x, w, out_w);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double top = (1 - fx) * image.at3(ch, y0, x0) + fx * image.at3(ch, y0, x1);
                const double bot = (1 - fx) * image.at3(ch, y1, x0) + fx * image.at3(ch, y1, x1);
                out.at3(ch, y, x) = static_cast<T>((1 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

}  // namespace layerdiff
