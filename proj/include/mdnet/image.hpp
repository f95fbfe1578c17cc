#pragma once

#include <mdnet/errors.hpp>
#include <mdnet/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace mdnet {

// Planar float image, channel-major (C×H×W), values nominally in [0, 1].
struct Image {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(c * h * w, fill)
    {
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }

    std::size_t plane() const { return height * width; }
    bool empty() const { return data.empty(); }

    bool operator==(const Image&) const = default;
};

// Per-pixel boolean mask, row-major H×W.
using Mask = std::vector<unsigned char>;

template <typename T>
Tensor<T> to_tensor(const Image& img)
{
    return Tensor<T>({img.channels, img.height, img.width}, std::vector<T>(img.data.begin(), img.data.end()));
}

inline Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w)
{
    require(y0 + h <= img.height && x0 + w <= img.width, "crop: window outside image");
    Image out(img.channels, h, w);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(&img.data[(c * img.height + y0 + y) * img.width + x0], w, &out.data[(c * h + y) * w]);
    return out;
}

// Bilinear read at a real position; (x, y) must lie in [0, W−1]×[0, H−1].
inline float bilinear_at(const Image& img, std::size_t c, double x, double y)
{
    const double fx = std::floor(x), fy = std::floor(y);
    const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
    const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
    const double ax = x - fx, ay = y - fy;
    const double top = (1 - ax) * img.at(c, y0, x0) + ax * img.at(c, y0, x1);
    const double bot = (1 - ax) * img.at(c, y1, x0) + ax * img.at(c, y1, x1);
    return static_cast<float>((1 - ay) * top + ay * bot);
}

// Bilinear resize with pixel-centre alignment.
inline Image resize_bilinear(const Image& img, std::size_t h, std::size_t w)
{
    require(h > 0 && w > 0, "resize_bilinear: empty target size");
    Image out(img.channels, h, w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(h);
    const double sx = static_cast<double>(img.width) / static_cast<double>(w);
    for (std::size_t y = 0; y < h; ++y) {
        const double py = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        for (std::size_t x = 0; x < w; ++x) {
            const double px = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            for (std::size_t c = 0; c < img.channels; ++c) out.at(c, y, x) = bilinear_at(img, c, px, py);
        }
    }
    return out;
}

inline Image to_rgb(const Image& img)
{
    if (img.channels == 3) return img;
    require(img.channels == 1, "to_rgb: expected 1 or 3 channels");
    Image out(3, img.height, img.width);
    for (std::size_t c = 0; c < 3; ++c) std::copy(img.data.begin(), img.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * img.plane()));
    return out;
}

} // namespace mdnet
