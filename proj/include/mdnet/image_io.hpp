#pragma once

// 8-bit RGB image files: PNG through libpng, binary PPM (P6) by hand.
// Users of this header must link libpng.

#include <mdnet/binary_io.hpp>
#include <mdnet/errors.hpp>
#include <mdnet/image.hpp>
#include <mdnet/synthwarp.hpp>

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace mdnet::io {

namespace detail {

inline std::uint8_t quantize(float v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Interleaved RGB8 → planar float.
inline Image from_rgb8(const std::vector<std::uint8_t>& rgb, std::size_t h, std::size_t w)
{
    Image img(3, h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rgb[(y * w + x) * 3 + c]) / 255.0f;
    return img;
}

inline std::vector<std::uint8_t> to_rgb8(const Image& src)
{
    const Image img = to_rgb(src);
    std::vector<std::uint8_t> out(img.height * img.width * 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out[(y * img.width + x) * 3 + c] = quantize(img.at(c, y, x));
    return out;
}

struct PngRead {
    png_image image{};
    PngRead() { image.version = PNG_IMAGE_VERSION; }
    ~PngRead() { png_image_free(&image); }
};

} // namespace detail

inline Image decode_png(std::string_view bytes, const std::string& source)
{
    detail::PngRead r;
    if (!png_image_begin_read_from_memory(&r.image, bytes.data(), bytes.size()))
        throw FormatError(source + ": not a readable PNG (" + r.image.message + ")");
    r.image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(r.image));
    if (!png_image_finish_read(&r.image, nullptr, rgb.data(), 0, nullptr))
        throw FormatError(source + ": PNG decode failed (" + r.image.message + ")");
    return detail::from_rgb8(rgb, r.image.height, r.image.width);
}

inline std::string encode_png(const Image& img)
{
    require(img.height > 0 && img.width > 0, "encode_png: empty image");
    const auto rgb = detail::to_rgb8(img);
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&pi, nullptr, &size, 0, rgb.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + pi.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&pi, out.data(), &size, 0, rgb.data(), 0, nullptr))
        throw FormatError(std::string("PNG encode failed: ") + pi.message);
    out.resize(size);
    return out;
}

inline Image decode_ppm(std::string_view bytes, const std::string& source)
{
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&]() -> std::size_t {
        skip_space();
        std::size_t v = 0, digits = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && digits < 9) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
            ++digits;
        }
        if (digits == 0) throw FormatError(source + ": malformed PPM header");
        return v;
    };
    if (bytes.size() < 2 || bytes.substr(0, 2) != "P6") throw FormatError(source + ": not a binary PPM (P6)");
    pos = 2;
    const std::size_t w = number(), h = number(), maxval = number();
    if (w == 0 || h == 0 || maxval != 255) throw FormatError(source + ": PPM must be 8-bit with nonzero size");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw FormatError(source + ": malformed PPM header");
    ++pos;
    if (bytes.size() - pos < w * h * 3) throw FormatError(source + ": truncated PPM pixel data");
    std::vector<std::uint8_t> rgb(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + w * h * 3));
    return detail::from_rgb8(rgb, h, w);
}

inline std::string encode_ppm(const Image& img)
{
    const auto rgb = detail::to_rgb8(img);
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
    return out;
}

inline bool has_extension(const std::filesystem::path& p, std::string_view ext)
{
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e == ext;
}

inline Image load_image(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    if (bytes.size() >= 2 && bytes.compare(0, 2, "P6") == 0) return decode_ppm(bytes, path.string());
    return decode_png(bytes, path.string());
}

inline void save_image(const std::filesystem::path& path, const Image& img)
{
    write_file_atomic(path, has_extension(path, ".ppm") ? encode_ppm(img) : encode_png(img));
}

// Loads every .png/.ppm in `dir` in lexicographic filename order. Images
// smaller than `min_side` on either axis are skipped with a warning.
inline Corpus load_corpus(const std::filesystem::path& dir, std::size_t min_side, std::ostream& warn = std::cerr)
{
    if (!std::filesystem::is_directory(dir)) throw FormatError(dir.string() + ": corpus directory not found");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && (has_extension(e.path(), ".png") || has_extension(e.path(), ".ppm")))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Corpus corpus;
    for (const auto& f : files) {
        Image img = load_image(f);
        if (img.height < min_side || img.width < min_side) {
            warn << "warning: skipping " << f.filename().string() << " (" << img.width << "x" << img.height
                 << " is smaller than " << min_side << ")\n";
            continue;
        }
        corpus.names.push_back(f.filename().string());
        corpus.images.push_back(std::move(img));
    }
    if (corpus.images.empty()) throw FormatError(dir.string() + ": no usable images in corpus");
    return corpus;
}

} // namespace mdnet::io
