#pragma once

// Self-supervision data: random homographies, photometric jitter, synthetic
// textures, and (I, g(I)) training pairs cut from an image corpus.

#include <mdnet/errors.hpp>
#include <mdnet/homography.hpp>
#include <mdnet/image.hpp>
#include <mdnet/random.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace mdnet {

struct HomographyLimits {
    double rotation_deg = 25.0;
    double scale_min = 0.7;  // per axis
    double scale_max = 1.4;
    double translation = 0.10;  // fraction of patch size
    double perspective = 0.08;  // corner jitter, fraction of patch size
    double min_overlap = 0.4;
    int max_draws = 100;

    static HomographyLimits none()
    {
        HomographyLimits l;
        l.rotation_deg = 0.0;
        l.scale_min = l.scale_max = 1.0;
        l.translation = 0.0;
        l.perspective = 0.0;
        l.min_overlap = 0.0;
        return l;
    }
};

// Fraction of each frame that has a correspondence in the other; the smaller
// of the two directions.
inline double homography_overlap(const Homography& g, std::size_t height, std::size_t width)
{
    const double fwd = mask_fraction(preimage_mask(g, height, width, height, width));
    const double bwd = mask_fraction(preimage_mask(g.inverse(), height, width, height, width));
    return std::min(fwd, bwd);
}

// Centre-anchored rotation and anisotropic scale, then translation, then
// perspective jitter of the four frame corners. Rejects draws whose overlap
// falls below limits.min_overlap.
inline Homography sample_homography(std::uint64_t seed, const HomographyLimits& limits, std::size_t width,
                                    std::size_t height)
{
    require(width >= 2 && height >= 2, "sample_homography: frame too small");
    require(limits.scale_min > 0.0 && limits.scale_min <= limits.scale_max, "sample_homography: bad scale range");
    Rng rng(seed);
    const double w = static_cast<double>(width), h = static_cast<double>(height);
    const double cx = (w - 1.0) / 2.0, cy = (h - 1.0) / 2.0;
    const double size = std::max(w, h);
    for (int draw = 0; draw < limits.max_draws; ++draw) {
        const double theta = rng.uniform(-limits.rotation_deg, limits.rotation_deg) * std::numbers::pi / 180.0;
        const double ls0 = std::log(limits.scale_min), ls1 = std::log(limits.scale_max);
        const double sx = std::exp(rng.uniform(ls0, ls1));
        const double sy = std::exp(rng.uniform(ls0, ls1));
        const double tx = rng.uniform(-limits.translation, limits.translation) * size;
        const double ty = rng.uniform(-limits.translation, limits.translation) * size;

        Eigen::Matrix3d to_origin = Eigen::Matrix3d::Identity(), back = Eigen::Matrix3d::Identity();
        to_origin(0, 2) = -cx;
        to_origin(1, 2) = -cy;
        back(0, 2) = cx + tx;
        back(1, 2) = cy + ty;
        Eigen::Matrix3d rot = Eigen::Matrix3d::Identity(), scl = Eigen::Matrix3d::Identity();
        rot(0, 0) = std::cos(theta);
        rot(0, 1) = -std::sin(theta);
        rot(1, 0) = std::sin(theta);
        rot(1, 1) = std::cos(theta);
        scl(0, 0) = sx;
        scl(1, 1) = sy;
        Homography g(back * rot * scl * to_origin);

        if (limits.perspective > 0.0) {
            const std::array<Point2, 4> corners{{{0, 0}, {w - 1, 0}, {w - 1, h - 1}, {0, h - 1}}};
            std::array<Point2, 4> moved;
            for (int i = 0; i < 4; ++i) {
                const auto m = g.apply(corners[i]);
                moved[i] = {m.p.x + rng.uniform(-limits.perspective, limits.perspective) * size,
                            m.p.y + rng.uniform(-limits.perspective, limits.perspective) * size};
            }
            try {
                g = homography_from_points(std::span<const Point2, 4>(corners), std::span<const Point2, 4>(moved));
            } catch (const ContractViolation&) {
                continue;
            }
        }
        if (std::abs(g.determinant()) <= 1e-8) continue;
        if (limits.min_overlap <= 0.0 || homography_overlap(g, height, width) >= limits.min_overlap) return g;
    }
    throw SamplingError("sample_homography: no draw reached the minimum overlap after " +
                        std::to_string(limits.max_draws) + " attempts");
}

// ---------------------------------------------------------------------------
// Photometric jitter

struct PhotometricConfig {
    double brightness = 0.2;      // additive, ±
    double contrast_min = 0.7;    // multiplicative about 0.5
    double contrast_max = 1.3;
    double gain_min = 0.9;        // per channel
    double gain_max = 1.1;
    double noise_sigma = 0.02;    // upper bound of the Gaussian noise σ
};

struct PhotometricParams {
    double brightness = 0.0;
    double contrast = 1.0;
    std::array<double, 3> gain{1.0, 1.0, 1.0};
    double noise_sigma = 0.0;
};

inline Image apply_photometric(const Image& img, const PhotometricParams& p, Rng& noise_rng)
{
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c) {
        const double gain = p.gain[std::min<std::size_t>(c, 2)];
        for (std::size_t i = 0; i < img.plane(); ++i) {
            double v = img.data[c * img.plane() + i];
            if (p.contrast != 1.0) v = (v - 0.5) * p.contrast + 0.5;
            v += p.brightness;
            if (gain != 1.0) v *= gain;
            if (p.noise_sigma > 0.0) v += p.noise_sigma * noise_rng.normal();
            out.data[c * img.plane() + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

// strength in [0, 1] scales every range towards the identity transform.
inline Image photometric_augment(const Image& img, std::uint64_t seed, double strength,
                                 const PhotometricConfig& cfg = {})
{
    require(strength >= 0.0 && strength <= 1.0, "photometric_augment: strength must be in [0, 1]");
    if (strength == 0.0) return img;
    Rng rng(seed);
    PhotometricParams p;
    p.brightness = rng.uniform(-cfg.brightness, cfg.brightness) * strength;
    p.contrast = 1.0 + (rng.uniform(cfg.contrast_min, cfg.contrast_max) - 1.0) * strength;
    for (auto& g : p.gain) g = 1.0 + (rng.uniform(cfg.gain_min, cfg.gain_max) - 1.0) * strength;
    p.noise_sigma = rng.uniform(0.0, cfg.noise_sigma) * strength;
    return apply_photometric(img, p, rng);
}

// ---------------------------------------------------------------------------
// Synthetic textures: coloured multi-octave value noise, random filled
// polygons, and flat colour bands.

namespace detail {

inline double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

inline void add_value_noise(Image& img, Rng& rng, std::size_t cell, double amplitude)
{
    const std::size_t gh = img.height / cell + 2, gw = img.width / cell + 2;
    for (std::size_t c = 0; c < img.channels; ++c) {
        std::vector<double> grid(gh * gw);
        for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
        for (std::size_t y = 0; y < img.height; ++y) {
            const double gy = static_cast<double>(y) / static_cast<double>(cell);
            const auto y0 = static_cast<std::size_t>(gy);
            const double ty = smooth(gy - static_cast<double>(y0));
            for (std::size_t x = 0; x < img.width; ++x) {
                const double gx = static_cast<double>(x) / static_cast<double>(cell);
                const auto x0 = static_cast<std::size_t>(gx);
                const double tx = smooth(gx - static_cast<double>(x0));
                const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
                const double d = grid[(y0 + 1) * gw + x0], e = grid[(y0 + 1) * gw + x0 + 1];
                const double v = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
                img.at(c, y, x) += static_cast<float>(amplitude * v);
            }
        }
    }
}

inline bool point_in_polygon(double x, double y, const std::vector<Point2>& poly)
{
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
    }
    return in;
}

inline void fill_polygon(Image& img, const std::vector<Point2>& poly, const std::array<float, 3>& color)
{
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (const auto& p : poly) {
        x0 = std::min(x0, p.x);
        y0 = std::min(y0, p.y);
        x1 = std::max(x1, p.x);
        y1 = std::max(y1, p.y);
    }
    const auto lo = [](double v) { return static_cast<std::size_t>(std::max(0.0, std::floor(v))); };
    const auto hi = [](double v, std::size_t n) { return static_cast<std::size_t>(std::clamp(std::ceil(v), 0.0, static_cast<double>(n))); };
    for (std::size_t y = lo(y0); y < hi(y1, img.height); ++y)
        for (std::size_t x = lo(x0); x < hi(x1, img.width); ++x)
            if (point_in_polygon(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, poly))
                for (std::size_t c = 0; c < img.channels; ++c) img.at(c, y, x) = color[c];
}

inline std::array<float, 3> random_color(Rng& rng)
{
    return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

inline void fill_rect(Image& img, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                      const std::array<float, 3>& color, Mask* mask = nullptr)
{
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) {
            for (std::size_t c = 0; c < img.channels; ++c) img.at(c, y, x) = color[c];
            if (mask) (*mask)[y * img.width + x] = 1;
        }
}

} // namespace detail

struct TextureOptions {
    int min_polygons = 6;
    int max_polygons = 14;
    int max_bands = 2;  // random flat bands, 0 disables
};

inline Image make_texture(std::uint64_t seed, std::size_t height, std::size_t width, const TextureOptions& opt = {})
{
    require(height >= 8 && width >= 8, "make_texture: image too small");
    Rng rng(seed);
    Image img(3, height, width, 0.5f);
    const std::size_t side = std::min(height, width);
    double amp = 0.35;
    for (std::size_t cell = std::max<std::size_t>(side / 3, 4); cell >= 3; cell /= 2, amp *= 0.6)
        detail::add_value_noise(img, rng, cell, amp);

    const int npoly = opt.min_polygons + static_cast<int>(rng.index(static_cast<std::uint64_t>(opt.max_polygons - opt.min_polygons + 1)));
    for (int k = 0; k < npoly; ++k) {
        const double cx = rng.uniform(0.0, static_cast<double>(width));
        const double cy = rng.uniform(0.0, static_cast<double>(height));
        const double r = rng.uniform(0.05, 0.22) * static_cast<double>(side);
        const int nv = 3 + static_cast<int>(rng.index(5));
        std::vector<Point2> poly;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (int v = 0; v < nv; ++v) {
            const double a = phase + 2.0 * std::numbers::pi * (v + rng.uniform(-0.3, 0.3)) / nv;
            const double rr = r * rng.uniform(0.5, 1.0);
            poly.push_back({cx + rr * std::cos(a), cy + rr * std::sin(a)});
        }
        detail::fill_polygon(img, poly, detail::random_color(rng));
    }
    // Fine grain over noise and polygons alike; only the bands stay flat.
    detail::add_value_noise(img, rng, 6, 0.12);
    detail::add_value_noise(img, rng, 3, 0.08);

    const int nbands = opt.max_bands > 0 ? static_cast<int>(rng.index(static_cast<std::uint64_t>(opt.max_bands) + 1)) : 0;
    for (int k = 0; k < nbands; ++k) {
        const bool vertical = rng.uniform() < 0.5;
        const std::size_t extent = vertical ? width : height;
        const auto thick = static_cast<std::size_t>(rng.uniform(0.10, 0.25) * static_cast<double>(extent));
        const auto start = static_cast<std::size_t>(rng.index(extent - thick + 1));
        const auto color = detail::random_color(rng);
        if (vertical)
            detail::fill_rect(img, 0, height, start, start + thick, color);
        else
            detail::fill_rect(img, start, start + thick, 0, width, color);
    }
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

struct BandedImage {
    Image image;
    Mask band;  // 1 inside the flat band
};

// Texture without random bands plus one flat vertical band covering
// `fraction` of the columns.
inline BandedImage make_flat_band_image(std::uint64_t seed, std::size_t size, double fraction = 0.25)
{
    require(fraction > 0.0 && fraction < 1.0, "make_flat_band_image: fraction must be in (0, 1)");
    TextureOptions opt;
    opt.max_bands = 0;
    BandedImage out{make_texture(seed, size, size, opt), Mask(size * size, 0)};
    Rng rng(Rng::derive(seed, 0xBA4D));
    const auto thick = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(size)));
    const auto start = static_cast<std::size_t>(rng.index(size - thick + 1));
    detail::fill_rect(out.image, 0, size, start, start + thick, detail::random_color(rng), &out.band);
    return out;
}

inline Image make_checkerboard(std::size_t size, std::size_t square, float dark = 0.0f, float light = 1.0f)
{
    require(square >= 1, "make_checkerboard: square must be >= 1");
    Image img(3, size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const float v = ((y / square + x / square) % 2 == 0) ? light : dark;
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = v;
        }
    return img;
}

// ---------------------------------------------------------------------------
// Training pairs

struct Corpus {
    std::vector<Image> images;
    std::vector<std::string> names;

    bool empty() const { return images.empty(); }

    // Indices of images large enough to cut a patch from.
    std::vector<std::size_t> eligible(std::size_t patch) const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < images.size(); ++i)
            if (images[i].height >= patch && images[i].width >= patch) out.push_back(i);
        return out;
    }
};

inline Corpus synthetic_corpus(std::size_t count, std::size_t size, std::uint64_t seed)
{
    Corpus c;
    for (std::size_t i = 0; i < count; ++i) {
        c.images.push_back(make_texture(Rng::derive(seed, i), size, size));
        c.names.push_back("synthetic_" + std::to_string(i));
    }
    return c;
}

struct WarpSample {
    Image source;       // I, 3×h×w
    Image warped;       // g(I), 3×h×w
    Homography g;       // source pixel → warped pixel
    Mask source_valid;  // p in I with g(p) inside the warped frame
    Mask warped_valid;  // q in g(I) with g⁻¹(q) inside the source frame
};

struct PairSamplerConfig {
    std::size_t patch = 96;
    HomographyLimits limits;
    PhotometricConfig photometric;
    double photometric_strength = 1.0;
};

// Draws an image, crops a patch I, warps the surrounding image content with a
// random homography to obtain g(I), and jitters both photometrically.
inline WarpSample sample_training_pair(const Corpus& corpus, std::uint64_t seed, const PairSamplerConfig& cfg)
{
    if (corpus.empty()) throw ContractViolation("sample_training_pair: empty corpus");
    const auto eligible = corpus.eligible(cfg.patch);
    if (eligible.empty())
        throw ContractViolation("sample_training_pair: no corpus image is at least " + std::to_string(cfg.patch) + " px");
    Rng rng(seed);
    const Image& full = corpus.images[eligible[rng.index(eligible.size())]];
    const auto oy = static_cast<std::size_t>(rng.index(full.height - cfg.patch + 1));
    const auto ox = static_cast<std::size_t>(rng.index(full.width - cfg.patch + 1));

    WarpSample s;
    s.g = sample_homography(Rng::derive(seed, 1), cfg.limits, cfg.patch, cfg.patch);
    s.source = crop(full, oy, ox, cfg.patch, cfg.patch);
    s.warped = warp_image(full, s.g, cfg.patch, cfg.patch, {static_cast<double>(ox), static_cast<double>(oy)}).image;
    s.source_valid = preimage_mask(s.g.inverse(), cfg.patch, cfg.patch, cfg.patch, cfg.patch);
    s.warped_valid = preimage_mask(s.g, cfg.patch, cfg.patch, cfg.patch, cfg.patch);
    s.source = photometric_augment(s.source, Rng::derive(seed, 2), cfg.photometric_strength, cfg.photometric);
    s.warped = photometric_augment(s.warped, Rng::derive(seed, 3), cfg.photometric_strength, cfg.photometric);
    return s;
}

} // namespace mdnet
