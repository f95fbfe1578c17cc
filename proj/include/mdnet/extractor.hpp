#pragma once

// Keypoint extraction: threshold + NMS per detection heatmap on an image
// pyramid, per-detector top-K across scales, nearest-pixel descriptors.

#include <mdnet/binary_io.hpp>
#include <mdnet/errors.hpp>
#include <mdnet/image.hpp>
#include <mdnet/model.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mdnet {

struct Detection {
    std::size_t x = 0, y = 0;
    float score = 0.0f;

    bool operator==(const Detection&) const = default;
};

// Pixels strictly above `threshold` that are >= every value in their
// (2r+1)² Chebyshev neighbourhood and strictly greater than any equal value
// that precedes them in row-major order. Output is in row-major order.
template <typename T>
std::vector<Detection> nms(std::span<const T> heatmap, std::size_t height, std::size_t width, double threshold,
                           std::size_t radius)
{
    require(radius >= 1, "nms: radius must be >= 1");
    require(heatmap.size() == height * width, "nms: heatmap size does not match dimensions");
    // Separable running max gives the neighbourhood maximum; ties are then
    // resolved only for the surviving candidates.
    std::vector<T> rowmax(heatmap.size()), localmax(heatmap.size());
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t x0 = x >= radius ? x - radius : 0, x1 = std::min(width - 1, x + radius);
            T m = heatmap[y * width + x0];
            for (std::size_t xx = x0 + 1; xx <= x1; ++xx) m = std::max(m, heatmap[y * width + xx]);
            rowmax[y * width + x] = m;
        }
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t y0 = y >= radius ? y - radius : 0, y1 = std::min(height - 1, y + radius);
            T m = rowmax[y0 * width + x];
            for (std::size_t yy = y0 + 1; yy <= y1; ++yy) m = std::max(m, rowmax[yy * width + x]);
            localmax[y * width + x] = m;
        }

    std::vector<Detection> out;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const T v = heatmap[y * width + x];
            if (!(static_cast<double>(v) > threshold) || v < localmax[y * width + x]) continue;
            bool earlier_tie = false;
            const std::size_t y0 = y >= radius ? y - radius : 0;
            const std::size_t x0 = x >= radius ? x - radius : 0, x1 = std::min(width - 1, x + radius);
            for (std::size_t yy = y0; yy <= y && !earlier_tie; ++yy)
                for (std::size_t xx = x0; xx <= x1; ++xx) {
                    if (yy == y && xx >= x) break;
                    if (heatmap[yy * width + xx] == v) {
                        earlier_tie = true;
                        break;
                    }
                }
            if (!earlier_tie) out.push_back({x, y, static_cast<float>(v)});
        }
    return out;
}

// Side lengths of every pyramid level: level k is round(side / factor^k);
// levels are kept while the shorter side stays >= min_dim. Level 0 is always
// present.
inline std::vector<std::pair<std::size_t, std::size_t>> pyramid_sizes(std::size_t height, std::size_t width,
                                                                       double factor, std::size_t min_dim)
{
    require(height >= 1 && width >= 1, "build_pyramid: empty image");
    require(factor > 1.0, "build_pyramid: factor must exceed 1");
    std::vector<std::pair<std::size_t, std::size_t>> sizes{{height, width}};
    for (int k = 1;; ++k) {
        const double s = std::pow(factor, k);
        const auto h = static_cast<std::size_t>(std::lround(static_cast<double>(height) / s));
        const auto w = static_cast<std::size_t>(std::lround(static_cast<double>(width) / s));
        if (std::min(h, w) < min_dim || std::min(h, w) == 0) break;
        sizes.emplace_back(h, w);
    }
    return sizes;
}

inline std::vector<Image> build_pyramid(const Image& image, double factor = std::numbers::sqrt2,
                                        std::size_t min_dim = 256)
{
    std::vector<Image> levels;
    for (auto [h, w] : pyramid_sizes(image.height, image.width, factor, min_dim))
        levels.push_back(levels.empty() ? image : resize_bilinear(image, h, w));
    return levels;
}

struct Keypoint {
    float x = 0.0f, y = 0.0f;  // level-0 pixel coordinates
    float score = 0.0f;
    std::uint8_t scale = 0;    // pyramid level
    std::uint32_t set = 0;     // detector index

    bool operator==(const Keypoint&) const = default;
};

struct ExtractionConfig {
    std::size_t budget = 2048;          // M, keypoints over all sets
    double threshold = 0.7;
    std::size_t nms_radius = 3;
    double scale_factor = std::numbers::sqrt2;
    std::size_t min_dim = 256;
    bool cross_scale_nms = false;       // drop same-set keypoints within nms_radius across levels
    std::optional<std::size_t> expected_sets;

    // ceil(M / N)
    std::size_t per_set_budget(std::size_t num_sets) const { return (budget + num_sets - 1) / num_sets; }
};

struct MultiFeatureSet {
    std::size_t height = 0, width = 0;
    std::size_t descriptor_dim = 0;
    std::vector<std::vector<Keypoint>> keypoints;   // [set][i]
    std::vector<std::vector<float>> descriptors;    // [set], row-major count×C

    std::size_t num_sets() const { return keypoints.size(); }
    std::size_t size(std::size_t set) const { return keypoints[set].size(); }

    std::size_t total() const
    {
        std::size_t n = 0;
        for (const auto& s : keypoints) n += s.size();
        return n;
    }

    std::span<const float> descriptor(std::size_t set, std::size_t i) const
    {
        return std::span<const float>(descriptors[set]).subspan(i * descriptor_dim, descriptor_dim);
    }

    bool operator==(const MultiFeatureSet&) const = default;
};

namespace detail {

struct Candidate {
    Keypoint kp;
    std::size_t level, u, v;
    std::vector<float> desc;
};

} // namespace detail

template <typename T>
MultiFeatureSet extract(const Image& image, const ModelWeights<T>& weights, const ExtractionConfig& cfg)
{
    const std::size_t num_sets = weights.config.num_detectors;
    require(cfg.budget >= num_sets, "extract: budget must be at least the number of keypoint sets");
    if (cfg.expected_sets)
        require(*cfg.expected_sets == num_sets, "extract: model has " + std::to_string(num_sets) +
                                                    " detectors, caller expects " + std::to_string(*cfg.expected_sets));
    require(image.channels == 3, "extract: expected an RGB image");
    require(cfg.nms_radius >= 1, "extract: NMS radius must be >= 1");

    const ModelWeights<T>* w = &weights;
    std::optional<ModelWeights<T>> frozen;
    if (weights.head_weight.requires_grad()) {
        frozen = weights.clone();
        frozen->set_requires_grad(false);
        w = &*frozen;
    }

    const std::size_t C = weights.config.descriptor_dim;
    std::vector<std::vector<detail::Candidate>> cands(num_sets);
    const auto levels = build_pyramid(image, cfg.scale_factor, cfg.min_dim);
    for (std::size_t level = 0; level < levels.size(); ++level) {
        const Image& img = levels[level];
        const auto out = forward(to_tensor<T>(img), *w);
        const std::size_t h = img.height, wd = img.width, plane = h * wd;
        const double sx = static_cast<double>(image.width) / static_cast<double>(wd);
        const double sy = static_cast<double>(image.height) / static_cast<double>(h);
        const auto& heat = out.heatmaps.values();
        const auto& desc = out.descriptors.values();
        for (std::size_t n = 0; n < num_sets; ++n) {
            const auto dets = nms<T>(std::span<const T>(heat).subspan(n * plane, plane), h, wd, cfg.threshold,
                                     cfg.nms_radius);
            for (const auto& d : dets) {
                detail::Candidate c;
                c.kp = {static_cast<float>(static_cast<double>(d.x) * sx), static_cast<float>(static_cast<double>(d.y) * sy),
                        d.score, static_cast<std::uint8_t>(level), static_cast<std::uint32_t>(n)};
                c.level = level;
                c.u = d.x;
                c.v = d.y;
                c.desc.resize(C);
                for (std::size_t ch = 0; ch < C; ++ch) c.desc[ch] = static_cast<float>(desc[ch * plane + d.y * wd + d.x]);
                cands[n].push_back(std::move(c));
            }
        }
    }

    MultiFeatureSet fs;
    fs.height = image.height;
    fs.width = image.width;
    fs.descriptor_dim = C;
    fs.keypoints.resize(num_sets);
    fs.descriptors.resize(num_sets);
    const std::size_t keep = cfg.per_set_budget(num_sets);
    const double r2 = static_cast<double>(cfg.nms_radius * cfg.nms_radius);
    for (std::size_t n = 0; n < num_sets; ++n) {
        auto& cs = cands[n];
        std::stable_sort(cs.begin(), cs.end(), [](const detail::Candidate& a, const detail::Candidate& b) {
            if (a.kp.score != b.kp.score) return a.kp.score > b.kp.score;
            if (a.level != b.level) return a.level < b.level;
            if (a.v != b.v) return a.v < b.v;
            return a.u < b.u;
        });
        for (const auto& c : cs) {
            if (fs.keypoints[n].size() >= keep) break;
            if (cfg.cross_scale_nms) {
                const bool clash = std::any_of(fs.keypoints[n].begin(), fs.keypoints[n].end(), [&](const Keypoint& k) {
                    const double dx = k.x - c.kp.x, dy = k.y - c.kp.y;
                    return k.scale != c.kp.scale && dx * dx + dy * dy <= r2;
                });
                if (clash) continue;
            }
            fs.keypoints[n].push_back(c.kp);
            fs.descriptors[n].insert(fs.descriptors[n].end(), c.desc.begin(), c.desc.end());
        }
    }
    return fs;
}

// ---------------------------------------------------------------------------
// Feature file: "MDF1", u32 version, u32 H, W, N, C, then per set u32 count
// followed by records (f32 x, f32 y, f32 score, u8 scale, 3 pad bytes,
// C×f32 descriptor). Little-endian.

inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string serialize_features(const MultiFeatureSet& fs)
{
    io::ByteWriter out;
    out.raw("MDF1");
    out.u32(kFeatureVersion);
    out.u32(static_cast<std::uint32_t>(fs.height));
    out.u32(static_cast<std::uint32_t>(fs.width));
    out.u32(static_cast<std::uint32_t>(fs.num_sets()));
    out.u32(static_cast<std::uint32_t>(fs.descriptor_dim));
    for (std::size_t n = 0; n < fs.num_sets(); ++n) {
        out.u32(static_cast<std::uint32_t>(fs.size(n)));
        for (std::size_t i = 0; i < fs.size(n); ++i) {
            const auto& k = fs.keypoints[n][i];
            out.f32(k.x);
            out.f32(k.y);
            out.f32(k.score);
            out.u8(k.scale);
            out.u8(0);
            out.u8(0);
            out.u8(0);
            for (float v : fs.descriptor(n, i)) out.f32(v);
        }
    }
    return out.bytes();
}

inline MultiFeatureSet deserialize_features(std::string_view bytes, const std::string& source = "features")
{
    io::ByteReader in(bytes, source);
    if (in.raw(4) != "MDF1") throw FormatError(source + ": bad magic, not an MDF1 feature file");
    if (const auto v = in.u32(); v != kFeatureVersion)
        throw FormatError(source + ": unsupported feature file version " + std::to_string(v));
    MultiFeatureSet fs;
    fs.height = in.u32();
    fs.width = in.u32();
    const std::uint32_t n = in.u32();
    fs.descriptor_dim = in.u32();
    if (n == 0 || n > 4096) throw FormatError(source + ": implausible set count");
    fs.keypoints.resize(n);
    fs.descriptors.resize(n);
    for (std::uint32_t s = 0; s < n; ++s) {
        const std::uint32_t count = in.u32();
        if (static_cast<std::uint64_t>(count) * (16 + 4 * fs.descriptor_dim) > in.remaining())
            throw FormatError(source + ": truncated keypoint block in set " + std::to_string(s));
        for (std::uint32_t i = 0; i < count; ++i) {
            Keypoint k;
            k.x = in.f32();
            k.y = in.f32();
            k.score = in.f32();
            k.scale = in.u8();
            in.raw(3);
            k.set = s;
            fs.keypoints[s].push_back(k);
            for (std::size_t c = 0; c < fs.descriptor_dim; ++c) fs.descriptors[s].push_back(in.f32());
        }
    }
    if (!in.at_end()) throw FormatError(source + ": trailing bytes after the last set");
    return fs;
}

inline void save_features(const MultiFeatureSet& fs, const std::filesystem::path& path)
{
    io::write_file_atomic(path, serialize_features(fs));
}

inline MultiFeatureSet load_features(const std::filesystem::path& path)
{
    const std::string bytes = io::read_file(path);
    return deserialize_features(bytes, path.string());
}

} // namespace mdnet
