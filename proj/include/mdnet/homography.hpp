#pragma once

#include <mdnet/errors.hpp>
#include <mdnet/image.hpp>
#include <mdnet/tensor.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mdnet {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

struct MappedPoint {
    Point2 p;
    bool valid = false;  // false when the point went to the plane at infinity
};

// 3×3 projective map, stored with h33 == 1.
class Homography {
public:
    Homography() : m_(Eigen::Matrix3d::Identity()) {}

    explicit Homography(const Eigen::Matrix3d& m) : m_(m)
    {
        require(std::abs(m(2, 2)) > 1e-12, "homography: h33 must be non-zero");
        m_ /= m(2, 2);
        require(std::abs(m_.determinant()) > 1e-8, "homography: matrix is singular");
    }

    static Homography identity() { return {}; }

    static Homography translation(double tx, double ty)
    {
        Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
        m(0, 2) = tx;
        m(1, 2) = ty;
        return Homography(m);
    }

    // Row-major 9 values.
    static Homography from_row_major(std::span<const double> v)
    {
        require(v.size() == 9, "homography: expected 9 values");
        Eigen::Matrix3d m;
        m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
        return Homography(m);
    }

    std::array<double, 9> row_major() const
    {
        return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
    }

    const Eigen::Matrix3d& matrix() const { return m_; }
    double determinant() const { return m_.determinant(); }

    Homography inverse() const { return Homography(m_.inverse()); }

    // (*this) ∘ other: apply other first.
    Homography compose(const Homography& other) const { return Homography(m_ * other.m_); }

    MappedPoint apply(Point2 p) const
    {
        const double x = m_(0, 0) * p.x + m_(0, 1) * p.y + m_(0, 2);
        const double y = m_(1, 0) * p.x + m_(1, 1) * p.y + m_(1, 2);
        const double w = m_(2, 0) * p.x + m_(2, 1) * p.y + m_(2, 2);
        if (w < 1e-12) return {{0.0, 0.0}, false};
        return {{x / w, y / w}, true};
    }

private:
    Eigen::Matrix3d m_;
};

// Nine whitespace-separated numbers, row-major. Anything else is an error.
inline Homography parse_homography(const std::string& text)
{
    std::istringstream is(text);
    std::vector<double> v;
    double x = 0;
    while (is >> x) v.push_back(x);
    if (!is.eof()) throw FormatError("homography file: non-numeric token");
    if (v.size() != 9) throw FormatError("homography file: expected 9 numbers, got " + std::to_string(v.size()));
    try {
        return Homography::from_row_major(v);
    } catch (const ContractViolation& e) {
        throw FormatError(std::string("homography file: ") + e.what());
    }
}

inline std::string format_homography(const Homography& g)
{
    std::ostringstream os;
    os.precision(17);
    const auto v = g.row_major();
    for (std::size_t i = 0; i < 9; ++i) os << v[i] << (i % 3 == 2 ? '\n' : ' ');
    return os.str();
}

inline std::vector<MappedPoint> warp_points(std::span<const Point2> points, const Homography& g)
{
    std::vector<MappedPoint> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(g.apply(p));
    return out;
}

inline bool inside_frame(Point2 p, std::size_t height, std::size_t width)
{
    return p.x >= 0.0 && p.y >= 0.0 && p.x <= static_cast<double>(width) - 1.0 &&
           p.y <= static_cast<double>(height) - 1.0;
}

// Homography mapping src[i] → dst[i] for four points in general position,
// from the 8×8 linear system with h33 fixed to 1.
inline Homography homography_from_points(std::span<const Point2, 4> src, std::span<const Point2, 4> dst)
{
    Eigen::Matrix<double, 8, 8> a;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
        a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
        a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }
    const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
    Eigen::Matrix3d m;
    m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    return Homography(m);
}

// Pixels q of an out_h×out_w frame whose preimage g⁻¹(q) lies inside a
// src_h×src_w frame.
inline Mask preimage_mask(const Homography& g, std::size_t src_h, std::size_t src_w, std::size_t out_h,
                          std::size_t out_w)
{
    const Homography inv = g.inverse();
    Mask mask(out_h * out_w, 0);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto m = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            mask[y * out_w + x] = m.valid && inside_frame(m.p, src_h, src_w);
        }
    return mask;
}

inline double mask_fraction(const Mask& m)
{
    if (m.empty()) return 0.0;
    std::size_t n = 0;
    for (auto v : m) n += v != 0;
    return static_cast<double>(n) / static_cast<double>(m.size());
}

struct WarpedImage {
    Image image;
    Mask valid;
};

// Inverse mapping: out(q) = src(g⁻¹(q) + offset) by bilinear interpolation.
// Pixels whose preimage leaves the source frame are 0 and flagged invalid.
inline WarpedImage warp_image(const Image& src, const Homography& g, std::size_t out_h, std::size_t out_w,
                              Point2 source_offset = {})
{
    const Homography inv = g.inverse();
    WarpedImage out{Image(src.channels, out_h, out_w), Mask(out_h * out_w, 0)};
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            auto m = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            m.p.x += source_offset.x;
            m.p.y += source_offset.y;
            if (!m.valid || !inside_frame(m.p, src.height, src.width)) continue;
            out.valid[y * out_w + x] = 1;
            for (std::size_t c = 0; c < src.channels; ++c) out.image.at(c, y, x) = bilinear_at(src, c, m.p.x, m.p.y);
        }
    return out;
}

template <typename T>
struct WarpedTensor {
    Tensor<T> values;
    Mask valid;
};

// Differentiable counterpart of warp_image for H×W or C×H×W tensors:
// out(q) = src(g⁻¹(q)). Used as warp_tensor(D̄, g⁻¹) to bring the warped
// image's heatmaps back into the first image's frame.
template <typename T>
WarpedTensor<T> warp_tensor(const Tensor<T>& src, const Homography& g, std::size_t out_h, std::size_t out_w)
{
    require(src.rank() == 2 || src.rank() == 3, "warp_tensor: expected H×W or C×H×W");
    const std::size_t src_h = src.dim(src.rank() - 2), src_w = src.dim(src.rank() - 1);
    const Homography inv = g.inverse();
    std::vector<double> xs(out_h * out_w), ys(out_h * out_w);
    Mask valid(out_h * out_w, 0);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t i = y * out_w + x;
            const auto m = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            if (m.valid && inside_frame(m.p, src_h, src_w)) {
                valid[i] = 1;
                xs[i] = m.p.x;
                ys[i] = m.p.y;
            } else {
                xs[i] = ys[i] = -1e9;  // every tap out of frame → 0
            }
        }
    return {bilinear_sample(src, xs, ys, out_h, out_w), std::move(valid)};
}

} // namespace mdnet
