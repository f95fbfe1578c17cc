#pragma once

// Match-quality and set-separability metrics against a ground-truth
// homography. Ratios with an empty denominator are reported as absent
// (std::nullopt), never as 0 or 1.

#include <mdnet/errors.hpp>
#include <mdnet/extractor.hpp>
#include <mdnet/homography.hpp>
#include <mdnet/matcher.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace mdnet {

using Ratio = std::optional<double>;

inline constexpr std::array<double, 3> kPixelThresholds{1.0, 2.0, 3.0};

inline Point2 keypoint_position(const MultiFeatureSet& f, std::size_t set, std::size_t i)
{
    const auto& k = f.keypoints.at(set).at(i);
    return {k.x, k.y};
}

// Shared area: the keypoint's image under g lands inside the other frame.
// No border erosion; projections up to 1 px outside the pixel grid
// [0, W-1]×[0, H-1] still count.
inline bool in_shared_area(Point2 p, const Homography& g, std::size_t other_h, std::size_t other_w)
{
    const auto m = g.apply(p);
    return m.valid && m.p.x >= -1.0 && m.p.y >= -1.0 && m.p.x <= static_cast<double>(other_w) &&
           m.p.y <= static_cast<double>(other_h);
}

inline bool is_correct(const Match& m, const MultiFeatureSet& f1, const MultiFeatureSet& f2, const Homography& g,
                       double t)
{
    const auto proj = g.apply(keypoint_position(f1, m.set, m.idx1));
    if (!proj.valid) return false;
    const Point2 q = keypoint_position(f2, m.set, m.idx2);
    return std::hypot(proj.p.x - q.x, proj.p.y - q.y) <= t;
}

inline std::size_t count_correct(std::span<const Match> matches, const MultiFeatureSet& f1, const MultiFeatureSet& f2,
                                 const Homography& g, double t)
{
    std::size_t n = 0;
    for (const auto& m : matches) n += is_correct(m, f1, f2, g, t);
    return n;
}

inline Ratio mma(std::span<const Match> matches, const MultiFeatureSet& f1, const MultiFeatureSet& f2,
                 const Homography& g, double t)
{
    if (matches.empty()) return std::nullopt;
    return static_cast<double>(count_correct(matches, f1, f2, g, t)) / static_cast<double>(matches.size());
}

inline std::size_t count_shared(const MultiFeatureSet& f, const Homography& g, std::size_t other_h, std::size_t other_w)
{
    std::size_t n = 0;
    for (std::size_t s = 0; s < f.num_sets(); ++s)
        for (std::size_t i = 0; i < f.size(s); ++i) n += in_shared_area(keypoint_position(f, s, i), g, other_h, other_w);
    return n;
}

// Per image: correct matches whose keypoint lies in that image's shared area,
// over the number of its keypoints in the shared area. The two ratios are
// averaged.
inline Ratio matching_score(std::span<const Match> matches, const MultiFeatureSet& f1, const MultiFeatureSet& f2,
                            const Homography& g, double t)
{
    const Homography inv = g.inverse();
    const std::size_t shared1 = count_shared(f1, g, f2.height, f2.width);
    const std::size_t shared2 = count_shared(f2, inv, f1.height, f1.width);
    if (shared1 == 0 || shared2 == 0) return std::nullopt;
    std::size_t c1 = 0, c2 = 0;
    for (const auto& m : matches) {
        if (!is_correct(m, f1, f2, g, t)) continue;
        c1 += in_shared_area(keypoint_position(f1, m.set, m.idx1), g, f2.height, f2.width);
        c2 += in_shared_area(keypoint_position(f2, m.set, m.idx2), inv, f1.height, f1.width);
    }
    return 0.5 * (static_cast<double>(c1) / static_cast<double>(shared1) +
                  static_cast<double>(c2) / static_cast<double>(shared2));
}

namespace detail {

// Fraction of shared-area keypoints of `a` with any keypoint of `b` within t
// px of their projection; nullopt when `a` has none in the shared area.
inline Ratio repeat_one_way(const MultiFeatureSet& a, const MultiFeatureSet& b, const Homography& g, double t)
{
    std::vector<Point2> others;
    for (std::size_t s = 0; s < b.num_sets(); ++s)
        for (std::size_t i = 0; i < b.size(s); ++i) others.push_back(keypoint_position(b, s, i));
    std::size_t shared = 0, hit = 0;
    for (std::size_t s = 0; s < a.num_sets(); ++s)
        for (std::size_t i = 0; i < a.size(s); ++i) {
            const Point2 p = keypoint_position(a, s, i);
            if (!in_shared_area(p, g, b.height, b.width)) continue;
            ++shared;
            const auto proj = g.apply(p).p;
            for (const auto& q : others)
                if (std::hypot(proj.x - q.x, proj.y - q.y) <= t) {
                    ++hit;
                    break;
                }
        }
    if (shared == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(shared);
}

} // namespace detail

inline Ratio repeatability(const MultiFeatureSet& f1, const MultiFeatureSet& f2, const Homography& g, double t)
{
    const Ratio a = detail::repeat_one_way(f1, f2, g, t);
    const Ratio b = detail::repeat_one_way(f2, f1, g.inverse(), t);
    if (!a || !b) return std::nullopt;
    return 0.5 * (*a + *b);
}

// 1 − (keypoints closer than n px to a keypoint of another set) / (all keypoints).
inline Ratio separability(const MultiFeatureSet& f, double n)
{
    if (f.num_sets() < 2) return std::nullopt;
    const std::size_t total = f.total();
    if (total == 0) return std::nullopt;
    std::size_t violating = 0;
    for (std::size_t s = 0; s < f.num_sets(); ++s)
        for (std::size_t i = 0; i < f.size(s); ++i) {
            const Point2 p = keypoint_position(f, s, i);
            bool close = false;
            for (std::size_t o = 0; o < f.num_sets() && !close; ++o) {
                if (o == s) continue;
                for (std::size_t j = 0; j < f.size(o); ++j) {
                    const Point2 q = keypoint_position(f, o, j);
                    if (std::hypot(p.x - q.x, p.y - q.y) < n) {
                        close = true;
                        break;
                    }
                }
            }
            violating += close;
        }
    return 1.0 - static_cast<double>(violating) / static_cast<double>(total);
}

struct MetricReport {
    std::array<Ratio, 3> mma{};  // at 1, 2, 3 px
    std::array<Ratio, 3> ms{};
    Ratio repeatability3;
    Ratio separability3;  // mean over the two images when defined for both
    std::size_t proposed = 0;
    std::array<std::size_t, 3> correct{};
    std::size_t shared1 = 0, shared2 = 0;
};

inline MetricReport evaluate_pair(const MultiFeatureSet& f1, const MultiFeatureSet& f2, const Homography& g,
                                  std::span<const Match> matches)
{
    require(f1.num_sets() == f2.num_sets(), "evaluate_pair: feature sets disagree on N");
    for (const auto& m : matches)
        require(m.set < f1.num_sets() && m.idx1 < f1.size(m.set) && m.idx2 < f2.size(m.set),
                "evaluate_pair: match refers to a missing keypoint");
    MetricReport r;
    r.proposed = matches.size();
    for (std::size_t k = 0; k < kPixelThresholds.size(); ++k) {
        r.correct[k] = count_correct(matches, f1, f2, g, kPixelThresholds[k]);
        r.mma[k] = mma(matches, f1, f2, g, kPixelThresholds[k]);
        r.ms[k] = matching_score(matches, f1, f2, g, kPixelThresholds[k]);
    }
    r.repeatability3 = repeatability(f1, f2, g, 3.0);
    const Ratio s1 = separability(f1, 3.0), s2 = separability(f2, 3.0);
    if (s1 && s2) r.separability3 = 0.5 * (*s1 + *s2);
    r.shared1 = count_shared(f1, g, f2.height, f2.width);
    r.shared2 = count_shared(f2, g.inverse(), f1.height, f1.width);
    return r;
}

// ---------------------------------------------------------------------------
// Report CSV: one row per pair, then a "mean" row over present values.

inline std::string report_csv_header()
{
    return "pair,mma1,mma2,mma3,ms1,ms2,ms3,rep3,sep3,proposed,correct1,correct2,correct3,shared1,shared2";
}

namespace detail {

inline std::string ratio_field(const Ratio& r)
{
    if (!r) return "";
    std::ostringstream os;
    os.precision(9);
    os << *r;
    return os.str();
}

} // namespace detail

inline std::string report_csv_row(const std::string& name, const MetricReport& r)
{
    std::ostringstream os;
    os << name;
    for (const auto& v : r.mma) os << ',' << detail::ratio_field(v);
    for (const auto& v : r.ms) os << ',' << detail::ratio_field(v);
    os << ',' << detail::ratio_field(r.repeatability3) << ',' << detail::ratio_field(r.separability3) << ','
       << r.proposed;
    for (auto c : r.correct) os << ',' << c;
    os << ',' << r.shared1 << ',' << r.shared2;
    return os.str();
}

inline std::string reports_to_csv(const std::vector<std::pair<std::string, MetricReport>>& rows)
{
    std::ostringstream os;
    os << report_csv_header() << '\n';
    for (const auto& [name, r] : rows) os << report_csv_row(name, r) << '\n';

    auto mean_of = [&](auto get) -> Ratio {
        double acc = 0;
        std::size_t n = 0;
        for (const auto& [name, r] : rows)
            if (const Ratio v = get(r)) {
                acc += *v;
                ++n;
            }
        if (n == 0) return std::nullopt;
        return acc / static_cast<double>(n);
    };
    auto mean_count = [&](auto get) {
        double acc = 0;
        for (const auto& [name, r] : rows) acc += static_cast<double>(get(r));
        return rows.empty() ? 0.0 : acc / static_cast<double>(rows.size());
    };
    os << "mean";
    for (std::size_t k = 0; k < 3; ++k) os << ',' << detail::ratio_field(mean_of([k](const MetricReport& r) { return r.mma[k]; }));
    for (std::size_t k = 0; k < 3; ++k) os << ',' << detail::ratio_field(mean_of([k](const MetricReport& r) { return r.ms[k]; }));
    os << ',' << detail::ratio_field(mean_of([](const MetricReport& r) { return r.repeatability3; }));
    os << ',' << detail::ratio_field(mean_of([](const MetricReport& r) { return r.separability3; }));
    os << ',' << mean_count([](const MetricReport& r) { return r.proposed; });
    for (std::size_t k = 0; k < 3; ++k) os << ',' << mean_count([k](const MetricReport& r) { return r.correct[k]; });
    os << ',' << mean_count([](const MetricReport& r) { return r.shared1; });
    os << ',' << mean_count([](const MetricReport& r) { return r.shared2; });
    os << '\n';
    return os.str();
}

} // namespace mdnet
