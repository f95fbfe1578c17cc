#include <mdnet/matcher.hpp>
#include <mdnet/metrics.hpp>
#include <mdnet/random.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace mdnet;

namespace {

using Points = std::vector<std::vector<Point2>>;

MultiFeatureSet features(const Points& sets, std::size_t h = 100, std::size_t w = 100, std::size_t dim = 4)
{
    MultiFeatureSet f;
    f.height = h;
    f.width = w;
    f.descriptor_dim = dim;
    for (std::size_t s = 0; s < sets.size(); ++s) {
        f.keypoints.emplace_back();
        f.descriptors.emplace_back();
        for (const auto& p : sets[s]) {
            f.keypoints[s].push_back(
                {static_cast<float>(p.x), static_cast<float>(p.y), 1.0f, 0, static_cast<std::uint32_t>(s)});
            for (std::size_t k = 0; k < dim; ++k) f.descriptors[s].push_back(k == 0 ? 1.0f : 0.0f);
        }
    }
    return f;
}

Points random_points(Rng& rng, std::size_t sets, std::size_t per_set, double side)
{
    Points out(sets);
    for (auto& s : out)
        for (std::size_t i = 0; i < per_set; ++i)
            s.push_back({std::floor(rng.uniform() * side), std::floor(rng.uniform() * side)});
    return out;
}

double dist(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

Point2 translate(Point2 p, double tx, double ty) { return {p.x + tx, p.y + ty}; }

} // namespace

TEST(Mma, ThreeOfFourCorrect)
{
    const auto f1 = features({{{10, 10}, {20, 20}, {30, 30}, {40, 40}}});
    const auto f2 = features({{{10, 10}, {20.5, 20}, {31, 31}, {60, 60}}});
    const std::vector<Match> m{{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 2, 2, 0}, {0, 3, 3, 0}};
    const auto g = Homography::identity();
    EXPECT_DOUBLE_EQ(*mma(m, f1, f2, g, 3.0), 0.75);
    EXPECT_DOUBLE_EQ(*mma(m, f1, f2, g, 1.0), 0.5);  // (31,31) is √2 away
    EXPECT_FALSE(mma({}, f1, f2, g, 3.0).has_value());
}

TEST(MatchingScore, TwoCorrectOfFiveShared)
{
    // Five keypoints per image, all in the shared area, two correct matches.
    const auto f1 = features({{{10, 10}, {20, 20}, {30, 30}, {40, 40}, {50, 50}}});
    const auto f2 = features({{{10, 10}, {20, 20}, {70, 30}, {80, 40}, {90, 50}}});
    const std::vector<Match> m{{0, 0, 0, 0}, {0, 1, 1, 0}, {0, 2, 2, 0}};
    EXPECT_NEAR(*matching_score(m, f1, f2, Homography::identity(), 3.0), 0.4, 1e-12);
}

TEST(MatchingScore, OnlySharedAreaKeypointsCount)
{
    // Shift by 50: keypoints with x > 51 in the first image fall outside the second.
    const auto g = Homography::translation(50, 0);
    const auto f1 = features({{{10, 10}, {20, 20}, {80, 30}}});
    const auto f2 = features({{{60, 10}, {70, 20}, {5, 5}}});
    const std::vector<Match> m{{0, 0, 0, 0}, {0, 1, 1, 0}};
    // f1: 2 shared, 2 correct. f2: (5,5) maps to (-45,5), so 2 shared, 2 correct.
    EXPECT_DOUBLE_EQ(*matching_score(m, f1, f2, g, 1.0), 1.0);
    EXPECT_EQ(count_shared(f1, g, 100, 100), 2u);
}

TEST(SharedArea, OnePixelTolerance)
{
    const auto g = Homography::identity();
    EXPECT_TRUE(in_shared_area({-1, 0}, g, 10, 10));
    EXPECT_TRUE(in_shared_area({10, 10}, g, 10, 10));
    EXPECT_FALSE(in_shared_area({-1.01, 0}, g, 10, 10));
    EXPECT_FALSE(in_shared_area({0, 10.01}, g, 10, 10));
}

TEST(Repeatability, AllAndNone)
{
    const auto g = Homography::translation(5, 0);
    const Points p1{{{10, 10}, {30, 40}}};
    const auto f1 = features(p1);
    const auto f2 = features({{translate(p1[0][0], 5, 0), translate(p1[0][1], 5, 0)}});
    EXPECT_DOUBLE_EQ(*repeatability(f1, f2, g, 3.0), 1.0);
    const auto far = features({{{80, 80}, {90, 10}}});
    EXPECT_DOUBLE_EQ(*repeatability(f1, far, g, 3.0), 0.0);
    EXPECT_FALSE(repeatability(f1, features({{}}), g, 3.0).has_value());
}

TEST(Separability, FullyAndNotSeparated)
{
    EXPECT_DOUBLE_EQ(*separability(features({{{10, 10}}, {{20, 20}}}), 3.0), 1.0);
    EXPECT_DOUBLE_EQ(*separability(features({{{10, 10}}, {{10, 11}}}), 3.0), 0.0);
    // Exactly n apart does not count as closer than n.
    EXPECT_DOUBLE_EQ(*separability(features({{{10, 10}}, {{13, 10}}}), 3.0), 1.0);
    // Same-set neighbours never count.
    EXPECT_DOUBLE_EQ(*separability(features({{{10, 10}, {10, 11}}, {{50, 50}}}), 3.0), 1.0);
    EXPECT_FALSE(separability(features({{{1, 1}}}), 3.0).has_value());
    EXPECT_FALSE(separability(features({{}, {}}), 3.0).has_value());
}

TEST(Separability, LoopOracle)
{
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pts = random_points(rng, 3, 40, 60);
        std::size_t close = 0, total = 0;
        for (std::size_t s = 0; s < pts.size(); ++s)
            for (const auto& p : pts[s]) {
                ++total;
                bool c = false;
                for (std::size_t o = 0; o < pts.size(); ++o)
                    for (const auto& q : pts[o])
                        if (o != s && dist(p, q) < 3.0) c = true;
                close += c;
            }
        EXPECT_NEAR(*separability(features(pts), 3.0), 1.0 - static_cast<double>(close) / total, 1e-12);
    }
}

TEST(Repeatability, LoopOracle)
{
    Rng rng(8);
    const auto g = Homography::translation(7, -4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto p1 = random_points(rng, 2, 50, 100);
        const auto p2 = random_points(rng, 2, 50, 100);
        auto one_way = [](const Points& a, const Points& b, double tx, double ty) {
            std::size_t shared = 0, hit = 0;
            for (const auto& s : a)
                for (const auto& p : s) {
                    const Point2 q = translate(p, tx, ty);
                    if (q.x < -1 || q.y < -1 || q.x > 100 || q.y > 100) continue;
                    ++shared;
                    bool h = false;
                    for (const auto& t : b)
                        for (const auto& r : t) h |= dist(q, r) <= 3.0;
                    hit += h;
                }
            return static_cast<double>(hit) / shared;
        };
        const double want = 0.5 * (one_way(p1, p2, 7, -4) + one_way(p2, p1, -7, 4));
        EXPECT_NEAR(*repeatability(features(p1), features(p2), g, 3.0), want, 1e-12);
    }
}

TEST(MatchingScore, LoopOracle)
{
    Rng rng(9);
    const auto g = Homography::translation(-10, 6);
    const auto p1 = random_points(rng, 2, 60, 100);
    const auto p2 = random_points(rng, 2, 60, 100);
    std::vector<Match> m;
    for (std::uint32_t s = 0; s < 2; ++s)
        for (std::uint32_t i = 0; i < 60; i += 3) m.push_back({s, i, (i * 7) % 60, 0});
    // Make some of them correct.
    auto p2c = p2;
    for (std::size_t k = 0; k < m.size(); k += 2) p2c[m[k].set][m[k].idx2] = translate(p1[m[k].set][m[k].idx1], -10, 6);
    const auto f1 = features(p1), f2 = features(p2c);

    auto inside = [](Point2 q) { return q.x >= -1 && q.y >= -1 && q.x <= 100 && q.y <= 100; };
    std::size_t s1 = 0, s2 = 0, c1 = 0, c2 = 0;
    for (const auto& s : p1)
        for (const auto& p : s) s1 += inside(translate(p, -10, 6));
    for (const auto& s : p2c)
        for (const auto& p : s) s2 += inside(translate(p, 10, -6));
    for (const auto& mm : m) {
        const Point2 a = p1[mm.set][mm.idx1], b = p2c[mm.set][mm.idx2];
        if (dist(translate(a, -10, 6), b) > 2.0) continue;
        c1 += inside(translate(a, -10, 6));
        c2 += inside(translate(b, 10, -6));
    }
    const double want = 0.5 * (static_cast<double>(c1) / s1 + static_cast<double>(c2) / s2);
    EXPECT_NEAR(*matching_score(m, f1, f2, g, 2.0), want, 1e-12);
    EXPECT_GT(want, 0.0);
}

TEST(Report, SelfPairIsPerfect)
{
    auto f = random_feature_set(120, 3, 16, 4);
    f.height = 200;
    f.width = 200;
    Rng rng(5);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t i = 0; i < f.size(s); ++i) {
            // Place sets in disjoint horizontal bands so separability is exact.
            f.keypoints[s][i] = {static_cast<float>(5 + 4 * i), static_cast<float>(20 + 60 * s), 1.0f, 0,
                                 static_cast<std::uint32_t>(s)};
        }
    const auto matches = match_partitioned(f, f).matches;
    const auto r = evaluate_pair(f, f, Homography::identity(), matches);
    EXPECT_EQ(r.proposed, 120u);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_DOUBLE_EQ(*r.mma[k], 1.0);
        EXPECT_DOUBLE_EQ(*r.ms[k], 1.0);
    }
    EXPECT_DOUBLE_EQ(*r.repeatability3, 1.0);
    EXPECT_DOUBLE_EQ(*r.separability3, 1.0);
}

TEST(Report, EmptyFeaturesGiveAbsentRatios)
{
    const auto f = features({{}, {}});
    const auto r = evaluate_pair(f, f, Homography::identity(), {});
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_FALSE(r.mma[k].has_value());
        EXPECT_FALSE(r.ms[k].has_value());
    }
    EXPECT_FALSE(r.repeatability3.has_value());
    EXPECT_FALSE(r.separability3.has_value());
}

TEST(Report, MonotoneInThreshold)
{
    Rng rng(11);
    const auto p1 = random_points(rng, 2, 80, 100);
    auto p2 = p1;
    for (auto& s : p2)
        for (auto& p : s) p = {p.x + 3 * rng.uniform() - 1.5, p.y + 3 * rng.uniform() - 1.5};
    std::vector<Match> m;
    for (std::uint32_t s = 0; s < 2; ++s)
        for (std::uint32_t i = 0; i < 80; ++i) m.push_back({s, i, i, 0});
    const auto r = evaluate_pair(features(p1), features(p2), Homography::identity(), m);
    EXPECT_LE(*r.mma[0], *r.mma[1]);
    EXPECT_LE(*r.mma[1], *r.mma[2]);
    EXPECT_LE(*r.ms[0], *r.ms[1]);
    EXPECT_LE(*r.ms[1], *r.ms[2]);
    EXPECT_LE(r.correct[0], r.correct[1]);
    EXPECT_LE(r.correct[1], r.correct[2]);
}

TEST(Report, InvariantToKeypointOrder)
{
    Rng rng(12);
    const auto p1 = random_points(rng, 2, 30, 100);
    const auto p2 = random_points(rng, 2, 30, 100);
    std::vector<Match> m;
    for (std::uint32_t s = 0; s < 2; ++s)
        for (std::uint32_t i = 0; i < 30; i += 2) m.push_back({s, i, 29 - i, 0});
    const auto g = Homography::translation(2, 1);
    const auto a = evaluate_pair(features(p1), features(p2), g, m);

    // Reverse the order of keypoints in the first image and relabel matches.
    auto q1 = p1;
    for (auto& s : q1) std::reverse(s.begin(), s.end());
    auto m2 = m;
    for (auto& mm : m2) mm.idx1 = 29 - mm.idx1;
    const auto b = evaluate_pair(features(q1), features(p2), g, m2);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(a.mma[k], b.mma[k]);
        EXPECT_EQ(a.ms[k], b.ms[k]);
    }
    EXPECT_EQ(a.repeatability3, b.repeatability3);
    EXPECT_EQ(a.separability3, b.separability3);
}

TEST(Report, RejectsBadMatches)
{
    const auto f = features({{{1, 1}}, {{5, 5}}});
    const std::vector<Match> bad{{0, 1, 0, 0}};
    EXPECT_THROW(evaluate_pair(f, f, Homography::identity(), bad), ContractViolation);
    EXPECT_THROW(evaluate_pair(f, features({{{1, 1}}}), Homography::identity(), {}), ContractViolation);
}

TEST(ReportCsv, MeanRowSkipsAbsent)
{
    MetricReport a, b;
    a.mma = {0.5, 0.6, 0.7};
    b.mma = {std::nullopt, 0.8, 0.9};
    a.proposed = 10;
    b.proposed = 20;
    const auto csv = reports_to_csv({{"p0", a}, {"p1", b}});
    EXPECT_EQ(csv.substr(0, csv.find('\n')), report_csv_header());
    const auto last = csv.substr(csv.rfind("mean,"));
    EXPECT_EQ(last.substr(0, last.find(',', 5) + 1), "mean,0.5,");
    EXPECT_NE(last.find(",0.7,"), std::string::npos);
    EXPECT_NE(csv.find("p1,,0.8"), std::string::npos);
}

TEST(HomographyText, ParseAndFormat)
{
    const auto g = parse_homography("1 0 5\n0 1 -3\n0 0 1\n");
    const auto p = g.apply({1, 1});
    EXPECT_DOUBLE_EQ(p.p.x, 6.0);
    EXPECT_DOUBLE_EQ(p.p.y, -2.0);
    const auto back = parse_homography(format_homography(g));
    EXPECT_EQ(back.row_major(), g.row_major());
    EXPECT_THROW(parse_homography("1 0 0 0 1 0 0 0"), FormatError);
    EXPECT_THROW(parse_homography("1 0 0 0 1 0 0 0 x"), FormatError);
    EXPECT_THROW(parse_homography("0 0 0 0 0 0 0 0 1"), FormatError);
}
