#pragma once

// Mutual-nearest-neighbour matching on unit descriptors. Similarity is the
// inner product (argmax inner product == argmin Euclidean distance on the
// unit sphere); every evaluated pair is counted so the partitioned cost
// Σ_n |A_n|·|B_n| can be checked as an exact integer.

#include <mdnet/errors.hpp>
#include <mdnet/extractor.hpp>
#include <mdnet/random.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace mdnet {

struct Match {
    std::uint32_t set = 0;
    std::uint32_t idx1 = 0;  // index within the set in the first image
    std::uint32_t idx2 = 0;
    float distance = 0.0f;

    bool operator==(const Match&) const = default;
};

struct MatchResult {
    std::vector<Match> matches;
    std::uint64_t distance_computations = 0;
    double wallclock_ms = 0.0;
};

struct MnnOutput {
    std::vector<Match> matches;  // set field is 0
    std::uint64_t distance_computations = 0;
};

// rows_a×dim against rows_b×dim, row-major. Pairs (i, j) with j the best
// match of i and i the best match of j; ties go to the lowest index.
template <typename T>
MnnOutput mnn_match(std::span<const T> a, std::size_t rows_a, std::span<const T> b, std::size_t rows_b,
                    std::size_t dim)
{
    require(a.size() == rows_a * dim && b.size() == rows_b * dim,
            "mnn_match: descriptor buffers do not match rows×dim");
    MnnOutput out;
    out.distance_computations = static_cast<std::uint64_t>(rows_a) * rows_b;
    if (rows_a == 0 || rows_b == 0) return out;

    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> ma(a.data(), static_cast<Eigen::Index>(rows_a), static_cast<Eigen::Index>(dim));
    Eigen::Map<const Mat> mb(b.data(), static_cast<Eigen::Index>(rows_b), static_cast<Eigen::Index>(dim));

    // GEMM rounding depends on where a row lands in the kernel's blocking, so
    // equal descriptors need not score equally. Every entry within `tol` of a
    // row/column maximum is re-scored in a fixed order before the tie rule.
    auto exact = [&](std::size_t i, std::size_t j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < dim; ++k)
            acc += static_cast<double>(a[i * dim + k]) * static_cast<double>(b[j * dim + k]);
        return acc;
    };
    const double eps = static_cast<double>(std::numeric_limits<T>::epsilon()) * 4.0 * static_cast<double>(dim);
    auto tol = [&](T m) { return static_cast<T>(eps * (1.0 + std::abs(static_cast<double>(m)))); };

    struct Near {
        std::uint32_t row;
        T score;
    };
    std::vector<T> col_max(rows_b, -std::numeric_limits<T>::infinity());
    std::vector<std::vector<Near>> col_near(rows_b);
    std::vector<std::uint32_t> best_b(rows_a, 0);

    constexpr std::size_t block = 64;
    Mat scores;
    for (std::size_t r0 = 0; r0 < rows_a; r0 += block) {
        const std::size_t nr = std::min(block, rows_a - r0);
        scores.noalias() = ma.middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(nr)) * mb.transpose();
        // Maxima are exact whatever the evaluation order.
        const Eigen::Matrix<T, Eigen::Dynamic, 1> row_max = scores.rowwise().maxCoeff();
        const Eigen::Matrix<T, 1, Eigen::Dynamic> block_col_max = scores.colwise().maxCoeff();
        for (std::size_t j = 0; j < rows_b; ++j) {
            if (block_col_max(static_cast<Eigen::Index>(j)) < col_max[j] - tol(col_max[j])) continue;
            for (std::size_t r = 0; r < nr; ++r) {
                const T s = scores(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
                const auto i = static_cast<std::uint32_t>(r0 + r);
                if (s > col_max[j] + tol(col_max[j])) {
                    col_max[j] = s;
                    col_near[j].assign(1, {i, s});
                } else if (s >= col_max[j] - tol(col_max[j])) {
                    col_max[j] = std::max(col_max[j], s);
                    col_near[j].push_back({i, s});
                }
            }
        }
        for (std::size_t r = 0; r < nr; ++r) {
            const std::size_t i = r0 + r;
            const T* row = scores.data() + r * rows_b;
            const T cut = row_max(static_cast<Eigen::Index>(r)) - tol(row_max(static_cast<Eigen::Index>(r)));
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < rows_b; ++j) {
                if (row[j] < cut) continue;
                const double s = exact(i, j);
                if (s > best) {
                    best = s;
                    best_b[i] = static_cast<std::uint32_t>(j);
                }
            }
        }
    }

    std::vector<std::uint32_t> best_a(rows_b, 0);
    for (std::size_t j = 0; j < rows_b; ++j) {
        const T cut = col_max[j] - tol(col_max[j]);
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& n : col_near[j]) {  // rows arrive in increasing order
            if (n.score < cut) continue;
            const double s = exact(n.row, j);
            if (s > best) {
                best = s;
                best_a[j] = n.row;
            }
        }
    }
    for (std::size_t i = 0; i < rows_a; ++i) {
        const std::uint32_t j = best_b[i];
        if (best_a[j] != i) continue;
        const double d = std::sqrt(std::max(0.0, 2.0 - 2.0 * exact(i, j)));
        out.matches.push_back({0, static_cast<std::uint32_t>(i), j, static_cast<float>(d)});
    }
    return out;
}

// Matches only set n of the first image against set n of the second and
// concatenates the per-set results in set order.
inline MatchResult match_partitioned(const MultiFeatureSet& f1, const MultiFeatureSet& f2)
{
    require(f1.num_sets() == f2.num_sets(), "match_partitioned: feature sets disagree on N (" +
                                                std::to_string(f1.num_sets()) + " vs " + std::to_string(f2.num_sets()) + ")");
    require(f1.descriptor_dim == f2.descriptor_dim, "match_partitioned: descriptor dimensions differ");
    const auto t0 = std::chrono::steady_clock::now();
    MatchResult r;
    for (std::size_t n = 0; n < f1.num_sets(); ++n) {
        auto part = mnn_match<float>(f1.descriptors[n], f1.size(n), f2.descriptors[n], f2.size(n), f1.descriptor_dim);
        for (auto& m : part.matches) {
            m.set = static_cast<std::uint32_t>(n);
            r.matches.push_back(m);
        }
        r.distance_computations += part.distance_computations;
    }
    r.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// Single-detector baseline: every keypoint of f1 against every keypoint of
// f2 regardless of set. Matches carry set 0 and indices into the
// concatenation of all sets (set order).
inline MatchResult match_full(const MultiFeatureSet& f1, const MultiFeatureSet& f2)
{
    require(f1.descriptor_dim == f2.descriptor_dim, "match_full: descriptor dimensions differ");
    auto flat = [](const MultiFeatureSet& f) {
        std::vector<float> all;
        for (const auto& d : f.descriptors) all.insert(all.end(), d.begin(), d.end());
        return all;
    };
    const auto t0 = std::chrono::steady_clock::now();
    const auto a = flat(f1), b = flat(f2);
    auto part = mnn_match<float>(a, f1.total(), b, f2.total(), f1.descriptor_dim);
    MatchResult r;
    r.matches = std::move(part.matches);
    r.distance_computations = part.distance_computations;
    r.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string matches_to_csv(const MatchResult& r)
{
    std::ostringstream os;
    os.precision(9);
    os << "set,idx1,idx2,distance\n";
    for (const auto& m : r.matches) os << m.set << ',' << m.idx1 << ',' << m.idx2 << ',' << m.distance << '\n';
    return os.str();
}

inline std::vector<Match> matches_from_csv(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    std::vector<Match> out;
    if (!std::getline(in, line) || line.rfind("set,idx1,idx2,distance", 0) != 0)
        throw FormatError("match csv: missing header 'set,idx1,idx2,distance'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Match m;
        char c1 = 0, c2 = 0, c3 = 0;
        std::istringstream ls(line);
        if (!(ls >> m.set >> c1 >> m.idx1 >> c2 >> m.idx2 >> c3 >> m.distance) || c1 != ',' || c2 != ',' || c3 != ',')
            throw FormatError("match csv: malformed line '" + line + "'");
        out.push_back(m);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pairwise matching benchmark

// Worker count from MDNET_THREADS (default 1).
inline std::size_t configured_threads()
{
    if (const char* env = std::getenv("MDNET_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    return 1;
}

// `count` random unit descriptors of length dim, evenly split into num_sets
// contiguous sets (the first count % num_sets sets get one extra).
inline MultiFeatureSet random_feature_set(std::size_t count, std::size_t num_sets, std::size_t dim, std::uint64_t seed)
{
    require(num_sets >= 1 && dim >= 1, "random_feature_set: bad arguments");
    Rng rng(seed);
    MultiFeatureSet fs;
    fs.descriptor_dim = dim;
    fs.keypoints.resize(num_sets);
    fs.descriptors.resize(num_sets);
    std::vector<float> v(dim);
    for (std::size_t n = 0; n < num_sets; ++n) {
        const std::size_t len = count / num_sets + (n < count % num_sets ? 1 : 0);
        for (std::size_t i = 0; i < len; ++i) {
            double sq = 0;
            for (auto& x : v) {
                x = static_cast<float>(rng.normal());
                sq += static_cast<double>(x) * x;
            }
            const double inv = 1.0 / std::sqrt(sq);
            for (auto x : v) fs.descriptors[n].push_back(static_cast<float>(x * inv));
            fs.keypoints[n].push_back({0, 0, 1.0f, 0, static_cast<std::uint32_t>(n)});
        }
    }
    return fs;
}

struct BenchRow {
    std::size_t num_sets = 1;
    double total_s = 0.0;
    double ms_per_pair = 0.0;
    std::uint64_t distances_per_pair = 0;
    double speedup_vs_1 = 0.0;  // 0 when N = 1 was not benchmarked
    bool oracle_ok = true;      // per-set equivalence held on every pair (when verified)
};

struct BenchConfig {
    std::size_t num_images = 40;
    std::size_t keypoints = 2048;
    std::vector<std::size_t> set_counts{1, 2, 4, 8};
    std::size_t dim = 128;
    std::uint64_t seed = 1;
    bool verify = false;  // re-run each set pair alone and compare
    std::size_t threads = 1;
};

inline std::vector<BenchRow> bench_pairwise(const BenchConfig& cfg)
{
    require(cfg.num_images >= 2, "bench_pairwise: need at least two images");
    std::vector<BenchRow> rows;
    for (std::size_t n : cfg.set_counts) {
        std::vector<MultiFeatureSet> feats;
        for (std::size_t i = 0; i < cfg.num_images; ++i)
            feats.push_back(random_feature_set(cfg.keypoints, n, cfg.dim, Rng::derive(cfg.seed, i)));
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t i = 0; i < cfg.num_images; ++i)
            for (std::size_t j = i + 1; j < cfg.num_images; ++j) pairs.emplace_back(i, j);

        const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, pairs.size()));
        std::vector<std::uint64_t> counts(pairs.size());
        // One untimed pair so the first timed N does not pay for cold caches.
        (void)match_partitioned(feats[pairs[0].first], feats[pairs[0].second]);
        const auto t0 = std::chrono::steady_clock::now();
        auto worker = [&](std::size_t tid) {
            for (std::size_t p = tid; p < pairs.size(); p += threads)
                counts[p] = match_partitioned(feats[pairs[p].first], feats[pairs[p].second]).distance_computations;
        };
        if (threads == 1) {
            worker(0);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t);
            for (auto& th : pool) th.join();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        BenchRow row;
        row.num_sets = n;
        row.total_s = secs;
        row.ms_per_pair = 1e3 * secs / static_cast<double>(pairs.size());
        row.distances_per_pair = counts.front();
        for (auto c : counts)
            if (c != row.distances_per_pair) row.oracle_ok = false;
        if (cfg.verify) {
            for (const auto& [i, j] : pairs) {
                const auto joint = match_partitioned(feats[i], feats[j]);
                std::vector<Match> expect;
                for (std::size_t s = 0; s < n; ++s) {
                    auto part = mnn_match<float>(feats[i].descriptors[s], feats[i].size(s), feats[j].descriptors[s],
                                                 feats[j].size(s), cfg.dim);
                    for (auto& m : part.matches) {
                        m.set = static_cast<std::uint32_t>(s);
                        expect.push_back(m);
                    }
                }
                if (joint.matches != expect) row.oracle_ok = false;
            }
        }
        rows.push_back(row);
    }
    const auto base = std::find_if(rows.begin(), rows.end(), [](const BenchRow& r) { return r.num_sets == 1; });
    if (base != rows.end())
        for (auto& r : rows) r.speedup_vs_1 = base->total_s / r.total_s;
    return rows;
}

inline std::string bench_to_csv(const std::vector<BenchRow>& rows)
{
    std::ostringstream os;
    os.precision(9);
    os << "N,total_s,ms_per_pair,distances_per_pair,speedup_vs_1\n";
    for (const auto& r : rows)
        os << r.num_sets << ',' << r.total_s << ',' << r.ms_per_pair << ',' << r.distances_per_pair << ','
           << r.speedup_vs_1 << '\n';
    return os.str();
}

} // namespace mdnet
