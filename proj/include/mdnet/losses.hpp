#pragma once

#include <mdnet/errors.hpp>
#include <mdnet/homography.hpp>
#include <mdnet/model.hpp>
#include <mdnet/tensor.hpp>

#include <cmath>
#include <optional>
#include <vector>

namespace mdnet {

struct TripletConfig {
    double margin = 1.0;
    std::size_t grid_step = 10;        // px between anchors
    double exclusion_radius = 5.0;     // px, in the warped frame

    void validate() const
    {
        require(margin > 0.0, "triplet config: margin must be positive");
        require(grid_step >= 1, "triplet config: grid step must be >= 1");
        require(exclusion_radius < static_cast<double>(grid_step),
                "triplet config: exclusion radius must be smaller than the grid step");
    }
};

struct PeakyConfig {
    std::size_t peak_patch = 17;      // max/mean window
    std::size_t variance_patch = 9;   // local variance window

    void validate() const
    {
        require(peak_patch % 2 == 1 && peak_patch >= 3, "peaky config: peak patch must be odd and >= 3");
        require(variance_patch % 2 == 1 && variance_patch >= 3, "peaky config: variance patch must be odd and >= 3");
    }
};

struct LossWeights {
    double alpha = 1.0;   // peakyness
    double beta = 4.0;    // similarity
    double gamma = 0.5;   // dissimilarity

    void validate() const
    {
        require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0, "loss weights must be non-negative");
    }
};

// ---------------------------------------------------------------------------
// Triplet loss with hardest-in-batch negatives

struct TripletSampling {
    struct Anchor {
        std::size_t pixel;      // y·W + x in the first image
        std::size_t positive;   // nearest pixel of g(anchor) in the warped image
        Point2 mapped;          // g(anchor), real-valued
    };
    std::vector<Anchor> anchors;
    std::vector<std::vector<std::size_t>> candidates;  // per anchor, indices of other anchors usable as negatives
};

// Anchors on the regular grid whose image under g falls inside the warped
// frame. Anchor b is a negative candidate for a when b's positive pixel lies
// more than the exclusion radius away from g(a).
inline TripletSampling sample_triplets(std::size_t height, std::size_t width, const Homography& g,
                                       const TripletConfig& cfg)
{
    cfg.validate();
    TripletSampling s;
    const std::size_t start = cfg.grid_step / 2;
    for (std::size_t y = start; y < height; y += cfg.grid_step)
        for (std::size_t x = start; x < width; x += cfg.grid_step) {
            const auto m = g.apply({static_cast<double>(x), static_cast<double>(y)});
            if (!m.valid || !inside_frame(m.p, height, width)) continue;
            const auto px = static_cast<std::size_t>(std::lround(m.p.x));
            const auto py = static_cast<std::size_t>(std::lround(m.p.y));
            s.anchors.push_back({y * width + x, py * width + px, m.p});
        }
    const double r2 = cfg.exclusion_radius * cfg.exclusion_radius;
    s.candidates.resize(s.anchors.size());
    for (std::size_t a = 0; a < s.anchors.size(); ++a)
        for (std::size_t b = 0; b < s.anchors.size(); ++b) {
            if (a == b) continue;
            const double qx = static_cast<double>(s.anchors[b].positive % width);
            const double qy = static_cast<double>(s.anchors[b].positive / width);
            const double dx = qx - s.anchors[a].mapped.x, dy = qy - s.anchors[a].mapped.y;
            if (dx * dx + dy * dy > r2) s.candidates[a].push_back(b);
        }
    return s;
}

// mean over anchors of max(0, m − v_a·v_p + v_a·v_n), v_n the candidate with
// the largest v_a·v_n. Anchors without any candidate are dropped.
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& descriptors, const Tensor<T>& warped_descriptors, const Homography& g,
                       const TripletConfig& cfg)
{
    require(descriptors.rank() == 3 && descriptors.shape() == warped_descriptors.shape(),
            "triplet_loss: descriptor volumes must share a C×H×W shape");
    const std::size_t C = descriptors.dim(0), H = descriptors.dim(1), W = descriptors.dim(2), plane = H * W;
    const auto s = sample_triplets(H, W, g, cfg);

    struct Triplet {
        std::size_t anchor, positive, negative;
        bool active;
    };
    const auto& va = descriptors.values();
    const auto& vb = warped_descriptors.values();
    auto dot = [&](std::size_t pa, std::size_t pb) {
        T acc = 0;
        for (std::size_t c = 0; c < C; ++c) acc += va[c * plane + pa] * vb[c * plane + pb];
        return acc;
    };

    std::vector<Triplet> triplets;
    T total = 0;
    const T margin = static_cast<T>(cfg.margin);
    for (std::size_t a = 0; a < s.anchors.size(); ++a) {
        if (s.candidates[a].empty()) continue;
        const std::size_t pa = s.anchors[a].pixel;
        std::size_t best = s.anchors[s.candidates[a].front()].positive;
        T best_score = dot(pa, best);
        for (std::size_t k = 1; k < s.candidates[a].size(); ++k) {
            const std::size_t pn = s.anchors[s.candidates[a][k]].positive;
            const T sc = dot(pa, pn);
            if (sc > best_score) {
                best_score = sc;
                best = pn;
            }
        }
        const T hinge = margin - dot(pa, s.anchors[a].positive) + best_score;
        triplets.push_back({pa, s.anchors[a].positive, best, hinge > T(0)});
        if (hinge > T(0)) total += hinge;
    }
    if (triplets.empty()) throw DegeneratePair("triplet_loss: no anchor survives visibility masking");
    const T inv = T(1) / static_cast<T>(triplets.size());

    return detail::make_result<T>(
        Shape{}, {total * inv}, "triplet_loss", {descriptors.node(), warped_descriptors.node()},
        [=, triplets = std::move(triplets)](TapeNode<T>& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            const T gscale = self.grad[0] * inv;
            std::vector<T>* ga = na.requires_grad ? &na.ensure_grad() : nullptr;
            std::vector<T>* gb = nb.requires_grad ? &nb.ensure_grad() : nullptr;
            for (const auto& t : triplets) {
                if (!t.active) continue;
                for (std::size_t c = 0; c < C; ++c) {
                    const T a = na.data[c * plane + t.anchor];
                    if (ga)
                        (*ga)[c * plane + t.anchor] +=
                            gscale * (nb.data[c * plane + t.negative] - nb.data[c * plane + t.positive]);
                    if (gb) {
                        (*gb)[c * plane + t.positive] -= gscale * a;
                        (*gb)[c * plane + t.negative] += gscale * a;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Detector losses

// W_ij = mean over channels of the local variance of F in the clipped
// variance window around (i, j). Returned without any gradient connection.
template <typename T>
Tensor<T> variance_weight(const Tensor<T>& features, const PeakyConfig& cfg)
{
    cfg.validate();
    require(features.rank() == 3, "variance_weight: expected C×H×W features");
    const std::size_t C = features.dim(0), H = features.dim(1), W = features.dim(2), plane = H * W;
    const auto& f = features.values();
    std::vector<T> out(plane, T(0));
    for (std::size_t c = 0; c < C; ++c) {
        const T* src = f.data() + c * plane;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const auto win = detail::clipped_window(y, x, cfg.variance_patch, H, W);
                // Two passes so the result cannot go negative through cancellation.
                const T n = static_cast<T>((win.y1 - win.y0) * (win.x1 - win.x0));
                T m = 0;
                for (std::size_t yy = win.y0; yy < win.y1; ++yy)
                    for (std::size_t xx = win.x0; xx < win.x1; ++xx) m += src[yy * W + xx];
                m /= n;
                T ss = 0;
                for (std::size_t yy = win.y0; yy < win.y1; ++yy)
                    for (std::size_t xx = win.x0; xx < win.x1; ++xx) {
                        const T d = src[yy * W + xx] - m;
                        ss += d * d;
                    }
                out[y * W + x] += ss / n;
            }
    }
    for (auto& v : out) v /= static_cast<T>(C);
    return Tensor<T>({H, W}, std::move(out));
}

// mean over detectors and pixels of W_ij·(1 − (max_P Dⁿ − mean_P Dⁿ)).
template <typename T>
Tensor<T> peaky_loss(const Tensor<T>& heatmaps, const Tensor<T>& weight, const PeakyConfig& cfg)
{
    cfg.validate();
    require(heatmaps.rank() == 3, "peaky_loss: expected N×H×W heatmaps");
    require(weight.rank() == 2 && weight.dim(0) == heatmaps.dim(1) && weight.dim(1) == heatmaps.dim(2),
            "peaky_loss: weight map " + shape_str(weight.shape()) + " does not match heatmaps " +
                shape_str(heatmaps.shape()));
    const Tensor<T> w = weight.requires_grad() ? weight.detach() : weight;
    const auto contrast = sub(max_pool2d(heatmaps, cfg.peak_patch), mean_pool2d(heatmaps, cfg.peak_patch));
    return mean(mul_by_map(shift(scale(contrast, T(-1)), T(1)), w));
}

// mean over valid pixels and detectors of (Dⁿ − g⁻¹(D̄ⁿ))², with g⁻¹(D̄)
// read from D̄ at g(p) by bilinear sampling.
template <typename T>
Tensor<T> similarity_loss(const Tensor<T>& heatmaps, const Tensor<T>& warped_heatmaps, const Homography& g)
{
    require(heatmaps.rank() == 3 && heatmaps.shape() == warped_heatmaps.shape(),
            "similarity_loss: heatmap stacks must share an N×H×W shape");
    const std::size_t H = heatmaps.dim(1), W = heatmaps.dim(2);
    auto back = warp_tensor(warped_heatmaps, g.inverse(), H, W);
    if (std::none_of(back.valid.begin(), back.valid.end(), [](auto v) { return v != 0; }))
        throw DegeneratePair("similarity_loss: empty validity mask");
    return masked_mean(square(sub(heatmaps, back.values)), back.valid);
}

// Per pixel binom(N,2)⁻¹·Σ_{n<m} Dⁿ·Dᵐ, averaged over pixels; 0 for N = 1.
template <typename T>
Tensor<T> dissimilarity_loss(const Tensor<T>& heatmaps)
{
    require(heatmaps.rank() == 3, "dissimilarity_loss: expected N×H×W heatmaps");
    const std::size_t n = heatmaps.dim(0);
    if (n < 2) return Tensor<T>::scalar(T(0));
    std::vector<Tensor<T>> slices;
    for (std::size_t i = 0; i < n; ++i) slices.push_back(channel(heatmaps, i));
    Tensor<T> acc;
    for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            auto prod = mul(slices[i], slices[j]);
            acc = acc.defined() ? add(acc, prod) : prod;
        }
    const T pairs = static_cast<T>(n * (n - 1) / 2);
    return scale(mean(acc), T(1) / pairs);
}

// ---------------------------------------------------------------------------
// Joint objective

template <typename T>
struct LossTerms {
    Tensor<T> total;
    Tensor<T> triplet, peaky, similarity, dissimilarity;  // peaky/sim/dissim undefined in priming

    double value(const Tensor<T>& t) const { return t.defined() ? static_cast<double>(t.item()) : 0.0; }
};

// triplet + α·peaky + β·sim + γ·dissim from precomputed component scalars.
template <typename T>
Tensor<T> combine_losses(const Tensor<T>& triplet, const Tensor<T>& peaky, const Tensor<T>& similarity,
                         const Tensor<T>& dissimilarity, const LossWeights& w)
{
    w.validate();
    Tensor<T> total = triplet;
    if (w.alpha != 0.0) total = add(total, scale(peaky, static_cast<T>(w.alpha)));
    if (w.beta != 0.0) total = add(total, scale(similarity, static_cast<T>(w.beta)));
    if (w.gamma != 0.0) total = add(total, scale(dissimilarity, static_cast<T>(w.gamma)));
    return total;
}

struct JointLossConfig {
    TripletConfig triplet;
    PeakyConfig peaky;
    LossWeights weights;
    bool variance_weighting = true;  // false: W ≡ 1
    bool descriptor_only = false;    // priming: triplet term alone
};

// Full objective for one (I, g(I)) pair with the peakyness weight maps
// supplied by the caller. Peakyness and dissimilarity are averaged over the
// two images.
template <typename T>
LossTerms<T> joint_loss_weighted(const ModelOutput<T>& first, const ModelOutput<T>& second, const Homography& g,
                                 const JointLossConfig& cfg, const Tensor<T>& weight1, const Tensor<T>& weight2)
{
    LossTerms<T> t;
    t.triplet = triplet_loss(first.descriptors, second.descriptors, g, cfg.triplet);
    if (cfg.descriptor_only) {
        t.total = t.triplet;
        return t;
    }
    t.peaky = scale(add(peaky_loss(first.heatmaps, weight1, cfg.peaky), peaky_loss(second.heatmaps, weight2, cfg.peaky)),
                    T(0.5));
    t.similarity = similarity_loss(first.heatmaps, second.heatmaps, g);
    t.dissimilarity = scale(add(dissimilarity_loss(first.heatmaps), dissimilarity_loss(second.heatmaps)), T(0.5));
    t.total = combine_losses(t.triplet, t.peaky, t.similarity, t.dissimilarity, cfg.weights);
    return t;
}

// Peakyness weight for one image: the variance weight, or 1 everywhere when
// variance weighting is off.
template <typename T>
Tensor<T> peaky_weight(const ModelOutput<T>& out, const JointLossConfig& cfg)
{
    if (cfg.variance_weighting) return variance_weight(out.features, cfg.peaky);
    return Tensor<T>::full({out.heatmaps.dim(1), out.heatmaps.dim(2)}, T(1));
}

template <typename T>
LossTerms<T> joint_loss(const ModelOutput<T>& first, const ModelOutput<T>& second, const Homography& g,
                        const JointLossConfig& cfg)
{
    if (cfg.descriptor_only) return joint_loss_weighted(first, second, g, cfg, Tensor<T>(), Tensor<T>());
    return joint_loss_weighted(first, second, g, cfg, peaky_weight(first, cfg), peaky_weight(second, cfg));
}

} // namespace mdnet
