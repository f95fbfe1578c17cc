#pragma once

// Two-stage optimisation: descriptor priming (triplet only, detector head
// frozen) followed by joint training of every branch with all four losses.

#include <mdnet/errors.hpp>
#include <mdnet/losses.hpp>
#include <mdnet/model.hpp>
#include <mdnet/random.hpp>
#include <mdnet/synthwarp.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace mdnet {

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t step = 0;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update over `params`. Entries with trainable[i] ==
// false are skipped entirely (values and moments untouched). A parameter
// without a gradient is treated as having a zero gradient.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<const std::string> names,
               const std::vector<bool>& trainable, AdamState<T>& state, const AdamConfig& cfg)
{
    require(cfg.lr > 0.0, "adam_step: learning rate must be positive");
    require(names.size() == params.size() && trainable.size() == params.size(), "adam_step: inconsistent parameter lists");
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->size(), T(0));
            state.v.emplace_back(p->size(), T(0));
        }
    }
    require(state.m.size() == params.size(), "adam_step: optimizer state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i] || !params[i]->has_grad()) continue;
        for (T g : params[i]->grad())
            if (!std::isfinite(g)) throw NumericalError("adam_step: non-finite gradient in " + names[i]);
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i]) continue;
        auto& p = *params[i];
        require(state.m[i].size() == p.size(), "adam_step: gradient shape does not match " + names[i]);
        const bool has = p.has_grad();
        auto grad = p.grad();
        auto data = p.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = has ? static_cast<double>(grad[k]) : 0.0;
            m[k] = static_cast<T>(cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g);
            v[k] = static_cast<T>(cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g);
            const double mhat = m[k] / bc1, vhat = v[k] / bc2;
            data[k] = static_cast<T>(data[k] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// Rescales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> params, double max_norm)
{
    double sq = 0.0;
    for (auto* p : params)
        if (p->has_grad())
            for (T g : p->grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto* p : params)
            if (p->has_grad()) {
                // grad() is read-only on the handle; scale through the node.
                for (auto& g : p->node()->grad) g *= f;
            }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Configuration and log

enum class Stage { priming, joint };

inline const char* stage_name(Stage s) { return s == Stage::priming ? "priming" : "joint"; }

struct TrainConfig {
    Stage stage = Stage::priming;
    AdamConfig adam;
    std::size_t batch_size = 4;
    std::size_t iterations = 2000;
    std::size_t num_detectors = 2;
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 0;  // 0: only at the end
    double clip_norm = 5.0;
    ModelConfig model = ModelConfig::desk();
    JointLossConfig loss;
    PairSamplerConfig sampler;

    // Published schedule: 192 px patches, batch 10, 70k priming / 1k joint.
    static TrainConfig full(Stage stage)
    {
        TrainConfig c;
        c.stage = stage;
        c.batch_size = 10;
        c.iterations = stage == Stage::priming ? 70000 : 1000;
        c.model = ModelConfig::standard();
        c.sampler.patch = 192;
        c.loss.descriptor_only = stage == Stage::priming;
        return c;
    }

    // CPU-budget schedule with the same mechanics.
    static TrainConfig desk(Stage stage)
    {
        TrainConfig c;
        c.stage = stage;
        c.batch_size = 4;
        c.iterations = stage == Stage::priming ? 2000 : 300;
        c.model = ModelConfig::desk();
        c.sampler.patch = 96;
        c.adam.lr = 1e-3;  // 2k iterations instead of 70k
        c.loss.descriptor_only = stage == Stage::priming;
        return c;
    }

    void validate() const
    {
        require(adam.lr > 0.0, "train config: learning rate must be positive");
        require(batch_size >= 1, "train config: batch size must be >= 1");
        require(num_detectors >= 1, "train config: num_detectors must be >= 1");
        loss.triplet.validate();
        loss.peaky.validate();
        loss.weights.validate();
        model.validate();
    }
};

struct TrainRecord {
    std::size_t iteration = 0;
    double triplet = 0, peaky = 0, similarity = 0, dissimilarity = 0, total = 0;
    double wallclock_ms = 0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
    std::uint64_t seed = 0;
    std::string config_snapshot;

    void append(const TrainRecord& r) { records.push_back(r); }

    std::string to_csv(bool with_wallclock = true) const
    {
        std::ostringstream os;
        os.precision(9);
        os << "iteration,l_triplet,l_peaky,l_sim,l_dissim,total" << (with_wallclock ? ",wallclock_ms" : "") << '\n';
        for (const auto& r : records) {
            os << r.iteration << ',' << r.triplet << ',' << r.peaky << ',' << r.similarity << ',' << r.dissimilarity
               << ',' << r.total;
            if (with_wallclock) os << ',' << r.wallclock_ms;
            os << '\n';
        }
        return os.str();
    }

    // Mean of a field over records [begin, end).
    template <typename Field>
    double window_mean(std::size_t begin, std::size_t end, Field field) const
    {
        end = std::min(end, records.size());
        if (begin >= end) return 0.0;
        double acc = 0;
        for (std::size_t i = begin; i < end; ++i) acc += field(records[i]);
        return acc / static_cast<double>(end - begin);
    }
};

template <typename T>
struct TrainResult {
    ModelWeights<T> weights;
    TrainLog log;
};

using CheckpointHook = std::function<void(std::size_t iteration, const std::string& serialized)>;

namespace detail {

template <typename T>
TrainResult<T> run_training(const TrainConfig& cfg, const Corpus& corpus, ModelWeights<T> weights,
                            const CheckpointHook& on_checkpoint)
{
    if (corpus.empty()) throw ContractViolation("train: empty corpus");
    if (corpus.eligible(cfg.sampler.patch).empty())
        throw ContractViolation("train: no corpus image is large enough for " + std::to_string(cfg.sampler.patch) +
                                " px patches");

    const bool priming = cfg.stage == Stage::priming;
    JointLossConfig loss_cfg = cfg.loss;
    loss_cfg.descriptor_only = priming;

    auto params = weights.parameters();
    const auto names = weights.parameter_names();
    std::vector<bool> trainable(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        trainable[i] = !(priming && weights.is_head_parameter(i));
        params[i]->set_requires_grad(trainable[i]);
    }

    AdamState<T> state;
    TrainResult<T> result;
    result.log.seed = cfg.seed;
    const auto t0 = std::chrono::steady_clock::now();
    std::deque<std::pair<std::size_t, std::size_t>> window;  // (attempts, degenerate) per iteration
    std::uint64_t draw = 0;

    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        weights.zero_grad();
        TrainRecord rec;
        rec.iteration = it;
        std::size_t used = 0, attempts = 0, degenerate = 0;
        const std::size_t max_attempts = 4 * cfg.batch_size;
        const T inv_batch = T(1) / static_cast<T>(cfg.batch_size);
        while (used < cfg.batch_size && attempts < max_attempts) {
            ++attempts;
            const std::uint64_t pair_seed = Rng::derive(cfg.seed, draw++);
            try {
                const auto pair = sample_training_pair(corpus, pair_seed, cfg.sampler);
                const auto out1 = forward(to_tensor<T>(pair.source), weights);
                const auto out2 = forward(to_tensor<T>(pair.warped), weights);
                const auto terms = joint_loss(out1, out2, pair.g, loss_cfg);
                const double total = static_cast<double>(terms.total.item());
                if (!std::isfinite(total))
                    throw NumericalError("train: non-finite loss at iteration " + std::to_string(it));
                scale(terms.total, inv_batch).backward();
                rec.triplet += terms.value(terms.triplet);
                rec.peaky += terms.value(terms.peaky);
                rec.similarity += terms.value(terms.similarity);
                rec.dissimilarity += terms.value(terms.dissimilarity);
                rec.total += total;
                ++used;
            } catch (const DegeneratePair&) {
                ++degenerate;
            } catch (const SamplingError&) {
                ++degenerate;
            }
        }
        window.emplace_back(attempts, degenerate);
        if (window.size() > 100) window.pop_front();
        if (window.size() == 100 || used == 0) {
            std::size_t a = 0, d = 0;
            for (auto [x, y] : window) {
                a += x;
                d += y;
            }
            if (2 * d > a || used == 0)
                throw ContractViolation("train: more than half of the sampled pairs are degenerate; corpus unusable");
        }
        const double inv = 1.0 / static_cast<double>(used);
        rec.triplet *= inv;
        rec.peaky *= inv;
        rec.similarity *= inv;
        rec.dissimilarity *= inv;
        rec.total *= inv;

        if (used != cfg.batch_size) {
            // Fewer usable pairs than requested: rescale to a mean over the used ones.
            const T f = static_cast<T>(static_cast<double>(cfg.batch_size) / static_cast<double>(used));
            for (auto* p : params)
                if (p->has_grad())
                    for (auto& g : p->node()->grad) g *= f;
        }
        clip_grad_norm<T>(params, cfg.clip_norm);
        adam_step<T>(params, names, trainable, state, cfg.adam);

        rec.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.log.append(rec);
        if (on_checkpoint && cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations)
            on_checkpoint(it, serialize_weights(weights));
    }
    weights.zero_grad();
    weights.set_requires_grad(false);
    if (on_checkpoint) on_checkpoint(cfg.iterations, serialize_weights(weights));
    result.weights = std::move(weights);
    return result;
}

} // namespace detail

// Trains backbone + descriptor branch with the triplet loss alone. The
// detector head is never touched.
template <typename T>
TrainResult<T> train_priming(const TrainConfig& cfg, const Corpus& corpus, const CheckpointHook& on_checkpoint = {},
                             std::optional<ModelWeights<T>> start = std::nullopt)
{
    cfg.validate();
    require(cfg.stage == Stage::priming, "train_priming: config stage must be priming");
    ModelConfig mc = cfg.model;
    mc.num_detectors = cfg.num_detectors;
    // Tensors are shared handles: clone so the caller's copy is never updated.
    ModelWeights<T> w = start ? start->clone() : init_weights<T>(mc, cfg.seed);
    return detail::run_training<T>(cfg, corpus, std::move(w), on_checkpoint);
}

// Trains every branch from a primed checkpoint. The detector head is
// re-initialised when the requested N differs from the checkpoint's.
template <typename T>
TrainResult<T> train_joint(const TrainConfig& cfg, const Corpus& corpus, const ModelWeights<T>& primed,
                           const CheckpointHook& on_checkpoint = {})
{
    cfg.validate();
    require(cfg.stage == Stage::joint, "train_joint: config stage must be joint");
    ModelWeights<T> w = primed.clone();
    if (w.config.num_detectors != cfg.num_detectors)
        init_detector_head(w, cfg.num_detectors, Rng::derive(cfg.seed, 0x4A4F494E));
    return detail::run_training<T>(cfg, corpus, std::move(w), on_checkpoint);
}

} // namespace mdnet
