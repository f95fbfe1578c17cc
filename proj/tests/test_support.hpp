#pragma once

#include <mdnet/random.hpp>
#include <mdnet/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mdnet::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true)
{
    Rng rng(seed);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

struct GradCheck {
    double max_rel_error = 0;
    std::size_t checked = 0;
};

// Central differences of a scalar function of `leaves` against the tape's
// gradients. Per element the error is |a − n| / max(|a|, |n|, floor), where
// floor = 1e-6·max(1, largest |n|) keeps exact zeros from dividing by zero.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>*> leaves,
                                 double h = 1e-6, std::size_t stride = 1)
{
    for (auto* p : leaves) p->zero_grad();
    loss().backward();
    std::vector<std::vector<double>> analytic;
    for (auto* p : leaves) {
        if (p->has_grad())
            analytic.emplace_back(p->grad().begin(), p->grad().end());
        else
            analytic.emplace_back(p->size(), 0.0);
    }

    std::vector<std::vector<double>> numeric(leaves.size());
    double scale = 1.0;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        auto data = leaves[k]->mutable_data();
        numeric[k].assign(data.size(), 0.0);
        for (std::size_t i = 0; i < data.size(); i += stride) {
            const double keep = data[i];
            data[i] = keep + h;
            const double up = loss().item();
            data[i] = keep - h;
            const double down = loss().item();
            data[i] = keep;
            numeric[k][i] = (up - down) / (2 * h);
            scale = std::max(scale, std::abs(numeric[k][i]));
        }
    }

    GradCheck out;
    const double floor = 1e-6 * scale;
    for (std::size_t k = 0; k < leaves.size(); ++k)
        for (std::size_t i = 0; i < numeric[k].size(); i += stride) {
            const double a = analytic[k][i], n = numeric[k][i];
            const double denom = std::max({std::abs(a), std::abs(n), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(a - n) / denom);
            ++out.checked;
        }
    return out;
}

} // namespace mdnet::testing
