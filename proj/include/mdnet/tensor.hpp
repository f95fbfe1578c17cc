#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op returns a fresh Tensor whose node keeps shared references to its
// inputs plus a closure that pushes the output gradient back into them. The
// tape is only recorded when at least one input requires a gradient.

#include <mdnet/errors.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mdnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename T>
struct TapeNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass reaches the node
    bool requires_grad = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<TapeNode>> inputs;
    std::function<void(TapeNode&)> backward;  // reads this->grad, accumulates into inputs

    bool is_leaf() const { return inputs.empty(); }

    std::vector<T>& ensure_grad()
    {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Node = TapeNode<T>;

    Tensor() = default;

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<Node>())
    {
        node_->data.assign(numel(shape), T(0));
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node>())
    {
        require(numel(shape) == values.size(),
                "tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(T value, bool requires_grad = false)
    {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    static Tensor full(Shape shape, T value)
    {
        Tensor t(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    // Write access is for leaves only (initialisation, optimizer updates).
    std::span<T> mutable_data()
    {
        require(node_->is_leaf(), "tensor: mutable_data on a non-leaf tensor");
        return node_->data;
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on)
    {
        require(node_->is_leaf(), "tensor: requires_grad can only be toggled on leaves");
        node_->requires_grad = on;
    }

    T item() const
    {
        require(size() == 1, "tensor: item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    T operator[](std::size_t i) const { return node_->data[i]; }

    T at(std::size_t c, std::size_t y, std::size_t x) const
    {
        return node_->data[(c * dim(1) + y) * dim(2) + x];
    }

    void zero_grad() { node_->grad.clear(); }

    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    void backward() const;

private:
    std::shared_ptr<Node> node_;
};

template <typename T>
void Tensor<T>::backward() const
{
    require(size() == 1, "backward: loss must be scalar, got shape " + shape_str(shape()));
    require(requires_grad(), "backward: loss does not depend on any tracked tensor");

    // Iterative DFS post-order gives a topological order (inputs before outputs).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order)
        if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
    node_->ensure_grad()[0] += T(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->is_leaf() || !n->backward) continue;
        n->backward(*n);
        std::vector<T>().swap(n->grad);
    }
}

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<TapeNode<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op,
                      std::vector<NodePtr<T>> inputs, std::function<void(TapeNode<T>&)> backward)
{
    auto node = std::make_shared<TapeNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
    if (tracked) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Broadcast { same, left_scalar, right_scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, std::string_view op)
{
    if (a.shape() == b.shape()) return Broadcast::same;
    if (a.size() == 1) return Broadcast::left_scalar;
    if (b.size() == 1) return Broadcast::right_scalar;
    throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()));
}

// Shared skeleton for add/sub/mul. f(x, y) is the value, dfx/dfy the partials.
template <typename T, typename F, typename Dx, typename Dy>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, std::string_view op, F f, Dx dfx, Dy dfy)
{
    const Broadcast kind = broadcast_kind(a, b, op);
    const Shape shape = kind == Broadcast::left_scalar ? b.shape() : a.shape();
    const std::size_t n = numel(shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto ia = [kind](std::size_t i) { return kind == Broadcast::left_scalar ? 0 : i; };
    auto ib = [kind](std::size_t i) { return kind == Broadcast::right_scalar ? 0 : i; };
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[ia(i)], bv[ib(i)]);
    return make_result<T>(shape, std::move(out), op, {a.node(), b.node()},
                          [=](TapeNode<T>& self) {
                              auto& na = *self.inputs[0];
                              auto& nb = *self.inputs[1];
                              const auto& g = self.grad;
                              if (na.requires_grad) {
                                  auto& ga = na.ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i)
                                      ga[ia(i)] += g[i] * dfx(na.data[ia(i)], nb.data[ib(i)]);
                              }
                              if (nb.requires_grad) {
                                  auto& gb = nb.ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i)
                                      gb[ib(i)] += g[i] * dfy(na.data[ia(i)], nb.data[ib(i)]);
                              }
                          });
}

template <typename T, typename F, typename Df>
Tensor<T> unary(const Tensor<T>& a, std::string_view op, F f, Df df)
{
    const auto& av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return make_result<T>(a.shape(), std::move(out), op, {a.node()}, [=](TapeNode<T>& self) {
        auto& in = *self.inputs[0];
        auto& gi = in.ensure_grad();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * df(in.data[i], self.data[i]);
    });
}

} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s)
{
    return detail::unary(a, "scale", [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& a, T s)
{
    return detail::unary(a, "shift", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a)
{
    return detail::unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a)
{
    return detail::unary(
        a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// Logistic squash onto (0, 1). Saturated inputs are clamped so the output
// never reaches the closed bounds in the working precision.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a)
{
    return detail::unary(
        a, "sigmoid",
        [](T x) {
            constexpr T lim = sizeof(T) == 4 ? T(15) : T(30);
            x = std::clamp(x, -lim, lim);
            return T(1) / (T(1) + std::exp(-x));
        },
        [](T x, T y) {
            constexpr T lim = sizeof(T) == 4 ? T(15) : T(30);
            return (x < -lim || x > lim) ? T(0) : y * (T(1) - y);
        });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return shift(a, s); }

template <typename T>
Tensor<T> detach(const Tensor<T>& a)
{
    return a.detach();
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a)
{
    T acc = 0;
    for (T v : a.values()) acc += v;
    return detail::make_result<T>(Shape{}, {acc}, "sum", {a.node()}, [](TapeNode<T>& self) {
        auto& gi = self.inputs[0]->ensure_grad();
        for (auto& g : gi) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a)
{
    require(a.size() > 0, "mean: empty tensor");
    const T inv = T(1) / static_cast<T>(a.size());
    T acc = 0;
    for (T v : a.values()) acc += v;
    return detail::make_result<T>(Shape{}, {acc * inv}, "mean", {a.node()}, [inv](TapeNode<T>& self) {
        auto& gi = self.inputs[0]->ensure_grad();
        for (auto& g : gi) g += self.grad[0] * inv;
    });
}

// Mean over one axis; the axis is removed from the result shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis)
{
    require(axis < a.rank(), "mean_axis: axis out of range for shape " + shape_str(a.shape()));
    const std::size_t outer = numel(Shape(a.shape().begin(), a.shape().begin() + axis));
    const std::size_t len = a.dim(axis);
    const std::size_t inner = numel(Shape(a.shape().begin() + axis + 1, a.shape().end()));
    require(len > 0, "mean_axis: empty axis");
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    const T inv = T(1) / static_cast<T>(len);
    const auto& av = a.values();
    std::vector<T> out(outer * inner, T(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + k) * inner + i];
    for (auto& v : out) v *= inv;
    return detail::make_result<T>(out_shape, std::move(out), "mean_axis", {a.node()},
                                  [=](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t o = 0; o < outer; ++o)
                                          for (std::size_t k = 0; k < len; ++k)
                                              for (std::size_t i = 0; i < inner; ++i)
                                                  gi[(o * len + k) * inner + i] += self.grad[o * inner + i] * inv;
                                  });
}

// Mean over channels and the pixels where mask != 0. The mask is H×W and is
// shared by every channel of a C×H×W input (or applied directly to H×W).
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& a, std::span<const unsigned char> mask)
{
    require(a.rank() == 2 || a.rank() == 3, "masked_mean: expected H×W or C×H×W, got " + shape_str(a.shape()));
    const std::size_t channels = a.rank() == 3 ? a.dim(0) : 1;
    const std::size_t plane = a.size() / std::max<std::size_t>(channels, 1);
    require(mask.size() == plane, "masked_mean: mask size does not match spatial size");
    const std::size_t count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
    require(count > 0, "masked_mean: empty mask");
    const T inv = T(1) / static_cast<T>(count * channels);
    const auto& av = a.values();
    T acc = 0;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p)
            if (mask[p]) acc += av[c * plane + p];
    std::vector<unsigned char> m(mask.begin(), mask.end());
    return detail::make_result<T>(Shape{}, {acc * inv}, "masked_mean", {a.node()},
                                  [=, m = std::move(m)](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t c = 0; c < channels; ++c)
                                          for (std::size_t p = 0; p < plane; ++p)
                                              if (m[p]) gi[c * plane + p] += self.grad[0] * inv;
                                  });
}

// ---------------------------------------------------------------------------
// Patchwise pooling with stride 1. The window at (i, j) is the w×w square
// centred there, clipped to the image domain. Works on H×W or C×H×W.

namespace detail {

struct PlaneDims {
    std::size_t channels, height, width;
};

template <typename T>
PlaneDims plane_dims(const Tensor<T>& a, std::string_view op)
{
    if (a.rank() == 2) return {1, a.dim(0), a.dim(1)};
    if (a.rank() == 3) return {a.dim(0), a.dim(1), a.dim(2)};
    throw ContractViolation(std::string(op) + ": expected H×W or C×H×W, got " + shape_str(a.shape()));
}

inline void check_window(std::size_t w, const PlaneDims& d, std::string_view op)
{
    require(w % 2 == 1, std::string(op) + ": window must be odd");
    require(w <= 2 * std::max(d.height, d.width), std::string(op) + ": window larger than twice the image size");
}

struct Window {
    std::size_t y0, y1, x0, x1;  // half-open
};

inline Window clipped_window(std::size_t y, std::size_t x, std::size_t w, std::size_t h, std::size_t wd)
{
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(w / 2);
    const auto lo = [r](std::size_t v) { return static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(v) - r)); };
    const auto hi = [r](std::size_t v, std::size_t n) {
        return static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), static_cast<std::ptrdiff_t>(v) + r + 1));
    };
    return {lo(y), hi(y, h), lo(x), hi(x, wd)};
}

} // namespace detail

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& a, std::size_t w)
{
    const auto d = detail::plane_dims(a, "max_pool2d");
    detail::check_window(w, d, "max_pool2d");
    const auto& av = a.values();
    const std::size_t plane = d.height * d.width;
    std::vector<T> out(av.size());
    std::vector<std::size_t> argmax(av.size());
    for (std::size_t c = 0; c < d.channels; ++c) {
        const T* src = av.data() + c * plane;
        for (std::size_t y = 0; y < d.height; ++y)
            for (std::size_t x = 0; x < d.width; ++x) {
                const auto win = detail::clipped_window(y, x, w, d.height, d.width);
                std::size_t best = win.y0 * d.width + win.x0;
                for (std::size_t yy = win.y0; yy < win.y1; ++yy)
                    for (std::size_t xx = win.x0; xx < win.x1; ++xx)
                        if (src[yy * d.width + xx] > src[best]) best = yy * d.width + xx;
                out[c * plane + y * d.width + x] = src[best];
                argmax[c * plane + y * d.width + x] = c * plane + best;
            }
    }
    return detail::make_result<T>(a.shape(), std::move(out), "max_pool2d", {a.node()},
                                  [argmax = std::move(argmax)](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t i = 0; i < argmax.size(); ++i) gi[argmax[i]] += self.grad[i];
                                  });
}

template <typename T>
Tensor<T> mean_pool2d(const Tensor<T>& a, std::size_t w)
{
    const auto d = detail::plane_dims(a, "mean_pool2d");
    detail::check_window(w, d, "mean_pool2d");
    const auto& av = a.values();
    const std::size_t plane = d.height * d.width;
    std::vector<T> out(av.size());
    for (std::size_t c = 0; c < d.channels; ++c) {
        const T* src = av.data() + c * plane;
        for (std::size_t y = 0; y < d.height; ++y)
            for (std::size_t x = 0; x < d.width; ++x) {
                const auto win = detail::clipped_window(y, x, w, d.height, d.width);
                T acc = 0;
                for (std::size_t yy = win.y0; yy < win.y1; ++yy)
                    for (std::size_t xx = win.x0; xx < win.x1; ++xx) acc += src[yy * d.width + xx];
                out[c * plane + y * d.width + x] = acc / static_cast<T>((win.y1 - win.y0) * (win.x1 - win.x0));
            }
    }
    return detail::make_result<T>(a.shape(), std::move(out), "mean_pool2d", {a.node()}, [=](TapeNode<T>& self) {
        auto& gi = self.inputs[0]->ensure_grad();
        for (std::size_t c = 0; c < d.channels; ++c)
            for (std::size_t y = 0; y < d.height; ++y)
                for (std::size_t x = 0; x < d.width; ++x) {
                    const auto win = detail::clipped_window(y, x, w, d.height, d.width);
                    const T g = self.grad[c * plane + y * d.width + x] /
                                static_cast<T>((win.y1 - win.y0) * (win.x1 - win.x0));
                    for (std::size_t yy = win.y0; yy < win.y1; ++yy)
                        for (std::size_t xx = win.x0; xx < win.x1; ++xx) gi[c * plane + yy * d.width + xx] += g;
                }
    });
}

// ---------------------------------------------------------------------------
// Channel-structured ops on C×H×W volumes

template <typename T>
Tensor<T> l2_normalize_channels(const Tensor<T>& a, T eps = T(1e-10))
{
    require(a.rank() == 3, "l2_normalize_channels: expected C×H×W, got " + shape_str(a.shape()));
    const std::size_t channels = a.dim(0), plane = a.dim(1) * a.dim(2);
    const auto& av = a.values();
    std::vector<T> inv_norm(plane, T(0));
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) inv_norm[p] += av[c * plane + p] * av[c * plane + p];
    for (auto& v : inv_norm) v = T(1) / std::sqrt(v + eps);
    std::vector<T> out(av.size());
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = av[c * plane + p] * inv_norm[p];
    return detail::make_result<T>(a.shape(), std::move(out), "l2_normalize_channels", {a.node()},
                                  [=, inv_norm = std::move(inv_norm)](TapeNode<T>& self) {
                                      // y = x·s, s = (|x|² + eps)^-1/2  =>  dx = s·g − s³·x·<g, x>
                                      auto& in = *self.inputs[0];
                                      auto& gi = in.ensure_grad();
                                      for (std::size_t p = 0; p < plane; ++p) {
                                          T gx = 0;
                                          for (std::size_t c = 0; c < channels; ++c)
                                              gx += self.grad[c * plane + p] * in.data[c * plane + p];
                                          const T s = inv_norm[p];
                                          for (std::size_t c = 0; c < channels; ++c)
                                              gi[c * plane + p] += s * self.grad[c * plane + p] -
                                                                   s * s * s * in.data[c * plane + p] * gx;
                                      }
                                  });
}

// Per-channel standardisation over the spatial domain (no affine part).
template <typename T>
Tensor<T> instance_normalize(const Tensor<T>& a, T eps = T(1e-5))
{
    require(a.rank() == 3, "instance_normalize: expected C×H×W, got " + shape_str(a.shape()));
    const std::size_t channels = a.dim(0), plane = a.dim(1) * a.dim(2);
    const auto& av = a.values();
    std::vector<T> out(av.size()), inv_std(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        T mu = 0, var = 0;
        for (std::size_t p = 0; p < plane; ++p) mu += av[c * plane + p];
        mu /= static_cast<T>(plane);
        for (std::size_t p = 0; p < plane; ++p) var += (av[c * plane + p] - mu) * (av[c * plane + p] - mu);
        var /= static_cast<T>(plane);
        inv_std[c] = T(1) / std::sqrt(var + eps);
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = (av[c * plane + p] - mu) * inv_std[c];
    }
    return detail::make_result<T>(a.shape(), std::move(out), "instance_normalize", {a.node()},
                                  [=, inv_std = std::move(inv_std)](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t c = 0; c < channels; ++c) {
                                          T mg = 0, mgy = 0;
                                          for (std::size_t p = 0; p < plane; ++p) {
                                              mg += self.grad[c * plane + p];
                                              mgy += self.grad[c * plane + p] * self.data[c * plane + p];
                                          }
                                          mg /= static_cast<T>(plane);
                                          mgy /= static_cast<T>(plane);
                                          for (std::size_t p = 0; p < plane; ++p)
                                              gi[c * plane + p] += inv_std[c] * (self.grad[c * plane + p] - mg -
                                                                                 self.data[c * plane + p] * mgy);
                                      }
                                  });
}

// Multiplies every channel of a C×H×W volume by the same H×W map.
template <typename T>
Tensor<T> mul_by_map(const Tensor<T>& volume, const Tensor<T>& map)
{
    const auto d = detail::plane_dims(volume, "mul_by_map");
    require(map.rank() == 2 && map.dim(0) == d.height && map.dim(1) == d.width,
            "mul_by_map: map " + shape_str(map.shape()) + " does not match volume " + shape_str(volume.shape()));
    const std::size_t plane = d.height * d.width;
    const auto& vv = volume.values();
    const auto& mv = map.values();
    std::vector<T> out(vv.size());
    for (std::size_t c = 0; c < d.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = vv[c * plane + p] * mv[p];
    return detail::make_result<T>(volume.shape(), std::move(out), "mul_by_map", {volume.node(), map.node()},
                                  [=](TapeNode<T>& self) {
                                      auto& nv = *self.inputs[0];
                                      auto& nm = *self.inputs[1];
                                      if (nv.requires_grad) {
                                          auto& g = nv.ensure_grad();
                                          for (std::size_t c = 0; c < d.channels; ++c)
                                              for (std::size_t p = 0; p < plane; ++p)
                                                  g[c * plane + p] += self.grad[c * plane + p] * nm.data[p];
                                      }
                                      if (nm.requires_grad) {
                                          auto& g = nm.ensure_grad();
                                          for (std::size_t c = 0; c < d.channels; ++c)
                                              for (std::size_t p = 0; p < plane; ++p)
                                                  g[p] += self.grad[c * plane + p] * nv.data[c * plane + p];
                                      }
                                  });
}

// Channel n of a C×H×W volume as an H×W tensor.
template <typename T>
Tensor<T> channel(const Tensor<T>& a, std::size_t n)
{
    require(a.rank() == 3 && n < a.dim(0), "channel: index out of range for shape " + shape_str(a.shape()));
    const std::size_t plane = a.dim(1) * a.dim(2);
    std::vector<T> out(a.values().begin() + static_cast<std::ptrdiff_t>(n * plane),
                       a.values().begin() + static_cast<std::ptrdiff_t>((n + 1) * plane));
    return detail::make_result<T>(Shape{a.dim(1), a.dim(2)}, std::move(out), "channel", {a.node()},
                                  [=](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t p = 0; p < plane; ++p) gi[n * plane + p] += self.grad[p];
                                  });
}

// Bilinear sampling of a C×H×W volume at real-valued pixel positions, one per
// output pixel (row-major over out_h×out_w). Taps outside the frame read 0.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& a, std::span<const double> xs, std::span<const double> ys,
                          std::size_t out_h, std::size_t out_w)
{
    const auto d = detail::plane_dims(a, "bilinear_sample");
    const std::size_t n = out_h * out_w;
    require(xs.size() == n && ys.size() == n, "bilinear_sample: coordinate count does not match output size");
    struct Tap {
        std::ptrdiff_t idx[4];
        T w[4];
    };
    std::vector<Tap> taps(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = xs[i], y = ys[i];
        const double fx = std::floor(x), fy = std::floor(y);
        const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
        const T ax = static_cast<T>(x - fx), ay = static_cast<T>(y - fy);
        const std::ptrdiff_t cx[4] = {x0, x0 + 1, x0, x0 + 1};
        const std::ptrdiff_t cy[4] = {y0, y0, y0 + 1, y0 + 1};
        const T cw[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int k = 0; k < 4; ++k) {
            const bool inside = std::isfinite(x) && std::isfinite(y) && cx[k] >= 0 && cy[k] >= 0 &&
                                cx[k] < static_cast<std::ptrdiff_t>(d.width) &&
                                cy[k] < static_cast<std::ptrdiff_t>(d.height);
            taps[i].idx[k] = inside ? cy[k] * static_cast<std::ptrdiff_t>(d.width) + cx[k] : -1;
            taps[i].w[k] = inside ? cw[k] : T(0);
        }
    }
    const std::size_t plane = d.height * d.width;
    const auto& av = a.values();
    std::vector<T> out(d.channels * n, T(0));
    for (std::size_t c = 0; c < d.channels; ++c)
        for (std::size_t i = 0; i < n; ++i)
            for (int k = 0; k < 4; ++k)
                if (taps[i].idx[k] >= 0) out[c * n + i] += taps[i].w[k] * av[c * plane + static_cast<std::size_t>(taps[i].idx[k])];
    Shape shape = a.rank() == 3 ? Shape{d.channels, out_h, out_w} : Shape{out_h, out_w};
    return detail::make_result<T>(shape, std::move(out), "bilinear_sample", {a.node()},
                                  [=, taps = std::move(taps)](TapeNode<T>& self) {
                                      auto& gi = self.inputs[0]->ensure_grad();
                                      for (std::size_t c = 0; c < d.channels; ++c)
                                          for (std::size_t i = 0; i < n; ++i)
                                              for (int k = 0; k < 4; ++k)
                                                  if (taps[i].idx[k] >= 0)
                                                      gi[c * plane + static_cast<std::size_t>(taps[i].idx[k])] +=
                                                          taps[i].w[k] * self.grad[c * n + i];
                                  });
}

// ---------------------------------------------------------------------------
// Convolution: dilated cross-correlation via im2col + GEMM.

namespace detail {

struct ConvGeometry {
    std::size_t cin, height, width, cout, k, dilation, padding, out_h, out_w;

    std::size_t rows() const { return cin * k * k; }
    std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* cols)
{
    const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
    const auto pad = static_cast<std::ptrdiff_t>(g.padding), dil = static_cast<std::ptrdiff_t>(g.dilation);
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((ci * g.k + ky) * g.k + kx) * g.cols();
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) * dil - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) * dil - pad;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    T* dst = row + oy * g.out_w;
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + dy;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + g.out_w, T(0));
                        continue;
                    }
                    const T* src = in + (ci * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) + dx;
                        dst[ox] = (ix < 0 || ix >= W) ? T(0) : src[ix];
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* in_grad)
{
    const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
    const auto pad = static_cast<std::ptrdiff_t>(g.padding), dil = static_cast<std::ptrdiff_t>(g.dilation);
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((ci * g.k + ky) * g.k + kx) * g.cols();
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) * dil - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) * dil - pad;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) + dy;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = in_grad + (ci * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) + dx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

} // namespace detail

// out[co][y][x] = bias[co] + Σ weight[co][ci][ky][kx] · in[ci][y + ky·dilation − padding][x + kx·dilation − padding]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t dilation,
                 std::size_t padding)
{
    require(input.rank() == 3, "conv2d: input must be Cin×H×W, got " + shape_str(input.shape()));
    require(weight.rank() == 4 && weight.dim(2) == weight.dim(3), "conv2d: weight must be Cout×Cin×k×k");
    require(weight.dim(2) % 2 == 1, "conv2d: kernel size must be odd");
    require(dilation >= 1, "conv2d: dilation must be positive");
    require(weight.dim(1) == input.dim(0), "conv2d: input has " + std::to_string(input.dim(0)) +
                                               " channels, weight expects " + std::to_string(weight.dim(1)));
    require(bias.size() == weight.dim(0), "conv2d: bias length must equal Cout");
    detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weight.dim(0), weight.dim(2), dilation, padding, 0, 0};
    const std::size_t span = dilation * (g.k - 1);
    require(g.height + 2 * padding > span && g.width + 2 * padding > span, "conv2d: input too small for kernel");
    g.out_h = g.height + 2 * padding - span;
    g.out_w = g.width + 2 * padding - span;

    using Mat = detail::RowMatrix<T>;
    using Map = Eigen::Map<Mat>;
    using CMap = Eigen::Map<const Mat>;
    const bool pointwise = g.k == 1 && padding == 0;

    std::vector<T> cols;
    if (!pointwise) {
        cols.resize(g.rows() * g.cols());
        detail::im2col(input.values().data(), g, cols.data());
    }
    const T* col_ptr = pointwise ? input.values().data() : cols.data();

    std::vector<T> out(g.cout * g.cols());
    CMap w(weight.values().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.rows()));
    CMap c(col_ptr, static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    Map o(out.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cols()));
    o.noalias() = w * c;
    for (std::size_t co = 0; co < g.cout; ++co) o.row(static_cast<Eigen::Index>(co)).array() += bias.values()[co];

    return detail::make_result<T>(
        Shape{g.cout, g.out_h, g.out_w}, std::move(out), "conv2d", {input.node(), weight.node(), bias.node()},
        [g, pointwise](TapeNode<T>& self) {
            auto& in = *self.inputs[0];
            auto& wt = *self.inputs[1];
            auto& bs = *self.inputs[2];
            const auto cout = static_cast<Eigen::Index>(g.cout);
            const auto rows = static_cast<Eigen::Index>(g.rows());
            const auto ncols = static_cast<Eigen::Index>(g.cols());
            CMap grad_out(self.grad.data(), cout, ncols);
            if (wt.requires_grad) {
                std::vector<T> cols;
                const T* col_ptr = in.data.data();
                if (!pointwise) {
                    cols.resize(g.rows() * g.cols());
                    detail::im2col(in.data.data(), g, cols.data());
                    col_ptr = cols.data();
                }
                CMap c(col_ptr, rows, ncols);
                Map gw(wt.ensure_grad().data(), cout, rows);
                gw.noalias() += grad_out * c.transpose();
            }
            if (bs.requires_grad) {
                auto& gb = bs.ensure_grad();
                // Plain loop: Eigen's vectorised sum() peels by pointer alignment,
                // which makes the rounding depend on where the buffer landed.
                for (std::size_t co = 0; co < g.cout; ++co) {
                    const T* row = self.grad.data() + co * g.cols();
                    T acc = 0;
                    for (std::size_t j = 0; j < g.cols(); ++j) acc += row[j];
                    gb[co] += acc;
                }
            }
            if (in.requires_grad) {
                CMap w(wt.data.data(), cout, rows);
                if (pointwise) {
                    Map gi(in.ensure_grad().data(), rows, ncols);
                    gi.noalias() += w.transpose() * grad_out;
                } else {
                    Mat gcols(rows, ncols);
                    gcols.noalias() = w.transpose() * grad_out;
                    detail::col2im_add(gcols.data(), g, in.ensure_grad().data());
                }
            }
        });
}

// Same-size convolution: padding = dilation·(k−1)/2.
template <typename T>
Tensor<T> conv2d_same(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t dilation)
{
    require(weight.rank() == 4, "conv2d_same: weight must be Cout×Cin×k×k");
    return conv2d(input, weight, bias, dilation, dilation * (weight.dim(2) - 1) / 2);
}

} // namespace mdnet
