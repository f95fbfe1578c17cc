#pragma once

// Fully convolutional multi-detector network:
//   image (3×H×W) → dilated backbone → F (C×H×W)
//   V = channelwise L2 normalisation of F
//   D = logistic(conv1x1(F²)) with N output channels

#include <mdnet/binary_io.hpp>
#include <mdnet/errors.hpp>
#include <mdnet/random.hpp>
#include <mdnet/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace mdnet {

struct LayerSpec {
    std::size_t kernel = 3;
    std::size_t out_channels = 0;
    std::size_t dilation = 1;

    bool operator==(const LayerSpec&) const = default;
};

struct ModelConfig {
    std::size_t descriptor_dim = 128;
    std::size_t num_detectors = 2;
    std::vector<LayerSpec> layers;
    bool instance_norm = false;  // standardise every hidden conv output

    bool operator==(const ModelConfig&) const = default;

    // Eight 3×3 same-padded convs, dilations 1,1,1,2,2,4,4,4, C = 128.
    static ModelConfig standard(std::size_t num_detectors = 2)
    {
        ModelConfig cfg;
        cfg.descriptor_dim = 128;
        cfg.num_detectors = num_detectors;
        const std::size_t channels[] = {32, 32, 64, 64, 96, 96, 128, 128};
        const std::size_t dilations[] = {1, 1, 1, 2, 2, 4, 4, 4};
        for (int i = 0; i < 8; ++i) cfg.layers.push_back({3, channels[i], dilations[i]});
        return cfg;
    }

    // Small network used for CPU-budget training runs.
    static ModelConfig desk(std::size_t num_detectors = 2, std::size_t descriptor_dim = 32)
    {
        ModelConfig cfg;
        cfg.descriptor_dim = descriptor_dim;
        cfg.num_detectors = num_detectors;
        cfg.layers = {{3, 16, 1}, {3, 16, 1}, {3, 32, 2}, {3, 32, 2}, {3, descriptor_dim, 4}};
        // Without it the un-centred input drives short runs into the collapsed
        // all-equal-descriptor solution.
        cfg.instance_norm = true;
        return cfg;
    }

    void validate() const
    {
        require(descriptor_dim >= 2, "model config: descriptor_dim must be >= 2");
        require(num_detectors >= 1, "model config: num_detectors must be >= 1");
        require(!layers.empty(), "model config: empty layer list");
        for (const auto& l : layers) {
            require(l.kernel % 2 == 1, "model config: kernel sizes must be odd");
            require(l.out_channels >= 1 && l.dilation >= 1, "model config: bad layer spec");
        }
        require(layers.back().out_channels == descriptor_dim,
                "model config: last layer must output descriptor_dim channels");
    }

    std::size_t receptive_field() const
    {
        std::size_t rf = 1;
        for (const auto& l : layers) rf += l.dilation * (l.kernel - 1);
        return rf;
    }

    // Smallest accepted input side: one full receptive field.
    std::size_t min_input_size() const { return receptive_field(); }
};

template <typename T>
struct ModelWeights {
    ModelConfig config;
    std::vector<Tensor<T>> conv_weight;  // Cout×Cin×k×k per layer
    std::vector<Tensor<T>> conv_bias;    // Cout per layer
    Tensor<T> head_weight;               // N×C×1×1
    Tensor<T> head_bias;                 // N

    // Declaration order: conv weights/biases layer by layer, then the head.
    std::vector<Tensor<T>*> parameters()
    {
        std::vector<Tensor<T>*> out;
        for (std::size_t i = 0; i < conv_weight.size(); ++i) {
            out.push_back(&conv_weight[i]);
            out.push_back(&conv_bias[i]);
        }
        out.push_back(&head_weight);
        out.push_back(&head_bias);
        return out;
    }

    std::vector<const Tensor<T>*> parameters() const
    {
        std::vector<const Tensor<T>*> out;
        for (auto* p : const_cast<ModelWeights*>(this)->parameters()) out.push_back(p);
        return out;
    }

    std::vector<std::string> parameter_names() const
    {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < conv_weight.size(); ++i) {
            out.push_back("conv" + std::to_string(i) + ".weight");
            out.push_back("conv" + std::to_string(i) + ".bias");
        }
        out.push_back("head.weight");
        out.push_back("head.bias");
        return out;
    }

    bool is_head_parameter(std::size_t index) const { return index >= 2 * conv_weight.size(); }

    void set_requires_grad(bool on)
    {
        for (auto* p : parameters()) p->set_requires_grad(on);
    }

    void zero_grad()
    {
        for (auto* p : parameters()) p->zero_grad();
    }

    ModelWeights clone() const { return cast<T>(); }

    template <typename U>
    ModelWeights<U> cast() const
    {
        auto conv = [](const Tensor<T>& t) {
            std::vector<U> v(t.values().begin(), t.values().end());
            return Tensor<U>(t.shape(), std::move(v), t.requires_grad());
        };
        ModelWeights<U> out;
        out.config = config;
        for (std::size_t i = 0; i < conv_weight.size(); ++i) {
            out.conv_weight.push_back(conv(conv_weight[i]));
            out.conv_bias.push_back(conv(conv_bias[i]));
        }
        out.head_weight = conv(head_weight);
        out.head_bias = conv(head_bias);
        return out;
    }

    bool values_equal(const ModelWeights& other) const
    {
        if (!(config == other.config)) return false;
        auto a = parameters();
        auto b = other.parameters();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i]->shape() != b[i]->shape() || a[i]->values() != b[i]->values()) return false;
        return true;
    }
};

// Detector head with small random weights and zero bias, so every heatmap
// starts close to 0.5 and away from logistic saturation.
template <typename T>
void init_detector_head(ModelWeights<T>& w, std::size_t num_detectors, std::uint64_t seed)
{
    require(num_detectors >= 1, "init_detector_head: num_detectors must be >= 1");
    const std::size_t c = w.config.descriptor_dim;
    Rng rng(Rng::derive(seed, 0x484541444ULL));
    std::vector<T> hw(num_detectors * c);
    const double sd = 1e-2 / std::sqrt(static_cast<double>(c));
    for (auto& v : hw) v = static_cast<T>(sd * rng.normal());
    w.config.num_detectors = num_detectors;
    w.head_weight = Tensor<T>({num_detectors, c, 1, 1}, std::move(hw));
    w.head_bias = Tensor<T>({num_detectors});
}

// He-normal convolution weights, zero biases.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    ModelWeights<T> w;
    w.config = config;
    Rng rng(seed);
    std::size_t cin = 3;
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
        const auto& l = config.layers[i];
        const std::size_t fan_in = cin * l.kernel * l.kernel;
        const bool last = i + 1 == config.layers.size();
        const double sd = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
        std::vector<T> vals(l.out_channels * fan_in);
        for (auto& v : vals) v = static_cast<T>(sd * rng.normal());
        w.conv_weight.emplace_back(Shape{l.out_channels, cin, l.kernel, l.kernel}, std::move(vals));
        w.conv_bias.emplace_back(Shape{l.out_channels});
        cin = l.out_channels;
    }
    init_detector_head(w, config.num_detectors, seed);
    return w;
}

template <typename T>
std::size_t count_parameters(const ModelWeights<T>& w)
{
    std::size_t n = 0;
    for (const auto* p : w.parameters()) n += p->size();
    return n;
}

template <typename T>
struct ModelOutput {
    Tensor<T> features;     // F, C×H×W
    Tensor<T> descriptors;  // V, C×H×W, unit norm per pixel
    Tensor<T> heatmaps;     // D, N×H×W, values in (0, 1)
};

template <typename T>
Tensor<T> backbone(const Tensor<T>& image, const ModelWeights<T>& w)
{
    require(image.rank() == 3 && image.dim(0) == 3,
            "forward: expected a 3×H×W image, got " + shape_str(image.shape()));
    const std::size_t min_side = w.config.min_input_size();
    require(image.dim(1) >= min_side && image.dim(2) >= min_side,
            "forward: image sides must be >= " + std::to_string(min_side) + " (receptive field)");
    Tensor<T> x = image;
    for (std::size_t i = 0; i < w.conv_weight.size(); ++i) {
        x = conv2d_same(x, w.conv_weight[i], w.conv_bias[i], w.config.layers[i].dilation);
        if (i + 1 < w.conv_weight.size()) {
            if (w.config.instance_norm) x = instance_normalize(x);
            x = relu(x);
        }
    }
    return x;
}

template <typename T>
Tensor<T> detector_head(const Tensor<T>& features, const ModelWeights<T>& w)
{
    return sigmoid(conv2d(square(features), w.head_weight, w.head_bias, 1, 0));
}

template <typename T>
ModelOutput<T> forward(const Tensor<T>& image, const ModelWeights<T>& w)
{
    ModelOutput<T> out;
    out.features = backbone(image, w);
    out.descriptors = l2_normalize_channels(out.features);
    out.heatmaps = detector_head(out.features, w);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "MDNW", u32 version, u32 scalar bytes (4|8), u32 C, u32 N,
// u32 instance_norm, u32 layer count, per layer u32 kernel/out/dilation, then
// every parameter in declaration order as little-endian floats.

inline constexpr std::uint32_t kWeightsVersion = 1;

template <typename T>
std::string serialize_weights(const ModelWeights<T>& w)
{
    io::ByteWriter out;
    out.raw("MDNW");
    out.u32(kWeightsVersion);
    out.u32(sizeof(T));
    out.u32(static_cast<std::uint32_t>(w.config.descriptor_dim));
    out.u32(static_cast<std::uint32_t>(w.config.num_detectors));
    out.u32(w.config.instance_norm ? 1 : 0);
    out.u32(static_cast<std::uint32_t>(w.config.layers.size()));
    for (const auto& l : w.config.layers) {
        out.u32(static_cast<std::uint32_t>(l.kernel));
        out.u32(static_cast<std::uint32_t>(l.out_channels));
        out.u32(static_cast<std::uint32_t>(l.dilation));
    }
    for (const auto* p : w.parameters())
        for (T v : p->values()) {
            if constexpr (sizeof(T) == 4)
                out.f32(v);
            else
                out.f64(v);
        }
    return out.bytes();
}

// Parses a checkpoint. Values stored at the other precision are converted.
template <typename T>
ModelWeights<T> deserialize_weights(std::string_view bytes, const std::string& source = "checkpoint")
{
    io::ByteReader in(bytes, source);
    if (in.raw(4) != "MDNW") throw FormatError(source + ": bad magic, not an MDNW checkpoint");
    if (const auto v = in.u32(); v != kWeightsVersion)
        throw FormatError(source + ": unsupported checkpoint version " + std::to_string(v));
    const std::uint32_t scalar_bytes = in.u32();
    if (scalar_bytes != 4 && scalar_bytes != 8)
        throw FormatError(source + ": bad scalar width " + std::to_string(scalar_bytes));
    ModelConfig cfg;
    cfg.descriptor_dim = in.u32();
    cfg.num_detectors = in.u32();
    cfg.instance_norm = in.u32() != 0;
    const std::uint32_t nlayers = in.u32();
    if (nlayers == 0 || nlayers > 1024) throw FormatError(source + ": implausible layer count");
    for (std::uint32_t i = 0; i < nlayers; ++i) {
        LayerSpec l;
        l.kernel = in.u32();
        l.out_channels = in.u32();
        l.dilation = in.u32();
        cfg.layers.push_back(l);
    }
    try {
        cfg.validate();
    } catch (const ContractViolation& e) {
        throw FormatError(source + ": " + e.what());
    }

    // Build the shapes, then fill from the stream.
    ModelWeights<T> w;
    w.config = cfg;
    std::size_t cin = 3;
    for (const auto& l : cfg.layers) {
        w.conv_weight.emplace_back(Shape{l.out_channels, cin, l.kernel, l.kernel});
        w.conv_bias.emplace_back(Shape{l.out_channels});
        cin = l.out_channels;
    }
    w.head_weight = Tensor<T>({cfg.num_detectors, cfg.descriptor_dim, 1, 1});
    w.head_bias = Tensor<T>({cfg.num_detectors});
    std::size_t total = 0;
    for (auto* p : w.parameters()) total += p->size();
    if (in.remaining() != total * scalar_bytes)
        throw FormatError(source + ": parameter block has " + std::to_string(in.remaining()) + " bytes, expected " +
                          std::to_string(total * scalar_bytes));
    for (auto* p : w.parameters())
        for (auto& v : p->mutable_data()) v = static_cast<T>(scalar_bytes == 4 ? double(in.f32()) : in.f64());
    return w;
}

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::filesystem::path& path)
{
    io::write_file_atomic(path, serialize_weights(w));
}

template <typename T>
ModelWeights<T> load_weights(const std::filesystem::path& path)
{
    const std::string bytes = io::read_file(path);
    return deserialize_weights<T>(bytes, path.string());
}

} // namespace mdnet
