#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "ddpe/tensor.hpp"

namespace ddpe {

// Support pattern of an asymmetric kernel template inside a dense K x K
// kernel: the full square, the center cell, the center column or the center
// row. Template m uses pattern m % 4.
enum class TemplateShape { Full, Point, Column, Row };

TemplateShape template_shape(std::size_t template_index);
// Extents (Cout, Cin, kh, kw) of a template with the given pattern.
Shape template_extent(TemplateShape shape, std::size_t out_channels, std::size_t in_channels,
                      std::size_t kernel_size);

struct BlockConfig {
    std::size_t in_channels = 3;
    std::size_t out_channels = 8;
    std::size_t kernel_size = 3;
    std::size_t num_templates = 4;
    std::size_t stride = 1;
    std::size_t pad = 1;

    bool operator==(const BlockConfig&) const = default;
};

struct NetworkConfig {
    std::size_t in_channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t num_classes = 4;
    // Width of an optional hidden layer in every meta-adjuster; 0 keeps the
    // adjuster a single linear map.
    std::size_t adjuster_hidden = 0;
    std::size_t pool_window = 2;
    std::vector<BlockConfig> blocks;

    // Chained blocks with "same" padding.
    static NetworkConfig chain(std::size_t in_channels, std::size_t height, std::size_t width,
                               const std::vector<std::size_t>& channels, std::size_t num_classes,
                               std::size_t kernel_size = 3, std::size_t num_templates = 4);

    // Throws ConfigError when channels do not chain, K is even, or the
    // spatial extent collapses.
    void validate() const;

    // Canonical TOML text; from_text(to_text()) reproduces the config.
    std::string to_text() const;
    static NetworkConfig from_text(std::string_view text);

    bool operator==(const NetworkConfig&) const = default;
};

template <typename T>
struct KernelTemplateBank {
    std::vector<Tensor<T>> templates; // template m has extent template_extent(template_shape(m), ...)
    Tensor<T> static_kernel;          // Cout x Cin x K x K
    std::size_t kernel_size = 3;

    std::size_t size() const { return templates.size(); }
};

// Per-instance simplex weights over the template bank (B x M), tagged with
// where they came from.
template <typename T>
struct DynamicCoefficients {
    Tensor<T> values;
    std::size_t block = 0;
    std::uint64_t pass_id = 0;

    std::size_t batch() const { return values.dim(0); }
    std::size_t templates() const { return values.dim(1); }
};

// GAP -> [linear -> ReLU] -> linear -> softmax.
template <typename T>
struct MetaAdjuster {
    Tensor<T> hidden_weight; // undefined unless a hidden layer is configured
    Tensor<T> hidden_bias;
    Tensor<T> weight; // M x (Cin or hidden)
    Tensor<T> bias;   // M
};

template <typename T>
struct DynamicBlock {
    BlockConfig config;
    KernelTemplateBank<T> bank;
    MetaAdjuster<T> adjuster;
    Tensor<T> norm_scale;
    Tensor<T> norm_shift; // per output channel; doubles as the static conv bias
};

template <typename T>
struct BlockOutput {
    Tensor<T> features;
    DynamicCoefficients<T> coefficients;
};

template <typename T>
Tensor<T> pad_template_to_dense(const Tensor<T>& tmpl, std::size_t kernel_size);

// Theta(x) = Theta_s + sum_m lambda_m(x) * pad(Phi_m), one kernel per instance.
template <typename T>
Tensor<T> assemble_dynamic_kernel(const DynamicCoefficients<T>& coefficients, const KernelTemplateBank<T>& bank);

template <typename T>
DynamicCoefficients<T> meta_adjust(const Tensor<T>& features, const MetaAdjuster<T>& adjuster);

// conv with assembled kernels -> instance norm -> ReLU. Uses `override_coefficients`
// when given, otherwise meta_adjust(x).
template <typename T>
BlockOutput<T> dynamic_block_forward(const Tensor<T>& x, const DynamicBlock<T>& block,
                                     const DynamicCoefficients<T>* override_coefficients = nullptr);

// Same pipeline with the static kernel only.
template <typename T>
Tensor<T> static_only_forward(const Tensor<T>& x, const DynamicBlock<T>& block);

// Called once per block with the coefficients the block just computed;
// returns the coefficients the block should actually use.
template <typename T>
using CoefficientHook = std::function<DynamicCoefficients<T>(std::size_t block, const DynamicCoefficients<T>&)>;

template <typename T>
struct ForwardOptions {
    CoefficientHook<T> hook;
    // Run the last block with its static kernel only.
    bool static_last_block = false;
    std::uint64_t pass_id = 0;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;
    Tensor<T> pooled; // GAP of the last block, B x C_last
    // Coefficients actually used, one entry per dynamic block that ran.
    std::vector<DynamicCoefficients<T>> coefficients;
};

template <typename T>
struct NamedParameter {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
class Model {
public:
    Model(NetworkConfig config, std::vector<DynamicBlock<T>> blocks, Tensor<T> classifier_weight,
          Tensor<T> classifier_bias);

    const NetworkConfig& config() const { return config_; }
    const std::vector<DynamicBlock<T>>& blocks() const { return blocks_; }
    std::vector<DynamicBlock<T>>& blocks() { return blocks_; }
    const Tensor<T>& classifier_weight() const { return classifier_weight_; }
    const Tensor<T>& classifier_bias() const { return classifier_bias_; }

    ForwardResult<T> forward(const Tensor<T>& images, const ForwardOptions<T>& options = {}) const;

    // Stable, named order used by the optimizer, SWA and checkpoints.
    std::vector<NamedParameter<T>> parameters() const;
    std::size_t parameter_count() const;

    // Deep copy with independent parameter storage.
    Model clone() const;

    // Marks every parameter whose name starts with `prefix` as (non-)trainable.
    // Returns how many parameters matched.
    std::size_t set_trainable(std::string_view prefix, bool trainable);

    void zero_grad();

private:
    NetworkConfig config_;
    std::vector<DynamicBlock<T>> blocks_;
    Tensor<T> classifier_weight_;
    Tensor<T> classifier_bias_;
};

// Kaiming-uniform (fan-in) kernels and templates, zero meta-adjuster output
// layer so every lambda starts uniform, unit/zero normalization affine,
// PyTorch-style uniform classifier weights with zero bias.
template <typename T>
Model<T> build_network(const NetworkConfig& config, std::uint64_t seed);

std::size_t expected_parameter_count(const NetworkConfig& config);

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model);

} // namespace ddpe
