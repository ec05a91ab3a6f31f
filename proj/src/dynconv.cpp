#include "ddpe/dynconv.hpp"

#include <cmath>
#include <sstream>

#include "ddpe/errors.hpp"
#include "ddpe/ops.hpp"
#include "ddpe/rng.hpp"

namespace ddpe {

TemplateShape template_shape(std::size_t template_index) {
    switch (template_index % 4) {
    case 0:
        return TemplateShape::Full;
    case 1:
        return TemplateShape::Point;
    case 2:
        return TemplateShape::Column;
    default:
        return TemplateShape::Row;
    }
}

Shape template_extent(TemplateShape shape, std::size_t out_channels, std::size_t in_channels,
                      std::size_t kernel_size) {
    switch (shape) {
    case TemplateShape::Full:
        return {out_channels, in_channels, kernel_size, kernel_size};
    case TemplateShape::Point:
        return {out_channels, in_channels, 1, 1};
    case TemplateShape::Column:
        return {out_channels, in_channels, kernel_size, 1};
    case TemplateShape::Row:
        return {out_channels, in_channels, 1, kernel_size};
    }
    return {};
}

NetworkConfig NetworkConfig::chain(std::size_t in_channels, std::size_t height, std::size_t width,
                                   const std::vector<std::size_t>& channels, std::size_t num_classes,
                                   std::size_t kernel_size, std::size_t num_templates) {
    NetworkConfig cfg;
    cfg.in_channels = in_channels;
    cfg.height = height;
    cfg.width = width;
    cfg.num_classes = num_classes;
    std::size_t previous = in_channels;
    for (const auto c : channels) {
        BlockConfig block;
        block.in_channels = previous;
        block.out_channels = c;
        block.kernel_size = kernel_size;
        block.num_templates = num_templates;
        block.stride = 1;
        block.pad = kernel_size / 2;
        cfg.blocks.push_back(block);
        previous = c;
    }
    return cfg;
}

void NetworkConfig::validate() const {
    if (blocks.empty()) {
        throw ConfigError("network: at least one block is required");
    }
    if (num_classes < 1 || in_channels < 1 || pool_window < 1) {
        throw ConfigError("network: classes, input channels and pool window must be positive");
    }
    std::size_t channels = in_channels;
    std::size_t h = height;
    std::size_t w = width;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::string where = "network: block " + std::to_string(i);
        if (b.in_channels != channels) {
            throw ConfigError(where + " expects " + std::to_string(b.in_channels) + " input channels, previous stage has " +
                              std::to_string(channels));
        }
        if (b.out_channels < 1 || b.num_templates < 1 || b.stride < 1) {
            throw ConfigError(where + ": out_channels, num_templates and stride must be positive");
        }
        if (b.kernel_size % 2 == 0) {
            throw ConfigError(where + ": kernel size must be odd");
        }
        if (h + 2 * b.pad < b.kernel_size || w + 2 * b.pad < b.kernel_size) {
            throw ConfigError(where + ": kernel larger than padded input");
        }
        h = (h + 2 * b.pad - b.kernel_size) / b.stride + 1;
        w = (w + 2 * b.pad - b.kernel_size) / b.stride + 1;
        if (h < pool_window || w < pool_window) {
            throw ConfigError(where + ": spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                              " too small for pooling");
        }
        h /= pool_window;
        w /= pool_window;
        channels = b.out_channels;
    }
}

std::string NetworkConfig::to_text() const {
    std::ostringstream os;
    os << "[network]\n"
       << "in_channels = " << in_channels << "\n"
       << "height = " << height << "\n"
       << "width = " << width << "\n"
       << "num_classes = " << num_classes << "\n"
       << "adjuster_hidden = " << adjuster_hidden << "\n"
       << "pool_window = " << pool_window << "\n";
    for (const auto& b : blocks) {
        os << "\n[[network.blocks]]\n"
           << "in_channels = " << b.in_channels << "\n"
           << "out_channels = " << b.out_channels << "\n"
           << "kernel_size = " << b.kernel_size << "\n"
           << "num_templates = " << b.num_templates << "\n"
           << "stride = " << b.stride << "\n"
           << "pad = " << b.pad << "\n";
    }
    return os.str();
}

template <typename T>
Tensor<T> pad_template_to_dense(const Tensor<T>& tmpl, std::size_t kernel_size) {
    if (!tmpl.defined() || tmpl.rank() != 4) {
        throw DimensionError("pad_template_to_dense: template must be Cout x Cin x kh x kw");
    }
    const std::size_t kh = tmpl.dim(2);
    const std::size_t kw = tmpl.dim(3);
    const bool legal = (kh == kernel_size || kh == 1) && (kw == kernel_size || kw == 1);
    if (!legal || kernel_size % 2 == 0) {
        throw DimensionError("pad_template_to_dense: template " + shape_str(tmpl.shape()) +
                             " is not an asymmetric pattern for K=" + std::to_string(kernel_size));
    }
    if (kh == kernel_size && kw == kernel_size) {
        return tmpl;
    }
    const std::size_t planes = tmpl.dim(0) * tmpl.dim(1);
    const std::size_t k = kernel_size;
    const std::size_t row0 = (k - kh) / 2;
    const std::size_t col0 = (k - kw) / 2;
    std::vector<T> out(planes * k * k, T(0));
    const auto src = tmpl.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
                out[(p * k + row0 + i) * k + col0 + j] = src[(p * kh + i) * kw + j];
            }
        }
    }
    return Tensor<T>::make_result(
        "pad_template_to_dense", {tmpl.dim(0), tmpl.dim(1), k, k}, std::move(out), {tmpl},
        [=](Node<T>& self) {
            auto g = self.inputs[0]->ensure_grad();
            for (std::size_t p = 0; p < planes; ++p) {
                for (std::size_t i = 0; i < kh; ++i) {
                    for (std::size_t j = 0; j < kw; ++j) {
                        g[(p * kh + i) * kw + j] += self.grad[(p * k + row0 + i) * k + col0 + j];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> assemble_dynamic_kernel(const DynamicCoefficients<T>& coefficients, const KernelTemplateBank<T>& bank) {
    const Tensor<T>& lambda = coefficients.values;
    if (!lambda.defined() || lambda.rank() != 2) {
        throw DimensionError("assemble_dynamic_kernel: coefficients must be B x M");
    }
    const std::size_t batch = lambda.dim(0);
    const std::size_t m_count = lambda.dim(1);
    if (m_count != bank.size()) {
        throw DimensionError("assemble_dynamic_kernel: " + std::to_string(m_count) + " coefficient columns for " +
                             std::to_string(bank.size()) + " templates");
    }
    const Shape& kshape = bank.static_kernel.shape();
    const std::size_t n = bank.static_kernel.numel();

    std::vector<Tensor<T>> inputs{lambda, bank.static_kernel};
    for (const auto& t : bank.templates) {
        Tensor<T> dense = pad_template_to_dense(t, bank.kernel_size);
        if (dense.shape() != kshape) {
            throw DimensionError("assemble_dynamic_kernel: template " + shape_str(t.shape()) +
                                 " does not match static kernel " + shape_str(kshape));
        }
        inputs.push_back(std::move(dense));
    }

    std::vector<T> out(batch * n);
    const auto lv = lambda.data();
    const auto sv = bank.static_kernel.data();
    for (std::size_t b = 0; b < batch; ++b) {
        T* ob = out.data() + b * n;
        std::copy(sv.begin(), sv.end(), ob);
        for (std::size_t m = 0; m < m_count; ++m) {
            const T w = lv[b * m_count + m];
            const auto pv = inputs[2 + m].data();
            for (std::size_t i = 0; i < n; ++i) {
                ob[i] += w * pv[i];
            }
        }
    }

    Shape shape{batch};
    shape.insert(shape.end(), kshape.begin(), kshape.end());
    return Tensor<T>::make_result(
        "assemble_dynamic_kernel", std::move(shape), std::move(out), std::move(inputs),
        [batch, m_count, n](Node<T>& self) {
            const auto& g = self.grad;
            const auto& lam = self.inputs[0]->data;
            if (self.inputs[0]->requires_grad) {
                auto gl = self.inputs[0]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t m = 0; m < m_count; ++m) {
                        const auto& pv = self.inputs[2 + m]->data;
                        T acc = T(0);
                        for (std::size_t i = 0; i < n; ++i) {
                            acc += g[b * n + i] * pv[i];
                        }
                        gl[b * m_count + m] += acc;
                    }
                }
            }
            if (self.inputs[1]->requires_grad) {
                auto gs = self.inputs[1]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t i = 0; i < n; ++i) {
                        gs[i] += g[b * n + i];
                    }
                }
            }
            for (std::size_t m = 0; m < m_count; ++m) {
                if (!self.inputs[2 + m]->requires_grad) {
                    continue;
                }
                auto gp = self.inputs[2 + m]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    const T w = lam[b * m_count + m];
                    for (std::size_t i = 0; i < n; ++i) {
                        gp[i] += w * g[b * n + i];
                    }
                }
            }
        });
}

template <typename T>
DynamicCoefficients<T> meta_adjust(const Tensor<T>& features, const MetaAdjuster<T>& adjuster) {
    if (!features.defined() || features.rank() != 4) {
        throw DimensionError("meta_adjust: features must be B x C x H x W");
    }
    const std::size_t expected = adjuster.hidden_weight.defined() ? adjuster.hidden_weight.dim(1)
                                                                  : adjuster.weight.dim(1);
    if (features.dim(1) != expected) {
        throw DimensionError("meta_adjust: adjuster expects " + std::to_string(expected) + " channels, got " +
                             std::to_string(features.dim(1)));
    }
    Tensor<T> h = global_avg_pool(features);
    if (adjuster.hidden_weight.defined()) {
        h = relu(linear(h, adjuster.hidden_weight, adjuster.hidden_bias));
    }
    return DynamicCoefficients<T>{softmax(linear(h, adjuster.weight, adjuster.bias)), 0, 0};
}

namespace {

template <typename T>
Tensor<T> norm_relu(const Tensor<T>& pre, const DynamicBlock<T>& block) {
    return relu(instance_norm(pre, block.norm_scale, block.norm_shift));
}

} // namespace

template <typename T>
BlockOutput<T> dynamic_block_forward(const Tensor<T>& x, const DynamicBlock<T>& block,
                                     const DynamicCoefficients<T>* override_coefficients) {
    DynamicCoefficients<T> used;
    if (override_coefficients != nullptr) {
        const auto& v = override_coefficients->values;
        if (!v.defined() || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != block.bank.size()) {
            throw DimensionError("dynamic_block_forward: override coefficients must be " +
                                 std::to_string(x.dim(0)) + "x" + std::to_string(block.bank.size()));
        }
        used = *override_coefficients;
    } else {
        used = meta_adjust(x, block.adjuster);
    }
    Tensor<T> kernels = assemble_dynamic_kernel(used, block.bank);
    Tensor<T> pre = conv2d_per_instance(x, kernels, block.config.stride, block.config.pad);
    return BlockOutput<T>{norm_relu(pre, block), std::move(used)};
}

template <typename T>
Tensor<T> static_only_forward(const Tensor<T>& x, const DynamicBlock<T>& block) {
    if (!x.defined() || x.rank() != 4) {
        throw DimensionError("static_only_forward: input must be B x C x H x W");
    }
    Tensor<T> kernels = broadcast_batch(block.bank.static_kernel, x.dim(0));
    Tensor<T> pre = conv2d_per_instance(x, kernels, block.config.stride, block.config.pad);
    return norm_relu(pre, block);
}

template <typename T>
Model<T>::Model(NetworkConfig config, std::vector<DynamicBlock<T>> blocks, Tensor<T> classifier_weight,
                Tensor<T> classifier_bias)
    : config_(std::move(config)),
      blocks_(std::move(blocks)),
      classifier_weight_(std::move(classifier_weight)),
      classifier_bias_(std::move(classifier_bias)) {}

template <typename T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& images, const ForwardOptions<T>& options) const {
    if (!images.defined() || images.rank() != 4 || images.dim(1) != config_.in_channels) {
        throw DimensionError("model: images must be B x " + std::to_string(config_.in_channels) + " x H x W");
    }
    ForwardResult<T> result;
    Tensor<T> h = images;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& block = blocks_[i];
        if (options.static_last_block && i + 1 == blocks_.size()) {
            h = static_only_forward(h, block);
        } else {
            DynamicCoefficients<T> lambda = meta_adjust(h, block.adjuster);
            lambda.block = i;
            lambda.pass_id = options.pass_id;
            if (options.hook) {
                lambda = options.hook(i, lambda);
                lambda.block = i;
                lambda.pass_id = options.pass_id;
            }
            BlockOutput<T> out = dynamic_block_forward(h, block, &lambda);
            h = std::move(out.features);
            result.coefficients.push_back(std::move(out.coefficients));
        }
        h = avg_pool2d(h, config_.pool_window);
    }
    result.pooled = global_avg_pool(h);
    result.logits = linear(result.pooled, classifier_weight_, classifier_bias_);
    return result;
}

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
    std::vector<NamedParameter<T>> params;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& b = blocks_[i];
        const std::string prefix = "block" + std::to_string(i) + ".";
        params.push_back({prefix + "static_kernel", b.bank.static_kernel});
        for (std::size_t m = 0; m < b.bank.size(); ++m) {
            params.push_back({prefix + "template" + std::to_string(m), b.bank.templates[m]});
        }
        if (b.adjuster.hidden_weight.defined()) {
            params.push_back({prefix + "adjuster.hidden_weight", b.adjuster.hidden_weight});
            params.push_back({prefix + "adjuster.hidden_bias", b.adjuster.hidden_bias});
        }
        params.push_back({prefix + "adjuster.weight", b.adjuster.weight});
        params.push_back({prefix + "adjuster.bias", b.adjuster.bias});
        params.push_back({prefix + "norm.scale", b.norm_scale});
        params.push_back({prefix + "norm.shift", b.norm_shift});
    }
    params.push_back({"classifier.weight", classifier_weight_});
    params.push_back({"classifier.bias", classifier_bias_});
    return params;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) {
        n += p.tensor.numel();
    }
    return n;
}

namespace {

template <typename To, typename From, typename Fn>
Model<To> map_model(const Model<From>& model, Fn convert) {
    auto conv = [&](const Tensor<From>& t) { return t.defined() ? convert(t) : Tensor<To>{}; };
    std::vector<DynamicBlock<To>> blocks;
    for (const auto& b : model.blocks()) {
        DynamicBlock<To> nb;
        nb.config = b.config;
        nb.bank.kernel_size = b.bank.kernel_size;
        nb.bank.static_kernel = conv(b.bank.static_kernel);
        for (const auto& t : b.bank.templates) {
            nb.bank.templates.push_back(conv(t));
        }
        nb.adjuster.hidden_weight = conv(b.adjuster.hidden_weight);
        nb.adjuster.hidden_bias = conv(b.adjuster.hidden_bias);
        nb.adjuster.weight = conv(b.adjuster.weight);
        nb.adjuster.bias = conv(b.adjuster.bias);
        nb.norm_scale = conv(b.norm_scale);
        nb.norm_shift = conv(b.norm_shift);
        blocks.push_back(std::move(nb));
    }
    return Model<To>(model.config(), std::move(blocks), conv(model.classifier_weight()),
                     conv(model.classifier_bias()));
}

} // namespace

template <typename T>
Model<T> Model<T>::clone() const {
    return map_model<T>(*this, [](const Tensor<T>& t) { return t.clone(); });
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& model) {
    return map_model<To>(model, [](const Tensor<From>& t) { return cast<To>(t, t.requires_grad()); });
}

template <typename T>
std::size_t Model<T>::set_trainable(std::string_view prefix, bool trainable) {
    std::size_t matched = 0;
    for (auto& p : parameters()) {
        if (std::string_view(p.name).substr(0, prefix.size()) == prefix) {
            p.tensor.set_requires_grad(trainable);
            ++matched;
        }
    }
    return matched;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : parameters()) {
        p.tensor.zero_grad();
    }
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) {
        v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return Tensor<T>::from(std::move(shape), std::move(values), true);
}

} // namespace

template <typename T>
Model<T> build_network(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = Rng::stream(seed, Stream::Init);
    std::vector<DynamicBlock<T>> blocks;
    for (const auto& bc : config.blocks) {
        DynamicBlock<T> block;
        block.config = bc;
        const std::size_t k = bc.kernel_size;
        block.bank.kernel_size = k;
        block.bank.static_kernel = uniform_tensor<T>({bc.out_channels, bc.in_channels, k, k},
                                                     std::sqrt(6.0 / static_cast<double>(bc.in_channels * k * k)), rng);
        for (std::size_t m = 0; m < bc.num_templates; ++m) {
            Shape extent = template_extent(template_shape(m), bc.out_channels, bc.in_channels, k);
            const double fan_in = static_cast<double>(extent[1] * extent[2] * extent[3]);
            block.bank.templates.push_back(uniform_tensor<T>(std::move(extent), std::sqrt(6.0 / fan_in), rng));
        }
        std::size_t adjuster_in = bc.in_channels;
        if (config.adjuster_hidden > 0) {
            block.adjuster.hidden_weight = uniform_tensor<T>(
                {config.adjuster_hidden, bc.in_channels}, std::sqrt(6.0 / static_cast<double>(bc.in_channels)), rng);
            block.adjuster.hidden_bias = Tensor<T>::zeros({config.adjuster_hidden}, true);
            adjuster_in = config.adjuster_hidden;
        }
        block.adjuster.weight = Tensor<T>::zeros({bc.num_templates, adjuster_in}, true);
        block.adjuster.bias = Tensor<T>::zeros({bc.num_templates}, true);
        block.norm_scale = Tensor<T>::full({bc.out_channels}, T(1), true);
        block.norm_shift = Tensor<T>::zeros({bc.out_channels}, true);
        blocks.push_back(std::move(block));
    }
    const std::size_t last = config.blocks.back().out_channels;
    Tensor<T> cw = uniform_tensor<T>({config.num_classes, last}, 1.0 / std::sqrt(static_cast<double>(last)), rng);
    Tensor<T> cb = Tensor<T>::zeros({config.num_classes}, true);
    return Model<T>(config, std::move(blocks), std::move(cw), std::move(cb));
}

std::size_t expected_parameter_count(const NetworkConfig& config) {
    std::size_t total = 0;
    for (const auto& b : config.blocks) {
        const std::size_t oc = b.out_channels * b.in_channels;
        const std::size_t k = b.kernel_size;
        total += oc * k * k;
        for (std::size_t m = 0; m < b.num_templates; ++m) {
            const Shape e = template_extent(template_shape(m), b.out_channels, b.in_channels, k);
            total += e[0] * e[1] * e[2] * e[3];
        }
        if (config.adjuster_hidden > 0) {
            total += config.adjuster_hidden * (b.in_channels + 1) + b.num_templates * (config.adjuster_hidden + 1);
        } else {
            total += b.num_templates * (b.in_channels + 1);
        }
        total += 2 * b.out_channels;
    }
    total += config.num_classes * (config.blocks.back().out_channels + 1);
    return total;
}

#define DDPE_INSTANTIATE_DYNCONV(T)                                                                            \
    template Tensor<T> pad_template_to_dense(const Tensor<T>&, std::size_t);                                  \
    template Tensor<T> assemble_dynamic_kernel(const DynamicCoefficients<T>&, const KernelTemplateBank<T>&);  \
    template DynamicCoefficients<T> meta_adjust(const Tensor<T>&, const MetaAdjuster<T>&);                    \
    template BlockOutput<T> dynamic_block_forward(const Tensor<T>&, const DynamicBlock<T>&,                   \
                                                  const DynamicCoefficients<T>*);                             \
    template Tensor<T> static_only_forward(const Tensor<T>&, const DynamicBlock<T>&);                         \
    template class Model<T>;                                                                                   \
    template Model<T> build_network<T>(const NetworkConfig&, std::uint64_t);

DDPE_INSTANTIATE_DYNCONV(float)
DDPE_INSTANTIATE_DYNCONV(double)

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

} // namespace ddpe
