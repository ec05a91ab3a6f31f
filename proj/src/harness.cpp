#include "ddpe/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ddpe/errors.hpp"
#include "ddpe/ops.hpp"

namespace ddpe {

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw ConfigError("train: epochs must be at least 1");
    }
    if (batch_size < 1) {
        throw ConfigError("train: batch_size must be at least 1");
    }
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) {
        throw ConfigError("train: lr0 must be finite and non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("train: momentum must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("train: weight_decay must be non-negative");
    }
    if (swa.enabled && !(swa.start_fraction > 0.0 && swa.start_fraction < 1.0)) {
        throw ConfigError("swa: start_fraction must lie in (0, 1)");
    }
    if (seeds.empty()) {
        throw ConfigError("train: at least one seed is required");
    }
    if (plan.mode != PerturbMode::None && batch_size < 2) {
        throw ConfigError("train: parameter exchange needs batch_size >= 2");
    }
    plan.validate();
}

void ExperimentConfig::validate() const {
    train.validate();
    if (network.channels.empty()) {
        throw ConfigError("network: channels must list at least one block");
    }
    if (network.kernel_size % 2 == 0) {
        throw ConfigError("network: kernel_size must be odd");
    }
}

std::vector<DomainSample> load_data(const DataConfig& config) {
    if (config.synthetic) {
        return generate_synthetic_domains(config.synthetic_spec);
    }
    return load_image_folder(config.folder);
}

NetworkConfig network_for(const NetworkShape& shape, const std::vector<DomainSample>& samples) {
    if (samples.empty()) {
        throw ConfigError("network: no samples to infer geometry from");
    }
    int max_class = 0;
    for (const auto& s : samples) {
        max_class = std::max(max_class, s.class_label);
    }
    const auto& first = samples.front();
    NetworkConfig cfg = NetworkConfig::chain(first.channels, first.height, first.width, shape.channels,
                                             static_cast<std::size_t>(max_class) + 1, shape.kernel_size,
                                             shape.templates);
    cfg.adjuster_hidden = shape.adjuster_hidden;
    cfg.validate();
    return cfg;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) {
        throw ContractError("cosine_lr: total_steps must be positive");
    }
    if (step > total_steps) {
        throw ContractError("cosine_lr: step beyond schedule");
    }
    if (step == total_steps) {
        return 0.0;
    }
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

template <typename T>
void sgd_step(std::span<const NamedParameter<T>> params, double lr, double momentum, double weight_decay,
              SgdState<T>& state) {
    if (state.velocity.size() < params.size()) {
        state.velocity.resize(params.size());
    }
    const T lr_t = static_cast<T>(lr);
    const T mu = static_cast<T>(momentum);
    const T wd = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> p = params[i].tensor;
        if (!p.requires_grad()) {
            continue;
        }
        auto values = p.data();
        auto& v = state.velocity[i];
        if (v.empty()) {
            v.assign(values.size(), T(0));
        } else if (v.size() != values.size()) {
            throw DimensionError("sgd_step: optimizer state does not match parameter '" + params[i].name + "'");
        }
        const std::vector<T> g = p.grad();
        for (std::size_t j = 0; j < values.size(); ++j) {
            v[j] = mu * v[j] + (g[j] + wd * values[j]);
            values[j] -= lr_t * v[j];
        }
    }
}

template <typename T>
void swa_update(std::span<double> average, std::span<const T> current, std::size_t n_collected) {
    if (average.size() != current.size()) {
        throw DimensionError("swa_update: shape mismatch");
    }
    if (n_collected == 0) {
        std::copy(current.begin(), current.end(), average.begin());
        return;
    }
    const double n1 = static_cast<double>(n_collected + 1);
    for (std::size_t i = 0; i < average.size(); ++i) {
        average[i] += (static_cast<double>(current[i]) - average[i]) / n1;
    }
}

template <typename T>
SwaAverager<T>::SwaAverager(const Model<T>& model) {
    for (const auto& p : model.parameters()) {
        average_.emplace_back(p.tensor.numel(), 0.0);
    }
}

template <typename T>
void SwaAverager<T>::collect(const Model<T>& model) {
    const auto params = model.parameters();
    if (params.size() != average_.size()) {
        throw DimensionError("swa: model layout changed between collections");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        swa_update<T>(average_[i], params[i].tensor.data(), collected_);
    }
    ++collected_;
}

template <typename T>
Model<T> SwaAverager<T>::averaged(const Model<T>& like) const {
    Model<T> out = like.clone();
    if (collected_ == 0) {
        return out;
    }
    auto params = out.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].tensor.data();
        for (std::size_t j = 0; j < values.size(); ++j) {
            values[j] = static_cast<T>(average_[i][j]);
        }
    }
    return out;
}

std::size_t swa_start_epoch(const SwaConfig& swa, std::size_t epochs) {
    const auto start = static_cast<std::size_t>(std::ceil(swa.start_fraction * static_cast<double>(epochs)));
    return std::clamp<std::size_t>(start, 1, epochs);
}

double accuracy_from_logits(std::span<const double> logits, std::size_t classes, std::span<const int> labels) {
    if (classes == 0 || logits.size() != classes * labels.size()) {
        throw DimensionError("accuracy: logits do not match labels");
    }
    if (labels.empty()) {
        throw DimensionError("accuracy: no samples");
    }
    std::size_t correct = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const auto row = logits.subspan(b * classes, classes);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == labels[b] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

template <typename T>
double evaluate(const Model<T>& model, const std::vector<DomainSample>& samples, std::size_t batch_size) {
    if (samples.empty()) {
        throw DimensionError("evaluate: no samples");
    }
    std::size_t correct = 0;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = start + i;
        }
        const Batch<T> batch = make_batch<T>(samples, idx);
        const auto logits = model.forward(batch.images).logits;
        const std::vector<double> values(logits.data().begin(), logits.data().end());
        const double acc = accuracy_from_logits(values, logits.dim(1), batch.labels);
        correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(idx.size())));
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

template <typename T>
TrainResult<T> train(Model<T> model, const std::vector<DomainSample>& train_samples, const TrainConfig& config,
                     std::uint64_t seed) {
    config.validate();
    if (train_samples.empty()) {
        throw ConfigError("train: empty training split");
    }
    const bool exchange = config.plan.mode != PerturbMode::None;
    const std::size_t per_epoch = (train_samples.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = config.epochs * per_epoch;
    const std::size_t swa_start = swa_start_epoch(config.swa, config.epochs);

    Rng perturb_rng = Rng::stream(seed, Stream::Perturbation);
    SgdState<T> sgd;
    std::optional<SwaAverager<T>> swa;
    if (config.swa.enabled) {
        swa.emplace(model);
    }
    const auto params = model.parameters();

    History history;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches =
            make_batches(train_samples, config.batch_size, config.sampler, seed, epoch, exchange);
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = cosine_lr(step, total_steps, config.lr0);
        double ce_clean = 0.0;
        double ce_perturbed = 0.0;
        std::size_t seen = 0;
        std::size_t correct = 0;
        for (const auto& idx : batches) {
            const Batch<T> batch = make_batch<T>(train_samples, idx);
            model.zero_grad();
            JointLossResult<T> jl;
            try {
                jl = joint_loss(model, batch, config.plan, perturb_rng);
                if (!std::isfinite(static_cast<double>(jl.loss.item()))) {
                    throw NumericError("loss is not finite");
                }
                backward(jl.loss);
            } catch (const NumericError& e) {
                throw NumericError("train: epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step) +
                                   ": " + e.what());
            }
            const double lr = cosine_lr(step, total_steps, config.lr0);
            sgd_step<T>(params, lr, config.momentum, config.weight_decay, sgd);
            ++step;

            const double n = static_cast<double>(batch.size());
            ce_clean += jl.ce_clean * n;
            ce_perturbed += jl.ce_perturbed * n;
            const std::vector<double> logits(jl.clean_logits.data().begin(), jl.clean_logits.data().end());
            correct += static_cast<std::size_t>(
                std::llround(accuracy_from_logits(logits, jl.clean_logits.dim(1), batch.labels) * n));
            seen += batch.size();
            rec.rule_violations += jl.rule_violations;
            for (std::size_t b = 0; b < jl.assignment.partner.size(); ++b) {
                rec.self_fallbacks += (jl.assignment.partner[b] == b && config.plan.rule != PartnerRule::Rand) ? 1 : 0;
            }
        }
        rec.ce_clean = ce_clean / static_cast<double>(seen);
        rec.ce_perturbed = ce_perturbed / static_cast<double>(seen);
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        history.push_back(rec);
        if (swa && epoch + 1 >= swa_start) {
            swa->collect(model);
        }
    }

    TrainResult<T> result{model, std::nullopt, std::move(history)};
    if (swa) {
        result.swa_model = swa->averaged(model);
    }
    return result;
}

std::string protocol_name(Protocol protocol) {
    return protocol == Protocol::LeaveOneDomainOut ? "leave_one_domain_out" : "single_source";
}

void RunReport::recompute_summary() {
    mean.assign(targets.size(), 0.0);
    stddev.assign(targets.size(), 0.0);
    for (std::size_t t = 0; t < targets.size(); ++t) {
        std::vector<double> values;
        for (const auto& c : cells) {
            if (c.target == targets[t]) {
                values.push_back(c.accuracy);
            }
        }
        if (values.empty()) {
            continue;
        }
        double m = 0.0;
        for (const double v : values) {
            m += v;
        }
        m /= static_cast<double>(values.size());
        double var = 0.0;
        for (const double v : values) {
            var += (v - m) * (v - m);
        }
        mean[t] = m;
        stddev[t] = std::sqrt(var / static_cast<double>(values.size()));
    }
    overall_mean = 0.0;
    for (const double m : mean) {
        overall_mean += m;
    }
    if (!mean.empty()) {
        overall_mean /= static_cast<double>(mean.size());
    }
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("cannot write " + path.string());
    }
    f << text;
}

} // namespace

std::string history_csv(const History& history) {
    std::string out = "epoch,ce_clean,ce_perturbed,train_acc,lr\n";
    for (const auto& r : history) {
        out += std::to_string(r.epoch) + "," + fmt_double(r.ce_clean) + "," + fmt_double(r.ce_perturbed) + "," +
               fmt_double(r.train_accuracy) + "," + fmt_double(r.lr) + "\n";
    }
    return out;
}

std::string report_json(const RunReport& report) {
    nlohmann::ordered_json j;
    j["protocol"] = protocol_name(report.protocol);
    j["seeds"] = report.seeds;
    j["targets"] = report.targets;
    auto cells = nlohmann::ordered_json::array();
    for (const auto& c : report.cells) {
        cells.push_back({{"seed", c.seed}, {"target", c.target}, {"accuracy", c.accuracy}});
    }
    j["accuracies"] = cells;
    j["mean"] = report.mean;
    j["std"] = report.stddev;
    j["overall_mean"] = report.overall_mean;
    j["config"] = report.config_text;
    return j.dump(2) + "\n";
}

RunReport parse_report_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
        RunReport r;
        r.protocol = j.at("protocol").get<std::string>() == "single_source" ? Protocol::SingleSource
                                                                          : Protocol::LeaveOneDomainOut;
        r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        r.targets = j.at("targets").get<std::vector<int>>();
        for (const auto& c : j.at("accuracies")) {
            RunCell cell;
            cell.seed = c.at("seed").get<std::uint64_t>();
            cell.target = c.at("target").get<int>();
            cell.accuracy = c.at("accuracy").get<double>();
            r.cells.push_back(std::move(cell));
        }
        r.mean = j.at("mean").get<std::vector<double>>();
        r.stddev = j.at("std").get<std::vector<double>>();
        r.overall_mean = j.at("overall_mean").get<double>();
        r.config_text = j.value("config", "");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("report: ") + e.what());
    }
}

RunReport run_experiment(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_dir,
                         const ExperimentHooks& hooks) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();
    const std::vector<DomainSample> samples = load_data(config.data);
    const NetworkConfig net = network_for(config.network, samples);

    RunReport report;
    report.protocol = config.protocol.kind;
    report.seeds = config.train.seeds;
    report.targets = config.protocol.targets.empty() ? domains_present(samples) : config.protocol.targets;
    report.config_text = config.source_text;
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
    }

    auto flush = [&] {
        report.recompute_summary();
        if (out_dir) {
            write_text(*out_dir / "report.json", report_json(report));
        }
    };

    for (const auto seed : report.seeds) {
        for (const int target : report.targets) {
            const DatasetSplit split = leave_one_domain_out_split(samples, target, config.protocol.kind);
            if (split.train.empty() || split.test.empty()) {
                throw ConfigError("experiment: split for domain " + std::to_string(target) + " is empty");
            }
            try {
                TrainResult<float> trained = train(build_network<float>(net, seed), split.train, config.train, seed);
                RunCell cell;
                cell.seed = seed;
                cell.target = target;
                cell.accuracy = evaluate(trained.evaluation_model(), split.test);
                cell.history = trained.history;
                if (out_dir) {
                    write_text(*out_dir / ("history_seed" + std::to_string(seed) + "_target" + std::to_string(target) +
                                           ".csv"),
                               history_csv(cell.history));
                }
                if (hooks.on_model) {
                    hooks.on_model(cell, trained, split);
                }
                report.cells.push_back(std::move(cell));
                if (hooks.on_cell) {
                    hooks.on_cell(report.cells.back());
                }
            } catch (...) {
                flush();
                throw;
            }
            flush();
        }
    }
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (out_dir) {
        // Kept out of report.json so reruns stay byte-identical.
        write_text(*out_dir / "timing.txt", fmt_double(report.wall_clock_seconds) + "\n");
    }
    return report;
}

template void sgd_step<float>(std::span<const NamedParameter<float>>, double, double, double, SgdState<float>&);
template void sgd_step<double>(std::span<const NamedParameter<double>>, double, double, double, SgdState<double>&);
template void swa_update<float>(std::span<double>, std::span<const float>, std::size_t);
template void swa_update<double>(std::span<double>, std::span<const double>, std::size_t);
template class SwaAverager<float>;
template class SwaAverager<double>;
template TrainResult<float> train<float>(Model<float>, const std::vector<DomainSample>&, const TrainConfig&,
                                         std::uint64_t);
template TrainResult<double> train<double>(Model<double>, const std::vector<DomainSample>&, const TrainConfig&,
                                           std::uint64_t);
template double evaluate<float>(const Model<float>&, const std::vector<DomainSample>&, std::size_t);
template double evaluate<double>(const Model<double>&, const std::vector<DomainSample>&, std::size_t);

} // namespace ddpe
