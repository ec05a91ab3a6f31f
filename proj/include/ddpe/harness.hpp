#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddpe/data.hpp"
#include "ddpe/dynconv.hpp"
#include "ddpe/perturb.hpp"

namespace ddpe {

struct SwaConfig {
    bool enabled = true;
    double start_fraction = 0.5;
};

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double lr0 = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    SwaConfig swa;
    PerturbationPlan plan;
    Sampler sampler = Sampler::Shuffle;
    std::vector<std::uint64_t> seeds{0, 1, 2};

    void validate() const;
};

struct DataConfig {
    bool synthetic = true;
    SyntheticSpec synthetic_spec;
    std::filesystem::path folder;
};

// Shorthand for a chained network; geometry and class count come from data.
struct NetworkShape {
    std::vector<std::size_t> channels{8, 16};
    std::size_t kernel_size = 3;
    std::size_t templates = 4;
    std::size_t adjuster_hidden = 0;
};

struct ProtocolConfig {
    Protocol kind = Protocol::LeaveOneDomainOut;
    std::vector<int> targets; // empty: every domain present
};

struct ExperimentConfig {
    DataConfig data;
    NetworkShape network;
    TrainConfig train;
    ProtocolConfig protocol;
    std::string source_text; // verbatim config file, echoed into reports

    void validate() const;
};

// TOML-compatible configuration. Unknown tables or keys are a ConfigError.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

std::vector<DomainSample> load_data(const DataConfig& config);
NetworkConfig network_for(const NetworkShape& shape, const std::vector<DomainSample>& samples);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

template <typename T>
struct SgdState {
    std::vector<std::vector<T>> velocity; // per parameter, lazily sized
};

// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
// Parameters with requires_grad == false are left untouched.
template <typename T>
void sgd_step(std::span<const NamedParameter<T>> params, double lr, double momentum, double weight_decay,
              SgdState<T>& state);

// Running mean kept in double: avg <- avg + (current - avg) / (n + 1), and
// avg <- current when n == 0.
template <typename T>
void swa_update(std::span<double> average, std::span<const T> current, std::size_t n_collected);

template <typename T>
class SwaAverager {
public:
    explicit SwaAverager(const Model<T>& model);

    void collect(const Model<T>& model);
    std::size_t collected() const { return collected_; }
    // Copy of `like` carrying the averaged weights.
    Model<T> averaged(const Model<T>& like) const;

private:
    std::vector<std::vector<double>> average_;
    std::size_t collected_ = 0;
};

// First epoch (1-based) whose end is collected.
std::size_t swa_start_epoch(const SwaConfig& swa, std::size_t epochs);

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double ce_clean = 0.0;
    double ce_perturbed = 0.0;
    double train_accuracy = 0.0;
    double lr = 0.0; // at the first step of the epoch
    std::size_t rule_violations = 0;
    std::size_t self_fallbacks = 0;
};

using History = std::vector<EpochRecord>;

template <typename T>
struct TrainResult {
    Model<T> model;
    std::optional<Model<T>> swa_model;
    History history;

    const Model<T>& evaluation_model() const { return swa_model ? *swa_model : model; }
};

// Trains in place on split.train; `seed` drives batching and perturbation
// streams (initialization happens in build_network).
template <typename T>
TrainResult<T> train(Model<T> model, const std::vector<DomainSample>& train_samples, const TrainConfig& config,
                     std::uint64_t seed);

// Fraction of rows whose argmax (ties to the lowest index) equals the label.
double accuracy_from_logits(std::span<const double> logits, std::size_t classes, std::span<const int> labels);

template <typename T>
double evaluate(const Model<T>& model, const std::vector<DomainSample>& samples, std::size_t batch_size = 256);

struct RunCell {
    std::uint64_t seed = 0;
    int target = 0;
    double accuracy = 0.0;
    History history;
};

struct RunReport {
    Protocol protocol = Protocol::LeaveOneDomainOut;
    std::vector<std::uint64_t> seeds;
    std::vector<int> targets;
    std::vector<RunCell> cells; // seed-major
    std::vector<double> mean;   // per target
    std::vector<double> stddev; // per target, population form
    double overall_mean = 0.0;
    double wall_clock_seconds = 0.0;
    std::string config_text;

    void recompute_summary();
};

struct ExperimentHooks {
    // Called after each (seed, target) cell finishes.
    std::function<void(const RunCell&)> on_cell;
    // Optional inspection of each trained model.
    std::function<void(const RunCell&, const TrainResult<float>&, const DatasetSplit&)> on_model;
};

// Every seed x target: fresh model, train, evaluate (SWA weights when
// enabled). When `out_dir` is given, report.json and per-cell history CSVs
// are written after every cell, so partial results survive an abort.
RunReport run_experiment(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_dir = {},
                         const ExperimentHooks& hooks = {});

std::string history_csv(const History& history);
std::string report_json(const RunReport& report);
RunReport parse_report_json(std::string_view text);
std::string protocol_name(Protocol protocol);

} // namespace ddpe
