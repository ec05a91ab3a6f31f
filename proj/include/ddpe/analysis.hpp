#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ddpe/data.hpp"
#include "ddpe/dynconv.hpp"

namespace ddpe {

enum class FeatureSource { StaticFeatures, DynamicCoefficients };

std::string to_string(FeatureSource source);

// Row-major N x D features with per-row labels.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<int> class_labels;
    std::vector<int> domain_labels;
    std::vector<std::string> split_tags; // free-form, e.g. "train" / "test"
    FeatureSource source = FeatureSource::StaticFeatures;

    std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }
    void validate() const;
};

// Clean-pass coefficients of every block, concatenated per sample.
template <typename T>
FeatureMatrix extract_coefficients(const Model<T>& model, const std::vector<DomainSample>& samples,
                                   std::size_t batch_size = 256);

// Earlier blocks run normally, the last block with its static kernel only,
// followed by global average pooling.
template <typename T>
FeatureMatrix extract_static_features(const Model<T>& model, const std::vector<DomainSample>& samples,
                                      std::size_t batch_size = 256);

struct ProbeConfig {
    std::size_t hidden = 32;
    double lr = 0.1;
    std::size_t epochs = 200;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    std::vector<double> curve; // held-out domain accuracy after each epoch
    double final_accuracy = 0.0;
    std::size_t train_rows = 0;
    std::size_t test_rows = 0;
    ProbeConfig config;
};

// One-hidden-layer ReLU classifier on standardized features, full-batch
// gradient descent on domain labels. The split is stratified by domain and
// keyed on row content, so identical rows always land on the same side.
ProbeResult domain_probe(const FeatureMatrix& features, const ProbeConfig& config = {});

struct PcaResult {
    std::size_t rows = 0;
    std::size_t dims = 0;
    std::vector<double> coordinates; // rows x dims
    std::vector<double> components;  // dims x D, orthonormal rows
    std::vector<double> eigenvalues; // descending, population covariance
    std::vector<double> mean;        // D
};

PcaResult pca_embed(const FeatureMatrix& features, std::size_t dims = 2);

std::string embedding_csv(const PcaResult& pca, const FeatureMatrix& features);
std::string probe_curve_csv(const ProbeResult& result);
std::string probe_json(const ProbeResult& result, const FeatureMatrix& features);

} // namespace ddpe
