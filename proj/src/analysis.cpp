#include "ddpe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>

#include <Eigen/Dense>
#include <json.hpp>

#include "ddpe/errors.hpp"
#include "ddpe/ops.hpp"
#include "ddpe/rng.hpp"

namespace ddpe {

std::string to_string(FeatureSource source) {
    return source == FeatureSource::StaticFeatures ? "static_features" : "dynamic_coefficients";
}

void FeatureMatrix::validate() const {
    if (values.size() != rows * cols || class_labels.size() != rows || domain_labels.size() != rows ||
        (!split_tags.empty() && split_tags.size() != rows)) {
        throw DimensionError("feature matrix: metadata does not match " + std::to_string(rows) + " x " +
                             std::to_string(cols));
    }
}

namespace {

template <typename T, typename Extract>
FeatureMatrix extract(const std::vector<DomainSample>& samples, std::size_t batch_size, FeatureSource source,
                      Extract&& fn) {
    if (samples.empty()) {
        throw DimensionError("feature extraction: no samples");
    }
    if (batch_size == 0) {
        throw ConfigError("feature extraction: batch_size must be positive");
    }
    FeatureMatrix out;
    out.source = source;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = start + i;
        }
        const Batch<T> batch = make_batch<T>(samples, idx);
        const std::vector<std::vector<double>> rows = fn(batch);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (out.cols == 0) {
                out.cols = rows[i].size();
            }
            out.values.insert(out.values.end(), rows[i].begin(), rows[i].end());
            out.class_labels.push_back(batch.labels[i]);
            out.domain_labels.push_back(batch.domains[i]);
        }
    }
    out.rows = samples.size();
    out.validate();
    return out;
}

} // namespace

template <typename T>
FeatureMatrix extract_coefficients(const Model<T>& model, const std::vector<DomainSample>& samples,
                                   std::size_t batch_size) {
    return extract<T>(samples, batch_size, FeatureSource::DynamicCoefficients, [&](const Batch<T>& batch) {
        const ForwardResult<T> res = model.forward(batch.images);
        std::vector<std::vector<double>> rows(batch.size());
        for (const auto& c : res.coefficients) {
            const auto v = c.values.data();
            const std::size_t m = c.templates();
            for (std::size_t b = 0; b < rows.size(); ++b) {
                rows[b].insert(rows[b].end(), v.begin() + static_cast<std::ptrdiff_t>(b * m),
                               v.begin() + static_cast<std::ptrdiff_t>((b + 1) * m));
            }
        }
        return rows;
    });
}

template <typename T>
FeatureMatrix extract_static_features(const Model<T>& model, const std::vector<DomainSample>& samples,
                                      std::size_t batch_size) {
    return extract<T>(samples, batch_size, FeatureSource::StaticFeatures, [&](const Batch<T>& batch) {
        ForwardOptions<T> options;
        options.static_last_block = true;
        const ForwardResult<T> res = model.forward(batch.images, options);
        const auto v = res.pooled.data();
        const std::size_t d = res.pooled.dim(1);
        std::vector<std::vector<double>> rows(batch.size());
        for (std::size_t b = 0; b < rows.size(); ++b) {
            rows[b].assign(v.begin() + static_cast<std::ptrdiff_t>(b * d),
                           v.begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
        }
        return rows;
    });
}

namespace {

std::uint64_t row_key(std::span<const double> row, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
    for (const double v : row) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xFF;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

} // namespace

ProbeResult domain_probe(const FeatureMatrix& features, const ProbeConfig& config) {
    features.validate();
    if (config.hidden == 0 || config.epochs == 0 || !(config.lr > 0.0)) {
        throw ConfigError("probe: hidden, epochs and lr must be positive");
    }
    if (!(config.train_fraction > 0.0 && config.train_fraction < 1.0)) {
        throw ConfigError("probe: train_fraction must lie in (0, 1)");
    }
    std::map<int, std::vector<std::size_t>> by_domain;
    for (std::size_t i = 0; i < features.rows; ++i) {
        by_domain[features.domain_labels[i]].push_back(i);
    }
    if (by_domain.size() < 2) {
        throw ConfigError("probe: at least two domains are required");
    }

    // Stratified split over distinct row contents.
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
    for (const auto& [domain, idx] : by_domain) {
        std::vector<std::uint64_t> keys;
        for (const auto i : idx) {
            keys.push_back(row_key(features.row(i), config.seed));
        }
        auto unique_keys = [&] {
            std::vector<std::uint64_t> u = keys;
            std::sort(u.begin(), u.end());
            u.erase(std::unique(u.begin(), u.end()), u.end());
            return u;
        };
        std::vector<std::uint64_t> distinct = unique_keys();
        if (distinct.size() < 2 && idx.size() >= 2) {
            // A domain made of one repeated row: split its copies by position.
            for (std::size_t k = 0; k < idx.size(); ++k) {
                const double pos = static_cast<double>(k);
                keys[k] = row_key(std::span<const double>(&pos, 1), config.seed);
            }
            distinct = unique_keys();
        }
        auto n_train = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(distinct.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, std::max<std::size_t>(1, distinct.size() - 1));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto rank = static_cast<std::size_t>(std::lower_bound(distinct.begin(), distinct.end(), keys[k]) -
                                                       distinct.begin());
            (rank < n_train ? train_idx : test_idx).push_back(idx[k]);
        }
    }
    if (test_idx.empty()) {
        throw ConfigError("probe: too few distinct rows for a held-out split");
    }

    // Class index = position of the domain label in sorted order.
    std::map<int, int> domain_class;
    for (const auto& [domain, idx] : by_domain) {
        domain_class.emplace(domain, static_cast<int>(domain_class.size()));
    }
    const std::size_t classes = domain_class.size();
    const std::size_t d = features.cols;

    std::vector<double> mean(d, 0.0);
    std::vector<double> sd(d, 0.0);
    for (const auto i : train_idx) {
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] += features.row(i)[j];
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(train_idx.size());
    }
    for (const auto i : train_idx) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = features.row(i)[j] - mean[j];
            sd[j] += c * c;
        }
    }
    for (auto& s : sd) {
        s = std::sqrt(s / static_cast<double>(train_idx.size()));
        s = s > 1e-12 ? s : 1.0;
    }

    auto make_inputs = [&](const std::vector<std::size_t>& idx, std::vector<int>& labels) {
        std::vector<double> x(idx.size() * d);
        labels.resize(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                x[r * d + j] = (features.row(idx[r])[j] - mean[j]) / sd[j];
            }
            labels[r] = domain_class.at(features.domain_labels[idx[r]]);
        }
        return Tensor<double>::from({idx.size(), d}, std::move(x));
    };
    std::vector<int> train_labels;
    std::vector<int> test_labels;
    const Tensor<double> x_train = make_inputs(train_idx, train_labels);
    const Tensor<double> x_test = make_inputs(test_idx, test_labels);

    Rng rng = Rng::stream(config.seed, Stream::Probe);
    auto uniform_init = [&](Shape shape, double bound) {
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) {
            x = rng.uniform(-bound, bound);
        }
        return Tensor<double>::from(std::move(shape), std::move(v), true);
    };
    const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(config.hidden));
    std::vector<Tensor<double>> params{uniform_init({config.hidden, d}, b1), uniform_init({config.hidden}, b1),
                                       uniform_init({classes, config.hidden}, b2), uniform_init({classes}, b2)};
    auto logits_of = [&](const Tensor<double>& x) {
        return linear(relu(linear(x, params[0], params[1])), params[2], params[3]);
    };

    ProbeResult result;
    result.config = config;
    result.train_rows = train_idx.size();
    result.test_rows = test_idx.size();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (auto& p : params) {
            p.zero_grad();
        }
        backward(cross_entropy_loss(logits_of(x_train), std::span<const int>(train_labels)));
        for (auto& p : params) {
            const std::vector<double> g = p.grad();
            auto v = p.data();
            for (std::size_t k = 0; k < v.size(); ++k) {
                v[k] -= config.lr * g[k];
            }
        }
        const Tensor<double> logits = logits_of(x_test);
        std::size_t correct = 0;
        const auto lv = logits.data();
        for (std::size_t r = 0; r < test_labels.size(); ++r) {
            const auto row = lv.subspan(r * classes, classes);
            correct += (std::max_element(row.begin(), row.end()) - row.begin()) == test_labels[r] ? 1 : 0;
        }
        result.curve.push_back(static_cast<double>(correct) / static_cast<double>(test_labels.size()));
    }
    result.final_accuracy = result.curve.back();
    return result;
}

PcaResult pca_embed(const FeatureMatrix& features, std::size_t dims) {
    features.validate();
    const std::size_t n = features.rows;
    const std::size_t d = features.cols;
    if (dims == 0 || n < dims || d < dims) {
        throw ConfigError("pca: need at least " + std::to_string(dims) + " rows and columns, got " +
                          std::to_string(n) + " x " + std::to_string(d));
    }
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Mat x = Eigen::Map<const Mat>(features.values.data(), static_cast<Eigen::Index>(n),
                                        static_cast<Eigen::Index>(d));
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Mat centered = x.rowwise() - mu;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw NumericError("pca: eigendecomposition failed");
    }

    PcaResult out;
    out.rows = n;
    out.dims = dims;
    out.mean.assign(mu.data(), mu.data() + d);
    Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(dims));
    for (std::size_t k = 0; k < dims; ++k) {
        // Eigen orders eigenvalues ascending.
        const auto col = static_cast<Eigen::Index>(d - 1 - k);
        Eigen::VectorXd v = solver.eigenvectors().col(col);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) {
            v = -v;
        }
        basis.col(static_cast<Eigen::Index>(k)) = v;
        out.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(col)));
        out.components.insert(out.components.end(), v.data(), v.data() + d);
    }
    const Mat coords = centered * basis;
    out.coordinates.assign(coords.data(), coords.data() + n * dims);
    return out;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string embedding_csv(const PcaResult& pca, const FeatureMatrix& features) {
    if (pca.rows != features.rows || pca.dims < 2) {
        throw DimensionError("embedding: coordinates do not match the feature matrix");
    }
    std::string out = "x,y,class,domain\n";
    for (std::size_t i = 0; i < pca.rows; ++i) {
        out += fmt(pca.coordinates[i * pca.dims]) + "," + fmt(pca.coordinates[i * pca.dims + 1]) + "," +
               std::to_string(features.class_labels[i]) + "," + std::to_string(features.domain_labels[i]) + "\n";
    }
    return out;
}

std::string probe_curve_csv(const ProbeResult& result) {
    std::string out = "epoch,heldout_accuracy\n";
    for (std::size_t e = 0; e < result.curve.size(); ++e) {
        out += std::to_string(e + 1) + "," + fmt(result.curve[e]) + "\n";
    }
    return out;
}

std::string probe_json(const ProbeResult& result, const FeatureMatrix& features) {
    nlohmann::ordered_json j;
    j["source"] = to_string(features.source);
    j["rows"] = features.rows;
    j["cols"] = features.cols;
    j["train_rows"] = result.train_rows;
    j["test_rows"] = result.test_rows;
    j["final_accuracy"] = result.final_accuracy;
    j["probe"] = {{"hidden", result.config.hidden},
                  {"lr", result.config.lr},
                  {"epochs", result.config.epochs},
                  {"train_fraction", result.config.train_fraction},
                  {"seed", result.config.seed}};
    return j.dump(2) + "\n";
}

template FeatureMatrix extract_coefficients<float>(const Model<float>&, const std::vector<DomainSample>&, std::size_t);
template FeatureMatrix extract_coefficients<double>(const Model<double>&, const std::vector<DomainSample>&,
                                                    std::size_t);
template FeatureMatrix extract_static_features<float>(const Model<float>&, const std::vector<DomainSample>&,
                                                      std::size_t);
template FeatureMatrix extract_static_features<double>(const Model<double>&, const std::vector<DomainSample>&,
                                                       std::size_t);

} // namespace ddpe
