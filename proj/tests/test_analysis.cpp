#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "ddpe/analysis.hpp"
#include "ddpe/errors.hpp"
#include "ddpe/ops.hpp"
#include "oracles.hpp"

using namespace ddpe;

namespace {

std::vector<DomainSample> small_data(std::size_t per_cell = 2) {
    SyntheticSpec spec;
    spec.samples_per_cell = per_cell;
    return generate_synthetic_domains(spec, 4);
}

Model<double> perturbed_model(std::uint64_t seed) {
    // Random adjuster outputs so coefficients are not uniform.
    auto m = build_network<double>(NetworkConfig::chain(3, 16, 16, {4, 6}, 4), seed);
    Rng rng(seed + 100);
    for (auto& b : m.blocks()) {
        auto w = b.adjuster.weight;
        for (auto& v : w.data()) {
            v = rng.uniform(-1.0, 1.0);
        }
    }
    return m;
}

FeatureMatrix labelled(std::size_t rows, std::size_t cols, std::vector<double> values, int domains) {
    FeatureMatrix f;
    f.rows = rows;
    f.cols = cols;
    f.values = std::move(values);
    for (std::size_t i = 0; i < rows; ++i) {
        f.domain_labels.push_back(static_cast<int>(i % static_cast<std::size_t>(domains)));
        f.class_labels.push_back(0);
        f.split_tags.push_back("train");
    }
    return f;
}

FeatureMatrix noise_features(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(rows * cols);
    for (auto& x : v) {
        x = rng.normal();
    }
    return labelled(rows, cols, std::move(v), 4);
}

double column_mean(const PcaResult& p, std::size_t d) {
    double m = 0.0;
    for (std::size_t i = 0; i < p.rows; ++i) {
        m += p.coordinates[i * p.dims + d];
    }
    return m / static_cast<double>(p.rows);
}

} // namespace

TEST_SUITE("analysis") {
    TEST_CASE("coefficients of a fresh model are uniform") {
        const auto m = build_network<float>(NetworkConfig::chain(3, 16, 16, {4, 6}, 4), 1);
        const auto f = extract_coefficients(m, small_data());
        CHECK(f.source == FeatureSource::DynamicCoefficients);
        CHECK(f.rows == 32);
        CHECK(f.cols == 8);
        for (const double v : f.values) {
            CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
        }
    }

    TEST_CASE("coefficient rows are simplex segments and duplicate with the sample") {
        const auto m = perturbed_model(2);
        auto data = small_data();
        data.push_back(data[5]);
        const auto f = extract_coefficients(m, data, 7);
        REQUIRE(f.rows == data.size());
        f.validate();
        for (std::size_t i = 0; i < f.rows; ++i) {
            const auto r = f.row(i);
            for (std::size_t seg = 0; seg < 2; ++seg) {
                double s = 0.0;
                for (std::size_t k = 0; k < 4; ++k) {
                    s += r[seg * 4 + k];
                    CHECK(r[seg * 4 + k] >= 0.0);
                }
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }
        const auto a = f.row(5);
        const auto b = f.row(f.rows - 1);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
        CHECK(f.domain_labels.back() == data[5].domain_label);
        CHECK(f.class_labels.back() == data[5].class_label);
        // Rows do not vary once every segment is uniform.
        double spread = 0.0;
        for (std::size_t i = 1; i < f.rows; ++i) {
            spread = std::max(spread, oracle::max_abs_diff(f.row(0), f.row(i)));
        }
        CHECK(spread > 1e-3);
    }

    TEST_CASE("static features with zero templates match the standard pooled output") {
        auto m = perturbed_model(3);
        for (auto& b : m.blocks()) {
            for (auto& t : b.bank.templates) {
                std::fill(t.data().begin(), t.data().end(), 0.0);
            }
        }
        const auto data = small_data();
        const auto f = extract_static_features(m, data);
        CHECK(f.source == FeatureSource::StaticFeatures);
        CHECK(f.cols == 6);
        const auto pooled = m.forward(make_batch<double>(data).images).pooled;
        CHECK(oracle::max_abs_diff(f.values, oracle::values_of(pooled)) < 1e-12);
    }

    TEST_CASE("static features follow the composed pipeline") {
        const auto m = perturbed_model(4);
        auto data = small_data(1);
        data.push_back(data[0]);
        const auto f = extract_static_features(m, data);
        CHECK(oracle::max_abs_diff(f.row(0), f.row(f.rows - 1)) == 0.0);

        // First block through the library, last block by nested loops.
        const auto batch = make_batch<double>(data);
        const auto h = avg_pool2d(dynamic_block_forward(batch.images, m.blocks()[0]).features, 2);
        const auto& last = m.blocks()[1];
        const std::size_t bsz = h.dim(0);
        const std::size_t cin = h.dim(1);
        const std::size_t hh = h.dim(2);
        const std::size_t ww = h.dim(3);
        const std::size_t cout = last.config.out_channels;
        const std::size_t ks = last.config.kernel_size;
        std::vector<double> kernels;
        for (std::size_t b = 0; b < bsz; ++b) {
            kernels.insert(kernels.end(), last.bank.static_kernel.data().begin(), last.bank.static_kernel.data().end());
        }
        std::size_t ho = 0;
        std::size_t wo = 0;
        const auto conv = oracle::conv_reference(oracle::values_of(h), bsz, cin, hh, ww, kernels, cout, ks,
                                                 last.config.stride, last.config.pad, ho, wo);
        std::vector<double> expect(bsz * cout);
        const std::size_t area = ho * wo;
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t c = 0; c < cout; ++c) {
                const double* x = conv.data() + (b * cout + c) * area;
                double mean = 0.0;
                for (std::size_t i = 0; i < area; ++i) {
                    mean += x[i];
                }
                mean /= static_cast<double>(area);
                double var = 0.0;
                for (std::size_t i = 0; i < area; ++i) {
                    var += (x[i] - mean) * (x[i] - mean);
                }
                var /= static_cast<double>(area);
                double acc = 0.0;
                for (std::size_t i = 0; i < area; ++i) {
                    const double y = last.norm_scale.data()[c] * (x[i] - mean) / std::sqrt(var + 1e-5) +
                                     last.norm_shift.data()[c];
                    acc += std::max(0.0, y);
                }
                // 2x2 average pooling of an even map followed by GAP is the plain mean.
                expect[b * cout + c] = acc / static_cast<double>(area);
            }
        }
        CHECK(oracle::max_abs_diff(f.values, expect) < 1e-6);
    }

    TEST_CASE("probe separates one-hot domain features") {
        std::vector<double> v;
        const std::size_t rows = 160;
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t d = 0; d < 4; ++d) {
                v.push_back(i % 4 == d ? 1.0 : 0.0);
            }
        }
        const auto f = labelled(rows, 4, v, 4);
        const auto r = domain_probe(f);
        CHECK(r.curve.size() == 200);
        CHECK(r.final_accuracy >= 0.99);
        CHECK(r.final_accuracy == r.curve.back());
        for (const double a : r.curve) {
            CHECK((a >= 0.0 && a <= 1.0));
        }
    }

    TEST_CASE("probe on noise stays near chance") {
        std::vector<double> finals;
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            ProbeConfig pc;
            pc.seed = seed;
            finals.push_back(domain_probe(noise_features(200, 8, seed), pc).final_accuracy);
        }
        std::sort(finals.begin(), finals.end());
        CAPTURE(finals[1]);
        CHECK(finals[1] >= 0.15);
        CHECK(finals[1] <= 0.40);
    }

    TEST_CASE("probe split is stratified and keyed on row content") {
        auto f = noise_features(200, 6, 9);
        // Weak domain signal so the probe has something to learn.
        for (std::size_t i = 0; i < f.rows; ++i) {
            f.values[i * f.cols] += 0.8 * f.domain_labels[i];
        }
        const auto base = domain_probe(f);
        CHECK(base.train_rows == 160);
        CHECK(base.test_rows == 40);

        FeatureMatrix doubled = f;
        doubled.rows *= 2;
        doubled.values.insert(doubled.values.end(), f.values.begin(), f.values.end());
        doubled.class_labels.insert(doubled.class_labels.end(), f.class_labels.begin(), f.class_labels.end());
        doubled.domain_labels.insert(doubled.domain_labels.end(), f.domain_labels.begin(), f.domain_labels.end());
        doubled.split_tags.insert(doubled.split_tags.end(), f.split_tags.begin(), f.split_tags.end());
        const auto dup = domain_probe(doubled);
        CHECK(dup.test_rows == 80);
        CHECK(std::abs(dup.final_accuracy - base.final_accuracy) <= 0.02);
    }

    TEST_CASE("probe input validation") {
        auto f = noise_features(40, 3, 1);
        std::fill(f.domain_labels.begin(), f.domain_labels.end(), 2);
        CHECK_THROWS_AS(domain_probe(f), ConfigError);

        auto bad = noise_features(40, 3, 1);
        bad.domain_labels.pop_back();
        CHECK_THROWS_AS(domain_probe(bad), DimensionError);
    }

    TEST_CASE("pca of points on a line") {
        std::vector<double> v;
        for (int i = 0; i < 20; ++i) {
            const double t = 0.37 * i - 2.0;
            v.insert(v.end(), {1.0 + 2.0 * t, -3.0 + 0.5 * t, 4.0 - t, 0.25 * t});
        }
        const auto p = pca_embed(labelled(20, 4, v, 2));
        double v0 = 0.0;
        double v1 = 0.0;
        for (std::size_t i = 0; i < p.rows; ++i) {
            v0 += p.coordinates[i * 2] * p.coordinates[i * 2];
            v1 += p.coordinates[i * 2 + 1] * p.coordinates[i * 2 + 1];
        }
        CHECK(v1 < 1e-10 * v0);
    }

    TEST_CASE("pca centering, orthonormality and sign convention") {
        const auto f = noise_features(50, 7, 3);
        const auto p = pca_embed(f, 3);
        for (std::size_t d = 0; d < 3; ++d) {
            CHECK(std::abs(column_mean(p, d)) < 1e-9);
            const double* c = p.components.data() + d * f.cols;
            std::size_t arg = 0;
            for (std::size_t k = 1; k < f.cols; ++k) {
                arg = std::abs(c[k]) > std::abs(c[arg]) ? k : arg;
            }
            CHECK(c[arg] > 0.0);
            for (std::size_t e = 0; e < 3; ++e) {
                double dot = 0.0;
                for (std::size_t k = 0; k < f.cols; ++k) {
                    dot += c[k] * p.components[e * f.cols + k];
                }
                CHECK(std::abs(dot - (d == e ? 1.0 : 0.0)) < 1e-8);
            }
        }
        CHECK(p.eigenvalues[0] >= p.eigenvalues[1]);
        CHECK(p.eigenvalues[1] >= p.eigenvalues[2]);
    }

    TEST_CASE("pca matches a direct eigensolve") {
        for (const std::size_t n : {3u, 9u}) {
            auto f = noise_features(n, 3, 40 + n);
            const auto p = pca_embed(f, 2);

            std::vector<double> mean(3, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t k = 0; k < 3; ++k) {
                    mean[k] += f.values[i * 3 + k] / static_cast<double>(n);
                }
            }
            std::vector<double> cov(9, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t a = 0; a < 3; ++a) {
                    for (std::size_t b = 0; b < 3; ++b) {
                        cov[a * 3 + b] += (f.values[i * 3 + a] - mean[a]) * (f.values[i * 3 + b] - mean[b]) /
                                          static_cast<double>(n);
                    }
                }
            }
            std::vector<double> values;
            std::vector<double> vectors;
            oracle::jacobi_eigen(cov, 3, values, vectors);
            std::vector<std::size_t> order{0, 1, 2};
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
            for (std::size_t d = 0; d < 2; ++d) {
                const std::size_t col = order[d];
                CHECK(p.eigenvalues[d] == doctest::Approx(values[col]).epsilon(1e-9));
                double worst_pos = 0.0;
                double worst_neg = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double proj = 0.0;
                    for (std::size_t k = 0; k < 3; ++k) {
                        proj += (f.values[i * 3 + k] - mean[k]) * vectors[k * 3 + col];
                    }
                    worst_pos = std::max(worst_pos, std::abs(p.coordinates[i * 2 + d] - proj));
                    worst_neg = std::max(worst_neg, std::abs(p.coordinates[i * 2 + d] + proj));
                }
                CHECK(std::min(worst_pos, worst_neg) < 1e-8);
            }
        }
        CHECK_THROWS_AS(pca_embed(noise_features(1, 3, 0), 2), ConfigError);
    }

    TEST_CASE("analysis output formats") {
        const auto f = noise_features(12, 4, 5);
        const auto p = pca_embed(f);
        const std::string csv = embedding_csv(p, f);
        CHECK(csv.rfind("x,y,class,domain\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);

        ProbeConfig pc;
        pc.epochs = 5;
        const auto r = domain_probe(f, pc);
        const std::string curve = probe_curve_csv(r);
        CHECK(curve.rfind("epoch,heldout_accuracy\n", 0) == 0);
        CHECK(std::count(curve.begin(), curve.end(), '\n') == 6);
        const auto j = nlohmann::json::parse(probe_json(r, f));
        CHECK(j.at("final_accuracy").get<double>() == r.final_accuracy);
    }
}
