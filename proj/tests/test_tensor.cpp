#include <doctest.h>

#include <cmath>
#include <limits>

#include "ddpe/errors.hpp"
#include "ddpe/gradcheck.hpp"
#include "ddpe/ops.hpp"
#include "oracles.hpp"

using namespace ddpe;
using oracle::random_tensor;
using oracle::values_of;

namespace {

// Weighted sum of all entries with fixed random weights, so every output
// coordinate reaches the loss with a distinct coefficient.
template <typename T>
Tensor<T> probe_loss(const Tensor<T>& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    const std::size_t n = y.numel();
    Tensor<T> flat = Tensor<T>::make_result("flatten", {1, n}, std::vector<T>(y.data().begin(), y.data().end()), {y},
                                            [y](Node<T>& self) mutable {
                                                auto g = y.node()->ensure_grad();
                                                for (std::size_t i = 0; i < g.size(); ++i) {
                                                    g[i] += self.grad[i];
                                                }
                                            });
    Tensor<T> w = random_tensor<T>({1, n}, rng);
    return linear(flat, w, Tensor<T>());
}

} // namespace

TEST_SUITE("tensor") {
    TEST_CASE("tensor storage invariants") {
        auto t = Tensor<float>::zeros({2, 3, 4});
        CHECK(t.numel() == 24);
        CHECK(t.data().size() == 24);
        CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
        auto p = Tensor<double>::full({3}, 2.0, true);
        auto loss = probe_loss(p);
        backward(loss);
        CHECK(p.grad().size() == p.numel());
    }

    TEST_CASE("non-finite op results raise a numeric error") {
        auto x = Tensor<double>::from({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
        CHECK_THROWS_AS(softmax(x), NumericError);
        auto big = Tensor<float>::from({1, 1}, {3e38f});
        CHECK_THROWS_AS(scale(big, 10.0f), NumericError);
    }

    TEST_CASE("conv2d: scalar product case") {
        auto x = Tensor<double>::from({1, 1, 1, 1}, {3.0});
        auto k = Tensor<double>::from({1, 1, 1, 1, 1}, {-2.5});
        auto y = conv2d_per_instance(x, k, 1, 0);
        CHECK(y.shape() == Shape{1, 1, 1, 1});
        CHECK(y.item() == -7.5);
    }

    TEST_CASE("conv2d: centered delta kernel is the identity") {
        Rng rng(1);
        auto x = random_tensor<double>({2, 3, 5, 6}, rng);
        std::vector<double> kv(2 * 3 * 3 * 3 * 3, 0.0);
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t c = 0; c < 3; ++c) {
                kv[(((b * 3 + c) * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
            }
        }
        auto y = conv2d_per_instance(x, Tensor<double>::from({2, 3, 3, 3, 3}, kv), 1, 1);
        CHECK(values_of(y) == values_of(x));
    }

    TEST_CASE("conv2d matches the nested-loop reference") {
        Rng rng(2);
        auto x = random_tensor<double>({2, 2, 5, 5}, rng);
        auto k = random_tensor<double>({2, 3, 2, 3, 3}, rng);
        std::size_t ho = 0;
        std::size_t wo = 0;
        const auto ref = oracle::conv_reference(values_of(x), 2, 2, 5, 5, values_of(k), 3, 3, 1, 1, ho, wo);
        auto y = conv2d_per_instance(x, k, 1, 1);
        CHECK(y.shape() == Shape{2, 3, ho, wo});
        CHECK(oracle::max_abs_diff(values_of(y), ref) < 1e-6);
    }

    TEST_CASE("conv2d over random shapes, strides and paddings") {
        Rng rng(3);
        for (int trial = 0; trial < 25; ++trial) {
            const std::size_t b = 1 + rng.uniform_int(3);
            const std::size_t cin = 1 + rng.uniform_int(3);
            const std::size_t cout = 1 + rng.uniform_int(3);
            const std::size_t ks = 1 + 2 * rng.uniform_int(3);
            const std::size_t pad = rng.uniform_int(3);
            const std::size_t stride = 1 + rng.uniform_int(2);
            const std::size_t h = ks + rng.uniform_int(5);
            const std::size_t w = ks + rng.uniform_int(5);
            auto x = random_tensor<double>({b, cin, h, w}, rng);
            auto k = random_tensor<double>({b, cout, cin, ks, ks}, rng);
            std::size_t ho = 0;
            std::size_t wo = 0;
            const auto ref = oracle::conv_reference(values_of(x), b, cin, h, w, values_of(k), cout, ks, stride, pad,
                                                    ho, wo);
            auto y = conv2d_per_instance(x, k, stride, pad);
            REQUIRE(y.shape() == Shape{b, cout, ho, wo});
            CHECK(oracle::max_abs_diff(values_of(y), ref) < 1e-6);
        }
    }

    TEST_CASE("conv2d is linear in the kernels") {
        Rng rng(4);
        auto x = random_tensor<double>({2, 2, 6, 6}, rng);
        auto k1 = random_tensor<double>({2, 3, 2, 3, 3}, rng);
        auto k2 = random_tensor<double>({2, 3, 2, 3, 3}, rng);
        const double a = 0.7;
        const double b = -1.3;
        auto lhs = conv2d_per_instance(x, add(scale(k1, a), scale(k2, b)), 1, 1);
        auto rhs = add(scale(conv2d_per_instance(x, k1, 1, 1), a), scale(conv2d_per_instance(x, k2, 1, 1), b));
        CHECK(oracle::max_abs_diff(values_of(lhs), values_of(rhs)) < 1e-6);
    }

    TEST_CASE("conv2d batch equals concatenated single-instance calls bitwise") {
        Rng rng(5);
        const std::size_t b = 3;
        auto x = random_tensor<double>({b, 2, 7, 5}, rng);
        auto k = random_tensor<double>({b, 4, 2, 3, 3}, rng);
        auto y = values_of(conv2d_per_instance(x, k, 1, 1));
        std::vector<double> looped;
        const std::size_t xs = 2 * 7 * 5;
        const std::size_t ksz = 4 * 2 * 3 * 3;
        for (std::size_t i = 0; i < b; ++i) {
            auto xi = Tensor<double>::from({1, 2, 7, 5}, std::vector<double>(x.data().begin() + i * xs,
                                                                             x.data().begin() + (i + 1) * xs));
            auto ki = Tensor<double>::from({1, 4, 2, 3, 3}, std::vector<double>(k.data().begin() + i * ksz,
                                                                                k.data().begin() + (i + 1) * ksz));
            const auto yi = values_of(conv2d_per_instance(xi, ki, 1, 1));
            looped.insert(looped.end(), yi.begin(), yi.end());
        }
        CHECK(y == looped);
    }

    TEST_CASE("conv2d errors") {
        auto x = Tensor<double>::zeros({2, 3, 4, 4});
        CHECK_THROWS_AS(conv2d_per_instance(x, Tensor<double>::zeros({1, 2, 3, 3, 3}), 1, 1), DimensionError);
        CHECK_THROWS_AS(conv2d_per_instance(x, Tensor<double>::zeros({2, 2, 2, 3, 3}), 1, 1), DimensionError);
        CHECK_THROWS_AS(conv2d_per_instance(x, Tensor<double>::zeros({2, 2, 3, 7, 7}), 1, 0), DimensionError);
        auto bad = Tensor<double>::zeros({2, 3, 4, 4});
        bad.data()[5] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(conv2d_per_instance(bad, Tensor<double>::zeros({2, 2, 3, 3, 3}), 1, 1), NumericError);
    }

    TEST_CASE("softmax closed forms and shift invariance") {
        auto u = softmax(Tensor<double>::from({1, 4}, {0, 0, 0, 0}));
        for (const double v : u.data()) {
            CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
        }
        auto s = softmax(Tensor<double>::from({1, 4}, {std::log(2.0), 0, 0, 0}));
        CHECK(s.data()[0] == doctest::Approx(0.4).epsilon(1e-12));
        CHECK(s.data()[1] == doctest::Approx(0.2).epsilon(1e-12));

        Rng rng(6);
        auto z = random_tensor<double>({5, 7}, rng, -5, 5);
        auto shifted = values_of(z);
        for (std::size_t r = 0; r < 5; ++r) {
            const double c = rng.uniform(-20, 20);
            for (std::size_t j = 0; j < 7; ++j) {
                shifted[r * 7 + j] += c;
            }
        }
        auto a = values_of(softmax(z));
        auto b = values_of(softmax(Tensor<double>::from({5, 7}, shifted)));
        CHECK(oracle::max_abs_diff(a, b) < 1e-7);
        for (std::size_t r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                CHECK(a[r * 7 + j] >= 0.0);
                sum += a[r * 7 + j];
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }

    TEST_CASE("cross entropy") {
        const std::vector<int> one{3};
        auto uniform = cross_entropy_loss(Tensor<double>::zeros({1, 7}), one);
        CHECK(uniform.item() == doctest::Approx(std::log(7.0)).epsilon(1e-12));
        CHECK(uniform.item() == doctest::Approx(1.9459).epsilon(1e-4));

        const std::vector<int> zero{0};
        auto confident = cross_entropy_loss(Tensor<double>::from({1, 4}, {1e6, 0, 0, 0}), zero);
        CHECK(confident.item() >= 0.0);
        CHECK(confident.item() < 1e-6);

        Rng rng(7);
        auto logits = random_tensor<double>({4, 5}, rng, -3, 3);
        const std::vector<int> labels{0, 4, 2, 2};
        const double ref = oracle::cross_entropy_reference(values_of(logits), 5, labels);
        CHECK(std::abs(cross_entropy_loss(logits, labels).item() - ref) < 1e-9);

        const std::vector<int> bad{5, 0, 0, 0};
        CHECK_THROWS_AS(cross_entropy_loss(logits, bad), IndexError);
        const std::vector<int> negative{-1, 0, 0, 0};
        CHECK_THROWS_AS(cross_entropy_loss(logits, negative), IndexError);
    }

    TEST_CASE("global average pool") {
        auto c = global_avg_pool(Tensor<double>::full({2, 3, 4, 5}, 1.75));
        for (const double v : c.data()) {
            CHECK(v == 1.75);
        }
        auto m = global_avg_pool(Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4}));
        CHECK(m.item() == 2.5);

        Rng rng(8);
        auto x = random_tensor<double>({2, 3, 3, 4}, rng, -1, 1, true);
        auto pooled = global_avg_pool(x);
        auto loss = probe_loss(pooled, 5);
        backward(loss);
        // Upstream gradient of the probe is its weight vector.
        Rng wr(5);
        auto w = values_of(random_tensor<double>({1, 6}, wr));
        const auto g = x.grad();
        for (std::size_t bc = 0; bc < 6; ++bc) {
            double sum = 0.0;
            for (std::size_t i = 0; i < 12; ++i) {
                sum += g[bc * 12 + i];
                CHECK(g[bc * 12 + i] == doctest::Approx(w[bc] / 12.0).epsilon(1e-12));
            }
            CHECK(sum == doctest::Approx(w[bc]).epsilon(1e-12));
        }
    }

    TEST_CASE("backward basics") {
        auto w = Tensor<double>::from({1, 1}, {0.5}, true);
        auto x = Tensor<double>::from({1, 1}, {3.0});
        auto unused = Tensor<double>::full({4}, 1.0, true);
        backward(linear(x, w, Tensor<double>()));
        CHECK(w.grad()[0] == 3.0);
        for (const double g : unused.grad()) {
            CHECK(g == 0.0);
        }
        // A constant scalar has nothing to propagate.
        CHECK_NOTHROW(backward(add(x, x)));
        CHECK_THROWS_AS(backward(Tensor<double>::zeros({2, 2})), ContractError);
    }

    TEST_CASE("gradients from two paths accumulate") {
        Rng rng(9);
        auto p = random_tensor<double>({2, 3}, rng, -1, 1, true);
        auto path_a = [&] { return probe_loss(relu(p), 11); };
        auto path_b = [&] { return probe_loss(scale(p, 2.0), 12); };

        backward(path_a());
        const auto ga = p.grad();
        p.zero_grad();
        backward(path_b());
        const auto gb = p.grad();
        p.zero_grad();
        backward(add(path_a(), path_b()));
        const auto both = p.grad();
        for (std::size_t i = 0; i < both.size(); ++i) {
            CHECK(both[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-14));
        }
    }

    TEST_CASE("finite_diff_check on a linear function is exact") {
        Rng rng(10);
        auto w = random_tensor<double>({3, 4}, rng, -1, 1, true);
        auto x = random_tensor<double>({2, 4}, rng);
        // Central differences carry no truncation error here, so a wide step
        // only shrinks the rounding term.
        auto r = finite_diff_check<double>([&] { return probe_loss(linear(x, w, Tensor<double>())); }, {w}, 1e-2);
        CHECK(r.coordinates == 12);
        CHECK(r.max_relative_error < 1e-10);
    }

    TEST_CASE("finite_diff_check on ReLU away from the kink") {
        Rng rng(11);
        std::vector<double> v(40);
        for (auto& x : v) {
            x = rng.uniform(0.01, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        }
        auto p = Tensor<double>::from({4, 10}, v, true);
        auto r = finite_diff_check<double>([&] { return probe_loss(relu(p)); }, {p}, 1e-5);
        CHECK(r.max_relative_error < 1e-6);
    }

    TEST_CASE("every op passes a finite-difference check in f64") {
        Rng rng(12);
        const double eps = 1e-5;
        auto x4 = random_tensor<double>({2, 2, 5, 5}, rng, -1, 1, true);
        auto k = random_tensor<double>({2, 3, 2, 3, 3}, rng, -1, 1, true);
        auto m = random_tensor<double>({3, 4}, rng, -1, 1, true);
        auto w = random_tensor<double>({5, 4}, rng, -1, 1, true);
        auto bias = random_tensor<double>({5}, rng, -1, 1, true);
        auto scale_p = random_tensor<double>({3}, rng, 0.5, 1.5, true);
        auto shift_p = random_tensor<double>({3}, rng, -0.5, 0.5, true);
        auto k3 = random_tensor<double>({3, 2, 3, 3}, rng, -1, 1, true);
        const std::vector<int> labels{1, 0, 3};
        const std::vector<std::size_t> rows{2, 0, 0};
        const std::vector<std::vector<std::size_t>> perms{{1, 2, 3, 0}, {0, 1, 2, 3}, {3, 2, 1, 0}};

        struct Case {
            const char* name;
            std::function<Tensor<double>()> fn;
            std::vector<Tensor<double>> params;
            double tol;
        };
        const std::vector<Case> cases{
            {"add", [&] { return probe_loss(add(m, scale(m, 0.3))); }, {m}, 1e-6},
            {"scale", [&] { return probe_loss(scale(m, -1.7)); }, {m}, 1e-6},
            {"linear", [&] { return probe_loss(linear(m, w, bias)); }, {m, w, bias}, 1e-6},
            {"conv2d", [&] { return probe_loss(conv2d_per_instance(x4, k, 1, 1)); }, {x4, k}, 1e-6},
            {"conv2d stride 2", [&] { return probe_loss(conv2d_per_instance(x4, k, 2, 0)); }, {x4, k}, 1e-6},
            {"broadcast",
             [&] { return probe_loss(conv2d_per_instance(x4, broadcast_batch(k3, 2), 1, 1)); },
             {k3},
             1e-6},
            {"instance_norm",
             [&] { return probe_loss(instance_norm(conv2d_per_instance(x4, k, 1, 1), scale_p, shift_p)); },
             {x4, k, scale_p, shift_p},
             1e-4},
            {"avg_pool", [&] { return probe_loss(avg_pool2d(x4, 2)); }, {x4}, 1e-6},
            {"global_avg_pool", [&] { return probe_loss(global_avg_pool(x4)); }, {x4}, 1e-6},
            {"softmax", [&] { return probe_loss(softmax(m)); }, {m}, 1e-6},
            {"cross_entropy", [&] { return cross_entropy_loss(m, labels); }, {m}, 1e-6},
            {"gather_rows", [&] { return probe_loss(gather_rows(m, rows)); }, {m}, 1e-6},
            {"permute_within_rows", [&] { return probe_loss(permute_within_rows(m, perms)); }, {m}, 1e-6},
        };
        for (const auto& c : cases) {
            CAPTURE(c.name);
            auto r = finite_diff_check<double>(c.fn, c.params, eps, 64, 3);
            std::size_t total = 0;
            for (const auto& p : c.params) {
                total += p.numel();
            }
            CHECK(r.coordinates == std::min<std::size_t>(64, total));
            CHECK(r.max_relative_error < c.tol);
        }
    }

    TEST_CASE("gather and permute index validation") {
        auto m = Tensor<double>::zeros({3, 4});
        const std::vector<std::size_t> bad_rows{0, 3, 1};
        CHECK_THROWS_AS(gather_rows(m, bad_rows), ContractError);
        const std::vector<std::vector<std::size_t>> not_perm{{0, 0, 1, 2}, {0, 1, 2, 3}, {0, 1, 2, 3}};
        CHECK_THROWS_AS(permute_within_rows(m, not_perm), ContractError);
    }

    TEST_CASE("cast preserves values") {
        auto d = Tensor<double>::from({2}, {0.5, -2.0});
        auto f = cast<float>(d);
        CHECK(f.data()[0] == 0.5f);
        CHECK(f.data()[1] == -2.0f);
    }
}
