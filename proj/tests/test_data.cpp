#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ddpe/data.hpp"
#include "ddpe/errors.hpp"

using namespace ddpe;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::string& bytes) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << bytes;
}

// Geometry-only shape classifier. Filled styles recover the foreground
// (direct, inverted, or with the ramp removed) and read the silhouette;
// the outline style is read by casting rays from the centroid.
class ShapeHeuristic {
public:
    int classify(const DomainSample& s) const {
        n_ = s.width;
        const std::size_t area = n_ * n_;
        std::vector<double> fg(area);
        const int style = s.domain_label % 4;
        for (std::size_t i = 0; i < area; ++i) {
            double v = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                v += s.pixels[c * area + i];
            }
            fg[i] = v / 3.0;
        }
        if (style == 1) {
            for (auto& v : fg) {
                v = 1.0 - v;
            }
        } else if (style == 2) {
            fg = remove_ramp(s);
        }

        std::vector<char> mask(area);
        const double hi = *std::max_element(fg.begin(), fg.end());
        const double lo = *std::min_element(fg.begin(), fg.end());
        for (std::size_t i = 0; i < area; ++i) {
            mask[i] = fg[i] > lo + (style == 3 ? 0.45 : 0.5) * (hi - lo);
        }
        const std::vector<char> filled = fill_holes(style == 3 ? dilate(mask) : mask);

        double cy = 0.0;
        double cx = 0.0;
        double count = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
            if (filled[i]) {
                cy += static_cast<double>(i / n_);
                cx += static_cast<double>(i % n_);
                count += 1.0;
            }
        }
        cy /= count;
        cx /= count;

        double core = 0.0;
        double core_n = 0.0;
        double syy = 0.0;
        double sxx = 0.0;
        double sxy = 0.0;
        double max_d2 = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
            const double dy = static_cast<double>(i / n_) - cy;
            const double dx = static_cast<double>(i % n_) - cx;
            const double d = std::sqrt(dy * dy + dx * dx);
            if (d <= 1.0) {
                core += mask[i];
                core_n += 1.0;
            }
            if (filled[i]) {
                syy += dy * dy;
                sxx += dx * dx;
                sxy += dx * dy;
                max_d2 = std::max(max_d2, dy * dy + dx * dx);
            }
        }
        const bool edges = style == 3;
        if (edges) {
            // Outlines: cast rays from the centroid. A ring crosses two contours
            // per ray, a disk one contour at a near-constant radius.
            const auto rays = cast_rays(mask, cy, cx);
            if (rays.outer_cv > 0.24) {
                return 2;
            }
            if (rays.inner_ratio < 0.26) {
                return 3;
            }
            return rays.inner_ratio >= 0.56 && rays.outer_cv < 0.15 ? 0 : 1;
        }
        // Ring: a hole at the center of the filled silhouette.
        const bool ring = core / core_n < 0.5;
        const double tr = (syy + sxx) / count;
        const double det = (syy * sxx - sxy * sxy) / (count * count);
        const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
        const double elong = (tr / 2.0 + disc) / std::max(1e-9, tr / 2.0 - disc);
        const double compact = count / max_d2;
        if (elong > 2.5) {
            return 2;
        }
        if (compact > 2.5 || ring) {
            return ring ? 3 : 0;
        }
        return 1;
    }

private:
    std::vector<double> remove_ramp(const DomainSample& s) const {
        // Least-squares plane through the border pixels of each channel.
        const std::size_t area = n_ * n_;
        std::vector<double> out(area, 0.0);
        for (std::size_t c = 0; c < 3; ++c) {
            double a[3][4] = {};
            for (std::size_t y = 0; y < n_; ++y) {
                for (std::size_t x = 0; x < n_; ++x) {
                    if (y != 0 && x != 0 && y + 1 != n_ && x + 1 != n_) {
                        continue;
                    }
                    const double f[3] = {1.0, static_cast<double>(x), static_cast<double>(y)};
                    const double v = s.pixels[c * area + y * n_ + x];
                    for (int r = 0; r < 3; ++r) {
                        for (int k = 0; k < 3; ++k) {
                            a[r][k] += f[r] * f[k];
                        }
                        a[r][3] += f[r] * v;
                    }
                }
            }
            for (int p = 0; p < 3; ++p) {
                for (int r = p + 1; r < 3; ++r) {
                    const double m = a[r][p] / a[p][p];
                    for (int k = p; k < 4; ++k) {
                        a[r][k] -= m * a[p][k];
                    }
                }
            }
            double coef[3];
            for (int r = 2; r >= 0; --r) {
                double v = a[r][3];
                for (int k = r + 1; k < 3; ++k) {
                    v -= a[r][k] * coef[k];
                }
                coef[r] = v / a[r][r];
            }
            for (std::size_t y = 0; y < n_; ++y) {
                for (std::size_t x = 0; x < n_; ++x) {
                    const double plane = coef[0] + coef[1] * static_cast<double>(x) + coef[2] * static_cast<double>(y);
                    out[y * n_ + x] += (s.pixels[c * area + y * n_ + x] - plane) / 3.0;
                }
            }
        }
        return out;
    }

    struct RayStats {
        double inner_ratio = 0.0; // median first-hit / last-hit distance
        double outer_cv = 0.0;    // coefficient of variation of last-hit distance
    };

    RayStats cast_rays(const std::vector<char>& mask, double cy, double cx) const {
        constexpr int kRays = 32;
        std::vector<double> ratios;
        std::vector<double> outer;
        for (int k = 0; k < kRays; ++k) {
            const double a = 2.0 * 3.14159265358979 * k / kRays;
            double first = -1.0;
            double last = -1.0;
            for (double t = 0.0; t < static_cast<double>(n_); t += 0.25) {
                const long y = std::lround(cy + t * std::sin(a));
                const long x = std::lround(cx + t * std::cos(a));
                if (y < 0 || x < 0 || y >= static_cast<long>(n_) || x >= static_cast<long>(n_)) {
                    break;
                }
                if (mask[static_cast<std::size_t>(y) * n_ + static_cast<std::size_t>(x)]) {
                    if (first < 0.0) {
                        first = t;
                    }
                    last = t;
                }
            }
            if (last > 0.0) {
                ratios.push_back(first / last);
                outer.push_back(last);
            }
        }
        RayStats r;
        if (outer.empty()) {
            return r;
        }
        std::nth_element(ratios.begin(), ratios.begin() + ratios.size() / 2, ratios.end());
        r.inner_ratio = ratios[ratios.size() / 2];
        double mean = 0.0;
        for (const double v : outer) {
            mean += v;
        }
        mean /= static_cast<double>(outer.size());
        double var = 0.0;
        for (const double v : outer) {
            var += (v - mean) * (v - mean);
        }
        r.outer_cv = std::sqrt(var / static_cast<double>(outer.size())) / mean;
        return r;
    }

    std::vector<char> dilate(const std::vector<char>& mask) const {
        std::vector<char> out(mask);
        for (std::size_t y = 0; y < n_; ++y) {
            for (std::size_t x = 0; x < n_; ++x) {
                if (!mask[y * n_ + x]) {
                    continue;
                }
                for (std::size_t yy = y > 0 ? y - 1 : 0; yy <= std::min(n_ - 1, y + 1); ++yy) {
                    for (std::size_t xx = x > 0 ? x - 1 : 0; xx <= std::min(n_ - 1, x + 1); ++xx) {
                        out[yy * n_ + xx] = 1;
                    }
                }
            }
        }
        return out;
    }

    std::vector<char> fill_holes(const std::vector<char>& mask) const {
        std::vector<char> outside(mask.size(), 0);
        std::vector<std::size_t> stack;
        for (std::size_t i = 0; i < n_; ++i) {
            for (const std::size_t p : {i, (n_ - 1) * n_ + i, i * n_, i * n_ + n_ - 1}) {
                if (!mask[p] && !outside[p]) {
                    outside[p] = 1;
                    stack.push_back(p);
                }
            }
        }
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const std::size_t y = p / n_;
            const std::size_t x = p % n_;
            const std::size_t nb[4] = {y > 0 ? p - n_ : p, y + 1 < n_ ? p + n_ : p, x > 0 ? p - 1 : p,
                                       x + 1 < n_ ? p + 1 : p};
            for (const std::size_t q : nb) {
                if (!mask[q] && !outside[q]) {
                    outside[q] = 1;
                    stack.push_back(q);
                }
            }
        }
        std::vector<char> filled(mask.size());
        for (std::size_t i = 0; i < mask.size(); ++i) {
            filled[i] = !outside[i];
        }
        return filled;
    }

    mutable std::size_t n_ = 0;
};

} // namespace

TEST_SUITE("data") {
    TEST_CASE("synthetic counts and determinism") {
        SyntheticSpec spec;
        const auto a = generate_synthetic_domains(spec, 7);
        CHECK(a.size() == 400);
        std::map<std::pair<int, int>, int> cells;
        for (const auto& s : a) {
            ++cells[{s.domain_label, s.class_label}];
            CHECK(s.pixels.size() == 3 * 16 * 16);
            for (const float v : s.pixels) {
                CHECK((v >= 0.0f && v <= 1.0f));
            }
        }
        CHECK(cells.size() == 16);
        for (const auto& [cell, n] : cells) {
            CHECK(n == 25);
        }
        CHECK(generate_synthetic_domains(spec, 7) == a);
        CHECK(generate_synthetic_domains(spec, 8) != a);

        SyntheticSpec empty = spec;
        empty.samples_per_cell = 0;
        CHECK_THROWS_AS(generate_synthetic_domains(empty), ConfigError);
    }

    TEST_CASE("inverted style complements the identity style") {
        SyntheticSpec spec;
        Rng rng(3);
        for (int c = 0; c < 4; ++c) {
            const auto render = render_shape(c, spec, rng);
            const auto d0 = apply_domain_style(render, 0);
            const auto d1 = apply_domain_style(render, 1);
            for (std::size_t i = 0; i < d0.size(); ++i) {
                CHECK(std::abs(d0[i] + d1[i] - 1.0f) < 1e-6);
            }
        }
    }

    TEST_CASE("class stays decidable from geometry under every style") {
        SyntheticSpec spec;
        spec.samples_per_cell = 50;
        const auto samples = generate_synthetic_domains(spec, 11);
        const ShapeHeuristic h;
        std::map<int, std::pair<int, int>> per_domain;
        for (const auto& s : samples) {
            auto& [hit, total] = per_domain[s.domain_label];
            hit += h.classify(s) == s.class_label ? 1 : 0;
            ++total;
        }
        for (const auto& [domain, counts] : per_domain) {
            const double acc = static_cast<double>(counts.first) / counts.second;
            CAPTURE(domain);
            CAPTURE(acc);
            CHECK(acc > 0.9);
        }
    }

    TEST_CASE("pnm parsing") {
        TempDir dir("ddpe_pnm_test");
        const auto p5 = dir.path / "a.pgm";
        write_bytes(p5, std::string("P5 2 2 255\n") + std::string("\x00\xff\x80\x40", 4));
        const auto s = read_pnm(p5);
        CHECK(s.channels == 1);
        CHECK(s.width == 2);
        CHECK(s.height == 2);
        CHECK(s.pixels[0] == 0.0f);
        CHECK(s.pixels[1] == 1.0f);
        CHECK(s.pixels[2] == doctest::Approx(128.0 / 255.0));
        CHECK(s.pixels[3] == doctest::Approx(64.0 / 255.0));

        write_bytes(dir.path / "b.pgm", "P5 2 2 65535\n\x00\x00");
        CHECK_THROWS_AS(read_pnm(dir.path / "b.pgm"), ParseError);
        write_bytes(dir.path / "c.pgm", "P3 2 2 255\n");
        CHECK_THROWS_AS(read_pnm(dir.path / "c.pgm"), ParseError);
        write_bytes(dir.path / "d.pgm", "P5 2 2 255\n\x01");
        try {
            read_pnm(dir.path / "d.pgm");
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("d.pgm") != std::string::npos);
        }
    }

    TEST_CASE("ppm round-trip stays within one quantization step") {
        TempDir dir("ddpe_ppm_test");
        SyntheticSpec spec;
        spec.samples_per_cell = 1;
        for (const auto& s : generate_synthetic_domains(spec, 2)) {
            write_pnm(dir.path / "x.ppm", s);
            const auto back = read_pnm(dir.path / "x.ppm");
            REQUIRE(back.pixels.size() == s.pixels.size());
            for (std::size_t i = 0; i < s.pixels.size(); ++i) {
                CHECK(std::abs(back.pixels[i] - s.pixels[i]) <= 1.0 / 255.0 + 1e-7);
            }
        }
    }

    TEST_CASE("image folder ingestion") {
        TempDir dir("ddpe_folder_test");
        for (const char* d : {"photo", "art"}) {
            for (const char* c : {"dog", "cat"}) {
                write_bytes(dir.path / d / c / "0.pgm", std::string("P5 2 2 255\n") + std::string(4, '\x10'));
            }
        }
        write_bytes(dir.path / "art" / "cat" / "notes.txt", "ignored");
        const auto samples = load_image_folder(dir.path);
        REQUIRE(samples.size() == 4);
        std::set<std::pair<int, int>> ids;
        for (const auto& s : samples) {
            ids.insert({s.domain_label, s.class_label});
        }
        CHECK(ids == std::set<std::pair<int, int>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}});
        // Sorted names: art < photo, cat < dog.
        CHECK(samples[0].domain_label == 0);
        CHECK(samples[0].class_label == 0);

        write_bytes(dir.path / "photo" / "dog" / "1.pgm", std::string("P5 3 2 255\n") + std::string(6, '\x10'));
        CHECK_THROWS_AS(load_image_folder(dir.path), DimensionError);
    }

    TEST_CASE("synthetic export reloads with identical labels") {
        TempDir dir("ddpe_export_test");
        SyntheticSpec spec;
        spec.samples_per_cell = 2;
        spec.classes = 3;
        spec.domains = 2;
        const auto samples = generate_synthetic_domains(spec);
        export_image_folder(samples, dir.path);
        const auto back = load_image_folder(dir.path);
        REQUIRE(back.size() == samples.size());
        for (std::size_t i = 0; i < back.size(); ++i) {
            CHECK(back[i].class_label == samples[i].class_label);
            CHECK(back[i].domain_label == samples[i].domain_label);
        }
    }

    TEST_CASE("leave-one-domain-out and single-source splits") {
        const auto samples = generate_synthetic_domains(SyntheticSpec{});
        const auto split = leave_one_domain_out_split(samples, 3);
        CHECK(split.train.size() == 300);
        CHECK(split.test.size() == 100);
        CHECK(split.source_size() == 300);
        for (const auto& s : split.train) {
            CHECK(s.domain_label != 3);
        }
        for (const auto& s : split.test) {
            CHECK(s.domain_label == 3);
        }
        // Union equals the input multiset.
        auto key = [](const DomainSample& s) { return std::make_tuple(s.domain_label, s.class_label, s.pixels); };
        std::multiset<decltype(key(samples[0]))> all;
        std::multiset<decltype(key(samples[0]))> joined;
        for (const auto& s : samples) {
            all.insert(key(s));
        }
        for (const auto& s : split.train) {
            joined.insert(key(s));
        }
        for (const auto& s : split.test) {
            joined.insert(key(s));
        }
        CHECK(all == joined);

        const auto single = leave_one_domain_out_split(samples, 0, Protocol::SingleSource);
        CHECK(single.train.size() == 100);
        CHECK(single.test.size() == 300);
        for (const auto& s : single.train) {
            CHECK(s.domain_label == 0);
        }
        for (const auto& s : single.test) {
            CHECK(s.domain_label != 0);
        }
        CHECK_THROWS_AS(leave_one_domain_out_split(samples, 9), ConfigError);
    }

    TEST_CASE("batching") {
        SyntheticSpec spec;
        spec.samples_per_cell = 5;
        spec.domains = 3;
        const auto samples = generate_synthetic_domains(spec);
        const std::size_t n = samples.size();

        const auto whole = make_batches(samples, n, Sampler::Shuffle, 1, 0);
        REQUIRE(whole.size() == 1);
        CHECK(whole[0].size() == n);

        for (const auto sampler : {Sampler::Shuffle, Sampler::DomainBalanced}) {
            for (std::size_t epoch = 0; epoch < 3; ++epoch) {
                const auto batches = make_batches(samples, 7, sampler, 4, epoch);
                std::vector<std::size_t> seen;
                for (const auto& b : batches) {
                    seen.insert(seen.end(), b.begin(), b.end());
                }
                std::sort(seen.begin(), seen.end());
                std::vector<std::size_t> expect(n);
                for (std::size_t i = 0; i < n; ++i) {
                    expect[i] = i;
                }
                CHECK(seen == expect);
                CHECK(batches.back().size() == n % 7);
                CHECK(make_batches(samples, 7, sampler, 4, epoch) == batches);
            }
        }
        CHECK(make_batches(samples, 7, Sampler::Shuffle, 4, 0) != make_batches(samples, 7, Sampler::Shuffle, 4, 1));

        const auto balanced = make_batches(samples, 6, Sampler::DomainBalanced, 2, 0);
        for (const auto& b : balanced) {
            if (b.size() != 6) {
                continue;
            }
            std::map<int, int> per;
            for (const auto i : b) {
                ++per[samples[i].domain_label];
            }
            CHECK(per.size() == 3);
            for (const auto& [d, c] : per) {
                CHECK(c == 2);
            }
        }

        CHECK_THROWS_AS(make_batches(samples, 1, Sampler::Shuffle, 0, 0, true), ConfigError);
        CHECK_THROWS_AS(make_batches(samples, 0, Sampler::Shuffle, 0, 0), ConfigError);
        CHECK_NOTHROW(make_batches(samples, 1, Sampler::Shuffle, 0, 0, false));
    }

    TEST_CASE("batch tensors") {
        SyntheticSpec spec;
        spec.samples_per_cell = 2;
        const auto samples = generate_synthetic_domains(spec);
        const std::vector<std::size_t> idx{3, 0, 17};
        const auto batch = make_batch<float>(samples, idx);
        CHECK(batch.images.shape() == Shape{3, 3, 16, 16});
        CHECK(batch.labels == std::vector<int>{samples[3].class_label, samples[0].class_label, samples[17].class_label});
        CHECK(batch.images.data()[768] == samples[0].pixels[0]);
    }
}
