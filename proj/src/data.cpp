#include "ddpe/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>

#include "ddpe/errors.hpp"

namespace ddpe {
namespace fs = std::filesystem;

namespace {

constexpr int kSupersample = 4;

bool inside_shape(int shape, double u, double v, double radius) {
    switch (shape) {
    case 0: // disk
        return u * u + v * v <= radius * radius;
    case 1: { // cross
        const double t = 0.3 * radius;
        return (std::abs(u) <= radius && std::abs(v) <= t) || (std::abs(v) <= radius && std::abs(u) <= t);
    }
    case 2: // bar
        return std::abs(u) <= radius && std::abs(v) <= 0.35 * radius;
    default: { // ring
        const double r2 = u * u + v * v;
        return r2 <= radius * radius && r2 >= 0.25 * radius * radius;
    }
    }
}

float clamp01(double v) {
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

} // namespace

ShapeRender render_shape(int class_label, const SyntheticSpec& spec, Rng& rng) {
    const std::size_t s = spec.image_size;
    const double size = static_cast<double>(s);
    const double jitter = 0.125 * size;
    const double cx = size / 2.0 + rng.uniform(-jitter, jitter);
    const double cy = size / 2.0 + rng.uniform(-jitter, jitter);
    const double radius = 0.26 * size * rng.uniform(0.85, 1.1);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    const int shape = class_label % 4;

    ShapeRender r;
    r.size = s;
    r.mask.assign(s * s, 0.0f);
    const double sub = 1.0 / kSupersample;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            int hits = 0;
            for (int i = 0; i < kSupersample; ++i) {
                for (int j = 0; j < kSupersample; ++j) {
                    const double px = static_cast<double>(x) + (j + 0.5) * sub - cx;
                    const double py = static_cast<double>(y) + (i + 0.5) * sub - cy;
                    const double u = ca * px + sa * py;
                    const double v = -sa * px + ca * py;
                    hits += inside_shape(shape, u, v, radius) ? 1 : 0;
                }
            }
            r.mask[y * s + x] = static_cast<float>(hits) / static_cast<float>(kSupersample * kSupersample);
        }
    }
    r.noisy.resize(s * s);
    for (std::size_t i = 0; i < s * s; ++i) {
        r.noisy[i] = clamp01(r.mask[i] + spec.noise * rng.normal());
    }
    r.edge_noise.resize(s * s);
    for (auto& v : r.edge_noise) {
        v = static_cast<float>(spec.noise * rng.normal());
    }
    r.ramp_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return r;
}

std::vector<float> apply_domain_style(const ShapeRender& render, int domain) {
    const std::size_t s = render.size;
    const std::size_t area = s * s;
    std::vector<float> out(3 * area);
    switch (domain % 4) {
    case 0:
        for (std::size_t c = 0; c < 3; ++c) {
            std::copy(render.noisy.begin(), render.noisy.end(), out.begin() + static_cast<std::ptrdiff_t>(c * area));
        }
        break;
    case 1:
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < area; ++i) {
                out[c * area + i] = 1.0f - render.noisy[i];
            }
        }
        break;
    case 2: {
        const double norm = 2.0 * std::numbers::sqrt2;
        for (std::size_t c = 0; c < 3; ++c) {
            const double phi = render.ramp_angle + 2.0 * std::numbers::pi * static_cast<double>(c) / 3.0;
            const double a = std::cos(phi);
            const double b = std::sin(phi);
            for (std::size_t y = 0; y < s; ++y) {
                const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(s) * 2.0 - 1.0;
                for (std::size_t x = 0; x < s; ++x) {
                    const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(s) * 2.0 - 1.0;
                    const double ramp = 0.5 + (u * a + v * b) / norm;
                    out[c * area + y * s + x] = clamp01(0.6 * render.noisy[y * s + x] + 0.4 * ramp);
                }
            }
        }
        break;
    }
    default: {
        const auto& m = render.mask;
        auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> double {
            if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(s) || x >= static_cast<std::ptrdiff_t>(s)) {
                return 0.0;
            }
            return m[static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)];
        };
        for (std::size_t y = 0; y < s; ++y) {
            for (std::size_t x = 0; x < s; ++x) {
                const auto yy = static_cast<std::ptrdiff_t>(y);
                const auto xx = static_cast<std::ptrdiff_t>(x);
                const double lap = 4.0 * at(yy, xx) - at(yy - 1, xx) - at(yy + 1, xx) - at(yy, xx - 1) - at(yy, xx + 1);
                const float v = clamp01(std::abs(lap) + render.edge_noise[y * s + x]);
                for (std::size_t c = 0; c < 3; ++c) {
                    out[c * area + y * s + x] = v;
                }
            }
        }
        break;
    }
    }
    return out;
}

std::vector<DomainSample> generate_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.classes == 0 || spec.domains == 0 || spec.samples_per_cell == 0 || spec.image_size == 0) {
        throw ConfigError("synthetic data: classes, domains, samples per cell and image size must be positive");
    }
    if (spec.noise < 0.0) {
        throw ConfigError("synthetic data: noise must be non-negative");
    }
    std::vector<DomainSample> samples;
    samples.reserve(spec.classes * spec.domains * spec.samples_per_cell);
    for (std::size_t d = 0; d < spec.domains; ++d) {
        for (std::size_t c = 0; c < spec.classes; ++c) {
            for (std::size_t i = 0; i < spec.samples_per_cell; ++i) {
                Rng rng = Rng::stream(seed, Stream::Data, (d * spec.classes + c) * spec.samples_per_cell + i);
                const ShapeRender render = render_shape(static_cast<int>(c), spec, rng);
                DomainSample sample;
                sample.channels = 3;
                sample.height = spec.image_size;
                sample.width = spec.image_size;
                sample.pixels = apply_domain_style(render, static_cast<int>(d));
                sample.class_label = static_cast<int>(c);
                sample.domain_label = static_cast<int>(d);
                samples.push_back(std::move(sample));
            }
        }
    }
    return samples;
}

namespace {

class PnmHeader {
public:
    PnmHeader(const std::string& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

    std::string token() {
        skip_space_and_comments();
        std::string t;
        while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            t.push_back(bytes_[pos_++]);
        }
        if (t.empty()) {
            fail("unexpected end of header");
        }
        return t;
    }

    std::size_t number() {
        const std::string t = token();
        if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
            t.size() > 9) {
            fail("expected a positive integer, got '" + t + "'");
        }
        return static_cast<std::size_t>(std::stoul(t));
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_start() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            fail("missing whitespace before raster");
        }
        return pos_ + 1;
    }

    [[noreturn]] void fail(const std::string& what) const { throw ParseError(path_.string() + ": " + what); }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') {
                    ++pos_;
                }
            } else {
                break;
            }
        }
    }

    const std::string& bytes_;
    const fs::path& path_;
    std::size_t pos_ = 0;
};

} // namespace

DomainSample read_pnm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ParseError(path.string() + ": cannot open");
    }
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    PnmHeader header(bytes, path);
    const std::string magic = header.token();
    std::size_t channels = 0;
    if (magic == "P5") {
        channels = 1;
    } else if (magic == "P6") {
        channels = 3;
    } else {
        header.fail("unsupported magic '" + magic + "' (expected P5 or P6)");
    }
    const std::size_t width = header.number();
    const std::size_t height = header.number();
    const std::size_t maxval = header.number();
    if (width == 0 || height == 0) {
        header.fail("zero image extent");
    }
    if (maxval != 255) {
        header.fail("maxval " + std::to_string(maxval) + " unsupported (expected 255)");
    }
    const std::size_t start = header.raster_start();
    const std::size_t area = width * height;
    if (bytes.size() - start < channels * area) {
        header.fail("raster truncated");
    }
    DomainSample sample;
    sample.channels = channels;
    sample.height = height;
    sample.width = width;
    sample.pixels.resize(channels * area);
    // Interleaved on disk, planar in memory.
    for (std::size_t i = 0; i < area; ++i) {
        for (std::size_t c = 0; c < channels; ++c) {
            const auto byte = static_cast<unsigned char>(bytes[start + i * channels + c]);
            sample.pixels[c * area + i] = static_cast<float>(byte) / 255.0f;
        }
    }
    return sample;
}

void write_pnm(const fs::path& path, const DomainSample& sample) {
    if (sample.channels != 1 && sample.channels != 3) {
        throw DimensionError("write_pnm: only 1 or 3 channels can be written");
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("write_pnm: cannot write " + path.string());
    }
    f << (sample.channels == 1 ? "P5" : "P6") << "\n" << sample.width << " " << sample.height << "\n255\n";
    const std::size_t area = sample.width * sample.height;
    std::string raster(sample.channels * area, '\0');
    for (std::size_t i = 0; i < area; ++i) {
        for (std::size_t c = 0; c < sample.channels; ++c) {
            const double v = std::clamp(static_cast<double>(sample.pixels[c * area + i]), 0.0, 1.0);
            raster[i * sample.channels + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
        }
    }
    f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (directories ? e.is_directory() : e.is_regular_file()) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

std::vector<DomainSample> load_image_folder(const fs::path& root) {
    if (!fs::is_directory(root)) {
        throw ConfigError("image folder: " + root.string() + " is not a directory");
    }
    std::vector<DomainSample> samples;
    const auto domains = sorted_entries(root, true);
    for (std::size_t d = 0; d < domains.size(); ++d) {
        const auto classes = sorted_entries(domains[d], true);
        for (std::size_t c = 0; c < classes.size(); ++c) {
            for (const auto& file : sorted_entries(classes[c], false)) {
                const auto ext = file.extension().string();
                if (ext != ".pgm" && ext != ".ppm") {
                    continue;
                }
                DomainSample s = read_pnm(file);
                if (!samples.empty()) {
                    const auto& ref = samples.front();
                    if (s.channels != ref.channels || s.height != ref.height || s.width != ref.width) {
                        throw DimensionError(file.string() + ": image is " + std::to_string(s.channels) + "x" +
                                             std::to_string(s.height) + "x" + std::to_string(s.width) + ", expected " +
                                             std::to_string(ref.channels) + "x" + std::to_string(ref.height) + "x" +
                                             std::to_string(ref.width));
                    }
                }
                s.domain_label = static_cast<int>(d);
                s.class_label = static_cast<int>(c);
                samples.push_back(std::move(s));
            }
        }
    }
    return samples;
}

void export_image_folder(const std::vector<DomainSample>& samples, const fs::path& root) {
    std::map<std::pair<int, int>, std::size_t> counters;
    for (const auto& s : samples) {
        char dir[64];
        std::snprintf(dir, sizeof dir, "domain_%02d/class_%02d", s.domain_label, s.class_label);
        const fs::path folder = root / dir;
        fs::create_directories(folder);
        char name[32];
        std::snprintf(name, sizeof name, "%05zu.%s", counters[{s.domain_label, s.class_label}]++,
                      s.channels == 1 ? "pgm" : "ppm");
        write_pnm(folder / name, s);
    }
}

std::vector<int> domains_present(const std::vector<DomainSample>& samples) {
    std::set<int> ids;
    for (const auto& s : samples) {
        ids.insert(s.domain_label);
    }
    return {ids.begin(), ids.end()};
}

DatasetSplit leave_one_domain_out_split(const std::vector<DomainSample>& samples, int domain, Protocol protocol) {
    const auto present = domains_present(samples);
    if (std::find(present.begin(), present.end(), domain) == present.end()) {
        throw ConfigError("split: domain " + std::to_string(domain) + " not present in the data");
    }
    DatasetSplit split;
    split.protocol = protocol;
    split.domain = domain;
    for (const auto& s : samples) {
        const bool in_domain = s.domain_label == domain;
        const bool to_test = protocol == Protocol::LeaveOneDomainOut ? in_domain : !in_domain;
        (to_test ? split.test : split.train).push_back(s);
    }
    return split;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<DomainSample>& samples, std::size_t batch_size,
                                                   Sampler sampler, std::uint64_t seed, std::size_t epoch,
                                                   bool exchange_active) {
    if (batch_size == 0) {
        throw ConfigError("batching: batch size must be positive");
    }
    if (exchange_active && batch_size < 2) {
        throw ConfigError("batching: parameter exchange needs a batch size of at least 2");
    }
    Rng rng = Rng::stream(seed, Stream::Batching, epoch);
    std::vector<std::size_t> order;
    order.reserve(samples.size());
    if (sampler == Sampler::Shuffle) {
        order = rng.permutation(samples.size());
    } else {
        // Shuffle within each domain, then deal round-robin so any window of
        // consecutive draws holds near-equal counts per domain.
        std::map<int, std::vector<std::size_t>> by_domain;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            by_domain[samples[i].domain_label].push_back(i);
        }
        std::vector<std::vector<std::size_t>> pools;
        for (auto& [domain, idx] : by_domain) {
            rng.shuffle(idx);
            pools.push_back(std::move(idx));
        }
        rng.shuffle(pools);
        std::size_t longest = 0;
        for (const auto& p : pools) {
            longest = std::max(longest, p.size());
        }
        for (std::size_t round = 0; round < longest; ++round) {
            for (const auto& p : pools) {
                if (round < p.size()) {
                    order.push_back(p[round]);
                }
            }
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

template <typename T>
Batch<T> make_batch(const std::vector<DomainSample>& samples, std::span<const std::size_t> indices) {
    if (indices.empty()) {
        throw DimensionError("make_batch: empty batch");
    }
    const auto& first = samples.at(indices[0]);
    const std::size_t n = first.pixels.size();
    std::vector<T> values;
    values.reserve(indices.size() * n);
    Batch<T> batch;
    for (const auto i : indices) {
        const auto& s = samples.at(i);
        if (s.pixels.size() != n || s.channels != first.channels) {
            throw DimensionError("make_batch: samples have differing geometry");
        }
        values.insert(values.end(), s.pixels.begin(), s.pixels.end());
        batch.labels.push_back(s.class_label);
        batch.domains.push_back(s.domain_label);
    }
    batch.images = Tensor<T>::from({indices.size(), first.channels, first.height, first.width}, std::move(values));
    return batch;
}

template <typename T>
Batch<T> make_batch(const std::vector<DomainSample>& samples) {
    std::vector<std::size_t> all(samples.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return make_batch<T>(samples, all);
}

template Batch<float> make_batch<float>(const std::vector<DomainSample>&, std::span<const std::size_t>);
template Batch<double> make_batch<double>(const std::vector<DomainSample>&, std::span<const std::size_t>);
template Batch<float> make_batch<float>(const std::vector<DomainSample>&);
template Batch<double> make_batch<double>(const std::vector<DomainSample>&);

} // namespace ddpe
