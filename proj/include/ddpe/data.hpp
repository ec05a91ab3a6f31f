#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddpe/rng.hpp"
#include "ddpe/tensor.hpp"

namespace ddpe {

struct DomainSample {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels; // planar C x H x W, values in [0, 1]
    int class_label = 0;
    int domain_label = 0;

    bool operator==(const DomainSample&) const = default;
};

// Classes are shapes (0 disk, 1 cross, 2 bar, 3 ring, cycling for more
// classes); domains are closed-form styles (0 identity, 1 inverted contrast,
// 2 low-frequency color ramp, 3 Laplacian edges, cycling).
struct SyntheticSpec {
    std::size_t classes = 4;
    std::size_t domains = 4;
    std::size_t samples_per_cell = 25;
    std::size_t image_size = 16;
    double noise = 0.05;
    std::uint64_t seed = 0;
};

// One shape instance before styling.
struct ShapeRender {
    std::size_t size = 0;
    std::vector<float> mask;  // clean anti-aliased coverage, size x size
    std::vector<float> noisy; // mask plus pixel noise, clamped to [0, 1]
    std::vector<float> edge_noise;
    double ramp_angle = 0.0;
};

ShapeRender render_shape(int class_label, const SyntheticSpec& spec, Rng& rng);
// 3 x size x size styled image for `domain`.
std::vector<float> apply_domain_style(const ShapeRender& render, int domain);

std::vector<DomainSample> generate_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed);
inline std::vector<DomainSample> generate_synthetic_domains(const SyntheticSpec& spec) {
    return generate_synthetic_domains(spec, spec.seed);
}

// Binary PGM (P5) / PPM (P6), maxval 255.
DomainSample read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const DomainSample& sample);

// root/<domain>/<class>/<name>.pgm|.ppm; ids follow sorted directory names.
std::vector<DomainSample> load_image_folder(const std::filesystem::path& root);
void export_image_folder(const std::vector<DomainSample>& samples, const std::filesystem::path& root);

enum class Protocol { LeaveOneDomainOut, SingleSource };

struct DatasetSplit {
    std::vector<DomainSample> train;
    std::vector<DomainSample> test;
    Protocol protocol = Protocol::LeaveOneDomainOut;
    int domain = 0; // held-out target, or the single source
    std::size_t source_size() const { return train.size(); }
};

// Leave-one-domain-out: train on every other domain, test on `domain`.
// Single-source: train on `domain`, test on every other domain.
DatasetSplit leave_one_domain_out_split(const std::vector<DomainSample>& samples, int domain,
                                        Protocol protocol = Protocol::LeaveOneDomainOut);

std::vector<int> domains_present(const std::vector<DomainSample>& samples);

enum class Sampler { Shuffle, DomainBalanced };

// Index batches into `samples` for one epoch. The last short batch is kept.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<DomainSample>& samples, std::size_t batch_size,
                                                   Sampler sampler, std::uint64_t seed, std::size_t epoch,
                                                   bool exchange_active = false);

template <typename T>
struct Batch {
    Tensor<T> images; // B x C x H x W
    std::vector<int> labels;
    std::vector<int> domains;
    std::size_t size() const { return labels.size(); }
};

template <typename T>
Batch<T> make_batch(const std::vector<DomainSample>& samples, std::span<const std::size_t> indices);

template <typename T>
Batch<T> make_batch(const std::vector<DomainSample>& samples);

} // namespace ddpe
