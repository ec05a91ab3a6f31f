#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddpe/data.hpp"
#include "ddpe/dynconv.hpp"
#include "ddpe/rng.hpp"
#include "ddpe/tensor.hpp"

namespace ddpe {

enum class PerturbMode { None, CrossInstance, CrossKernel, Mix };

// Partner rules for cross-instance exchange and mixing: random shuffle, same
// class, different class, same domain, different domain.
enum class PartnerRule { Rand, SameClass, DiffClass, SameDomain, DiffDomain };

std::string to_string(PerturbMode mode);
std::string to_string(PartnerRule rule);
PerturbMode parse_perturb_mode(std::string_view text);
PartnerRule parse_partner_rule(std::string_view text);

struct PerturbationPlan {
    PerturbMode mode = PerturbMode::None;
    PartnerRule rule = PartnerRule::Rand;
    double beta = 1.0; // weight of the perturbed cross-entropy term
    // Test hook: cross-kernel exchange uses identity permutations.
    bool identity_kernel_permutations = false;

    void validate() const;
};

// partner[b] is the instance whose coefficients instance b receives. A true
// permutation under Rand; under the constrained rules several instances may
// share a partner, and b maps to itself when it has no eligible partner.
struct PartnerAssignment {
    std::vector<std::size_t> partner;

    bool is_permutation() const;
    PartnerAssignment inverse() const; // requires is_permutation()
};

PartnerAssignment sample_partner_assignment(std::span<const int> labels, std::span<const int> domains,
                                            PartnerRule rule, Rng& rng);

// Entries that break the rule. A self-mapping counts as a violation only when
// an eligible partner existed.
std::size_t count_rule_violations(std::span<const int> labels, std::span<const int> domains, PartnerRule rule,
                                  const PartnerAssignment& assignment);

template <typename T>
Tensor<T> cross_instance_exchange(const Tensor<T>& coefficients, const PartnerAssignment& assignment);

template <typename T>
Tensor<T> cross_kernel_exchange(const Tensor<T>& coefficients, const std::vector<std::vector<std::size_t>>& perms);

// eta * lambda + (1 - eta) * partner_lambda.
template <typename T>
Tensor<T> parameter_mix(const Tensor<T>& coefficients, const Tensor<T>& partner_coefficients, double eta);

template <typename T>
struct JointLossResult {
    Tensor<T> loss;
    double ce_clean = 0.0;
    double ce_perturbed = 0.0; // 0 when the plan is None
    Tensor<T> clean_logits;
    std::vector<DynamicCoefficients<T>> clean_coefficients;
    // What the perturbed pass drew, for inspection.
    PartnerAssignment assignment;
    std::vector<std::vector<std::vector<std::size_t>>> kernel_perms; // [block][instance]
    double eta = 1.0;
    std::size_t rule_violations = 0;
};

// CE(clean forward) + beta * CE(perturbed forward). In the perturbed pass every
// block computes lambda from its own (already perturbed) input and then
// applies the plan's exchange. One partner assignment and one eta per call;
// kernel permutations are drawn per block and per instance.
template <typename T>
JointLossResult<T> joint_loss(const Model<T>& model, const Batch<T>& batch, const PerturbationPlan& plan, Rng& rng);

} // namespace ddpe
