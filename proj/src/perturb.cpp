#include "ddpe/perturb.hpp"

#include <algorithm>
#include <cmath>

#include "ddpe/errors.hpp"
#include "ddpe/ops.hpp"

namespace ddpe {

std::string to_string(PerturbMode mode) {
    switch (mode) {
    case PerturbMode::None:
        return "none";
    case PerturbMode::CrossInstance:
        return "cross_instance";
    case PerturbMode::CrossKernel:
        return "cross_kernel";
    case PerturbMode::Mix:
        return "mix";
    }
    return "none";
}

std::string to_string(PartnerRule rule) {
    switch (rule) {
    case PartnerRule::Rand:
        return "wRand";
    case PartnerRule::SameClass:
        return "wSC";
    case PartnerRule::DiffClass:
        return "wDC";
    case PartnerRule::SameDomain:
        return "wSD";
    case PartnerRule::DiffDomain:
        return "wDD";
    }
    return "wRand";
}

PerturbMode parse_perturb_mode(std::string_view text) {
    if (text == "none") {
        return PerturbMode::None;
    }
    if (text == "cross_instance" || text == "ci" || text == "CI-PE") {
        return PerturbMode::CrossInstance;
    }
    if (text == "cross_kernel" || text == "ck" || text == "CK-PE") {
        return PerturbMode::CrossKernel;
    }
    if (text == "mix") {
        return PerturbMode::Mix;
    }
    throw ConfigError("unknown perturbation mode '" + std::string(text) + "'");
}

PartnerRule parse_partner_rule(std::string_view text) {
    for (const auto r : {PartnerRule::Rand, PartnerRule::SameClass, PartnerRule::DiffClass, PartnerRule::SameDomain,
                         PartnerRule::DiffDomain}) {
        if (text == to_string(r)) {
            return r;
        }
    }
    throw ConfigError("unknown partner rule '" + std::string(text) + "' (wRand, wSC, wDC, wSD, wDD)");
}

void PerturbationPlan::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw ConfigError("perturbation: beta must be a finite non-negative number");
    }
}

bool PartnerAssignment::is_permutation() const {
    std::vector<bool> seen(partner.size(), false);
    for (const auto p : partner) {
        if (p >= partner.size() || seen[p]) {
            return false;
        }
        seen[p] = true;
    }
    return true;
}

PartnerAssignment PartnerAssignment::inverse() const {
    if (!is_permutation()) {
        throw ContractError("partner assignment: only a permutation has an inverse");
    }
    PartnerAssignment inv;
    inv.partner.resize(partner.size());
    for (std::size_t b = 0; b < partner.size(); ++b) {
        inv.partner[partner[b]] = b;
    }
    return inv;
}

namespace {

bool eligible(std::span<const int> labels, std::span<const int> domains, PartnerRule rule, std::size_t b,
              std::size_t j) {
    if (j == b) {
        return false;
    }
    switch (rule) {
    case PartnerRule::Rand:
        return true;
    case PartnerRule::SameClass:
        return labels[j] == labels[b];
    case PartnerRule::DiffClass:
        return labels[j] != labels[b];
    case PartnerRule::SameDomain:
        return domains[j] == domains[b];
    case PartnerRule::DiffDomain:
        return domains[j] != domains[b];
    }
    return false;
}

} // namespace

PartnerAssignment sample_partner_assignment(std::span<const int> labels, std::span<const int> domains,
                                            PartnerRule rule, Rng& rng) {
    if (labels.size() != domains.size()) {
        throw DimensionError("partner assignment: " + std::to_string(labels.size()) + " labels vs " +
                             std::to_string(domains.size()) + " domains");
    }
    if (labels.empty()) {
        throw DimensionError("partner assignment: empty batch");
    }
    PartnerAssignment a;
    if (rule == PartnerRule::Rand) {
        a.partner = rng.permutation(labels.size());
        return a;
    }
    a.partner.resize(labels.size());
    std::vector<std::size_t> candidates;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        candidates.clear();
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (eligible(labels, domains, rule, b, j)) {
                candidates.push_back(j);
            }
        }
        a.partner[b] = candidates.empty() ? b : candidates[rng.uniform_int(candidates.size())];
    }
    return a;
}

std::size_t count_rule_violations(std::span<const int> labels, std::span<const int> domains, PartnerRule rule,
                                  const PartnerAssignment& assignment) {
    if (assignment.partner.size() != labels.size()) {
        return labels.size();
    }
    if (rule == PartnerRule::Rand) {
        return assignment.is_permutation() ? 0 : labels.size();
    }
    std::size_t violations = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const std::size_t p = assignment.partner[b];
        if (p >= labels.size()) {
            ++violations;
        } else if (p == b) {
            bool any = false;
            for (std::size_t j = 0; j < labels.size() && !any; ++j) {
                any = eligible(labels, domains, rule, b, j);
            }
            violations += any ? 1 : 0;
        } else if (!eligible(labels, domains, rule, b, p)) {
            ++violations;
        }
    }
    return violations;
}

template <typename T>
Tensor<T> cross_instance_exchange(const Tensor<T>& coefficients, const PartnerAssignment& assignment) {
    return gather_rows(coefficients, std::span<const std::size_t>(assignment.partner));
}

template <typename T>
Tensor<T> cross_kernel_exchange(const Tensor<T>& coefficients, const std::vector<std::vector<std::size_t>>& perms) {
    return permute_within_rows(coefficients, perms);
}

template <typename T>
Tensor<T> parameter_mix(const Tensor<T>& coefficients, const Tensor<T>& partner_coefficients, double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) {
        throw ContractError("parameter_mix: eta must lie in [0, 1]");
    }
    if (coefficients.shape() != partner_coefficients.shape()) {
        throw DimensionError("parameter_mix: shape mismatch");
    }
    return add(scale(coefficients, static_cast<T>(eta)), scale(partner_coefficients, static_cast<T>(1.0 - eta)));
}

template <typename T>
JointLossResult<T> joint_loss(const Model<T>& model, const Batch<T>& batch, const PerturbationPlan& plan, Rng& rng) {
    if (batch.size() == 0) {
        throw DimensionError("joint_loss: empty batch");
    }
    plan.validate();
    JointLossResult<T> result;

    ForwardOptions<T> clean_options;
    clean_options.pass_id = 0;
    ForwardResult<T> clean = model.forward(batch.images, clean_options);
    Tensor<T> ce_clean = cross_entropy_loss(clean.logits, std::span<const int>(batch.labels));
    result.ce_clean = static_cast<double>(ce_clean.item());
    result.clean_logits = clean.logits;
    result.clean_coefficients = clean.coefficients;

    if (plan.mode == PerturbMode::None) {
        result.loss = ce_clean;
        return result;
    }

    const std::size_t n = batch.size();
    const std::size_t blocks = model.blocks().size();
    if (plan.mode == PerturbMode::CrossInstance || plan.mode == PerturbMode::Mix) {
        result.assignment = sample_partner_assignment(batch.labels, batch.domains, plan.rule, rng);
        result.rule_violations = count_rule_violations(batch.labels, batch.domains, plan.rule, result.assignment);
    }
    if (plan.mode == PerturbMode::Mix) {
        result.eta = rng.uniform();
    }
    if (plan.mode == PerturbMode::CrossKernel) {
        result.kernel_perms.resize(blocks);
        for (std::size_t i = 0; i < blocks; ++i) {
            const std::size_t m = model.blocks()[i].bank.size();
            result.kernel_perms[i].reserve(n);
            for (std::size_t b = 0; b < n; ++b) {
                if (plan.identity_kernel_permutations) {
                    std::vector<std::size_t> id(m);
                    for (std::size_t k = 0; k < m; ++k) {
                        id[k] = k;
                    }
                    result.kernel_perms[i].push_back(std::move(id));
                } else {
                    result.kernel_perms[i].push_back(rng.permutation(m));
                }
            }
        }
    }

    ForwardOptions<T> perturbed_options;
    perturbed_options.pass_id = 1;
    perturbed_options.hook = [&](std::size_t block, const DynamicCoefficients<T>& lambda) {
        DynamicCoefficients<T> out = lambda;
        switch (plan.mode) {
        case PerturbMode::CrossInstance:
            out.values = cross_instance_exchange(lambda.values, result.assignment);
            break;
        case PerturbMode::CrossKernel:
            out.values = cross_kernel_exchange(lambda.values, result.kernel_perms[block]);
            break;
        case PerturbMode::Mix:
            out.values = parameter_mix(lambda.values, cross_instance_exchange(lambda.values, result.assignment),
                                       result.eta);
            break;
        case PerturbMode::None:
            break;
        }
        return out;
    };
    ForwardResult<T> perturbed = model.forward(batch.images, perturbed_options);
    Tensor<T> ce_perturbed = cross_entropy_loss(perturbed.logits, std::span<const int>(batch.labels));
    result.ce_perturbed = static_cast<double>(ce_perturbed.item());
    result.loss = add(ce_clean, scale(ce_perturbed, static_cast<T>(plan.beta)));
    return result;
}

#define DDPE_INSTANTIATE_PERTURB(T)                                                                              \
    template Tensor<T> cross_instance_exchange(const Tensor<T>&, const PartnerAssignment&);                     \
    template Tensor<T> cross_kernel_exchange(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&);   \
    template Tensor<T> parameter_mix(const Tensor<T>&, const Tensor<T>&, double);                               \
    template JointLossResult<T> joint_loss(const Model<T>&, const Batch<T>&, const PerturbationPlan&, Rng&);

DDPE_INSTANTIATE_PERTURB(float)
DDPE_INSTANTIATE_PERTURB(double)

} // namespace ddpe
