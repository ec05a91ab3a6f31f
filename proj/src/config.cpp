#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>

#include <toml.hpp>

#include "ddpe/dynconv.hpp"
#include "ddpe/errors.hpp"
#include "ddpe/harness.hpp"

namespace ddpe {

namespace {

toml::table parse_toml(std::string_view text) {
    try {
        return toml::parse(text);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "config: " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(os.str());
    }
}

void check_keys(const toml::table& table, std::string_view where, std::initializer_list<std::string_view> allowed) {
    for (const auto& [key, value] : table) {
        bool known = false;
        for (const auto a : allowed) {
            known = known || key.str() == a;
        }
        if (!known) {
            throw ConfigError("config: unknown key '" + std::string(key.str()) + "' in [" + std::string(where) + "]");
        }
    }
}

const toml::table* sub_table(const toml::table& root, std::string_view name) {
    const toml::node* node = root.get(name);
    if (node == nullptr) {
        return nullptr;
    }
    const toml::table* t = node->as_table();
    if (t == nullptr) {
        throw ConfigError("config: '" + std::string(name) + "' must be a table");
    }
    return t;
}

std::string key_path(std::string_view table, std::string_view key) {
    return std::string(table) + "." + std::string(key);
}

void read(const toml::table& t, std::string_view table, std::string_view key, std::size_t& out) {
    const toml::node* node = t.get(key);
    if (node == nullptr) {
        return;
    }
    const auto v = node->value<std::int64_t>();
    if (!v || *v < 0 || !node->is_integer()) {
        throw ConfigError("config: " + key_path(table, key) + " must be a non-negative integer");
    }
    out = static_cast<std::size_t>(*v);
}

void read(const toml::table& t, std::string_view table, std::string_view key, double& out) {
    const toml::node* node = t.get(key);
    if (node == nullptr) {
        return;
    }
    const auto v = node->value<double>();
    if (!v || !(node->is_floating_point() || node->is_integer())) {
        throw ConfigError("config: " + key_path(table, key) + " must be a number");
    }
    out = *v;
}

void read(const toml::table& t, std::string_view table, std::string_view key, bool& out) {
    const toml::node* node = t.get(key);
    if (node == nullptr) {
        return;
    }
    if (!node->is_boolean()) {
        throw ConfigError("config: " + key_path(table, key) + " must be true or false");
    }
    out = *node->value<bool>();
}

void read(const toml::table& t, std::string_view table, std::string_view key, std::string& out) {
    const toml::node* node = t.get(key);
    if (node == nullptr) {
        return;
    }
    if (!node->is_string()) {
        throw ConfigError("config: " + key_path(table, key) + " must be a string");
    }
    out = *node->value<std::string>();
}

template <typename Int>
void read_list(const toml::table& t, std::string_view table, std::string_view key, std::vector<Int>& out) {
    const toml::node* node = t.get(key);
    if (node == nullptr) {
        return;
    }
    const toml::array* arr = node->as_array();
    if (arr == nullptr) {
        throw ConfigError("config: " + key_path(table, key) + " must be an array of integers");
    }
    out.clear();
    for (const auto& item : *arr) {
        const auto v = item.value<std::int64_t>();
        if (!item.is_integer() || !v || *v < 0) {
            throw ConfigError("config: " + key_path(table, key) + " must hold non-negative integers");
        }
        out.push_back(static_cast<Int>(*v));
    }
}

} // namespace

NetworkConfig NetworkConfig::from_text(std::string_view text) {
    const toml::table root = parse_toml(text);
    check_keys(root, "", {"network"});
    const toml::table* net = sub_table(root, "network");
    if (net == nullptr) {
        throw ConfigError("network config: missing [network] table");
    }
    check_keys(*net, "network",
               {"in_channels", "height", "width", "num_classes", "adjuster_hidden", "pool_window", "blocks"});
    NetworkConfig cfg;
    read(*net, "network", "in_channels", cfg.in_channels);
    read(*net, "network", "height", cfg.height);
    read(*net, "network", "width", cfg.width);
    read(*net, "network", "num_classes", cfg.num_classes);
    read(*net, "network", "adjuster_hidden", cfg.adjuster_hidden);
    read(*net, "network", "pool_window", cfg.pool_window);
    if (const toml::node* blocks = net->get("blocks")) {
        const toml::array* arr = blocks->as_array();
        if (arr == nullptr) {
            throw ConfigError("network config: blocks must be an array of tables");
        }
        for (const auto& item : *arr) {
            const toml::table* bt = item.as_table();
            if (bt == nullptr) {
                throw ConfigError("network config: blocks must be an array of tables");
            }
            check_keys(*bt, "network.blocks",
                       {"in_channels", "out_channels", "kernel_size", "num_templates", "stride", "pad"});
            BlockConfig b;
            read(*bt, "network.blocks", "in_channels", b.in_channels);
            read(*bt, "network.blocks", "out_channels", b.out_channels);
            read(*bt, "network.blocks", "kernel_size", b.kernel_size);
            read(*bt, "network.blocks", "num_templates", b.num_templates);
            read(*bt, "network.blocks", "stride", b.stride);
            read(*bt, "network.blocks", "pad", b.pad);
            cfg.blocks.push_back(b);
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig parse_experiment_config(std::string_view text) {
    const toml::table root = parse_toml(text);
    check_keys(root, "", {"data", "network", "train", "swa", "perturb", "protocol"});
    ExperimentConfig cfg;
    cfg.source_text = std::string(text);

    if (const auto* t = sub_table(root, "data")) {
        check_keys(*t, "data",
                   {"source", "folder", "classes", "domains", "samples_per_cell", "image_size", "noise", "seed"});
        std::string source = "synthetic";
        read(*t, "data", "source", source);
        if (source != "synthetic" && source != "folder") {
            throw ConfigError("config: data.source must be \"synthetic\" or \"folder\"");
        }
        cfg.data.synthetic = source == "synthetic";
        std::string folder;
        read(*t, "data", "folder", folder);
        cfg.data.folder = folder;
        auto& s = cfg.data.synthetic_spec;
        read(*t, "data", "classes", s.classes);
        read(*t, "data", "domains", s.domains);
        read(*t, "data", "samples_per_cell", s.samples_per_cell);
        read(*t, "data", "image_size", s.image_size);
        read(*t, "data", "noise", s.noise);
        std::size_t seed = s.seed;
        read(*t, "data", "seed", seed);
        s.seed = seed;
        if (!cfg.data.synthetic && folder.empty()) {
            throw ConfigError("config: data.folder is required when data.source = \"folder\"");
        }
    }
    if (const auto* t = sub_table(root, "network")) {
        check_keys(*t, "network", {"channels", "kernel_size", "templates", "adjuster_hidden"});
        read_list(*t, "network", "channels", cfg.network.channels);
        read(*t, "network", "kernel_size", cfg.network.kernel_size);
        read(*t, "network", "templates", cfg.network.templates);
        read(*t, "network", "adjuster_hidden", cfg.network.adjuster_hidden);
    }
    if (const auto* t = sub_table(root, "train")) {
        check_keys(*t, "train", {"epochs", "batch_size", "lr0", "momentum", "weight_decay", "sampler", "seeds"});
        read(*t, "train", "epochs", cfg.train.epochs);
        read(*t, "train", "batch_size", cfg.train.batch_size);
        read(*t, "train", "lr0", cfg.train.lr0);
        read(*t, "train", "momentum", cfg.train.momentum);
        read(*t, "train", "weight_decay", cfg.train.weight_decay);
        std::string sampler = "shuffle";
        read(*t, "train", "sampler", sampler);
        if (sampler == "shuffle") {
            cfg.train.sampler = Sampler::Shuffle;
        } else if (sampler == "domain_balanced") {
            cfg.train.sampler = Sampler::DomainBalanced;
        } else {
            throw ConfigError("config: train.sampler must be \"shuffle\" or \"domain_balanced\"");
        }
        read_list(*t, "train", "seeds", cfg.train.seeds);
    }
    if (const auto* t = sub_table(root, "swa")) {
        check_keys(*t, "swa", {"enabled", "start_fraction"});
        read(*t, "swa", "enabled", cfg.train.swa.enabled);
        read(*t, "swa", "start_fraction", cfg.train.swa.start_fraction);
    }
    if (const auto* t = sub_table(root, "perturb")) {
        check_keys(*t, "perturb", {"mode", "rule", "beta"});
        std::string mode = to_string(cfg.train.plan.mode);
        std::string rule = to_string(cfg.train.plan.rule);
        read(*t, "perturb", "mode", mode);
        read(*t, "perturb", "rule", rule);
        read(*t, "perturb", "beta", cfg.train.plan.beta);
        cfg.train.plan.mode = parse_perturb_mode(mode);
        cfg.train.plan.rule = parse_partner_rule(rule);
    }
    if (const auto* t = sub_table(root, "protocol")) {
        check_keys(*t, "protocol", {"kind", "targets"});
        std::string kind = "leave_one_domain_out";
        read(*t, "protocol", "kind", kind);
        if (kind == "leave_one_domain_out") {
            cfg.protocol.kind = Protocol::LeaveOneDomainOut;
        } else if (kind == "single_source") {
            cfg.protocol.kind = Protocol::SingleSource;
        } else {
            throw ConfigError("config: protocol.kind must be \"leave_one_domain_out\" or \"single_source\"");
        }
        read_list(*t, "protocol", "targets", cfg.protocol.targets);
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("config: cannot open " + path.string());
    }
    std::ostringstream os;
    os << f.rdbuf();
    return parse_experiment_config(os.str());
}

} // namespace ddpe
