#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddpe/analysis.hpp"
#include "ddpe/checkpoint.hpp"
#include "ddpe/data.hpp"
#include "ddpe/errors.hpp"
#include "ddpe/harness.hpp"

namespace fs = std::filesystem;
using namespace ddpe;

namespace {

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("cannot write " + path.string());
    }
    f << text;
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw ConfigError("cannot open " + path.string());
    }
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Samples the model sees: the training split of `target` when one is given,
// otherwise the whole dataset.
struct Selection {
    std::vector<DomainSample> train;
    std::vector<DomainSample> test;
};

Selection select(const ExperimentConfig& cfg, std::optional<int> target) {
    std::vector<DomainSample> samples = load_data(cfg.data);
    if (!target) {
        return {samples, samples};
    }
    DatasetSplit split = leave_one_domain_out_split(samples, *target, cfg.protocol.kind);
    return {std::move(split.train), std::move(split.test)};
}

FeatureMatrix features_of(const Model<float>& model, const std::vector<DomainSample>& samples,
                          const std::string& kind) {
    if (kind == "static") {
        return extract_static_features(model, samples);
    }
    if (kind == "dynamic") {
        return extract_coefficients(model, samples);
    }
    throw ConfigError("--features must be 'static' or 'dynamic'");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ddpe: dynamic convolution with parameter exchange for domain generalization"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "Render the synthetic multi-domain dataset to PGM/PPM folders");
    SyntheticSpec spec;
    std::string gen_out;
    std::string gen_config;
    gen->add_option("--out", gen_out, "Output root (root/domain_XX/class_XX/*.ppm)")->required();
    gen->add_option("--config", gen_config, "Take [data] settings from an experiment config");
    gen->add_option("--classes", spec.classes);
    gen->add_option("--domains", spec.domains);
    gen->add_option("--samples-per-cell", spec.samples_per_cell);
    gen->add_option("--image-size", spec.image_size);
    gen->add_option("--noise", spec.noise);
    gen->add_option("--seed", spec.seed);

    // train
    auto* tr = app.add_subcommand("train", "Train one model on one protocol split");
    std::string tr_config;
    std::string tr_out;
    std::optional<int> tr_target;
    std::optional<std::uint64_t> tr_seed;
    tr->add_option("--config", tr_config)->required();
    tr->add_option("--out", tr_out, "Directory for model.ddpe, history.csv and train.json")->required();
    tr->add_option("--target", tr_target, "Held-out (or single-source) domain; default: first configured target");
    tr->add_option("--seed", tr_seed, "Default: first configured seed");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a protocol split");
    std::string ev_config;
    std::string ev_checkpoint;
    std::string ev_out;
    std::optional<int> ev_target;
    ev->add_option("--config", ev_config)->required();
    ev->add_option("--checkpoint", ev_checkpoint)->required();
    ev->add_option("--target", ev_target, "Evaluate on this split's test side; default: every sample");
    ev->add_option("--out", ev_out, "Write the result as JSON");

    // experiment
    auto* ex = app.add_subcommand("experiment", "Every seed x target: train, evaluate, aggregate");
    std::string ex_config;
    std::string ex_out;
    bool ex_quiet = false;
    ex->add_option("--config", ex_config)->required();
    ex->add_option("--out", ex_out)->required();
    ex->add_flag("--quiet", ex_quiet);

    // probe
    auto* pr = app.add_subcommand("probe", "Domain-classification probe on static features or coefficients");
    std::string pr_config;
    std::string pr_checkpoint;
    std::string pr_out;
    std::string pr_features = "dynamic";
    std::optional<int> pr_target;
    ProbeConfig probe_cfg;
    pr->add_option("--config", pr_config)->required();
    pr->add_option("--checkpoint", pr_checkpoint)->required();
    pr->add_option("--out", pr_out, "Directory for probe_<features>.csv / .json")->required();
    pr->add_option("--features", pr_features, "static or dynamic")->check(CLI::IsMember({"static", "dynamic"}));
    pr->add_option("--target", pr_target, "Probe the training domains of this split");
    pr->add_option("--probe-seed", probe_cfg.seed);
    pr->add_option("--epochs", probe_cfg.epochs);

    // embed
    auto* em = app.add_subcommand("embed", "2-D PCA embedding of features as CSV");
    std::string em_config;
    std::string em_checkpoint;
    std::string em_out;
    std::string em_features = "dynamic";
    std::optional<int> em_target;
    em->add_option("--config", em_config)->required();
    em->add_option("--checkpoint", em_checkpoint)->required();
    em->add_option("--out", em_out, "CSV path (x,y,class,domain)")->required();
    em->add_option("--features", em_features, "static or dynamic")->check(CLI::IsMember({"static", "dynamic"}));
    em->add_option("--target", em_target);

    // report
    auto* rp = app.add_subcommand("report", "Summarize report.json files as a CSV table");
    std::vector<std::string> rp_inputs;
    std::string rp_out;
    rp->add_option("inputs", rp_inputs, "report.json files")->required();
    rp->add_option("--out", rp_out, "Write the table here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) {
            if (!gen_config.empty()) {
                const ExperimentConfig cfg = load_experiment_config(gen_config);
                spec = cfg.data.synthetic_spec;
            }
            const auto samples = generate_synthetic_domains(spec);
            export_image_folder(samples, gen_out);
            std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
        } else if (*tr) {
            const ExperimentConfig cfg = load_experiment_config(tr_config);
            const std::vector<DomainSample> samples = load_data(cfg.data);
            const int target = tr_target ? *tr_target
                                         : (cfg.protocol.targets.empty() ? domains_present(samples).front()
                                                                         : cfg.protocol.targets.front());
            const std::uint64_t seed = tr_seed ? *tr_seed : cfg.train.seeds.front();
            const DatasetSplit split = leave_one_domain_out_split(samples, target, cfg.protocol.kind);
            const NetworkConfig net = network_for(cfg.network, samples);
            const TrainResult<float> result = train(build_network<float>(net, seed), split.train, cfg.train, seed);
            const double acc = evaluate(result.evaluation_model(), split.test);
            fs::create_directories(tr_out);
            save_checkpoint(result.evaluation_model(), fs::path(tr_out) / "model.ddpe");
            write_file(fs::path(tr_out) / "history.csv", history_csv(result.history));
            nlohmann::ordered_json j;
            j["protocol"] = protocol_name(cfg.protocol.kind);
            j["seed"] = seed;
            j["target"] = target;
            j["swa"] = result.swa_model.has_value();
            j["accuracy"] = acc;
            j["config"] = cfg.source_text;
            write_file(fs::path(tr_out) / "train.json", j.dump(2) + "\n");
            std::cout << "target " << target << " seed " << seed << " accuracy " << fmt(acc) << "\n";
        } else if (*ev) {
            const ExperimentConfig cfg = load_experiment_config(ev_config);
            const Model<float> model = load_checkpoint<float>(ev_checkpoint);
            const Selection sel = select(cfg, ev_target);
            const double acc = evaluate(model, sel.test);
            if (!ev_out.empty()) {
                nlohmann::ordered_json j;
                j["checkpoint"] = fs::path(ev_checkpoint).filename().string();
                j["target"] = ev_target ? nlohmann::json(*ev_target) : nlohmann::json(nullptr);
                j["samples"] = sel.test.size();
                j["accuracy"] = acc;
                write_file(ev_out, j.dump(2) + "\n");
            }
            std::cout << "accuracy " << fmt(acc) << " on " << sel.test.size() << " samples\n";
        } else if (*ex) {
            const ExperimentConfig cfg = load_experiment_config(ex_config);
            ExperimentHooks hooks;
            if (!ex_quiet) {
                hooks.on_cell = [](const RunCell& c) {
                    std::cout << "seed " << c.seed << " target " << c.target << " accuracy " << fmt(c.accuracy)
                              << std::endl;
                };
            }
            const RunReport report = run_experiment(cfg, fs::path(ex_out), hooks);
            std::cout << "overall mean " << fmt(report.overall_mean) << "\n";
        } else if (*pr) {
            const ExperimentConfig cfg = load_experiment_config(pr_config);
            const Model<float> model = load_checkpoint<float>(pr_checkpoint);
            const Selection sel = select(cfg, pr_target);
            const FeatureMatrix fm = features_of(model, sel.train, pr_features);
            const ProbeResult res = domain_probe(fm, probe_cfg);
            write_file(fs::path(pr_out) / ("probe_" + pr_features + ".csv"), probe_curve_csv(res));
            write_file(fs::path(pr_out) / ("probe_" + pr_features + ".json"), probe_json(res, fm));
            std::cout << pr_features << " probe final accuracy " << fmt(res.final_accuracy) << "\n";
        } else if (*em) {
            const ExperimentConfig cfg = load_experiment_config(em_config);
            const Model<float> model = load_checkpoint<float>(em_checkpoint);
            const Selection sel = select(cfg, em_target);
            const FeatureMatrix fm = features_of(model, sel.train, em_features);
            write_file(em_out, embedding_csv(pca_embed(fm, 2), fm));
            std::cout << "wrote " << fm.rows << " points to " << em_out << "\n";
        } else if (*rp) {
            // Rows are labelled by input position and the run's own settings,
            // never by path, so the table does not depend on where reports live.
            std::string table = "report,mode,rule,swa,target,mean,std,cells\n";
            for (std::size_t i = 0; i < rp_inputs.size(); ++i) {
                const RunReport report = parse_report_json(read_file(rp_inputs[i]));
                RunReport check = report;
                check.recompute_summary();
                std::string label = std::to_string(i);
                if (!report.config_text.empty()) {
                    const TrainConfig run = parse_experiment_config(report.config_text).train;
                    label += "," + to_string(run.plan.mode) + "," + to_string(run.plan.rule) + "," +
                             (run.swa.enabled ? "on" : "off");
                } else {
                    label += ",,,";
                }
                for (std::size_t t = 0; t < report.targets.size(); ++t) {
                    std::size_t cells = 0;
                    for (const auto& c : report.cells) {
                        cells += c.target == report.targets[t] ? 1 : 0;
                    }
                    table += label + "," + std::to_string(report.targets[t]) + "," + fmt(check.mean[t]) + "," +
                             fmt(check.stddev[t]) + "," + std::to_string(cells) + "\n";
                }
                table += label + ",all," + fmt(check.overall_mean) + ",," + std::to_string(report.cells.size()) + "\n";
            }
            if (rp_out.empty()) {
                std::cout << table;
            } else {
                write_file(rp_out, table);
            }
        }
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
