// Command-line front end: every pipeline stage is a subcommand so runs can
// be scripted and cached by hash. Exit codes: 0 success, 2 validation error,
// 3 runtime error, 4 boundary-straddle refusal.

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "preflab/align.hpp"
#include "preflab/diagnostics.hpp"
#include "preflab/harness.hpp"
#include "preflab/hash.hpp"
#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/space.hpp"

namespace {

using preflab::Rng;
using ordered_json = nlohmann::ordered_json;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw preflab::IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw preflab::IoError("cannot write " + path);
}

std::shared_ptr<const preflab::Space> load_space(const std::string& path) {
    return std::make_shared<preflab::Space>(preflab::Space::from_json(slurp(path)));
}

preflab::TabularPolicy load_policy(const std::string& spec,
                                   std::shared_ptr<const preflab::Space> space) {
    if (spec == "uniform") return preflab::TabularPolicy::uniform(space);
    return preflab::TabularPolicy::from_json(slurp(spec), space);
}

preflab::RewardTable random_truth(std::shared_ptr<const preflab::Space> space,
                                  std::uint64_t seed, double scale) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<Eigen::VectorXd> rows;
    for (int i = 0; i < space->num_prompts(); ++i) {
        Eigen::VectorXd v(space->num_responses(i));
        for (int j = 0; j < v.size(); ++j) v(j) = dist(rng);
        rows.push_back(std::move(v));
    }
    return preflab::RewardTable(space, std::move(rows));
}

// Splits "host:port"; bare host defaults to port 80.
preflab::RemoteAnnotatorConfig parse_remote(const std::string& endpoint) {
    preflab::RemoteAnnotatorConfig cfg;
    auto colon = endpoint.rfind(':');
    if (colon == std::string::npos) {
        cfg.host = endpoint;
    } else {
        cfg.host = endpoint.substr(0, colon);
        cfg.port = std::stoi(endpoint.substr(colon + 1));
    }
    return cfg;
}

std::unique_ptr<preflab::Annotator> make_annotator(
    const std::string& truth_path, const std::string& remote,
    std::shared_ptr<const preflab::Space> space) {
    if (!truth_path.empty()) {
        auto table = preflab::RewardTable::from_json(slurp(truth_path), space);
        return std::make_unique<preflab::ExactBTAnnotator>(
            preflab::BTPreference::from_reward(std::move(table)), "truth-bt");
    }
    if (!remote.empty())
        return std::make_unique<preflab::RemoteAnnotator>(parse_remote(remote));
    throw preflab::ConfigError("need --truth or --remote");
}

preflab::TrainMethod method_from_json(const ordered_json& m) {
    std::string name = m.at("name").get<std::string>();
    if (name == "dpo") {
        preflab::DpoConfig cfg;
        cfg.beta = m.value("beta", cfg.beta);
        cfg.steps = m.value("steps", cfg.steps);
        cfg.learning_rate = m.value("learning_rate", cfg.learning_rate);
        std::string mode = m.value("label_mode", std::string("hard"));
        if (mode != "hard" && mode != "soft")
            throw preflab::ConfigError("label_mode must be hard or soft");
        cfg.label_mode = mode == "hard" ? preflab::LabelMode::hard
                                        : preflab::LabelMode::soft;
        return cfg;
    }
    if (name == "slic") {
        preflab::SlicConfig cfg;
        cfg.delta = m.value("delta", cfg.delta);
        cfg.lambda = m.value("lambda", cfg.lambda);
        cfg.steps = m.value("steps", cfg.steps);
        cfg.learning_rate = m.value("learning_rate", cfg.learning_rate);
        if (m.contains("reference_targets"))
            cfg.reference_targets =
                m.at("reference_targets")
                    .get<std::map<std::string, std::string>>();
        return cfg;
    }
    throw preflab::ConfigError("method name must be dpo or slic");
}

// Applies "a.b.c=value" overrides onto the config document; values parse as
// JSON when possible, otherwise as strings.
void apply_override(ordered_json& doc, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw preflab::ConfigError("override must look like key.path=value");
    std::string path = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);
    ordered_json value;
    try {
        value = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
        value = raw;
    }
    ordered_json* node = &doc;
    std::istringstream keys(path);
    std::string key, next;
    std::getline(keys, key, '.');
    while (std::getline(keys, next, '.')) {
        node = &(*node)[key];
        key = next;
    }
    (*node)[key] = std::move(value);
}

struct ProtocolSetup {
    preflab::ProtocolInputs inputs;
    preflab::ProtocolOptions options;
};

ProtocolSetup setup_from_config(const ordered_json& cfg) {
    std::shared_ptr<const preflab::Space> space;
    const auto& sp = cfg.at("space");
    if (sp.contains("path")) {
        space = load_space(sp.at("path").get<std::string>());
    } else {
        space = std::make_shared<preflab::Space>(preflab::build_space(
            sp.at("n_prompts").get<int>(), sp.at("n_responses").get<int>(),
            sp.value("seed", std::uint64_t{0})));
    }

    const auto& tr = cfg.at("truth");
    preflab::RewardTable truth =
        tr.contains("path")
            ? preflab::RewardTable::from_json(
                  slurp(tr.at("path").get<std::string>()), space)
            : random_truth(space, tr.value("seed", std::uint64_t{0}),
                           tr.value("scale", 1.0));

    const auto& off = cfg.at("pi_off");
    preflab::TabularPolicy pi_off = [&] {
        if (off.contains("path"))
            return preflab::TabularPolicy::from_json(
                slurp(off.at("path").get<std::string>()), space);
        Rng rng(off.value("seed", std::uint64_t{0}));
        return preflab::TabularPolicy::uniform(space).perturb(
            off.value("magnitude", 1.0), rng);
    }();

    preflab::TabularPolicy initial = [&] {
        const auto& init = cfg.at("initial_policy");
        if (init.is_string() && init.get<std::string>() == "uniform")
            return preflab::TabularPolicy::uniform(space);
        return preflab::TabularPolicy::from_json(
            slurp(init.at("path").get<std::string>()), space);
    }();

    preflab::ProtocolOptions options;
    for (const auto& it : cfg.at("iterations"))
        options.iterations.push_back(
            preflab::data_choice_from_string(it.get<std::string>()));
    options.method = method_from_json(cfg.at("method"));
    options.samples_per_prompt = cfg.value("samples_per_prompt", 2);
    if (cfg.contains("seeds"))
        options.sampling_seed =
            cfg.at("seeds").value("sampling", std::uint64_t{0});
    if (cfg.contains("boundary_check")) {
        const auto& bc = cfg.at("boundary_check");
        options.boundary_check.enabled = bc.value("enabled", true);
        options.boundary_check.refuse_on_straddle =
            bc.value("refuse_on_straddle", false);
    }
    options.metrics_beta = cfg.value("metrics_beta", 0.1);

    return ProtocolSetup{
        preflab::ProtocolInputs{space, std::move(truth), std::move(pi_off),
                                std::move(initial)},
        std::move(options)};
}

int run(int argc, char** argv) {
    CLI::App app{"Tabular preference-alignment laboratory"};
    app.require_subcommand(1);

    // gen-space
    auto* gen_space = app.add_subcommand("gen-space", "Generate a synthetic space");
    int n_prompts = 4, n_responses = 8;
    std::uint64_t seed = 0;
    std::string out_path;
    gen_space->add_option("--prompts", n_prompts)->required();
    gen_space->add_option("--responses", n_responses)->required();
    gen_space->add_option("--seed", seed);
    gen_space->add_option("--out", out_path)->required();

    // gen-truth
    auto* gen_truth = app.add_subcommand("gen-truth", "Generate a ground-truth reward table");
    std::string space_path;
    double scale = 1.0;
    gen_truth->add_option("--space", space_path)->required();
    gen_truth->add_option("--seed", seed);
    gen_truth->add_option("--scale", scale);
    gen_truth->add_option("--out", out_path)->required();

    // sample
    auto* sample = app.add_subcommand("sample", "Sample candidate pairs from a policy");
    std::string policy_path = "uniform";
    int k = 2;
    sample->add_option("--space", space_path)->required();
    sample->add_option("--policy", policy_path, "policy snapshot path or 'uniform'");
    sample->add_option("--seed", seed);
    sample->add_option("--k", k, "candidates per prompt");
    sample->add_option("--out", out_path)->required();

    // annotate
    auto* annotate = app.add_subcommand("annotate", "Annotate candidate pairs into a preference dataset");
    std::string candidates_path, truth_path, remote, source_tag = "external";
    annotate->add_option("--space", space_path)->required();
    annotate->add_option("--candidates", candidates_path)->required();
    annotate->add_option("--truth", truth_path, "reward table path (exact annotator)");
    annotate->add_option("--remote", remote, "host:port of a remote annotator");
    annotate->add_option("--source", source_tag, "off-policy|on-policy|external");
    annotate->add_option("--out", out_path)->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a policy on a preference dataset");
    std::string dataset_path, initial_spec = "uniform", reference_spec = "initial",
                method_name = "dpo", label_mode = "hard", manifest_path;
    double beta = 0.1, lr = 1.0, delta = 1.0, lambda = 0.0;
    int steps = 1000;
    train_cmd->add_option("--space", space_path)->required();
    train_cmd->add_option("--dataset", dataset_path)->required();
    train_cmd->add_option("--initial", initial_spec, "policy path or 'uniform'");
    train_cmd->add_option("--reference", reference_spec, "policy path or 'initial'");
    train_cmd->add_option("--method", method_name, "dpo|slic");
    train_cmd->add_option("--beta", beta);
    train_cmd->add_option("--steps", steps);
    train_cmd->add_option("--lr", lr);
    train_cmd->add_option("--label-mode", label_mode, "hard|soft");
    train_cmd->add_option("--delta", delta);
    train_cmd->add_option("--lambda", lambda);
    train_cmd->add_option("--out", out_path)->required();
    train_cmd->add_option("--manifest", manifest_path);

    // boundary
    auto* boundary = app.add_subcommand("boundary", "Boundary measurement between two datasets");
    std::string on_path, off_path;
    boundary->add_option("--space", space_path)->required();
    boundary->add_option("--on", on_path)->required();
    boundary->add_option("--off", off_path)->required();
    boundary->add_option("--truth", truth_path);
    boundary->add_option("--remote", remote);
    boundary->add_option("--out", out_path);

    // consistency
    auto* consistency = app.add_subcommand("consistency", "Preference consistency between two BT distributions");
    std::string p1_policy, p1_reward, p2_policy, p2_reward;
    consistency->add_option("--space", space_path)->required();
    consistency->add_option("--p1-policy", p1_policy);
    consistency->add_option("--p1-reward", p1_reward);
    consistency->add_option("--p2-policy", p2_policy);
    consistency->add_option("--p2-reward", p2_reward);

    // protocol
    auto* protocol = app.add_subcommand("protocol", "Run the full multi-iteration protocol");
    std::string config_path;
    std::vector<std::string> overrides;
    protocol->add_option("--config", config_path)->required();
    protocol->add_option("--set", overrides, "config override key.path=value");
    protocol->add_option("--out", out_path, "manifest output path");

    // report
    auto* report = app.add_subcommand("report", "Render a manifest as json or csv");
    std::string format = "csv";
    report->add_option("--manifest", manifest_path)->required();
    report->add_option("--format", format, "json|csv");

    CLI11_PARSE(app, argc, argv);

    if (gen_space->parsed()) {
        spit(out_path, preflab::build_space(n_prompts, n_responses, seed).to_json());
        return 0;
    }

    if (gen_truth->parsed()) {
        auto space = load_space(space_path);
        spit(out_path, random_truth(space, seed, scale).to_json());
        return 0;
    }

    if (sample->parsed()) {
        auto space = load_space(space_path);
        auto policy = load_policy(policy_path, space);
        Rng rng(seed);
        std::ostringstream lines;
        for (const auto& prompt : space->prompts()) {
            ordered_json j;
            j["prompt"] = prompt;
            j["candidates"] = policy.sample(prompt, k, rng);
            lines << j.dump() << '\n';
        }
        spit(out_path, lines.str());
        return 0;
    }

    if (annotate->parsed()) {
        auto space = load_space(space_path);
        auto ann = make_annotator(truth_path, remote, space);
        preflab::Source source = preflab::source_from_string(source_tag);
        preflab::PreferenceDataset ds;
        ds.space_ref = space->ref();
        std::istringstream in(slurp(candidates_path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = ordered_json::parse(line);
            std::string prompt = j.at("prompt").get<std::string>();
            auto cands = j.at("candidates").get<std::vector<std::string>>();
            if (cands.size() != 2)
                throw preflab::InputError("need exactly 2 candidates per prompt");
            preflab::PreferenceRecord rec;
            rec.prompt = prompt;
            rec.source = source;
            rec.annotator = ann->name();
            if (cands[0] == cands[1]) {
                rec.chosen = cands[0];
                rec.rejected = cands[1];
                rec.p_chosen = 0.5;
            } else {
                double p = ann->annotate(prompt, cands[0], cands[1]);
                rec.chosen = p >= 0.5 ? cands[0] : cands[1];
                rec.rejected = p >= 0.5 ? cands[1] : cands[0];
                if (p == 0.5) rec.p_chosen = 0.5;
            }
            ds.records.push_back(std::move(rec));
        }
        std::ostringstream sink;
        std::size_t n = preflab::write_jsonl(ds, sink);
        spit(out_path, sink.str());
        std::cout << "wrote " << n << " records, dataset_hash "
                  << preflab::dataset_hash(ds) << '\n';
        return 0;
    }

    if (train_cmd->parsed()) {
        auto space = load_space(space_path);
        std::istringstream ds_in(slurp(dataset_path));
        auto dataset = preflab::read_jsonl(ds_in, *space);
        auto initial = load_policy(initial_spec, space);
        auto reference = reference_spec == "initial"
                             ? initial
                             : load_policy(reference_spec, space);
        preflab::TrainMethod method;
        if (method_name == "dpo") {
            preflab::DpoConfig cfg;
            cfg.beta = beta;
            cfg.steps = steps;
            cfg.learning_rate = lr;
            if (label_mode != "hard" && label_mode != "soft")
                throw preflab::ConfigError("label-mode must be hard or soft");
            cfg.label_mode = label_mode == "hard" ? preflab::LabelMode::hard
                                                  : preflab::LabelMode::soft;
            method = cfg;
        } else if (method_name == "slic") {
            preflab::SlicConfig cfg;
            cfg.delta = delta;
            cfg.lambda = lambda;
            cfg.steps = steps;
            cfg.learning_rate = lr;
            method = cfg;
        } else {
            throw preflab::ConfigError("method must be dpo or slic");
        }
        auto result = preflab::train(initial, reference, dataset, method);
        spit(out_path, result.final.to_json());
        if (!manifest_path.empty()) {
            ordered_json m;
            m["method"] = method_name;
            m["config"] = {{"beta", beta}, {"steps", steps},
                           {"learning_rate", lr}, {"label_mode", label_mode},
                           {"delta", delta}, {"lambda", lambda}};
            m["dataset_hash"] = preflab::dataset_hash(dataset);
            m["initial_policy_hash"] = preflab::hash_hex(initial.to_json());
            m["final_policy"] = ordered_json::parse(result.final.to_json());
            m["loss_trace"] = result.loss_trace;
            spit(manifest_path, m.dump());
        }
        std::cout << "final_loss " << result.loss_trace.back() << '\n';
        return 0;
    }

    if (boundary->parsed()) {
        auto space = load_space(space_path);
        auto ann = make_annotator(truth_path, remote, space);
        std::istringstream on_in(slurp(on_path)), off_in(slurp(off_path));
        auto pc_on = preflab::read_jsonl(on_in, *space);
        auto pc_off = preflab::read_jsonl(off_in, *space);
        auto rep = preflab::boundary_measure(pc_on, pc_off, *ann);
        std::cout << rep.to_json() << '\n';
        if (!out_path.empty()) spit(out_path, rep.to_json());
        return 0;
    }

    if (consistency->parsed()) {
        auto space = load_space(space_path);
        auto make_pref = [&](const std::string& pol, const std::string& rew) {
            if (!pol.empty())
                return preflab::BTPreference::from_policy(
                    preflab::TabularPolicy::from_json(slurp(pol), space));
            if (!rew.empty())
                return preflab::BTPreference::from_reward(
                    preflab::RewardTable::from_json(slurp(rew), space));
            throw preflab::ConfigError("each side needs a policy or reward");
        };
        double value = preflab::preference_consistency(
            make_pref(p1_policy, p1_reward), make_pref(p2_policy, p2_reward),
            *space);
        std::cout << value << '\n';
        return 0;
    }

    if (protocol->parsed()) {
        ordered_json cfg = ordered_json::parse(slurp(config_path));
        for (const auto& o : overrides) apply_override(cfg, o);
        auto setup = setup_from_config(cfg);
        auto manifest = preflab::run_protocol(setup.inputs, setup.options);
        if (!out_path.empty()) spit(out_path, manifest.to_json());
        std::cout << "manifest_hash " << manifest.content_hash() << '\n';
        return 0;
    }

    if (report->parsed()) {
        ordered_json m = ordered_json::parse(slurp(manifest_path));
        // re-hydrate the manifest fields the report needs
        preflab::RunManifest manifest;
        manifest.config_hash = m.value("config_hash", std::string{});
        for (const auto& it : m.at("iterations")) {
            preflab::IterationRecord rec;
            rec.data_source = preflab::data_choice_from_string(
                it.at("data_source").get<std::string>());
            rec.dataset_hash = it.value("dataset_hash", std::string{});
            rec.initial_policy_hash =
                it.value("initial_policy_hash", std::string{});
            if (!it.at("final_policy").is_null())
                rec.final_policy_json = it.at("final_policy").dump();
            rec.loss_trace = it.value("loss_trace", std::vector<double>{});
            if (it.contains("boundary") && !it.at("boundary").is_null()) {
                const auto& b = it.at("boundary");
                rec.boundary = preflab::make_boundary_report(
                    b.at("v_on").get<long>(), b.at("v_off").get<long>());
            }
            const auto& mt = it.at("metrics");
            rec.metrics.objective = mt.value("objective",
                std::numeric_limits<double>::quiet_NaN());
            rec.metrics.exact_boundary_score = mt.value("exact_boundary_score",
                std::numeric_limits<double>::quiet_NaN());
            rec.metrics.expected_reward = mt.value("expected_reward",
                std::numeric_limits<double>::quiet_NaN());
            rec.metrics.kl_to_prev = mt.value("kl_to_prev",
                std::numeric_limits<double>::quiet_NaN());
            manifest.iterations.push_back(std::move(rec));
        }
        manifest.wall_clock_seconds = m.value("wall_clock_seconds", 0.0);
        if (format != "json" && format != "csv")
            throw preflab::ConfigError("format must be json or csv");
        std::cout << preflab::emit_report(manifest,
                                          format == "json"
                                              ? preflab::ReportFormat::json
                                              : preflab::ReportFormat::csv);
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const preflab::BoundaryStraddle& e) {
        std::cerr << "refused: " << e.what() << '\n'
                  << e.report.to_json() << '\n';
        return 4;
    } catch (const preflab::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const preflab::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const preflab::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}
