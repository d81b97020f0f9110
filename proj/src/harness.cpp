#include "preflab/harness.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "preflab/hash.hpp"

namespace preflab {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kResampleRetries = 16;

PreferenceDataset make_pc(const TabularPolicy& policy, const Space& space,
                          const Annotator& annotator, Rng& rng, Source tag) {
    if (policy.space().ref() != space.ref())
        throw ShapeError("policy does not match the sampling space");
    PreferenceDataset out;
    out.space_ref = space.ref();
    out.records.reserve(space.num_prompts());
    for (int x = 0; x < space.num_prompts(); ++x) {
        int a = policy.sample_index(x, rng);
        int b = policy.sample_index(x, rng);
        for (int r = 0; r < kResampleRetries && a == b; ++r) {
            a = policy.sample_index(x, rng);
            b = policy.sample_index(x, rng);
        }
        PreferenceRecord rec;
        rec.prompt = space.prompt(x);
        rec.source = tag;
        rec.annotator = annotator.name();
        const std::string& ya = space.response(x, a);
        const std::string& yb = space.response(x, b);
        if (a == b) {
            // retry budget exhausted; keep the prompt with a degenerate
            // 0.5 soft label so per-prompt record counts stay uniform
            rec.chosen = ya;
            rec.rejected = yb;
            rec.p_chosen = 0.5;
        } else {
            double p = annotator.annotate(rec.prompt, ya, yb);
            if (p > 0.5) {
                rec.chosen = ya;
                rec.rejected = yb;
            } else if (p < 0.5) {
                rec.chosen = yb;
                rec.rejected = ya;
            } else {
                rec.chosen = ya;
                rec.rejected = yb;
                rec.p_chosen = 0.5;
            }
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

ordered_json method_to_json(const TrainMethod& method) {
    ordered_json j;
    if (const auto* dpo = std::get_if<DpoConfig>(&method)) {
        j["name"] = "dpo";
        j["beta"] = dpo->beta;
        j["steps"] = dpo->steps;
        j["learning_rate"] = dpo->learning_rate;
        j["label_mode"] = dpo->label_mode == LabelMode::hard ? "hard" : "soft";
    } else {
        const auto& slic = std::get<SlicConfig>(method);
        j["name"] = "slic";
        j["delta"] = slic.delta;
        j["lambda"] = slic.lambda;
        j["steps"] = slic.steps;
        j["learning_rate"] = slic.learning_rate;
        j["reference_targets"] = slic.reference_targets;
    }
    return j;
}

std::string config_hash(const ProtocolInputs& inputs,
                        const ProtocolOptions& options) {
    ordered_json j;
    j["space"] = inputs.space->ref();
    j["truth"] = hash_hex(inputs.truth.to_json());
    j["pi_off"] = hash_hex(inputs.pi_off.to_json());
    j["initial"] = hash_hex(inputs.initial.to_json());
    std::vector<std::string> iters;
    for (auto c : options.iterations) iters.push_back(to_string(c));
    j["iterations"] = iters;
    j["method"] = method_to_json(options.method);
    j["samples_per_prompt"] = options.samples_per_prompt;
    j["sampling_seed"] = options.sampling_seed;
    j["boundary_check"] = {{"enabled", options.boundary_check.enabled},
                           {"refuse_on_straddle",
                            options.boundary_check.refuse_on_straddle}};
    j["metrics_beta"] = options.metrics_beta;
    return hash_hex(j.dump());
}

}  // namespace

PreferenceDataset make_pc_on(const TabularPolicy& policy, const Space& space,
                             const Annotator& annotator, Rng& rng) {
    return make_pc(policy, space, annotator, rng, Source::on_policy);
}

PreferenceDataset make_pc_off(const TabularPolicy& pi_off, const Space& space,
                              const Annotator& annotator, Rng& rng) {
    return make_pc(pi_off, space, annotator, rng, Source::off_policy);
}

std::string to_string(DataChoice c) {
    return c == DataChoice::PC_off ? "PC_off" : "PC_on";
}

DataChoice data_choice_from_string(const std::string& s) {
    if (s == "PC_off") return DataChoice::PC_off;
    if (s == "PC_on") return DataChoice::PC_on;
    throw ConfigError("unknown data source: " + s + " (want PC_off or PC_on)");
}

void ProtocolOptions::validate() const {
    if (iterations.empty()) throw ConfigError("iteration list must be nonempty");
    if (samples_per_prompt != 2)
        throw ConfigError("samples_per_prompt is fixed at 2");
    if (metrics_beta <= 0) throw ConfigError("metrics_beta must be positive");
    std::visit([](const auto& cfg) { cfg.validate(); }, method);
}

std::string dataset_hash(const PreferenceDataset& dataset) {
    std::ostringstream buf;
    write_jsonl(dataset, buf);
    return hash_hex(buf.str());
}

RunManifest run_protocol(const ProtocolInputs& inputs,
                         const ProtocolOptions& options) {
    options.validate();
    if (inputs.truth.space().ref() != inputs.space->ref() ||
        inputs.pi_off.space().ref() != inputs.space->ref() ||
        inputs.initial.space().ref() != inputs.space->ref())
        throw ShapeError("protocol inputs reference different spaces");

    auto t0 = std::chrono::steady_clock::now();
    RunManifest manifest;
    manifest.config_hash = config_hash(inputs, options);

    ExactBTAnnotator annotator(BTPreference::from_reward(inputs.truth),
                               "truth-bt");
    BTPreference truth_pref = BTPreference::from_reward(inputs.truth);

    TabularPolicy current = inputs.initial;
    for (std::size_t i = 0; i < options.iterations.size(); ++i) {
        IterationRecord rec;
        rec.data_source = options.iterations[i];
        rec.initial_policy_hash = hash_hex(current.to_json());

        Rng rng_on(options.sampling_seed + 2 * i);
        Rng rng_off(options.sampling_seed + 2 * i + 1);
        PreferenceDataset pc_on =
            make_pc_on(current, *inputs.space, annotator, rng_on);
        PreferenceDataset pc_off =
            make_pc_off(inputs.pi_off, *inputs.space, annotator, rng_off);

        if (options.boundary_check.enabled) {
            BoundaryReport report = boundary_measure(pc_on, pc_off, annotator);
            if (options.boundary_check.refuse_on_straddle &&
                report.straddles())
                throw BoundaryStraddle(
                    "boundary interval straddles 0.5 at iteration " +
                        std::to_string(i) + "; refusing stage call",
                    report);
            rec.boundary = report;
        }

        const PreferenceDataset& dataset =
            rec.data_source == DataChoice::PC_off ? pc_off : pc_on;
        rec.dataset_hash = dataset_hash(dataset);

        std::optional<TrainResult> trained;
        try {
            // reference model is the iteration's initial checkpoint
            trained = train(current, current, dataset, options.method);
        } catch (const DivergenceError& e) {
            throw DivergenceError("iteration " + std::to_string(i) + ": " +
                                      e.what(),
                                  e.step);
        }
        rec.final_policy_json = trained->final.to_json();
        rec.loss_trace = std::move(trained->loss_trace);

        rec.metrics.objective = alignment_objective(
            trained->final, current, inputs.truth, options.metrics_beta);
        rec.metrics.expected_reward =
            expected_reward(trained->final, inputs.truth);
        rec.metrics.exact_boundary_score = exact_boundary_score(
            trained->final, inputs.pi_off, truth_pref, *inputs.space);
        double kl = 0.0;
        for (int x = 0; x < inputs.space->num_prompts(); ++x)
            kl += kl_divergence(trained->final, current, x);
        rec.metrics.kl_to_prev = kl / inputs.space->num_prompts();

        current = std::move(trained->final);
        manifest.iterations.push_back(std::move(rec));
    }

    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return manifest;
}

std::string RunManifest::to_json() const {
    ordered_json j;
    j["config_hash"] = config_hash;
    ordered_json iters = ordered_json::array();
    for (const auto& rec : iterations) {
        ordered_json it;
        it["data_source"] = to_string(rec.data_source);
        it["dataset_hash"] = rec.dataset_hash;
        it["boundary"] = rec.boundary
                             ? ordered_json::parse(rec.boundary->to_json())
                             : ordered_json(nullptr);
        it["initial_policy_hash"] = rec.initial_policy_hash;
        it["final_policy"] = rec.final_policy_json.empty()
                                 ? ordered_json(nullptr)
                                 : ordered_json::parse(rec.final_policy_json);
        it["loss_trace"] = rec.loss_trace;
        it["metrics"] = {{"objective", rec.metrics.objective},
                         {"exact_boundary_score",
                          rec.metrics.exact_boundary_score},
                         {"expected_reward", rec.metrics.expected_reward},
                         {"kl_to_prev", rec.metrics.kl_to_prev}};
        iters.push_back(std::move(it));
    }
    j["iterations"] = std::move(iters);
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j.dump();
}

std::string RunManifest::content_hash() const {
    ordered_json j = ordered_json::parse(to_json());
    j["wall_clock_seconds"] = 0.0;
    return hash_hex(j.dump());
}

std::string emit_report(const RunManifest& manifest, ReportFormat format) {
    std::vector<std::string> missing;
    if (manifest.config_hash.empty()) missing.push_back("config_hash");
    if (manifest.iterations.empty()) missing.push_back("iterations");
    for (std::size_t i = 0; i < manifest.iterations.size(); ++i) {
        const auto& rec = manifest.iterations[i];
        std::string at = "iterations[" + std::to_string(i) + "].";
        if (rec.dataset_hash.empty()) missing.push_back(at + "dataset_hash");
        if (rec.final_policy_json.empty())
            missing.push_back(at + "final_policy");
        if (rec.loss_trace.empty()) missing.push_back(at + "loss_trace");
        if (!std::isfinite(rec.metrics.objective) ||
            !std::isfinite(rec.metrics.expected_reward) ||
            !std::isfinite(rec.metrics.kl_to_prev) ||
            !std::isfinite(rec.metrics.exact_boundary_score))
            missing.push_back(at + "metrics");
    }
    if (!missing.empty()) {
        std::string msg = "incomplete manifest, missing:";
        for (const auto& m : missing) msg += " " + m;
        throw ReportError(msg);
    }

    if (format == ReportFormat::json) return manifest.to_json();

    std::ostringstream csv;
    csv << "iteration,data_source,boundary_score,stage,objective,"
           "expected_reward,kl_to_prev\n";
    csv.precision(17);
    for (std::size_t i = 0; i < manifest.iterations.size(); ++i) {
        const auto& rec = manifest.iterations[i];
        csv << i << ',' << to_string(rec.data_source) << ',';
        if (rec.boundary)
            csv << rec.boundary->boundary_score << ','
                << to_string(rec.boundary->stage) << ',';
        else
            csv << "-,-,";
        csv << rec.metrics.objective << ',' << rec.metrics.expected_reward
            << ',' << rec.metrics.kl_to_prev << '\n';
    }
    return csv.str();
}

}  // namespace preflab
