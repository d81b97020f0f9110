#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "preflab/align.hpp"
#include "preflab/diagnostics.hpp"
#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/space.hpp"

namespace preflab {

// Raised when the boundary interval straddles 0.5 and the config asked to
// refuse rather than call a stage.
struct BoundaryStraddle : Error {
    BoundaryReport report;
    BoundaryStraddle(const std::string& msg, BoundaryReport r)
        : Error(msg), report(std::move(r)) {}
};

// Samples two candidates per prompt from `policy`, annotates them, and emits
// one record per prompt tagged on-policy. Identical pairs are resampled up
// to a bounded retry count, then emitted as degenerate 0.5 soft labels.
PreferenceDataset make_pc_on(const TabularPolicy& policy, const Space& space,
                             const Annotator& annotator, Rng& rng);

// Same mechanics sampling from the abstract off-policy distribution; the
// same annotator must be used for both datasets.
PreferenceDataset make_pc_off(const TabularPolicy& pi_off, const Space& space,
                              const Annotator& annotator, Rng& rng);

enum class DataChoice { PC_off, PC_on };

std::string to_string(DataChoice c);
DataChoice data_choice_from_string(const std::string& s);

struct BoundaryCheckConfig {
    bool enabled = true;
    bool refuse_on_straddle = false;
};

// Resolved inputs of one protocol run; the CLI materializes these from
// paths or generator recipes.
struct ProtocolInputs {
    std::shared_ptr<const Space> space;
    RewardTable truth;        // ground-truth reward r*
    TabularPolicy pi_off;     // abstract off-policy candidate source
    TabularPolicy initial;    // starting checkpoint
};

struct ProtocolOptions {
    std::vector<DataChoice> iterations;
    TrainMethod method = DpoConfig{};
    int samples_per_prompt = 2;
    std::uint64_t sampling_seed = 0;
    BoundaryCheckConfig boundary_check;
    double metrics_beta = 0.1;  // beta for the objective metric

    void validate() const;
};

struct IterationMetrics {
    double objective = 0.0;
    double exact_boundary_score = 0.0;
    double expected_reward = 0.0;
    double kl_to_prev = 0.0;
};

struct IterationRecord {
    DataChoice data_source = DataChoice::PC_off;
    std::string dataset_hash;
    std::optional<BoundaryReport> boundary;
    std::string initial_policy_hash;
    std::string final_policy_json;
    std::vector<double> loss_trace;
    IterationMetrics metrics;
};

struct RunManifest {
    std::string config_hash;
    std::vector<IterationRecord> iterations;
    double wall_clock_seconds = 0.0;

    std::string to_json() const;

    // Hash of the manifest with the wall-clock field zeroed; identical for
    // identical configs and seeds.
    std::string content_hash() const;
};

std::string dataset_hash(const PreferenceDataset& dataset);

// The two-iteration-style protocol: per iteration, sample fresh PC_on from
// the current checkpoint and PC_off from pi_off, optionally measure the
// boundary, train on the configured source with the iteration's initial
// checkpoint as reference, and record evaluation metrics.
RunManifest run_protocol(const ProtocolInputs& inputs,
                         const ProtocolOptions& options);

enum class ReportFormat { json, csv };

// CSV rows (iteration, data_source, boundary_score, stage, objective,
// expected_reward, kl_to_prev) or the full JSON manifest.
std::string emit_report(const RunManifest& manifest, ReportFormat format);

}  // namespace preflab
