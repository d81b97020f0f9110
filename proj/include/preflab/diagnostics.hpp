#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/space.hpp"

namespace preflab {

enum class Stage { preference_injection, preference_fine_tuning };

std::string to_string(Stage s);

// 95% Wilson score interval for `successes` out of `total`.
std::pair<double, double> wilson_interval(long successes, long total);

struct BoundaryReport {
    long v_on = 0;
    long v_off = 0;
    double boundary_score = 0.0;  // v_on / (v_on + v_off)
    Stage stage = Stage::preference_fine_tuning;
    Source recommended_data = Source::on_policy;  // PC_on or PC_off
    std::pair<double, double> wilson_95{0.0, 1.0};

    // True when the 95% interval contains 0.5; callers may refuse to act.
    bool straddles() const {
        return wilson_95.first <= 0.5 && 0.5 <= wilson_95.second;
    }

    std::string to_json() const;
};

// Builds the verdict from raw counts; ties go to fine-tuning.
BoundaryReport make_boundary_report(long v_on, long v_off);

// Cross-compares the two candidates of each shared prompt (4 comparisons
// per prompt). Annotator output > 0.5 counts to v_on, otherwise to v_off.
BoundaryReport boundary_measure(const PreferenceDataset& pc_on,
                                const PreferenceDataset& pc_off,
                                const Annotator& annotator);

// Exact expectation the sampled boundary score estimates:
// E_{y~pi_on, y'~pi_off} I[truth(y > y')], averaged over prompts.
// Self-pairs are included with I[0.5 > 0.5] = 0.
double exact_boundary_score(const TabularPolicy& pi_on,
                            const TabularPolicy& pi_off,
                            const BTPreference& truth, const Space& space);

// Agreement rate of thresholded preferences over all ordered pairs y1 != y2.
// The indicator maps [0, 0.5] to 0 and (0.5, 1] to 1.
double preference_consistency(const BTPreference& p1, const BTPreference& p2,
                              const Space& space);

struct ConsistencyConfig {
    int m = 2;  // samples from pi_theta per prompt
    int n = 2;  // samples from pi_off per prompt
    static constexpr double threshold = 0.5;

    void validate() const;
};

using SampleSet = std::map<std::string, std::vector<std::string>>;

enum class ConsistencySide { on, off };

// Simplified per-side consistency estimator under the distinct-distribution
// assumption; macro-averaged over prompts.
double simplified_consistency(const SampleSet& samples_on,
                              const SampleSet& samples_off,
                              const BTPreference& truth, ConsistencySide side);

// Fraction of cross pairs where pi_on assigns strictly higher log-prob to
// the on-policy sample; empirical support for the distinct assumption.
double distinct_rate(const TabularPolicy& pi_on, const SampleSet& samples_on,
                     const SampleSet& samples_off);

struct DivIntra {
    double mean = 0.0;
    std::vector<double> per_record;
};

// Signed mean log-prob gap between chosen and rejected candidates.
DivIntra div_intra(const TabularPolicy& policy,
                   const PreferenceDataset& dataset);

enum class Pairing { chosen_vs_chosen, random_vs_chosen };

// Fraction of shared prompts where dataset_a's selected candidate is
// strictly preferred over dataset_b's. Exactly 0.5 is not a win.
double quality_win_rate(const PreferenceDataset& dataset_a,
                        const PreferenceDataset& dataset_b,
                        const Annotator& annotator, Pairing pairing, Rng& rng);

}  // namespace preflab
