#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "preflab/policy.hpp"
#include "preflab/preference.hpp"
#include "preflab/space.hpp"

namespace preflab {

enum class LabelMode { hard, soft };

struct DpoConfig {
    double beta = 0.1;
    int steps = 1000;
    double learning_rate = 1.0;
    LabelMode label_mode = LabelMode::hard;

    void validate() const;
};

struct SlicConfig {
    double delta = 1.0;   // ranking margin
    double lambda = 0.0;  // cross-entropy regularization weight
    std::map<std::string, std::string> reference_targets;  // prompt -> y_ref
    int steps = 1000;
    double learning_rate = 1.0;

    void validate() const;
};

// Gradient with respect to policy logits, one row per prompt.
using LogitGradient = std::vector<Eigen::VectorXd>;

double dpo_loss(const TabularPolicy& policy, const TabularPolicy& reference,
                const PreferenceRecord& record, double beta,
                LabelMode mode = LabelMode::hard);

// Exact gradient of the mean dpo_loss over the dataset. Hard mode skips
// degenerate identical-pair records; in soft mode they contribute zero.
LogitGradient dpo_grad(const TabularPolicy& policy,
                       const TabularPolicy& reference,
                       const PreferenceDataset& dataset, double beta,
                       LabelMode mode = LabelMode::hard);

double slic_loss(const TabularPolicy& policy, const PreferenceRecord& record,
                 const SlicConfig& config);

// Subgradient 0 is taken on the hinge term exactly at the kink.
LogitGradient slic_grad(const TabularPolicy& policy,
                        const PreferenceDataset& dataset,
                        const SlicConfig& config);

// beta * (log ratio(y1) - log ratio(y2)); the log Z(x) term of the implicit
// reward cancels and is never computed.
double implicit_reward_margin(const TabularPolicy& policy,
                              const TabularPolicy& reference,
                              const std::string& prompt,
                              const std::string& y1, const std::string& y2,
                              double beta);

// Full implicit reward table beta * log(pi/pi_ref), defined up to a
// per-prompt constant.
RewardTable implicit_reward(const TabularPolicy& policy,
                            const TabularPolicy& reference, double beta);

// Mean over prompts of E_pi[r], by enumeration.
double expected_reward(const TabularPolicy& policy, const RewardTable& reward);

// Mean over prompts of E_pi[r] - beta * KL(pi || pi_ref), by enumeration.
double alignment_objective(const TabularPolicy& policy,
                           const TabularPolicy& reference,
                           const RewardTable& reward, double beta);

struct ClosedFormSolution {
    TabularPolicy policy;
    std::vector<double> log_partition;  // log Z(x), indexed by prompt
};

// pi*(y|x) proportional to pi_ref(y|x) exp(r(x,y)/beta), with max-shifted
// exponentials inside the partition sum.
ClosedFormSolution closed_form_optimum(const TabularPolicy& reference,
                                       const RewardTable& reward, double beta);

struct PairLogProb {
    double chosen;
    double rejected;
};

struct TrainResult {
    TabularPolicy final;
    std::vector<double> loss_trace;                        // per step, incl. step 0
    std::vector<std::vector<PairLogProb>> per_pair_trace;  // [step][record]
};

using TrainMethod = std::variant<DpoConfig, SlicConfig>;

// Deterministic full-batch gradient descent. Aborts with DivergenceError if
// the loss exceeds 10x its initial value.
TrainResult train(const TabularPolicy& initial, const TabularPolicy& reference,
                  const PreferenceDataset& dataset, const TrainMethod& method);

}  // namespace preflab
