#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "preflab/policy.hpp"
#include "preflab/space.hpp"

namespace preflab {

// Numerically stable logistic function.
inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

// Real-valued score per (prompt, response) cell. Scale-free; preferences
// depend only on within-prompt differences.
class RewardTable {
  public:
    RewardTable(std::shared_ptr<const Space> space,
                std::vector<Eigen::VectorXd> reward);

    static RewardTable zeros(std::shared_ptr<const Space> space);

    const Space& space() const { return *space_; }
    const std::shared_ptr<const Space>& space_ptr() const { return space_; }

    double reward(int prompt, int response) const {
        return reward_[prompt](response);
    }
    double reward(const std::string& prompt, const std::string& response) const;
    const Eigen::VectorXd& row(int prompt) const { return reward_[prompt]; }
    const std::vector<Eigen::VectorXd>& rows() const { return reward_; }

    std::string to_json() const;
    static RewardTable from_json(const std::string& doc,
                                 std::shared_ptr<const Space> space);

  private:
    std::shared_ptr<const Space> space_;
    std::vector<Eigen::VectorXd> reward_;
};

// Bradley-Terry preference distribution, derived either from a reward table
// (sigma of the reward gap) or from a policy (sigma of the log-prob gap).
// Antisymmetry prefer(x,a,b) + prefer(x,b,a) = 1 holds exactly: pairs are
// evaluated in canonical index order and the swapped case is complemented.
class BTPreference {
  public:
    static BTPreference from_reward(RewardTable reward);
    static BTPreference from_policy(TabularPolicy policy);

    const Space& space() const;
    const std::shared_ptr<const Space>& space_ptr() const;

    double prefer(int prompt, int y1, int y2) const;
    double prefer(const std::string& prompt, const std::string& y1,
                  const std::string& y2) const;

  private:
    explicit BTPreference(std::variant<RewardTable, TabularPolicy> origin)
        : origin_(std::move(origin)) {}
    double score(int prompt, int response) const;

    std::variant<RewardTable, TabularPolicy> origin_;
};

double bt_from_reward(const RewardTable& reward, const std::string& prompt,
                      const std::string& y1, const std::string& y2);
double bt_from_policy(const TabularPolicy& policy, const std::string& prompt,
                      const std::string& y1, const std::string& y2);

// Arbitrary pairwise preference table indexed by (prompt, y1, y2).
using PreferenceFn = std::function<double(int, int, int)>;

// Recovers the unique policy whose log-prob gaps reproduce `pref` under the
// BT link. Requires strictly interior preferences; throws DomainError on a
// 0/1 pair and ConsistencyError if the table is not BT-consistent.
TabularPolicy reconstruct_pi_g(const PreferenceFn& pref,
                               std::shared_ptr<const Space> space);
TabularPolicy reconstruct_pi_g(const BTPreference& pref,
                               std::shared_ptr<const Space> space);

struct FitRewardConfig {
    int steps = 2000;
    double learning_rate = 0.5;
    double l2 = 0.0;
};

struct FitRewardResult {
    RewardTable table;
    double final_loss = 0.0;
    double grad_norm = 0.0;
};

// Full-batch gradient descent on the BT negative log-likelihood
// (cross-entropy against p_chosen when a soft label is present).
// The returned table is gauge-fixed to per-prompt mean zero.
FitRewardResult fit_reward(const PreferenceDataset& dataset,
                           std::shared_ptr<const Space> space,
                           const FitRewardConfig& config);

class Annotator {
  public:
    virtual ~Annotator() = default;
    // Probability that `a` is preferred over `b`, in [0,1].
    virtual double annotate(const std::string& prompt, const std::string& a,
                            const std::string& b) const = 0;
    virtual std::string name() const = 0;
    virtual int max_in_flight() const { return 1; }
};

class ExactBTAnnotator final : public Annotator {
  public:
    explicit ExactBTAnnotator(BTPreference pref, std::string tag = "exact-bt")
        : pref_(std::move(pref)), tag_(std::move(tag)) {}

    double annotate(const std::string& prompt, const std::string& a,
                    const std::string& b) const override {
        return pref_.prefer(prompt, a, b);
    }
    std::string name() const override { return tag_; }
    const BTPreference& preference() const { return pref_; }
    int max_in_flight() const override { return 64; }

  private:
    BTPreference pref_;
    std::string tag_;
};

struct RemoteAnnotatorConfig {
    std::string host;            // e.g. "127.0.0.1"
    int port = 80;
    double timeout_seconds = 5.0;
    int max_retries = 2;         // retries after the first attempt
    int max_in_flight = 4;
};

// HTTP annotator speaking POST /compare with a JSON body. Out-of-range or
// malformed responses raise ProtocolError; transport failures and 5xx are
// retried, then raise AnnotationError carrying the pair.
class RemoteAnnotator final : public Annotator {
  public:
    explicit RemoteAnnotator(RemoteAnnotatorConfig config)
        : config_(std::move(config)) {}

    double annotate(const std::string& prompt, const std::string& a,
                    const std::string& b) const override;
    std::string name() const override;
    int max_in_flight() const override { return config_.max_in_flight; }

  private:
    RemoteAnnotatorConfig config_;
};

}  // namespace preflab
