#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "preflab/space.hpp"

namespace preflab {

using Rng = std::mt19937_64;

// Uniform double in [0,1) from the top 53 bits of the generator.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double log_sum_exp(const Eigen::VectorXd& v);

// Per-prompt categorical distribution stored as unnormalized logits.
// Immutable; normalized log-probabilities are cached at construction.
class TabularPolicy {
  public:
    TabularPolicy(std::shared_ptr<const Space> space,
                  std::vector<Eigen::VectorXd> logits);

    static TabularPolicy uniform(std::shared_ptr<const Space> space);

    const Space& space() const { return *space_; }
    const std::shared_ptr<const Space>& space_ptr() const { return space_; }

    const Eigen::VectorXd& logits(int prompt) const { return logits_[prompt]; }
    const std::vector<Eigen::VectorXd>& all_logits() const { return logits_; }

    // log pi(y|x) in nats.
    double log_prob(int prompt, int response) const {
        return log_probs_[prompt](response);
    }
    double log_prob(const std::string& prompt, const std::string& response) const;

    const Eigen::VectorXd& row_log_probs(int prompt) const {
        return log_probs_[prompt];
    }
    Eigen::VectorXd probs(int prompt) const {
        return log_probs_[prompt].array().exp();
    }

    // One categorical draw by inverse CDF.
    int sample_index(int prompt, Rng& rng) const;
    std::vector<std::string> sample(const std::string& prompt, int k,
                                    Rng& rng) const;

    // Returns a policy with i.i.d. N(0, magnitude^2) noise added to logits.
    TabularPolicy perturb(double magnitude, Rng& rng) const;

    std::string to_json() const;
    static TabularPolicy from_json(const std::string& doc,
                                   std::shared_ptr<const Space> space);

  private:
    std::shared_ptr<const Space> space_;
    std::vector<Eigen::VectorXd> logits_;
    std::vector<Eigen::VectorXd> log_probs_;
};

// Exact KL(p || q) for one prompt, in nats.
double kl_divergence(const TabularPolicy& p, const TabularPolicy& q,
                     const std::string& prompt);
double kl_divergence(const TabularPolicy& p, const TabularPolicy& q,
                     int prompt);

// Throws ShapeError unless both policies reference the same space.
void require_same_space(const TabularPolicy& p, const TabularPolicy& q);

}  // namespace preflab
