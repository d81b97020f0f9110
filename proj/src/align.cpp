#include "preflab/align.hpp"

#include <cmath>

namespace preflab {

namespace {

// log(1 + exp(z)) without overflow; -log sigma(m) == softplus(-m).
double softplus(double z) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

struct Pair {
    int prompt, chosen, rejected;
    double p;         // label (1.0 for hard records)
    bool degenerate;  // chosen == rejected
};

std::vector<Pair> index_records(const PreferenceDataset& dataset,
                                const Space& space) {
    dataset.validate(space);
    std::vector<Pair> out;
    out.reserve(dataset.records.size());
    for (const auto& rec : dataset.records) {
        int p = space.prompt_index(rec.prompt);
        int w = space.response_index(p, rec.chosen);
        int l = space.response_index(p, rec.rejected);
        out.push_back({p, w, l, rec.p_chosen.value_or(1.0), w == l});
    }
    return out;
}

LogitGradient zero_gradient(const Space& space) {
    LogitGradient g;
    g.reserve(space.num_prompts());
    for (int i = 0; i < space.num_prompts(); ++i)
        g.push_back(Eigen::VectorXd::Zero(space.num_responses(i)));
    return g;
}

double dpo_margin(const TabularPolicy& policy, const TabularPolicy& reference,
                  const Pair& pr, double beta) {
    double dw = policy.log_prob(pr.prompt, pr.chosen) -
                reference.log_prob(pr.prompt, pr.chosen);
    double dl = policy.log_prob(pr.prompt, pr.rejected) -
                reference.log_prob(pr.prompt, pr.rejected);
    return beta * (dw - dl);
}

double dpo_record_loss(double margin, double p, LabelMode mode) {
    if (mode == LabelMode::hard) return softplus(-margin);
    return p * softplus(-margin) + (1.0 - p) * softplus(margin);
}

// Mean loss and gradient in one pass; gradient accumulation may be skipped.
double dpo_batch(const TabularPolicy& policy, const TabularPolicy& reference,
                 const std::vector<Pair>& pairs, double beta, LabelMode mode,
                 LogitGradient* grad) {
    double loss = 0.0;
    std::size_t used = 0;
    for (const auto& pr : pairs) {
        if (mode == LabelMode::hard && pr.degenerate) continue;
        double m = dpo_margin(policy, reference, pr, beta);
        double label = mode == LabelMode::hard ? 1.0 : pr.p;
        loss += dpo_record_loss(m, label, mode);
        if (grad) {
            // d loss / d margin, times d margin / d logit; the softmax
            // terms cancel so only the two named logits move.
            double coeff = beta * (sigmoid(m) - label);
            (*grad)[pr.prompt](pr.chosen) += coeff;
            (*grad)[pr.prompt](pr.rejected) -= coeff;
        }
        ++used;
    }
    if (used == 0) return 0.0;
    double inv = 1.0 / static_cast<double>(used);
    if (grad)
        for (auto& row : *grad) row *= inv;
    return loss * inv;
}

struct SlicTargets {
    std::vector<int> target;  // response index per prompt, -1 if absent
};

SlicTargets resolve_targets(const SlicConfig& config, const Space& space) {
    SlicTargets t;
    t.target.assign(space.num_prompts(), -1);
    for (const auto& [prompt, response] : config.reference_targets) {
        int p = space.prompt_index(prompt);
        t.target[p] = space.response_index(p, response);
    }
    return t;
}

double slic_record_loss(const TabularPolicy& policy, const Pair& pr,
                        const SlicConfig& config, int target) {
    double gap = policy.log_prob(pr.prompt, pr.chosen) -
                 policy.log_prob(pr.prompt, pr.rejected);
    double loss = std::max(0.0, config.delta - gap);
    if (config.lambda > 0) {
        if (target < 0)
            throw ConfigError("lambda > 0 but no reference target for prompt");
        loss -= config.lambda * policy.log_prob(pr.prompt, target);
    }
    return loss;
}

double slic_batch(const TabularPolicy& policy, const std::vector<Pair>& pairs,
                  const SlicConfig& config, const SlicTargets& targets,
                  LogitGradient* grad) {
    double loss = 0.0;
    for (const auto& pr : pairs) {
        int target = targets.target[pr.prompt];
        loss += slic_record_loss(policy, pr, config, target);
        if (!grad) continue;
        double gap = policy.log_prob(pr.prompt, pr.chosen) -
                     policy.log_prob(pr.prompt, pr.rejected);
        if (config.delta - gap > 0.0) {  // strict: subgradient 0 at the kink
            (*grad)[pr.prompt](pr.chosen) -= 1.0;
            (*grad)[pr.prompt](pr.rejected) += 1.0;
        }
        if (config.lambda > 0) {
            Eigen::VectorXd probs = policy.probs(pr.prompt);
            (*grad)[pr.prompt] += config.lambda * probs;
            (*grad)[pr.prompt](target) -= config.lambda;
        }
    }
    if (pairs.empty()) return 0.0;
    double inv = 1.0 / static_cast<double>(pairs.size());
    if (grad)
        for (auto& row : *grad) row *= inv;
    return loss * inv;
}

}  // namespace

void DpoConfig::validate() const {
    if (beta <= 0) throw ConfigError("beta must be positive");
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (steps < 0) throw ConfigError("steps must be non-negative");
}

void SlicConfig::validate() const {
    if (delta < 0) throw ConfigError("delta must be non-negative");
    if (lambda < 0) throw ConfigError("lambda must be non-negative");
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (steps < 0) throw ConfigError("steps must be non-negative");
}

double dpo_loss(const TabularPolicy& policy, const TabularPolicy& reference,
                const PreferenceRecord& record, double beta, LabelMode mode) {
    require_same_space(policy, reference);
    if (beta <= 0) throw ConfigError("beta must be positive");
    if (mode == LabelMode::soft && !record.p_chosen)
        throw ValidationError("soft label mode requires p_chosen");
    const Space& space = policy.space();
    int p = space.prompt_index(record.prompt);
    Pair pr{p, space.response_index(p, record.chosen),
            space.response_index(p, record.rejected),
            record.p_chosen.value_or(1.0), false};
    double m = dpo_margin(policy, reference, pr, beta);
    return dpo_record_loss(m, mode == LabelMode::hard ? 1.0 : pr.p, mode);
}

LogitGradient dpo_grad(const TabularPolicy& policy,
                       const TabularPolicy& reference,
                       const PreferenceDataset& dataset, double beta,
                       LabelMode mode) {
    require_same_space(policy, reference);
    if (beta <= 0) throw ConfigError("beta must be positive");
    auto pairs = index_records(dataset, policy.space());
    if (mode == LabelMode::soft)
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (!dataset.records[i].p_chosen)
                throw ValidationError("soft label mode requires p_chosen");
    LogitGradient grad = zero_gradient(policy.space());
    dpo_batch(policy, reference, pairs, beta, mode, &grad);
    return grad;
}

double slic_loss(const TabularPolicy& policy, const PreferenceRecord& record,
                 const SlicConfig& config) {
    config.validate();
    const Space& space = policy.space();
    int p = space.prompt_index(record.prompt);
    Pair pr{p, space.response_index(p, record.chosen),
            space.response_index(p, record.rejected), 1.0, false};
    auto targets = resolve_targets(config, space);
    return slic_record_loss(policy, pr, config, targets.target[p]);
}

LogitGradient slic_grad(const TabularPolicy& policy,
                        const PreferenceDataset& dataset,
                        const SlicConfig& config) {
    config.validate();
    auto pairs = index_records(dataset, policy.space());
    auto targets = resolve_targets(config, policy.space());
    if (config.lambda > 0)
        for (const auto& pr : pairs)
            if (targets.target[pr.prompt] < 0)
                throw ConfigError("lambda > 0 but no reference target for "
                                  "prompt " + policy.space().prompt(pr.prompt));
    LogitGradient grad = zero_gradient(policy.space());
    slic_batch(policy, pairs, config, targets, &grad);
    return grad;
}

double implicit_reward_margin(const TabularPolicy& policy,
                              const TabularPolicy& reference,
                              const std::string& prompt, const std::string& y1,
                              const std::string& y2, double beta) {
    require_same_space(policy, reference);
    const Space& space = policy.space();
    int p = space.prompt_index(prompt);
    int i = space.response_index(p, y1);
    int j = space.response_index(p, y2);
    double d1 = policy.log_prob(p, i) - reference.log_prob(p, i);
    double d2 = policy.log_prob(p, j) - reference.log_prob(p, j);
    return beta * (d1 - d2);
}

RewardTable implicit_reward(const TabularPolicy& policy,
                            const TabularPolicy& reference, double beta) {
    require_same_space(policy, reference);
    std::vector<Eigen::VectorXd> rows;
    rows.reserve(policy.space().num_prompts());
    for (int i = 0; i < policy.space().num_prompts(); ++i)
        rows.push_back(beta *
                       (policy.row_log_probs(i) - reference.row_log_probs(i)));
    return RewardTable(policy.space_ptr(), std::move(rows));
}

double expected_reward(const TabularPolicy& policy,
                       const RewardTable& reward) {
    if (reward.space().ref() != policy.space().ref())
        throw ShapeError("reward table space does not match policy");
    double total = 0.0;
    int n = policy.space().num_prompts();
    for (int x = 0; x < n; ++x) total += policy.probs(x).dot(reward.row(x));
    return total / n;
}

double alignment_objective(const TabularPolicy& policy,
                           const TabularPolicy& reference,
                           const RewardTable& reward, double beta) {
    require_same_space(policy, reference);
    if (reward.space().ref() != policy.space().ref())
        throw ShapeError("reward table space does not match policies");
    double total = 0.0;
    int n = policy.space().num_prompts();
    for (int x = 0; x < n; ++x) {
        Eigen::VectorXd probs = policy.probs(x);
        total += probs.dot(reward.row(x)) - beta * kl_divergence(policy, reference, x);
    }
    return total / n;
}

ClosedFormSolution closed_form_optimum(const TabularPolicy& reference,
                                       const RewardTable& reward, double beta) {
    if (beta <= 0) throw ConfigError("beta must be positive");
    if (reward.space().ref() != reference.space().ref())
        throw ShapeError("reward table space does not match reference policy");
    std::vector<Eigen::VectorXd> logits;
    std::vector<double> log_z;
    int n = reference.space().num_prompts();
    logits.reserve(n);
    log_z.reserve(n);
    for (int x = 0; x < n; ++x) {
        Eigen::VectorXd row = reference.row_log_probs(x) + reward.row(x) / beta;
        log_z.push_back(log_sum_exp(row));
        logits.push_back(std::move(row));
    }
    return ClosedFormSolution{
        TabularPolicy(reference.space_ptr(), std::move(logits)),
        std::move(log_z)};
}

TrainResult train(const TabularPolicy& initial, const TabularPolicy& reference,
                  const PreferenceDataset& dataset, const TrainMethod& method) {
    require_same_space(initial, reference);
    std::visit([](const auto& cfg) { cfg.validate(); }, method);
    auto pairs = index_records(dataset, initial.space());

    const bool is_dpo = std::holds_alternative<DpoConfig>(method);
    const DpoConfig* dpo = std::get_if<DpoConfig>(&method);
    const SlicConfig* slic = std::get_if<SlicConfig>(&method);
    SlicTargets targets;
    if (slic) {
        targets = resolve_targets(*slic, initial.space());
        if (slic->lambda > 0)
            for (const auto& pr : pairs)
                if (targets.target[pr.prompt] < 0)
                    throw ConfigError(
                        "lambda > 0 but no reference target for prompt " +
                        initial.space().prompt(pr.prompt));
    }
    if (dpo && dpo->label_mode == LabelMode::soft)
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (!dataset.records[i].p_chosen)
                throw ValidationError("soft label mode requires p_chosen");

    int steps = is_dpo ? dpo->steps : slic->steps;
    double lr = is_dpo ? dpo->learning_rate : slic->learning_rate;

    TabularPolicy policy = initial;
    TrainResult result{policy, {}, {}};
    result.loss_trace.reserve(steps + 1);
    result.per_pair_trace.reserve(steps + 1);

    double initial_loss = 0.0;
    for (int step = 0; step <= steps; ++step) {
        LogitGradient grad = zero_gradient(policy.space());
        double loss = is_dpo
                          ? dpo_batch(policy, reference, pairs, dpo->beta,
                                      dpo->label_mode, &grad)
                          : slic_batch(policy, pairs, *slic, targets, &grad);
        if (step == 0) initial_loss = loss;

        result.loss_trace.push_back(loss);
        std::vector<PairLogProb> lp;
        lp.reserve(pairs.size());
        for (const auto& pr : pairs)
            lp.push_back({policy.log_prob(pr.prompt, pr.chosen),
                          policy.log_prob(pr.prompt, pr.rejected)});
        result.per_pair_trace.push_back(std::move(lp));

        if (!std::isfinite(loss) || loss > 10.0 * initial_loss + 1e-12)
            throw DivergenceError("training diverged at step " +
                                      std::to_string(step) + " (loss " +
                                      std::to_string(loss) + ", initial " +
                                      std::to_string(initial_loss) + ")",
                                  step);
        if (step == steps) break;

        std::vector<Eigen::VectorXd> logits = policy.all_logits();
        for (int x = 0; x < policy.space().num_prompts(); ++x)
            logits[x] -= lr * grad[x];
        policy = TabularPolicy(policy.space_ptr(), std::move(logits));
    }
    result.final = std::move(policy);
    return result;
}

}  // namespace preflab
