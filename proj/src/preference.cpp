#include "preflab/preference.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace preflab {

using ordered_json = nlohmann::ordered_json;

RewardTable::RewardTable(std::shared_ptr<const Space> space,
                         std::vector<Eigen::VectorXd> reward)
    : space_(std::move(space)), reward_(std::move(reward)) {
    if (static_cast<int>(reward_.size()) != space_->num_prompts())
        throw ShapeError("reward row count does not match prompt count");
    for (int i = 0; i < space_->num_prompts(); ++i) {
        if (reward_[i].size() != space_->num_responses(i))
            throw ShapeError("reward row length mismatch at prompt " +
                             space_->prompt(i));
        if (!reward_[i].allFinite())
            throw ValidationError("non-finite reward at prompt " +
                                  space_->prompt(i));
    }
}

RewardTable RewardTable::zeros(std::shared_ptr<const Space> space) {
    std::vector<Eigen::VectorXd> rows;
    rows.reserve(space->num_prompts());
    for (int i = 0; i < space->num_prompts(); ++i)
        rows.push_back(Eigen::VectorXd::Zero(space->num_responses(i)));
    return RewardTable(std::move(space), std::move(rows));
}

double RewardTable::reward(const std::string& prompt,
                           const std::string& response) const {
    int p = space_->prompt_index(prompt);
    return reward_[p](space_->response_index(p, response));
}

std::string RewardTable::to_json() const {
    ordered_json doc;
    doc["space_ref"] = space_->ref();
    ordered_json rows = ordered_json::object();
    for (int i = 0; i < space_->num_prompts(); ++i) {
        ordered_json row = ordered_json::object();
        for (int j = 0; j < space_->num_responses(i); ++j)
            row[space_->response(i, j)] = reward_[i](j);
        rows[space_->prompt(i)] = std::move(row);
    }
    doc["reward"] = std::move(rows);
    return doc.dump();
}

RewardTable RewardTable::from_json(const std::string& doc,
                                   std::shared_ptr<const Space> space) {
    ordered_json j;
    try {
        j = ordered_json::parse(doc);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("reward snapshot: ") + e.what());
    }
    std::string ref = j.at("space_ref").get<std::string>();
    if (ref != space->ref())
        throw ShapeError("reward snapshot space_ref " + ref +
                         " does not match space " + space->ref());
    const auto& rows = j.at("reward");
    std::vector<Eigen::VectorXd> reward;
    reward.reserve(space->num_prompts());
    for (int i = 0; i < space->num_prompts(); ++i) {
        const std::string& pid = space->prompt(i);
        if (!rows.contains(pid))
            throw ValidationError("reward snapshot missing prompt " + pid);
        Eigen::VectorXd v(space->num_responses(i));
        for (int k = 0; k < space->num_responses(i); ++k)
            v(k) = rows.at(pid).at(space->response(i, k)).get<double>();
        reward.push_back(std::move(v));
    }
    return RewardTable(std::move(space), std::move(reward));
}

BTPreference BTPreference::from_reward(RewardTable reward) {
    return BTPreference(std::variant<RewardTable, TabularPolicy>(
        std::in_place_index<0>, std::move(reward)));
}

BTPreference BTPreference::from_policy(TabularPolicy policy) {
    return BTPreference(std::variant<RewardTable, TabularPolicy>(
        std::in_place_index<1>, std::move(policy)));
}

const Space& BTPreference::space() const {
    return std::visit([](const auto& o) -> const Space& { return o.space(); },
                      origin_);
}

const std::shared_ptr<const Space>& BTPreference::space_ptr() const {
    return std::visit(
        [](const auto& o) -> const std::shared_ptr<const Space>& {
            return o.space_ptr();
        },
        origin_);
}

double BTPreference::score(int prompt, int response) const {
    if (origin_.index() == 0)
        return std::get<0>(origin_).reward(prompt, response);
    return std::get<1>(origin_).log_prob(prompt, response);
}

double BTPreference::prefer(int prompt, int y1, int y2) const {
    if (y1 == y2) return 0.5;
    if (y1 > y2) return 1.0 - prefer(prompt, y2, y1);
    return sigmoid(score(prompt, y1) - score(prompt, y2));
}

double BTPreference::prefer(const std::string& prompt, const std::string& y1,
                            const std::string& y2) const {
    int p = space().prompt_index(prompt);
    return prefer(p, space().response_index(p, y1),
                  space().response_index(p, y2));
}

double bt_from_reward(const RewardTable& reward, const std::string& prompt,
                      const std::string& y1, const std::string& y2) {
    return BTPreference::from_reward(reward).prefer(prompt, y1, y2);
}

double bt_from_policy(const TabularPolicy& policy, const std::string& prompt,
                      const std::string& y1, const std::string& y2) {
    return BTPreference::from_policy(policy).prefer(prompt, y1, y2);
}

TabularPolicy reconstruct_pi_g(const PreferenceFn& pref,
                               std::shared_ptr<const Space> space) {
    std::vector<Eigen::VectorXd> logits;
    logits.reserve(space->num_prompts());
    for (int x = 0; x < space->num_prompts(); ++x) {
        int n = space->num_responses(x);
        Eigen::VectorXd log_pi(n);
        for (int y2 = 0; y2 < n; ++y2) {
            double denom = 0.0;
            for (int y1 = 0; y1 < n; ++y1) {
                double p = pref(x, y1, y2);
                if (p <= 0.0 || p >= 1.0)
                    throw DomainError(
                        "degenerate preference at (" + space->prompt(x) +
                        ", " + space->response(x, y1) + ", " +
                        space->response(x, y2) + "): " + std::to_string(p));
                denom += p / (1.0 - p);
            }
            log_pi(y2) = -std::log(denom);
        }
        logits.push_back(std::move(log_pi));
    }
    TabularPolicy out(space, std::move(logits));

    // BT consistency: the reconstructed log-prob gaps must reproduce the
    // input preferences in log-odds; a violation means the cocycle
    // f(a,b) f(b,c) = f(a,c) fails and the reconstruction is reference-
    // point dependent.
    double max_violation = 0.0;
    for (int x = 0; x < space->num_prompts(); ++x) {
        int n = space->num_responses(x);
        for (int y1 = 0; y1 < n; ++y1)
            for (int y2 = y1 + 1; y2 < n; ++y2) {
                double p = pref(x, y1, y2);
                double want = std::log(p / (1.0 - p));
                double got = out.log_prob(x, y1) - out.log_prob(x, y2);
                max_violation = std::max(max_violation, std::abs(got - want));
            }
    }
    if (max_violation > 1e-6)
        throw ConsistencyError("preference table is not BT-consistent; max "
                               "log-odds violation " +
                                   std::to_string(max_violation),
                               max_violation);
    return out;
}

TabularPolicy reconstruct_pi_g(const BTPreference& pref,
                               std::shared_ptr<const Space> space) {
    if (pref.space().ref() != space->ref())
        throw ShapeError("preference and space do not match");
    return reconstruct_pi_g(
        [&pref](int x, int y1, int y2) { return pref.prefer(x, y1, y2); },
        space);
}

FitRewardResult fit_reward(const PreferenceDataset& dataset,
                           std::shared_ptr<const Space> space,
                           const FitRewardConfig& config) {
    if (config.learning_rate <= 0)
        throw ConfigError("learning_rate must be positive");
    if (config.steps < 0) throw ConfigError("steps must be non-negative");
    if (config.l2 < 0) throw ConfigError("l2 must be non-negative");
    dataset.validate(*space);

    struct Item {
        int prompt, chosen, rejected;
        double p;
    };
    std::vector<Item> items;
    items.reserve(dataset.records.size());
    for (const auto& rec : dataset.records) {
        int p = space->prompt_index(rec.prompt);
        items.push_back({p, space->response_index(p, rec.chosen),
                         space->response_index(p, rec.rejected),
                         rec.p_chosen.value_or(1.0)});
    }

    std::vector<Eigen::VectorXd> r;
    r.reserve(space->num_prompts());
    for (int i = 0; i < space->num_prompts(); ++i)
        r.push_back(Eigen::VectorXd::Zero(space->num_responses(i)));
    std::vector<Eigen::VectorXd> grad = r;

    double inv_n = items.empty() ? 0.0 : 1.0 / items.size();
    double loss = 0.0, gnorm = 0.0;
    for (int step = 0; step <= config.steps; ++step) {
        loss = 0.0;
        for (auto& g : grad) g.setZero();
        for (const auto& it : items) {
            double d = r[it.prompt](it.chosen) - r[it.prompt](it.rejected);
            double s = sigmoid(d);
            // cross-entropy of sigma(d) against the label
            loss -= inv_n * (it.p * std::log(std::max(s, 1e-300)) +
                             (1.0 - it.p) * std::log(std::max(1.0 - s, 1e-300)));
            double coeff = inv_n * (s - it.p);
            grad[it.prompt](it.chosen) += coeff;
            grad[it.prompt](it.rejected) -= coeff;
        }
        if (config.l2 > 0) {
            for (int i = 0; i < space->num_prompts(); ++i) {
                loss += config.l2 * r[i].squaredNorm();
                grad[i] += 2.0 * config.l2 * r[i];
            }
        }
        gnorm = 0.0;
        for (const auto& g : grad) gnorm += g.squaredNorm();
        gnorm = std::sqrt(gnorm);
        if (step == config.steps) break;
        for (int i = 0; i < space->num_prompts(); ++i)
            r[i] -= config.learning_rate * grad[i];
    }

    // gauge fix: rewards are identified only up to a per-prompt constant
    for (auto& row : r) row.array() -= row.mean();
    return FitRewardResult{RewardTable(std::move(space), std::move(r)), loss,
                           gnorm};
}

}  // namespace preflab
