#include "preflab/policy.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace preflab {

using ordered_json = nlohmann::ordered_json;

double log_sum_exp(const Eigen::VectorXd& v) {
    double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

TabularPolicy::TabularPolicy(std::shared_ptr<const Space> space,
                             std::vector<Eigen::VectorXd> logits)
    : space_(std::move(space)), logits_(std::move(logits)) {
    if (static_cast<int>(logits_.size()) != space_->num_prompts())
        throw ShapeError("logit row count does not match prompt count");
    log_probs_.reserve(logits_.size());
    for (int i = 0; i < space_->num_prompts(); ++i) {
        if (logits_[i].size() != space_->num_responses(i))
            throw ShapeError("logit row length mismatch at prompt " +
                             space_->prompt(i));
        if (!logits_[i].allFinite())
            throw ValidationError("non-finite logit at prompt " +
                                  space_->prompt(i));
        log_probs_.push_back(logits_[i].array() - log_sum_exp(logits_[i]));
    }
}

TabularPolicy TabularPolicy::uniform(std::shared_ptr<const Space> space) {
    std::vector<Eigen::VectorXd> logits;
    logits.reserve(space->num_prompts());
    for (int i = 0; i < space->num_prompts(); ++i)
        logits.push_back(Eigen::VectorXd::Zero(space->num_responses(i)));
    return TabularPolicy(std::move(space), std::move(logits));
}

double TabularPolicy::log_prob(const std::string& prompt,
                               const std::string& response) const {
    int p = space_->prompt_index(prompt);
    return log_prob(p, space_->response_index(p, response));
}

int TabularPolicy::sample_index(int prompt, Rng& rng) const {
    double u = uniform01(rng);
    const Eigen::VectorXd& lp = log_probs_[prompt];
    double acc = 0.0;
    int last = static_cast<int>(lp.size()) - 1;
    for (int j = 0; j < last; ++j) {
        acc += std::exp(lp(j));
        if (u < acc) return j;
    }
    return last;
}

std::vector<std::string> TabularPolicy::sample(const std::string& prompt,
                                               int k, Rng& rng) const {
    if (k < 1) throw ConfigError("sample count must be >= 1");
    int p = space_->prompt_index(prompt);
    std::vector<std::string> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i)
        out.push_back(space_->response(p, sample_index(p, rng)));
    return out;
}

TabularPolicy TabularPolicy::perturb(double magnitude, Rng& rng) const {
    if (magnitude < 0) throw ConfigError("perturbation magnitude must be >= 0");
    if (magnitude == 0) return *this;
    std::normal_distribution<double> noise(0.0, magnitude);
    std::vector<Eigen::VectorXd> logits = logits_;
    for (auto& row : logits)
        for (Eigen::Index j = 0; j < row.size(); ++j) row(j) += noise(rng);
    return TabularPolicy(space_, std::move(logits));
}

std::string TabularPolicy::to_json() const {
    ordered_json doc;
    doc["space_ref"] = space_->ref();
    ordered_json rows = ordered_json::object();
    for (int i = 0; i < space_->num_prompts(); ++i) {
        ordered_json row = ordered_json::object();
        for (int j = 0; j < space_->num_responses(i); ++j)
            row[space_->response(i, j)] = logits_[i](j);
        rows[space_->prompt(i)] = std::move(row);
    }
    doc["logits"] = std::move(rows);
    return doc.dump();
}

TabularPolicy TabularPolicy::from_json(const std::string& doc,
                                       std::shared_ptr<const Space> space) {
    ordered_json j;
    try {
        j = ordered_json::parse(doc);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("policy snapshot: ") + e.what());
    }
    std::string ref = j.at("space_ref").get<std::string>();
    if (ref != space->ref())
        throw ShapeError("policy snapshot space_ref " + ref +
                         " does not match space " + space->ref());
    const auto& rows = j.at("logits");
    std::vector<Eigen::VectorXd> logits;
    logits.reserve(space->num_prompts());
    for (int i = 0; i < space->num_prompts(); ++i) {
        const std::string& pid = space->prompt(i);
        if (!rows.contains(pid))
            throw ValidationError("policy snapshot missing prompt " + pid);
        const auto& row = rows.at(pid);
        Eigen::VectorXd v(space->num_responses(i));
        for (int k = 0; k < space->num_responses(i); ++k) {
            const std::string& rid = space->response(i, k);
            if (!row.contains(rid))
                throw ValidationError("policy snapshot missing response " +
                                      rid + " under prompt " + pid);
            v(k) = row.at(rid).get<double>();
        }
        logits.push_back(std::move(v));
    }
    return TabularPolicy(std::move(space), std::move(logits));
}

void require_same_space(const TabularPolicy& p, const TabularPolicy& q) {
    if (p.space().ref() != q.space().ref())
        throw ShapeError("policies reference different spaces");
}

double kl_divergence(const TabularPolicy& p, const TabularPolicy& q,
                     int prompt) {
    require_same_space(p, q);
    const Eigen::VectorXd& lp = p.row_log_probs(prompt);
    const Eigen::VectorXd& lq = q.row_log_probs(prompt);
    return (lp.array().exp() * (lp - lq).array()).sum();
}

double kl_divergence(const TabularPolicy& p, const TabularPolicy& q,
                     const std::string& prompt) {
    return kl_divergence(p, q, p.space().prompt_index(prompt));
}

}  // namespace preflab
