#include "preflab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

namespace preflab {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Stage s) {
    return s == Stage::preference_injection ? "preference_injection"
                                            : "preference_fine_tuning";
}

std::pair<double, double> wilson_interval(long successes, long total) {
    if (total <= 0) return {0.0, 1.0};
    constexpr double z = 1.959963984540054;  // 97.5th normal percentile
    double n = static_cast<double>(total);
    double p = static_cast<double>(successes) / n;
    double z2 = z * z;
    double denom = 1.0 + z2 / n;
    double center = (p + z2 / (2.0 * n)) / denom;
    double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

BoundaryReport make_boundary_report(long v_on, long v_off) {
    if (v_on < 0 || v_off < 0) throw InputError("negative comparison counts");
    BoundaryReport r;
    r.v_on = v_on;
    r.v_off = v_off;
    long total = v_on + v_off;
    r.boundary_score = total > 0 ? static_cast<double>(v_on) / total : 0.0;
    r.stage = v_off > v_on ? Stage::preference_injection
                           : Stage::preference_fine_tuning;
    r.recommended_data = r.stage == Stage::preference_injection
                             ? Source::off_policy
                             : Source::on_policy;
    r.wilson_95 = wilson_interval(v_on, total);
    return r;
}

std::string BoundaryReport::to_json() const {
    ordered_json j;
    j["v_on"] = v_on;
    j["v_off"] = v_off;
    j["boundary_score"] = boundary_score;
    j["stage"] = preflab::to_string(stage);
    j["recommended_data"] = preflab::to_string(recommended_data);
    j["wilson_95"] = {wilson_95.first, wilson_95.second};
    return j.dump();
}

namespace {

// One record per prompt, duplicates rejected.
std::map<std::string, const PreferenceRecord*> key_by_prompt(
    const PreferenceDataset& ds, const char* label) {
    std::map<std::string, const PreferenceRecord*> out;
    for (const auto& rec : ds.records) {
        if (!out.emplace(rec.prompt, &rec).second)
            throw InputError(std::string("duplicate prompt ") + rec.prompt +
                             " in " + label + " dataset");
    }
    return out;
}

struct CompareTask {
    const std::string* prompt;
    const std::string* on;
    const std::string* off;
};

// Runs annotator.annotate over the task list, fanning out up to the
// annotator's in-flight limit. Results are positional.
std::vector<double> annotate_all(const std::vector<CompareTask>& tasks,
                                 const Annotator& annotator) {
    std::vector<double> probs(tasks.size());
    int workers = std::min<int>(annotator.max_in_flight(),
                                static_cast<int>(tasks.size()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            probs[i] = annotator.annotate(*tasks[i].prompt, *tasks[i].on,
                                          *tasks[i].off);
        return probs;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < tasks.size(); i += workers)
                    probs[i] = annotator.annotate(*tasks[i].prompt,
                                                  *tasks[i].on, *tasks[i].off);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return probs;
}

}  // namespace

BoundaryReport boundary_measure(const PreferenceDataset& pc_on,
                                const PreferenceDataset& pc_off,
                                const Annotator& annotator) {
    auto on = key_by_prompt(pc_on, "on-policy");
    auto off = key_by_prompt(pc_off, "off-policy");

    std::vector<CompareTask> tasks;
    for (const auto& [prompt, rec_on] : on) {
        auto it = off.find(prompt);
        if (it == off.end()) continue;
        const PreferenceRecord* rec_off = it->second;
        for (const std::string* y : {&rec_on->chosen, &rec_on->rejected})
            for (const std::string* yp :
                 {&rec_off->chosen, &rec_off->rejected})
                tasks.push_back({&rec_on->prompt, y, yp});
    }
    if (tasks.empty())
        throw InputError("datasets share no prompts");

    std::vector<double> probs = annotate_all(tasks, annotator);
    long v_on = 0, v_off = 0;
    for (double p : probs)
        (p > 0.5 ? v_on : v_off) += 1;  // exact ties count to v_off
    return make_boundary_report(v_on, v_off);
}

double exact_boundary_score(const TabularPolicy& pi_on,
                            const TabularPolicy& pi_off,
                            const BTPreference& truth, const Space& space) {
    require_same_space(pi_on, pi_off);
    if (truth.space().ref() != space.ref() ||
        pi_on.space().ref() != space.ref())
        throw ShapeError("boundary score inputs reference different spaces");
    double total = 0.0;
    for (int x = 0; x < space.num_prompts(); ++x) {
        Eigen::VectorXd p_on = pi_on.probs(x);
        Eigen::VectorXd p_off = pi_off.probs(x);
        double s = 0.0;
        for (int y = 0; y < space.num_responses(x); ++y)
            for (int yp = 0; yp < space.num_responses(x); ++yp)
                if (truth.prefer(x, y, yp) > 0.5) s += p_on(y) * p_off(yp);
        total += s;
    }
    return total / space.num_prompts();
}

double preference_consistency(const BTPreference& p1, const BTPreference& p2,
                              const Space& space) {
    if (p1.space().ref() != space.ref() || p2.space().ref() != space.ref())
        throw ShapeError("preference distributions reference different spaces");
    long agree = 0, pairs = 0;
    for (int x = 0; x < space.num_prompts(); ++x) {
        int n = space.num_responses(x);
        for (int y1 = 0; y1 < n; ++y1)
            for (int y2 = 0; y2 < n; ++y2) {
                if (y1 == y2) continue;
                bool i1 = p1.prefer(x, y1, y2) > 0.5;
                bool i2 = p2.prefer(x, y1, y2) > 0.5;
                agree += (i1 == i2);
                ++pairs;
            }
    }
    return static_cast<double>(agree) / pairs;
}

void ConsistencyConfig::validate() const {
    if (m < 1 || n < 1) throw ConfigError("m and n must be >= 1");
}

double simplified_consistency(const SampleSet& samples_on,
                              const SampleSet& samples_off,
                              const BTPreference& truth,
                              ConsistencySide side) {
    double total = 0.0;
    int prompts = 0;
    for (const auto& [prompt, on_list] : samples_on) {
        auto it = samples_off.find(prompt);
        if (it == samples_off.end()) continue;
        const auto& off_list = it->second;
        if (on_list.empty() || off_list.empty())
            throw InputError("empty sample list for prompt " + prompt);
        long hits = 0;
        for (const auto& y_on : on_list)
            for (const auto& y_off : off_list) {
                double p = side == ConsistencySide::on
                               ? truth.prefer(prompt, y_on, y_off)
                               : truth.prefer(prompt, y_off, y_on);
                hits += (p > 0.5);
            }
        total += static_cast<double>(hits) /
                 (static_cast<double>(on_list.size()) * off_list.size());
        ++prompts;
    }
    if (prompts == 0) throw InputError("sample sets share no prompts");
    return total / prompts;
}

double distinct_rate(const TabularPolicy& pi_on, const SampleSet& samples_on,
                     const SampleSet& samples_off) {
    double total = 0.0;
    int prompts = 0;
    for (const auto& [prompt, on_list] : samples_on) {
        auto it = samples_off.find(prompt);
        if (it == samples_off.end()) continue;
        const auto& off_list = it->second;
        if (on_list.empty() || off_list.empty())
            throw InputError("empty sample list for prompt " + prompt);
        long hits = 0;
        for (const auto& y_on : on_list)
            for (const auto& y_off : off_list)
                hits += pi_on.log_prob(prompt, y_on) >
                        pi_on.log_prob(prompt, y_off);
        total += static_cast<double>(hits) /
                 (static_cast<double>(on_list.size()) * off_list.size());
        ++prompts;
    }
    if (prompts == 0) throw InputError("sample sets share no prompts");
    return total / prompts;
}

DivIntra div_intra(const TabularPolicy& policy,
                   const PreferenceDataset& dataset) {
    if (dataset.records.empty()) throw InputError("empty dataset");
    DivIntra out;
    out.per_record.reserve(dataset.records.size());
    for (const auto& rec : dataset.records) {
        double d = policy.log_prob(rec.prompt, rec.chosen) -
                   policy.log_prob(rec.prompt, rec.rejected);
        out.per_record.push_back(d);
        out.mean += d;
    }
    out.mean /= static_cast<double>(out.per_record.size());
    return out;
}

double quality_win_rate(const PreferenceDataset& dataset_a,
                        const PreferenceDataset& dataset_b,
                        const Annotator& annotator, Pairing pairing,
                        Rng& rng) {
    auto a = key_by_prompt(dataset_a, "first");
    auto b = key_by_prompt(dataset_b, "second");
    std::vector<CompareTask> tasks;
    for (const auto& [prompt, rec_a] : a) {
        auto it = b.find(prompt);
        if (it == b.end()) continue;
        const std::string* cand_a = &rec_a->chosen;
        if (pairing == Pairing::random_vs_chosen && uniform01(rng) < 0.5)
            cand_a = &rec_a->rejected;
        tasks.push_back({&rec_a->prompt, cand_a, &it->second->chosen});
    }
    if (tasks.empty()) throw InputError("datasets share no prompts");
    std::vector<double> probs = annotate_all(tasks, annotator);
    long wins = 0;
    for (double p : probs) wins += (p > 0.5);
    return static_cast<double>(wins) / static_cast<double>(tasks.size());
}

}  // namespace preflab
