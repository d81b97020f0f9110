#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>

#include "preflab/align.hpp"

using namespace preflab;

namespace {

std::shared_ptr<const Space> space_of(int prompts, int responses) {
    return std::make_shared<Space>(build_space(prompts, responses, 0));
}

TabularPolicy random_policy(std::shared_ptr<const Space> sp, Rng& rng,
                            double scale = 1.0) {
    return TabularPolicy::uniform(sp).perturb(scale, rng);
}

RewardTable random_reward(std::shared_ptr<const Space> sp, Rng& rng,
                          double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<Eigen::VectorXd> rows;
    for (int i = 0; i < sp->num_prompts(); ++i) {
        Eigen::VectorXd v(sp->num_responses(i));
        for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = dist(rng);
        rows.push_back(std::move(v));
    }
    return RewardTable(sp, std::move(rows));
}

PreferenceDataset random_dataset(std::shared_ptr<const Space> sp, Rng& rng,
                                 int per_prompt, bool soft) {
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    for (int x = 0; x < sp->num_prompts(); ++x)
        for (int k = 0; k < per_prompt; ++k) {
            int n = sp->num_responses(x);
            int a = static_cast<int>(uniform01(rng) * n);
            int b = static_cast<int>(uniform01(rng) * (n - 1));
            if (b >= a) ++b;
            PreferenceRecord rec;
            rec.prompt = sp->prompt(x);
            rec.chosen = sp->response(x, a);
            rec.rejected = sp->response(x, b);
            if (soft) rec.p_chosen = 0.05 + 0.9 * uniform01(rng);
            rec.annotator = "t";
            ds.records.push_back(std::move(rec));
        }
    return ds;
}

TabularPolicy with_bumped_logit(const TabularPolicy& p, int x, int y,
                                double h) {
    auto logits = p.all_logits();
    logits[x](y) += h;
    return TabularPolicy(p.space_ptr(), std::move(logits));
}

double mean_dpo_loss(const TabularPolicy& p, const TabularPolicy& ref,
                     const PreferenceDataset& ds, double beta, LabelMode mode) {
    double total = 0.0;
    for (const auto& rec : ds.records) total += dpo_loss(p, ref, rec, beta, mode);
    return total / ds.records.size();
}

double mean_slic_loss(const TabularPolicy& p, const PreferenceDataset& ds,
                      const SlicConfig& cfg) {
    double total = 0.0;
    for (const auto& rec : ds.records) total += slic_loss(p, rec, cfg);
    return total / ds.records.size();
}

// max relative error between analytic and central-difference gradients
template <typename LossFn>
double max_fd_rel_error(const TabularPolicy& p, const LogitGradient& grad,
                        LossFn loss_at, double h) {
    double worst = 0.0;
    for (int x = 0; x < p.space().num_prompts(); ++x)
        for (int y = 0; y < p.space().num_responses(x); ++y) {
            double fd = (loss_at(with_bumped_logit(p, x, y, h)) -
                         loss_at(with_bumped_logit(p, x, y, -h))) /
                        (2 * h);
            // untouched logits have an exactly zero gradient; the floor keeps
            // finite-difference cancellation noise from dominating there
            double denom = std::max({std::abs(fd), std::abs(grad[x](y)), 1e-4});
            worst = std::max(worst, std::abs(fd - grad[x](y)) / denom);
        }
    return worst;
}

}  // namespace

TEST_CASE("dpo loss is ln 2 when policy equals reference") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    CHECK(dpo_loss(p, p, rec, 0.1) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("hand-evaluated dpo loss at margin 0.1 * 2 ln 2") {
    // ratio(chosen) = 2, ratio(rejected) = 0.5 against a uniform reference
    auto sp = space_of(1, 4);
    std::vector<Eigen::VectorXd> logits{Eigen::VectorXd(4)};
    logits[0] << std::log(0.5), std::log(0.125), std::log(0.1875),
        std::log(0.1875);
    TabularPolicy p(sp, std::move(logits));
    auto ref = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    double margin = 0.1 * (std::log(2.0) - std::log(0.5));
    CHECK(margin == doctest::Approx(0.138629).epsilon(1e-5));
    long double want = -std::log((long double)1.0 /
                                 (1.0 + std::exp(-(long double)margin)));
    CHECK(dpo_loss(p, ref, rec, 0.1) ==
          doctest::Approx((double)want).epsilon(1e-12));
    CHECK(dpo_loss(p, ref, rec, 0.1) == doctest::Approx(0.625).epsilon(2e-3));
}

TEST_CASE("soft dpo loss with p_chosen 0.5 at the reference point is ln 2") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", 0.5, Source::external, "t"};
    CHECK(dpo_loss(p, p, rec, 0.1, LabelMode::soft) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("soft mode without p_chosen is a validation error") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    CHECK_THROWS_AS(dpo_loss(p, p, rec, 0.1, LabelMode::soft), ValidationError);
}

TEST_CASE("dpo gradient pushes the chosen logit up at the reference point") {
    auto sp = space_of(1, 3);
    auto p = TabularPolicy::uniform(sp);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", std::nullopt, Source::external, "t"});
    auto g = dpo_grad(p, p, ds, 0.1);
    CHECK(g[0](0) < 0.0);  // descent direction raises logit(y0)
    CHECK(g[0](1) > 0.0);
    CHECK(g[0](2) == 0.0);
}

TEST_CASE("soft record at the model's own preference contributes zero gradient") {
    auto sp = space_of(1, 2);
    Rng rng(3);
    auto p = random_policy(sp, rng, 1.0);
    auto ref = random_policy(sp, rng, 1.0);
    double margin = implicit_reward_margin(p, ref, "x0", "y0", "y1", 0.1);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    PreferenceRecord rec{"x0", "y0", "y1",
                         1.0 / (1.0 + std::exp(-margin)),
                         Source::external, "t"};
    ds.records.push_back(rec);
    auto g = dpo_grad(p, ref, ds, 0.1, LabelMode::soft);
    CHECK(std::abs(g[0](0)) <= 1e-14);
    CHECK(std::abs(g[0](1)) <= 1e-14);
}

TEST_CASE("dpo gradients match central finite differences") {
    auto sp = space_of(2, 5);
    Rng rng(17);
    const double h = 1e-5;
    for (int trial = 0; trial < 25; ++trial) {
        auto p = random_policy(sp, rng, 1.5);
        auto ref = random_policy(sp, rng, 1.5);
        bool soft = trial % 2 == 0;
        auto mode = soft ? LabelMode::soft : LabelMode::hard;
        auto ds = random_dataset(sp, rng, 3, soft);
        auto g = dpo_grad(p, ref, ds, 0.25, mode);
        double err = max_fd_rel_error(p, g, [&](const TabularPolicy& q) {
            return mean_dpo_loss(q, ref, ds, 0.25, mode);
        }, h);
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("slic hinge is inactive when the log-ratio clears the margin") {
    auto sp = space_of(1, 2);
    std::vector<Eigen::VectorXd> logits{Eigen::VectorXd(2)};
    logits[0] << 3.0, 0.0;
    TabularPolicy p(sp, std::move(logits));
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    SlicConfig cfg;
    cfg.delta = 1.0;
    cfg.lambda = 0.0;
    CHECK(slic_loss(p, rec, cfg) == 0.0);
}

TEST_CASE("slic at zero log-ratio pays the full margin") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    SlicConfig cfg;
    cfg.delta = 1.0;
    CHECK(slic_loss(p, rec, cfg) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("slic cross-entropy term is hand-checkable") {
    auto sp = space_of(1, 4);
    // pi(y2) = 0.25 and a chosen/rejected gap of ln 4 so the hinge is inactive
    Eigen::VectorXd row(4);
    row << std::log(0.5), std::log(0.125), std::log(0.25), std::log(0.125);
    TabularPolicy p(sp, {row});
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    SlicConfig cfg;
    cfg.delta = 1.0;  // log-ratio = ln 4 > 1, hinge inactive
    cfg.lambda = 0.5;
    cfg.reference_targets["x0"] = "y2";
    CHECK(slic_loss(p, rec, cfg) ==
          doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-12));
    CHECK(0.5 * std::log(4.0) == doctest::Approx(0.693147).epsilon(1e-6));
}

TEST_CASE("missing reference target with positive lambda is a config error") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceRecord rec{"x0", "y0", "y1", std::nullopt, Source::external, "t"};
    SlicConfig cfg;
    cfg.lambda = 0.5;
    CHECK_THROWS_AS(slic_loss(p, rec, cfg), ConfigError);
}

TEST_CASE("slic gradient is zero when hinge inactive and lambda zero") {
    auto sp = space_of(1, 2);
    std::vector<Eigen::VectorXd> logits{Eigen::VectorXd(2)};
    logits[0] << 5.0, 0.0;
    TabularPolicy p(sp, std::move(logits));
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", std::nullopt, Source::external, "t"});
    SlicConfig cfg;
    cfg.delta = 1.0;
    auto g = slic_grad(p, ds, cfg);
    CHECK(g[0].norm() == 0.0);
}

TEST_CASE("exactly at the kink the subgradient equals the lambda term alone") {
    auto sp = space_of(1, 2);
    // log-ratio = logit gap = delta exactly
    std::vector<Eigen::VectorXd> logits{Eigen::VectorXd(2)};
    logits[0] << 1.0, 0.0;
    TabularPolicy p(sp, std::move(logits));
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", std::nullopt, Source::external, "t"});
    SlicConfig cfg;
    cfg.delta = 1.0;
    cfg.lambda = 0.3;
    cfg.reference_targets["x0"] = "y1";
    auto g = slic_grad(p, ds, cfg);
    // lambda term only: +lambda * probs, -lambda at the target
    Eigen::VectorXd want = 0.3 * p.probs(0);
    want(1) -= 0.3;
    CHECK((g[0] - want).norm() <= 1e-14);
}

TEST_CASE("slic gradients match central finite differences away from the kink") {
    auto sp = space_of(2, 5);
    Rng rng(23);
    const double h = 1e-5;
    int done = 0;
    while (done < 25) {
        auto p = random_policy(sp, rng, 1.5);
        auto ds = random_dataset(sp, rng, 3, false);
        SlicConfig cfg;
        cfg.delta = 0.7;
        cfg.lambda = 0.2;
        for (int x = 0; x < sp->num_prompts(); ++x)
            cfg.reference_targets[sp->prompt(x)] = sp->response(x, 0);
        // skip instances with any pair near the hinge kink
        bool near_kink = false;
        for (const auto& rec : ds.records) {
            double gap = p.log_prob(rec.prompt, rec.chosen) -
                         p.log_prob(rec.prompt, rec.rejected);
            if (std::abs(cfg.delta - gap) < 1e-3) near_kink = true;
        }
        if (near_kink) continue;
        ++done;
        auto g = slic_grad(p, ds, cfg);
        double err = max_fd_rel_error(p, g, [&](const TabularPolicy& q) {
            return mean_slic_loss(q, ds, cfg);
        }, h);
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("implicit reward margin is zero at the reference and antisymmetric") {
    auto sp = space_of(1, 3);
    Rng rng(2);
    auto ref = random_policy(sp, rng, 1.0);
    CHECK(implicit_reward_margin(ref, ref, "x0", "y0", "y1", 0.1) == 0.0);
    auto p = random_policy(sp, rng, 1.0);
    double m01 = implicit_reward_margin(p, ref, "x0", "y0", "y1", 0.1);
    double m10 = implicit_reward_margin(p, ref, "x0", "y1", "y0", 0.1);
    CHECK(m01 == doctest::Approx(-m10).epsilon(1e-12));
    CHECK(implicit_reward_margin(p, ref, "x0", "y0", "y1", 0.2) ==
          doctest::Approx(2 * m01).epsilon(1e-12));
}

TEST_CASE("implicit reward margin ignores per-prompt constant logit shifts") {
    auto sp = space_of(1, 4);
    Rng rng(6);
    auto ref = random_policy(sp, rng, 1.0);
    auto p = random_policy(sp, rng, 1.0);
    auto logits = p.all_logits();
    logits[0].array() += 42.0;
    TabularPolicy shifted(sp, std::move(logits));
    CHECK(implicit_reward_margin(p, ref, "x0", "y1", "y3", 0.4) ==
          doctest::Approx(implicit_reward_margin(shifted, ref, "x0", "y1",
                                                 "y3", 0.4)).epsilon(1e-9));
}

TEST_CASE("alignment objective reduces to expected reward at the reference") {
    auto sp = space_of(2, 4);
    Rng rng(12);
    auto ref = random_policy(sp, rng, 1.0);
    auto r = random_reward(sp, rng, 1.0);
    CHECK(alignment_objective(ref, ref, r, 0.1) ==
          doctest::Approx(expected_reward(ref, r)).epsilon(1e-12));
}

TEST_CASE("constant reward gives objective c at the reference") {
    auto sp = space_of(2, 3);
    auto ref = TabularPolicy::uniform(sp);
    std::vector<Eigen::VectorXd> rows;
    for (int i = 0; i < 2; ++i)
        rows.push_back(Eigen::VectorXd::Constant(3, 2.5));
    RewardTable r(sp, std::move(rows));
    CHECK(alignment_objective(ref, ref, r, 0.7) ==
          doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("closed form optimum maximizes the alignment objective") {
    auto sp = space_of(2, 6);
    Rng rng(19);
    auto ref = random_policy(sp, rng, 1.0);
    auto r = random_reward(sp, rng, 1.0);
    auto sol = closed_form_optimum(ref, r, 0.5);
    double best = alignment_objective(sol.policy, ref, r, 0.5);
    for (int i = 0; i < 100; ++i) {
        auto other = sol.policy.perturb(0.5, rng);
        CHECK(best + 1e-10 >= alignment_objective(other, ref, r, 0.5));
    }
}

TEST_CASE("closed form examples: constant reward, huge beta, hand case") {
    auto sp = space_of(1, 2);
    auto ref = TabularPolicy::uniform(sp);
    std::vector<Eigen::VectorXd> rows{Eigen::VectorXd::Constant(2, 3.0)};
    auto sol = closed_form_optimum(ref, RewardTable(sp, rows), 0.1);
    CHECK(std::exp(sol.policy.log_prob(0, 0)) ==
          doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(8);
    auto sp2 = space_of(1, 4);
    auto ref2 = random_policy(sp2, rng, 1.0);
    auto r2 = random_reward(sp2, rng, 1.0);
    auto sol2 = closed_form_optimum(ref2, r2, 1e9);
    for (int y = 0; y < 4; ++y)
        CHECK(std::abs(std::exp(sol2.policy.log_prob(0, y)) -
                       std::exp(ref2.log_prob(0, y))) <= 1e-6);

    const double beta = 0.4;
    std::vector<Eigen::VectorXd> r3{Eigen::VectorXd(2)};
    r3[0] << beta * std::log(3.0), 0.0;
    auto sol3 = closed_form_optimum(TabularPolicy::uniform(sp),
                                    RewardTable(sp, r3), beta);
    CHECK(std::exp(sol3.policy.log_prob(0, 0)) ==
          doctest::Approx(0.75).epsilon(1e-12));
    CHECK(std::exp(sol3.policy.log_prob(0, 1)) ==
          doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("closed form rejects non-positive beta") {
    auto sp = space_of(1, 2);
    auto ref = TabularPolicy::uniform(sp);
    CHECK_THROWS_AS(closed_form_optimum(ref, RewardTable::zeros(sp), 0.0),
                    ConfigError);
}

TEST_CASE("implicit reward closes the loop back to the policy") {
    // reward <-> policy bijection: implicit reward of pi recovers pi
    auto sp = space_of(3, 8);
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        auto ref = random_policy(sp, rng, 1.5);
        auto p = random_policy(sp, rng, 1.5);
        double beta = 0.05 + uniform01(rng);
        auto sol = closed_form_optimum(ref, implicit_reward(p, ref, beta), beta);
        for (int x = 0; x < 3; ++x)
            for (int y = 0; y < 8; ++y)
                CHECK(std::abs(sol.policy.log_prob(x, y) - p.log_prob(x, y)) <=
                      1e-10);
    }
}

TEST_CASE("train with zero steps returns the initial policy") {
    auto sp = space_of(1, 3);
    auto p = TabularPolicy::uniform(sp);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", std::nullopt, Source::external, "t"});
    DpoConfig cfg;
    cfg.steps = 0;
    auto result = train(p, p, ds, cfg);
    CHECK(result.final.to_json() == p.to_json());
    CHECK(result.loss_trace.size() == 1);
}

TEST_CASE("training twice with the same inputs is bit-identical") {
    auto sp = space_of(2, 4);
    Rng r1(5), r2(5);
    auto p1 = random_policy(sp, r1, 1.0);
    auto p2 = random_policy(sp, r2, 1.0);
    Rng d1(6), d2(6);
    auto ds1 = random_dataset(sp, d1, 3, false);
    auto ds2 = random_dataset(sp, d2, 3, false);
    DpoConfig cfg;
    cfg.steps = 50;
    auto a = train(p1, p1, ds1, cfg);
    auto b = train(p2, p2, ds2, cfg);
    CHECK(a.final.to_json() == b.final.to_json());
}

TEST_CASE("training reduces the loss at default-ish configs") {
    auto sp = space_of(2, 4);
    Rng rng(41);
    auto p = random_policy(sp, rng, 1.0);
    auto ds = random_dataset(sp, rng, 4, false);
    DpoConfig cfg;
    cfg.steps = 200;
    auto result = train(p, p, ds, cfg);
    CHECK(result.loss_trace.back() <= result.loss_trace.front());
    CHECK(result.loss_trace.size() == 201);
    CHECK(result.per_pair_trace.size() == 201);
    CHECK(result.per_pair_trace[0].size() == ds.records.size());
}

TEST_CASE("invalid configs are rejected before training starts") {
    auto sp = space_of(1, 2);
    auto p = TabularPolicy::uniform(sp);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", std::nullopt, Source::external, "t"});
    SlicConfig cfg;
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(train(p, p, ds, TrainMethod(cfg)), ConfigError);
}

TEST_CASE("divergence guard aborts with the offending step") {
    // a 0.5 soft label wants margin 0; an oversized step size makes the
    // margin oscillate with growing amplitude until the guard trips
    auto sp = space_of(1, 2);
    std::vector<Eigen::VectorXd> logits{Eigen::VectorXd(2)};
    logits[0] << 0.5, 0.0;
    TabularPolicy p(sp, std::move(logits));
    auto ref = TabularPolicy::uniform(sp);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    ds.records.push_back({"x0", "y0", "y1", 0.5, Source::external, "t"});
    DpoConfig cfg;
    cfg.beta = 1.0;
    cfg.learning_rate = 200.0;
    cfg.steps = 2000;
    cfg.label_mode = LabelMode::soft;
    try {
        train(p, ref, ds, cfg);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step > 0);
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("soft-label training on exhaustive pairs reaches the closed form") {
    auto sp = space_of(2, 4);
    Rng rng(55);
    auto pi_g = random_policy(sp, rng, 1.0);
    auto pref = BTPreference::from_policy(pi_g);
    PreferenceDataset ds;
    ds.space_ref = sp->ref();
    for (int x = 0; x < 2; ++x)
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b) {
                PreferenceRecord rec;
                rec.prompt = sp->prompt(x);
                rec.chosen = sp->response(x, a);
                rec.rejected = sp->response(x, b);
                rec.p_chosen = pref.prefer(x, a, b);
                rec.annotator = "truth";
                ds.records.push_back(rec);
            }
    auto ref = TabularPolicy::uniform(sp);
    DpoConfig cfg;
    cfg.beta = 0.5;
    cfg.steps = 8000;
    cfg.learning_rate = 1.0;
    cfg.label_mode = LabelMode::soft;
    auto result = train(ref, ref, ds, cfg);
    // the fixed point has beta * margin = log-odds of the label, so the
    // optimum is the closed form at reward log pi_G
    std::vector<Eigen::VectorXd> rows;
    for (int x = 0; x < 2; ++x)
        rows.push_back(pi_g.row_log_probs(x));
    auto want = closed_form_optimum(ref, RewardTable(sp, rows), cfg.beta);
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 4; ++y)
            CHECK(std::abs(std::exp(result.final.log_prob(x, y)) -
                           std::exp(want.policy.log_prob(x, y))) <= 1e-3);
}
