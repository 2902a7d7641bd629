#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "pmtpp/likelihood.hpp"
#include "pmtpp/model.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

using namespace pmtpp;
namespace tu = pmtpp::testing;
using tu::constant_rate_model;
using tu::small_model;

namespace {

void randomize(Model& m, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (auto& p : m.params().all())
    for (auto& v : p.value.data()) v = scale * (2.0 * uniform01(rng) - 1.0);
}

Sequence make_seq(std::vector<Event> ev, double T) {
  Sequence s;
  s.events = std::move(ev);
  s.horizon = T;
  s.user_id = "u";
  s.seq_id = "s";
  return s;
}

const Sequence kSeq = make_seq({{0.3, 0}, {0.8, 2}, {1.1, 1}, {2.4, 2}, {3.0, 0}}, 4.0);

}  // namespace

TEST(LogLikelihood, HomogeneousPoissonClosedForm) {
  Model m = constant_rate_model({1.0});
  ad::Tape tape;
  Scope s{tape, m.params()};
  Rng rng(1);
  auto r = log_likelihood(s, m.decoder(), {}, make_seq({{0.5, 0}, {1.0, 0}, {1.7, 0}}, 2.0), 150, rng);
  EXPECT_NEAR(r.stats.log_lik, -2.0, 1e-12);
  EXPECT_NEAR(r.stats.sce, 0.0, 1e-12);
  EXPECT_NEAR(r.stats.pp_plus, 0.0, 1e-12);
  EXPECT_NEAR(r.stats.pp_minus, 1.0, 1e-12);
  EXPECT_EQ(r.stats.n_events, 3u);
  EXPECT_EQ(r.stats.t_end, 2.0);
}

TEST(LogLikelihood, ConstantRateMarkedReduction) {
  Rng cfg_rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> rates = {0.2 + uniform01(cfg_rng), 0.2 + 2.0 * uniform01(cfg_rng)};
    Model m = constant_rate_model(rates);
    const double T = 1.0 + 10.0 * uniform01(cfg_rng);
    std::vector<Event> ev;
    double t = 0.0, expected = 0.0;
    while (true) {
      t += 0.5 * uniform01(cfg_rng) + 1e-3;
      if (t >= T) break;
      const int k = int(cfg_rng() % 2);
      ev.push_back({t, k});
      expected += std::log(rates[std::size_t(k)]);
    }
    expected -= (rates[0] + rates[1]) * T;
    ad::Tape tape(false);
    Scope s{tape, m.params()};
    Rng rng{std::uint64_t(trial)};
    auto r = log_likelihood(s, m.decoder(), {}, make_seq(ev, T), 10000, rng);
    EXPECT_LT(std::abs(r.stats.log_lik - expected) / std::abs(expected), 1e-2);
  }
}

TEST(LogLikelihood, CompensatorMatchesRmtppClosedForm) {
  Model m = small_model(DecoderKind::kRMTPP, Personalization::kMoE, 3);
  randomize(m, 17, 0.7);
  ad::Tape tape(false);
  Scope s{tape, m.params()};
  ad::Var z = tape.constant(ad::Tensor::column({0.3, -0.2, 0.5}));
  double exact = 0.0;
  DecoderState st = m.decoder().init_state(s, z);
  double a = 0.0;
  for (const auto& e : kSeq.events) {
    exact += m.decoder().rmtpp_compensator(s, st, a, e.time);
    st = m.decoder().update_state(s, st, e, z);
    a = e.time;
  }
  exact += m.decoder().rmtpp_compensator(s, st, a, kSeq.horizon);
  Rng rng(5);
  auto r = log_likelihood(s, m.decoder(), z, kSeq, 500, rng);
  EXPECT_LT(std::abs(r.stats.compensator - exact), 3.0 * r.stats.compensator_se);
  EXPECT_GT(r.stats.compensator_se, 0.0);
}

TEST(LogLikelihood, BreakdownIdentityHolds) {
  for (DecoderKind kind : {DecoderKind::kRMTPP, DecoderKind::kNHP}) {
    Model m = small_model(kind, Personalization::kMoE, 3, 4);
    randomize(m, 23, 0.8);
    ad::Tape tape;
    Scope s{tape, m.params()};
    ad::Var z = tape.constant(ad::Tensor::column({0.1, 0.4, -0.9}));
    Rng rng(2);
    for (std::size_t first : {std::size_t(0), std::size_t(2)}) {
      auto w = EvalWindow::after_prefix(kSeq, first);
      auto r = log_likelihood(s, m.decoder(), z, kSeq, 150, rng, w);
      const auto& b = r.stats;
      const double rhs = double(b.n_events) * (b.sce + b.pp_plus) + b.t_end * b.pp_minus;
      EXPECT_NEAR(-r.log_lik.item(), rhs, 1e-8);
      EXPECT_EQ(b.n_events, kSeq.size() - first);
    }
  }
}

TEST(LogLikelihood, McEstimatesAgreeAcrossSampleSizes) {
  Model m = small_model(DecoderKind::kNHP, Personalization::kNone, 3);
  randomize(m, 31, 0.8);
  ad::Tape tape(false);
  Scope s{tape, m.params()};
  Rng r1(1), r2(2);
  auto a = log_likelihood(s, m.decoder(), {}, kSeq, 150, r1).stats;
  auto b = log_likelihood(s, m.decoder(), {}, kSeq, 500, r2).stats;
  const double se = std::hypot(a.compensator_se, b.compensator_se);
  EXPECT_LT(std::abs(a.compensator - b.compensator), 3.0 * se);
}

TEST(LogLikelihood, WindowScoresOnlySuffix) {
  Model m = constant_rate_model({0.5, 1.5, 1.0});
  ad::Tape tape(false);
  Scope s{tape, m.params()};
  Rng rng(1);
  auto r = log_likelihood(s, m.decoder(), {}, kSeq, 100, rng, EvalWindow::after_prefix(kSeq, 3));
  const double expected = std::log(1.0) + std::log(0.5) - 3.0 * (4.0 - 1.1);
  EXPECT_NEAR(r.stats.log_lik, expected, 1e-12);
  EXPECT_NEAR(r.stats.t_end, 2.9, 1e-12);
}

TEST(LogLikelihood, GradientMatchesFiniteDifferences) {
  Model m = small_model(DecoderKind::kNHP, Personalization::kNone, 3);
  randomize(m, 8, 0.6);
  auto f = [&](bool grad) {
    ad::Tape tape(grad);
    Scope s{tape, m.params()};
    Rng rng(9);
    auto r = log_likelihood(s, m.decoder(), {}, kSeq, 40, rng);
    if (!grad) return std::make_pair(r.log_lik.item(), ad::GradBuffer{});
    tape.backward(r.log_lik);
    auto g = ad::zero_grads(m.params());
    tape.collect_grads(g);
    return std::make_pair(r.log_lik.item(), g);
  };
  auto [v, grads] = f(true);
  auto flat = tu::flatten(m.params());
  auto fd = tu::fd_gradient(
      [&](const std::vector<double>& x) {
        tu::unflatten(m.params(), x);
        return f(false).first;
      },
      flat);
  tu::unflatten(m.params(), flat);
  std::vector<double> analytic;
  for (const auto& g : grads) analytic.insert(analytic.end(), g.vec().begin(), g.vec().end());
  EXPECT_LT(tu::norm_rel_error(analytic, fd), 1e-4);
}

TEST(OverTime, FinalPointMatchesBreakdownAndRefinementIsStable) {
  Model m = small_model(DecoderKind::kRMTPP, Personalization::kNone, 3);
  randomize(m, 12);
  ad::Tape tape(false);
  Scope s{tape, m.params()};
  Rng rng(4);
  auto r = log_likelihood(s, m.decoder(), {}, kSeq, 200, rng);
  const double coarse[] = {0.2, 1.0, 4.0};
  const double fine[] = {0.1, 0.2, 0.5, 1.0, 2.0, 4.0};
  auto c = over_time(r.trace, 0.0, coarse);
  auto f = over_time(r.trace, 0.0, fine);
  EXPECT_FALSE(c[0].sce.has_value());
  ASSERT_TRUE(c[2].sce.has_value());
  EXPECT_NEAR(*c[2].sce, r.stats.sce, 1e-12);
  EXPECT_NEAR(*c[2].pp_plus, r.stats.pp_plus, 1e-12);
  EXPECT_NEAR(c[2].pp_minus, r.stats.pp_minus, 1e-12);
  EXPECT_EQ(c[1].sce, f[3].sce);
  EXPECT_EQ(c[1].pp_minus, f[3].pp_minus);
}

TEST(OverTime, SingleEventSceIsNegLogMarkProbability) {
  Model m = constant_rate_model({1.0, 3.0});
  ad::Tape tape(false);
  Scope s{tape, m.params()};
  Rng rng(1);
  auto r = log_likelihood(s, m.decoder(), {}, make_seq({{0.5, 1}}, 2.0), 50, rng);
  const double grid[] = {0.5, 1.5, 2.0};
  for (const auto& v : sce_over_time(r.trace, 0.0, grid)) EXPECT_NEAR(*v, -std::log(0.75), 1e-12);
}

TEST(Elbo, ZeroBetaEqualsReconstruction) {
  Model m = small_model(DecoderKind::kRMTPP, Personalization::kMoE, 3);
  randomize(m, 2);
  ad::Tape tape;
  Scope s{tape, m.params()};
  Rng rng(6);
  const Sequence refs[] = {kSeq};
  auto e = elbo(s, m.decoder(), m.encoder(), refs, kSeq, 0.0, 1, 100, rng);
  EXPECT_EQ(e.objective.item(), e.reconstruction.item());
  EXPECT_EQ(e.objective.item(), e.draws[0].log_lik.item());
  auto e2 = elbo(s, m.decoder(), m.encoder(), refs, kSeq, 1.0, 1, 100, rng);
  EXPECT_NEAR(e2.objective.item(), e2.reconstruction.item() - e2.kl, 1e-12);
}

TEST(Elbo, PriorFallbackHasZeroKl) {
  Model m = small_model(DecoderKind::kNHP, Personalization::kMoE, 3);
  ad::Tape tape;
  Scope s{tape, m.params()};
  Rng rng(6);
  auto e = elbo(s, m.decoder(), m.encoder(), {}, kSeq, 0.001, 5, 50, rng);
  EXPECT_EQ(e.kl, 0.0);
  EXPECT_EQ(e.draws.size(), 5u);
}

TEST(Elbo, LowerBoundsImportanceWeightedEstimate) {
  // With beta = 1 the ELBO is a lower bound on log p(H); a 100-sample
  // importance-weighted estimate is a tighter one.
  int held = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    Model m = small_model(DecoderKind::kRMTPP, Personalization::kMoE, 3, std::uint64_t(trial));
    randomize(m, 100 + std::uint64_t(trial), 0.5);
    ad::Tape tape(false);
    Scope s{tape, m.params()};
    Rng rng{std::uint64_t(trial)};
    const Sequence refs[] = {kSeq};
    auto q = m.encoder()->build_posterior(s, refs);
    std::vector<double> elbos, log_w;
    for (int i = 0; i < 100; ++i) {
      ad::Var z = sample_z(s, q, rng).z;
      const double ll = log_likelihood(s, m.decoder(), z, kSeq, 2000, rng).stats.log_lik;
      const double lq = log_density(q, z).item(), lp = prior_log_density(z).item();
      elbos.push_back(ll - (lq - lp));
      log_w.push_back(ll + lp - lq);
    }
    const double mx = *std::max_element(log_w.begin(), log_w.end());
    double acc = 0.0;
    for (double w : log_w) acc += std::exp(w - mx);
    const double iw = mx + std::log(acc / 100.0);
    if (tu::mean(elbos) <= iw + 1e-9) ++held;
  }
  EXPECT_GE(held, int(0.95 * trials));
}

TEST(ModelCheckpoint, RoundTripPreservesLikelihood) {
  Model m = small_model(DecoderKind::kNHP, Personalization::kMoE, 3);
  randomize(m, 44);
  Model back = Model::from_json(nlohmann::json::parse(m.to_json().dump()));
  auto eval = [&](const Model& mm) {
    ad::Tape tape(false);
    Scope s{tape, mm.params()};
    Rng rng(1);
    const Sequence refs[] = {kSeq};
    return elbo(s, mm.decoder(), mm.encoder(), refs, kSeq, 0.001, 2, 50, rng).objective.item();
  };
  EXPECT_EQ(eval(m), eval(back));
}
