#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pmtpp/decoders.hpp"
#include "pmtpp/rng.hpp"
#include "test_util.hpp"

using namespace pmtpp;
using pmtpp::testing::fd_gradient;
using pmtpp::testing::norm_rel_error;

namespace {

struct Net {
  ad::ParamStore store;
  MarkEmbedding marks;
  Decoder dec;

  Net(DecoderKind kind, int K, int H, int d_mark, int latent, std::uint64_t seed = 7) {
    marks = MarkEmbedding(store, "marks", K, d_mark);
    dec = Decoder(store, "dec", DecoderConfig{kind, H, d_mark, latent, K}, marks);
    Rng rng(seed);
    store.initialize(rng);
  }

  // Overwrites every parameter, including zero-initialised biases, with noise.
  void randomize(std::uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    for (auto& p : store.all())
      for (auto& v : p.value.data()) v = scale * (2.0 * uniform01(rng) - 1.0);
  }

  void set(ad::ParamRef r, double x) { store[r].value.fill(x); }
};

ad::Tensor column(std::initializer_list<double> v) { return ad::Tensor::column(std::vector<double>(v)); }

const std::vector<Event> kEvents = {{0.4, 1}, {1.1, 0}, {1.5, 2}, {2.7, 1}};

DecoderState run(const Decoder& dec, const Scope& s, ad::Var z, std::size_t n = kEvents.size()) {
  DecoderState st = dec.init_state(s, z);
  for (std::size_t i = 0; i < n; ++i) st = dec.update_state(s, st, kEvents[i], z);
  return st;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST(DecoderInit, ZeroWeightsGiveZeroHidden) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 3);
  net.set(net.dec.W0(), 0.0);
  net.set(net.dec.b0(), 0.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto h = net.dec.init_state(s, tape.constant(column({0.3, -1.0, 2.0}))).h.value();
  for (double v : h.vec()) EXPECT_EQ(v, 0.0);
}

TEST(DecoderInit, ZeroLatentGivesTanhBias) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 3);
  net.randomize(2);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto h = net.dec.initial_hidden(s, tape.constant(ad::Tensor(3, 1))).value();
  const auto& b0 = net.store[net.dec.b0()].value;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(h[i], std::tanh(b0[i]));
}

TEST(DecoderInit, RejectsWrongLatentSize) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 3);
  ad::Tape tape;
  Scope s{tape, net.store};
  EXPECT_THROW(net.dec.init_state(s, tape.constant(ad::Tensor(2, 1))), UsageError);
}

TEST(DecoderInit, HiddenGradientWrtLatentMatchesFiniteDifferences) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 3);
  net.randomize(5, 1.0);
  const std::vector<double> z0 = {0.2, -0.7, 0.5};
  const std::vector<double> weights = {0.3, -1.2, 0.8, 0.5};
  auto f = [&](const std::vector<double>& z) {
    ad::Tape tape(false);
    Scope s{tape, net.store};
    auto h = net.dec.initial_hidden(s, tape.constant(ad::Tensor::column(z))).value();
    double acc = 0.0;
    for (std::size_t i = 0; i < 4; ++i) acc += weights[i] * h[i];
    return acc;
  };
  ad::Tape tape;
  Scope s{tape, net.store};
  ad::Var z = tape.input(ad::Tensor::column(z0), true);
  ad::Var h = net.dec.initial_hidden(s, z);
  tape.backward(ad::sum(ad::mul(h, tape.constant(ad::Tensor::column(weights)))));
  EXPECT_LT(norm_rel_error(tape.grad(z).vec(), fd_gradient(f, z0)), 1e-4);
}

TEST(DecoderUpdate, GruMatchesScalarOracle) {
  const int K = 2, H = 2, d = 2, L = 1;
  Net net(DecoderKind::kRMTPP, K, H, d, L);
  net.randomize(11, 0.8);
  const auto& Wx = net.store[net.dec.gru().W_x()].value;  // 6 x 3
  const auto& Wh = net.store[net.dec.gru().W_h()].value;  // 6 x 2
  const auto& bg = net.store[net.dec.gru().bias()].value;
  const auto& table = net.store[net.marks.table()].value;
  const double zval = 0.6;
  const std::vector<double> h_prev = {0.25, -0.4};

  const double x[3] = {table(1, 0), table(1, 1), zval};
  double expected[2];
  for (int i = 0; i < H; ++i) {
    auto gate = [&](int block, bool with_h) {
      const std::size_t row = std::size_t(block * H + i);
      double a = bg[row];
      for (std::size_t j = 0; j < 3; ++j) a += Wx(row, j) * x[j];
      if (with_h)
        for (std::size_t j = 0; j < 2; ++j) a += Wh(row, j) * h_prev[j];
      return a;
    };
    const double r = sigmoid(gate(0, true));
    const double u = sigmoid(gate(1, true));
    double hn = 0.0;
    for (std::size_t j = 0; j < 2; ++j) hn += Wh(std::size_t(2 * H + i), j) * h_prev[j];
    const double n = std::tanh(gate(2, false) + r * hn);
    expected[i] = (1.0 - u) * n + u * h_prev[std::size_t(i)];
  }

  ad::Tape tape;
  Scope s{tape, net.store};
  ad::Var z = tape.constant(column({zval}));
  DecoderState st;
  st.h = tape.constant(ad::Tensor::column(h_prev));
  st.t_last = 0.5;
  auto next = net.dec.update_state(s, st, {1.0, 1}, z);
  EXPECT_NEAR(next.h.value()[0], expected[0], 1e-14);
  EXPECT_NEAR(next.h.value()[1], expected[1], 1e-14);
  EXPECT_EQ(next.t_last, 1.0);
  EXPECT_EQ(next.n_events, 1u);
}

TEST(DecoderUpdate, RejectsNonIncreasingTimes) {
  Net net(DecoderKind::kNHP, 3, 4, 2, 0);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = net.dec.update_state(s, net.dec.init_state(s, {}), {1.0, 0}, {});
  EXPECT_THROW(net.dec.update_state(s, st, {1.0, 1}, {}), UsageError);
  EXPECT_THROW(net.dec.update_state(s, st, {0.5, 1}, {}), UsageError);
  EXPECT_THROW(net.dec.intensity(s, st, 1.0), UsageError);
}

TEST(NhpDecay, NoDecayAtZeroAndTargetInLimit) {
  Net net(DecoderKind::kNHP, 3, 4, 2, 2);
  net.randomize(3);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({0.1, -0.3})));
  auto [c0, h0] = net.dec.decay_to(st, st.t_last);
  EXPECT_EQ(c0.value().vec(), st.c.value().vec());
  auto [cinf, hinf] = net.dec.decay_to(st, st.t_last + 1e6);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(cinf.value()[i], st.c_bar.value()[i], 1e-12);
  for (double d : st.delta.value().vec()) EXPECT_GT(d, 0.0);
}

TEST(NhpDecay, InterpolationIsContinuousAtTheEvent) {
  Net net(DecoderKind::kNHP, 3, 4, 2, 2);
  net.randomize(4);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({0.4, 0.2})));
  auto [c, h] = net.dec.decay_to(st, st.t_last + 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(h.value()[i], st.h.value()[i], 1e-10);
}

TEST(NhpIntensity, MatchesScalarInterpolation) {
  const int K = 2, H = 3;
  Net net(DecoderKind::kNHP, K, H, 2, 0);
  net.randomize(8, 1.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  const std::vector<double> c = {0.9, -0.5, 0.3}, delta = {0.5, 2.0, 1.0};
  DecoderState st;
  st.t_last = 1.0;
  st.c = tape.constant(ad::Tensor::column(c));
  st.c_bar = tape.constant(ad::Tensor(3, 1));
  st.delta = tape.constant(ad::Tensor::column(delta));
  st.o = tape.constant(ad::Tensor(3, 1, 1.0));
  st.h = tape.constant(ad::Tensor(3, 1));
  const auto& W = net.store[net.dec.W()].value;
  for (double t : {1.3, 2.5, 40.0}) {
    auto iv = net.dec.intensity(s, st, t);
    for (std::size_t k = 0; k < std::size_t(K); ++k) {
      double a = 0.0;
      for (std::size_t j = 0; j < std::size_t(H); ++j) a += W(k, j) * std::tanh(c[j] * std::exp(-delta[j] * (t - 1.0)));
      EXPECT_NEAR(iv.rates[k], softplus(a), 1e-14);
    }
  }
  // Far from the event the hidden state has decayed to o * tanh(0) = 0.
  for (double r : net.dec.intensity(s, st, 1e4).rates) EXPECT_NEAR(r, std::log(2.0), 1e-12);
}

TEST(RmtppIntensity, ZeroParametersGiveUnitRates) {
  Net net(DecoderKind::kRMTPP, 4, 3, 2, 2);
  net.set(net.dec.W(), 0.0);
  net.set(net.dec.w(), 0.0);
  net.set(net.dec.b(), 0.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({1.0, -1.0})));
  auto iv = net.dec.intensity(s, st, 3.0);
  for (double r : iv.rates) EXPECT_EQ(r, 1.0);
  EXPECT_EQ(iv.total(), 4.0);
  for (double p : net.dec.mark_distribution(s, st, 3.0)) EXPECT_EQ(p, 0.25);
}

TEST(RmtppIntensity, TotalIsKTimesExpBiasWithoutState) {
  Net net(DecoderKind::kRMTPP, 5, 3, 2, 0);
  net.randomize(1);
  net.set(net.dec.W(), 0.0);
  net.set(net.dec.w(), 0.0);
  net.set(net.dec.b(), -0.7);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, {});
  EXPECT_NEAR(net.dec.total_intensity(s, st, 4.0), 5.0 * std::exp(-0.7), 1e-14);
}

TEST(RmtppIntensity, NegativeDecayIsStrictlyDecreasing) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 2);
  net.randomize(6);
  net.set(net.dec.w(), -0.3);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({0.5, 0.5})));
  auto prev = net.dec.intensity(s, st, st.t_last + 1e-3).rates;
  for (double dt = 0.5; dt < 20.0; dt += 0.5) {
    auto cur = net.dec.intensity(s, st, st.t_last + dt).rates;
    for (std::size_t k = 0; k < 3; ++k) EXPECT_LT(cur[k], prev[k]);
    prev = cur;
  }
}

TEST(RmtppIntensity, LogRateIsAffineWithinInterval) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 2);
  net.randomize(9);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({-0.2, 0.9})));
  const double t1 = st.t_last + 0.2, t2 = st.t_last + 1.0, t3 = st.t_last + 3.5;
  auto l1 = net.dec.log_rates(s, st, t1).value(), l2 = net.dec.log_rates(s, st, t2).value(),
       l3 = net.dec.log_rates(s, st, t3).value();
  for (std::size_t k = 0; k < 3; ++k) {
    const double slope12 = (l2[k] - l1[k]) / (t2 - t1);
    const double slope23 = (l3[k] - l2[k]) / (t3 - t2);
    EXPECT_NEAR(slope12, slope23, 1e-12);
  }
}

TEST(RmtppIntensity, ExponentIsClampedAndCounted) {
  Net net(DecoderKind::kRMTPP, 2, 2, 2, 0);
  net.set(net.dec.W(), 0.0);
  net.set(net.dec.w(), 0.0);
  net.set(net.dec.b(), 100.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  const auto before = rmtpp_clamp_counter().load();
  auto iv = net.dec.intensity(s, net.dec.init_state(s, {}), 1.0);
  EXPECT_DOUBLE_EQ(iv.rates[0], std::exp(30.0));
  EXPECT_GT(rmtpp_clamp_counter().load(), before);
}

TEST(MarkDistribution, SumsToOne) {
  for (DecoderKind kind : {DecoderKind::kRMTPP, DecoderKind::kNHP}) {
    Net net(kind, 6, 5, 3, 2);
    net.randomize(12, 1.0);
    ad::Tape tape;
    Scope s{tape, net.store};
    auto st = run(net.dec, s, tape.constant(column({0.3, 0.1})));
    for (double dt : {1e-6, 0.3, 5.0}) {
      auto p = net.dec.mark_distribution(s, st, st.t_last + dt);
      double tot = 0.0;
      for (double x : p) {
        EXPECT_GT(x, 0.0);
        tot += x;
      }
      EXPECT_NEAR(tot, 1.0, 1e-12);
    }
  }
}

TEST(RmtppCompensator, ConstantRate) {
  Net net(DecoderKind::kRMTPP, 2, 3, 2, 0);
  net.set(net.dec.W(), 0.0);
  net.set(net.dec.w(), 0.0);
  net.set(net.dec.b(), 0.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = net.dec.init_state(s, {});
  EXPECT_DOUBLE_EQ(net.dec.rmtpp_compensator(s, st, 1.0, 4.0), 6.0);
}

TEST(RmtppCompensator, DecayingSingleMarkToInfinity) {
  Net net(DecoderKind::kRMTPP, 1, 3, 2, 0);
  net.set(net.dec.W(), 0.0);
  net.set(net.dec.w(), -1.0);
  net.set(net.dec.b(), 0.0);
  ad::Tape tape;
  Scope s{tape, net.store};
  auto st = net.dec.init_state(s, {});
  EXPECT_NEAR(net.dec.rmtpp_compensator(s, st, 0.0, std::numeric_limits<double>::infinity()), 1.0, 1e-15);
  EXPECT_THROW(net.dec.rmtpp_compensator(s, st, 2.0, 1.0), UsageError);
}

TEST(RmtppCompensator, AgreesWithMonteCarlo) {
  Net net(DecoderKind::kRMTPP, 3, 4, 2, 2);
  net.randomize(21, 0.8);
  ad::Tape tape(false);
  Scope s{tape, net.store};
  auto st = run(net.dec, s, tape.constant(column({0.2, -0.1})));
  const double a = st.t_last + 0.1, b = st.t_last + 2.6;
  Rng rng(4);
  std::vector<double> vals;
  for (int i = 0; i < 500; ++i)
    vals.push_back((b - a) * net.dec.total_intensity(s, st, a + (b - a) * uniform01(rng)));
  const double mc = pmtpp::testing::mean(vals);
  const double se = pmtpp::testing::sample_sd(vals) / std::sqrt(500.0);
  EXPECT_LT(std::abs(mc - net.dec.rmtpp_compensator(s, st, a, b)), 3.0 * se);
}

TEST(DecoderState, IdenticalStatesGiveIdenticalIntensities) {
  for (DecoderKind kind : {DecoderKind::kRMTPP, DecoderKind::kNHP}) {
    Net net(kind, 3, 4, 2, 2);
    net.randomize(14);
    ad::Tape tape;
    Scope s{tape, net.store};
    auto st = run(net.dec, s, tape.constant(column({0.5, -0.5})));
    DecoderState clone = st;
    // Rebuild the same state from plain values on a separate tape.
    ad::Tape other;
    Scope s2{other, net.store};
    DecoderState fresh;
    fresh.t_last = st.t_last;
    fresh.n_events = st.n_events;
    fresh.h = other.constant(st.h.value());
    if (kind == DecoderKind::kNHP) {
      fresh.c = other.constant(st.c.value());
      fresh.c_bar = other.constant(st.c_bar.value());
      fresh.delta = other.constant(st.delta.value());
      fresh.o = other.constant(st.o.value());
    }
    for (double dt : {0.01, 0.7, 3.0}) {
      auto a = net.dec.intensity(s, st, st.t_last + dt).rates;
      EXPECT_EQ(a, net.dec.intensity(s, clone, st.t_last + dt).rates);
      EXPECT_EQ(a, net.dec.intensity(s2, fresh, st.t_last + dt).rates);
    }
  }
}

TEST(DecoderGradients, LogTotalIntensityMatchesFiniteDifferences) {
  for (DecoderKind kind : {DecoderKind::kRMTPP, DecoderKind::kNHP}) {
    for (int latent : {0, 2}) {
      Net net(kind, 3, 4, 3, latent);
      net.randomize(30 + std::uint64_t(latent), 0.7);
      const std::vector<double> zval = {0.4, -0.6};
      auto loss = [&](Scope& s) {
        ad::Var z = latent ? s.tape.constant(ad::Tensor::column(zval)) : ad::Var{};
        auto st = run(net.dec, s, z);
        const double ts[2] = {st.t_last + 0.3, st.t_last + 1.7};
        return ad::log(ad::sum(net.dec.rates(s, st, ts)));
      };
      ad::Tape tape;
      Scope s{tape, net.store};
      tape.backward(loss(s));
      auto grads = ad::zero_grads(net.store);
      tape.collect_grads(grads);

      auto flat = pmtpp::testing::flatten(net.store);
      auto f = [&](const std::vector<double>& x) {
        pmtpp::testing::unflatten(net.store, x);
        ad::Tape t(false);
        Scope sc{t, net.store};
        return loss(sc).item();
      };
      auto fd = fd_gradient(f, flat);
      pmtpp::testing::unflatten(net.store, flat);

      std::size_t offset = 0;
      for (std::size_t p = 0; p < net.store.size(); ++p) {
        const auto n = net.store.at(p).value.size();
        std::vector<double> num(fd.begin() + long(offset), fd.begin() + long(offset + n));
        offset += n;
        EXPECT_LT(norm_rel_error(grads[p].vec(), num), 1e-4)
            << to_string(kind) << " latent=" << latent << " param " << net.store.at(p).name;
      }
    }
  }
}
