#pragma once

// Neural marked point process decoders.
//
// Both decoders share one contract: a DecoderState summarizes the history up to
// the last conditioned event, update_state() folds in the next event, and
// rates() returns the K mark intensities at any later time within the current
// inter-event interval.
//
// RMTPP
//   h_0 = tanh(W_0 z + b_0);  h_i = GRU(h_{i-1}, [k_i ; z])
//   lambda_k(t) = exp( (W h_i + b)_k + w_k (t - t_i) )        (w is per mark)
//
// NHP (continuous-time LSTM)
//   Gates from x = [k_i ; z] and the decayed hidden state h(t_i):
//     i, f, o, i_bar, f_bar = sigmoid(.),  z_hat = tanh(.),  delta = softplus(.)
//     c_{i+1}     = f * c(t_i) + i * z_hat
//     c_bar_{i+1} = f_bar * c_bar_i + i_bar * z_hat
//   Between events:
//     c(t) = c_bar + (c - c_bar) * exp(-delta (t - t_i)),  h(t) = o * tanh(c(t))
//   lambda(t) = softplus(W h(t)).
//   The initial state applies one cell update at t = 0 to a learned
//   begin-of-sequence input [bos ; z] with previous hidden h_0 and zero cells,
//   so the first interval already depends on z.
//
// Without personalization (latent_size = 0) the z inputs disappear and h_0 is
// a learned vector.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pmtpp/diffgraph.hpp"
#include "pmtpp/embeddings.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"

namespace pmtpp {

/// A tape plus the parameter values it reads.
struct Scope {
  ad::Tape& tape;
  const ad::ParamStore& params;

  ad::Var p(ad::ParamRef r) const { return tape.param(params, r); }
  ad::Var constant(ad::Tensor t) const { return tape.constant(std::move(t)); }
};

/// Counts RMTPP exponents clipped at the cap; read by training diagnostics.
inline std::atomic<std::uint64_t>& rmtpp_clamp_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline constexpr double kRmtppExponentCap = 30.0;

/// Gated recurrent unit:
///   r = sig(W_r x + U_r h + b_r), u = sig(W_u x + U_u h + b_u),
///   n = tanh(W_n x + b_n + r * (U_n h)),  h' = (1 - u) * n + u * h.
class GruCell {
 public:
  GruCell() = default;
  GruCell(ad::ParamStore& store, const std::string& name, int input_size, int hidden_size)
      : hidden_(std::size_t(hidden_size)),
        Wx_(store.add(name + ".W_x", 3 * hidden_, std::size_t(input_size), ad::InitKind::kUniformFanIn)),
        Wh_(store.add(name + ".W_h", 3 * hidden_, hidden_, ad::InitKind::kUniformFanIn)),
        b_(store.add(name + ".b", 3 * hidden_, 1, ad::InitKind::kZeros)) {}

  ad::Var step(const Scope& s, ad::Var x, ad::Var h) const {
    return step_projected(s, ad::add(ad::matmul(s.p(Wx_), x), s.p(b_)), h);
  }

  /// W_x X + b for a whole (in x n) input block at once, one column per step.
  ad::Var project(const Scope& s, ad::Var X) const {
    return ad::add(ad::matmul(s.p(Wx_), X), ad::repeat_cols(s.p(b_), X.cols()));
  }

  /// Step given gx = W_x x + b already computed (a column of project()).
  ad::Var step_projected(const Scope& s, ad::Var gx, ad::Var h) const {
    using namespace ad;
    const std::size_t H = hidden_;
    Var gh = matmul(s.p(Wh_), h);
    Var r = sigmoid(add(slice_rows(gx, 0, H), slice_rows(gh, 0, H)));
    Var u = sigmoid(add(slice_rows(gx, H, H), slice_rows(gh, H, H)));
    Var n = ad::tanh(add(slice_rows(gx, 2 * H, H), mul(r, slice_rows(gh, 2 * H, H))));
    return add(n, mul(u, sub(h, n)));
  }

  std::size_t hidden_size() const { return hidden_; }
  ad::ParamRef W_x() const { return Wx_; }
  ad::ParamRef W_h() const { return Wh_; }
  ad::ParamRef bias() const { return b_; }

 private:
  std::size_t hidden_ = 0;
  ad::ParamRef Wx_, Wh_, b_;
};

enum class DecoderKind { kRMTPP, kNHP };

inline std::string to_string(DecoderKind k) { return k == DecoderKind::kRMTPP ? "rmtpp" : "nhp"; }

inline DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "rmtpp") return DecoderKind::kRMTPP;
  if (s == "nhp") return DecoderKind::kNHP;
  throw UsageError("unknown model '" + s + "' (expected rmtpp|nhp)");
}

struct DecoderConfig {
  DecoderKind model = DecoderKind::kRMTPP;
  int hidden_size = 64;
  int d_mark = 32;
  int latent_size = 32;  // 0 selects the decoder-only variant
  int K = 1;
};

struct DecoderState {
  ad::Var h;
  double t_last = 0.0;
  std::size_t n_events = 0;
  // NHP only.
  ad::Var c, c_bar, delta, o;
};

struct IntensityVector {
  std::vector<double> rates;

  double total() const {
    double s = 0.0;
    for (double r : rates) s += r;
    return s;
  }
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(ad::ParamStore& store, const std::string& name, const DecoderConfig& cfg, MarkEmbedding marks)
      : cfg_(cfg), marks_(marks) {
    if (cfg.hidden_size <= 0 || cfg.d_mark <= 0 || cfg.K <= 0 || cfg.latent_size < 0)
      throw UsageError("DecoderConfig: sizes must be positive");
    if (marks.K() != cfg.K || marks.dim() != cfg.d_mark)
      throw UsageError("DecoderConfig: mark embedding shape does not match K x d_mark");
    const auto H = std::size_t(cfg.hidden_size);
    const auto K = std::size_t(cfg.K);
    const auto in = std::size_t(cfg.d_mark + cfg.latent_size);
    if (personalized()) {
      W0_ = store.add(name + ".W_0", H, std::size_t(cfg.latent_size), ad::InitKind::kUniformFanIn);
      b0_ = store.add(name + ".b_0", H, 1, ad::InitKind::kZeros);
    } else {
      h0_ = store.add(name + ".h_0", H, 1, ad::InitKind::kZeros);
    }
    W_ = store.add(name + ".W", K, H, ad::InitKind::kUniformFanIn);
    if (cfg.model == DecoderKind::kRMTPP) {
      gru_ = GruCell(store, name + ".gru", int(in), cfg.hidden_size);
      w_ = store.add(name + ".w", K, 1, ad::InitKind::kZeros);
      b_ = store.add(name + ".b", K, 1, ad::InitKind::kZeros);
    } else {
      Wx_ = store.add(name + ".ctlstm.W_x", 7 * H, in, ad::InitKind::kUniformFanIn);
      Wh_ = store.add(name + ".ctlstm.W_h", 7 * H, H, ad::InitKind::kUniformFanIn);
      bg_ = store.add(name + ".ctlstm.b", 7 * H, 1, ad::InitKind::kZeros);
      bos_ = store.add(name + ".bos", std::size_t(cfg.d_mark), 1, ad::InitKind::kUniformUnit);
    }
  }

  const DecoderConfig& config() const { return cfg_; }
  DecoderKind kind() const { return cfg_.model; }
  bool personalized() const { return cfg_.latent_size > 0; }
  int K() const { return cfg_.K; }
  const MarkEmbedding& marks() const { return marks_; }

  ad::ParamRef W() const { return W_; }
  ad::ParamRef w() const { return w_; }
  ad::ParamRef b() const { return b_; }
  ad::ParamRef W0() const { return W0_; }
  ad::ParamRef b0() const { return b0_; }
  ad::ParamRef h0() const { return h0_; }
  const GruCell& gru() const { return gru_; }

  /// h_0 = tanh(W_0 z + b_0), or the learned h_0 for the decoder-only variant.
  ad::Var initial_hidden(const Scope& s, ad::Var z) const {
    if (!personalized()) return s.p(h0_);
    check_z(z);
    return ad::tanh(ad::add(ad::matmul(s.p(W0_), z), s.p(b0_)));
  }

  DecoderState init_state(const Scope& s, ad::Var z) const {
    DecoderState st;
    st.h = initial_hidden(s, z);
    st.t_last = 0.0;
    if (cfg_.model == DecoderKind::kNHP) {
      const auto H = std::size_t(cfg_.hidden_size);
      ad::Var zeros = s.constant(ad::Tensor(H, 1));
      ad::Var x = personalized() ? ad::concat({s.p(bos_), z}) : s.p(bos_);
      ctlstm_step(s, x, st.h, zeros, zeros, st);
    }
    return st;
  }

  DecoderState update_state(const Scope& s, const DecoderState& prev, const Event& e, ad::Var z) const {
    if (e.time < prev.t_last || (prev.n_events > 0 && e.time == prev.t_last))
      throw UsageError("update_state: event time " + std::to_string(e.time) +
                       " does not follow last event time " + std::to_string(prev.t_last));
    if (personalized()) check_z(z);
    ad::Var k = marks_.embed(s.tape, s.params, e.mark);
    ad::Var x = personalized() ? ad::concat({k, z}) : k;
    DecoderState next;
    next.t_last = e.time;
    next.n_events = prev.n_events + 1;
    if (cfg_.model == DecoderKind::kRMTPP) {
      next.h = gru_.step(s, x, prev.h);
    } else {
      auto [c_t, h_t] = decay_to(prev, e.time);
      ctlstm_step(s, x, h_t, c_t, prev.c_bar, next);
    }
    return next;
  }

  /// Mark intensities at each of `times` (all >= t_last), shape K x m.
  ad::Var rates(const Scope& s, const DecoderState& st, std::span<const double> times) const {
    return rates_impl(s, st, times, /*log_space=*/false);
  }

  /// log lambda_k(t), shape K x 1.
  ad::Var log_rates(const Scope& s, const DecoderState& st, double t) const {
    const double ts[1] = {t};
    return rates_impl(s, st, ts, /*log_space=*/true);
  }

  /// Value-level intensity query for t strictly after the last conditioned event.
  IntensityVector intensity(const Scope& s, const DecoderState& st, double t) const {
    if (!(t > st.t_last)) throw UsageError("intensity: query time must follow the last event time");
    const double ts[1] = {t};
    IntensityVector out{rates(s, st, ts).value().vec()};
    for (double r : out.rates)
      if (!std::isfinite(r) || r <= 0.0)
        throw NumericError("intensity: non-finite or non-positive rate (parameter blow-up)");
    return out;
  }

  double total_intensity(const Scope& s, const DecoderState& st, double t) const {
    return intensity(s, st, t).total();
  }

  std::vector<double> mark_distribution(const Scope& s, const DecoderState& st, double t) const {
    auto iv = intensity(s, st, t);
    const double tot = iv.total();
    for (double& r : iv.rates) r /= tot;
    return iv.rates;
  }

  /// Closed-form integral of the RMTPP total intensity over [a, b] within the
  /// current interval; `b` may be +infinity when every w_k < 0. Ignores the
  /// exponent cap.
  double rmtpp_compensator(const Scope& s, const DecoderState& st, double a, double b) const {
    if (cfg_.model != DecoderKind::kRMTPP) throw UsageError("rmtpp_compensator: decoder is not RMTPP");
    if (a < st.t_last || !(b > a)) throw UsageError("rmtpp_compensator: interval outside the current segment");
    ad::Tensor c = ad::add(ad::matmul(s.p(W_), st.h), s.p(b_)).value();
    const ad::Tensor& w = s.params[w_].value;
    double total = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double wk = w[k];
      const double start = std::exp(c[k] + wk * (a - st.t_last));
      if (std::isinf(b)) {
        if (wk >= 0.0) return std::numeric_limits<double>::infinity();
        total += start / -wk;
      } else if (std::abs(wk) < 1e-300) {
        total += start * (b - a);
      } else {
        total += start * std::expm1(wk * (b - a)) / wk;
      }
    }
    return total;
  }

  /// NHP cell and hidden state decayed to time t >= t_last.
  std::pair<ad::Var, ad::Var> decay_to(const DecoderState& st, double t) const {
    using namespace ad;
    Var decay = ad::exp(scale(st.delta, -(t - st.t_last)));
    Var c_t = add(st.c_bar, mul(sub(st.c, st.c_bar), decay));
    Var h_t = mul(st.o, ad::tanh(c_t));
    return {c_t, h_t};
  }

 private:
  void check_z(ad::Var z) const {
    if (!z.valid() || z.rows() != std::size_t(cfg_.latent_size) || z.cols() != 1)
      throw UsageError("decoder: z must be a " + std::to_string(cfg_.latent_size) + "-vector");
  }

  void ctlstm_step(const Scope& s, ad::Var x, ad::Var h_prev, ad::Var c_t, ad::Var c_bar_prev,
                   DecoderState& out) const {
    using namespace ad;
    const auto H = std::size_t(cfg_.hidden_size);
    Var g = add(add(matmul(s.p(Wx_), x), matmul(s.p(Wh_), h_prev)), s.p(bg_));
    Var i = sigmoid(slice_rows(g, 0, H));
    Var f = sigmoid(slice_rows(g, H, H));
    Var zh = ad::tanh(slice_rows(g, 2 * H, H));
    Var o = sigmoid(slice_rows(g, 3 * H, H));
    Var ib = sigmoid(slice_rows(g, 4 * H, H));
    Var fb = sigmoid(slice_rows(g, 5 * H, H));
    Var d = softplus(slice_rows(g, 6 * H, H));
    out.c = add(mul(f, c_t), mul(i, zh));
    out.c_bar = add(mul(fb, c_bar_prev), mul(ib, zh));
    out.delta = d;
    out.o = o;
    out.h = mul(o, ad::tanh(out.c));
  }

  ad::Var rates_impl(const Scope& s, const DecoderState& st, std::span<const double> times, bool log_space) const {
    using namespace ad;
    const std::size_t m = times.size();
    if (m == 0) throw UsageError("rates: no query times");
    ad::Tensor dt(1, m);
    for (std::size_t j = 0; j < m; ++j) {
      if (times[j] < st.t_last) throw UsageError("rates: query time precedes the last event time");
      dt[j] = times[j] - st.t_last;
    }
    if (cfg_.model == DecoderKind::kRMTPP) {
      Var base = add(matmul(s.p(W_), st.h), s.p(b_));
      Var logits = m == 1 ? base : repeat_cols(base, m);
      logits = add(logits, matmul(s.p(w_), s.constant(std::move(dt))));
      logits = clamp_max(logits, kRmtppExponentCap, &rmtpp_clamp_counter());
      return log_space ? logits : ad::exp(logits);
    }
    for (std::size_t j = 0; j < m; ++j) dt[j] = -dt[j];
    Var decay = ad::exp(matmul(st.delta, s.constant(std::move(dt))));
    Var c_bar = m == 1 ? st.c_bar : repeat_cols(st.c_bar, m);
    Var diff = sub(st.c, st.c_bar);
    Var c_t = add(c_bar, mul(m == 1 ? diff : repeat_cols(diff, m), decay));
    Var h_t = mul(m == 1 ? st.o : repeat_cols(st.o, m), ad::tanh(c_t));
    Var lam = softplus(matmul(s.p(W_), h_t));
    return log_space ? ad::log(lam) : lam;
  }

  DecoderConfig cfg_;
  MarkEmbedding marks_;
  ad::ParamRef W_, W0_, b0_, h0_;
  // RMTPP
  GruCell gru_;
  ad::ParamRef w_, b_;
  // NHP
  ad::ParamRef Wx_, Wh_, bg_, bos_;
};

}  // namespace pmtpp
