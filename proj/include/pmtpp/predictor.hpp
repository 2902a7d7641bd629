#pragma once

// Next-event prediction under the model's next-event density
//   p(t) = lambda(t) exp(-int_{t_i}^t lambda),   t in (t_i, cap].
// All integrals share one set of uniform points on (t_i, cap]; the inner
// compensator is the trapezoid rule over those sorted points. With several
// latent draws the density is their average.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pmtpp/decoders.hpp"
#include "pmtpp/encoder.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/rng.hpp"
#include "pmtpp/scoring.hpp"

namespace pmtpp {

struct PredictConfig {
  int mc_samples = 10000;
  double horizon = 0.0;  // cap = t_i + horizon; typically 10 x mean training gap

  void validate() const {
    if (mc_samples < 1) throw UsageError("predict: mc_samples must be positive");
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw UsageError("predict: horizon must be positive");
  }
};

struct NextEventPrediction {
  double t_last = 0.0;
  double horizon_cap = 0.0;
  double t_hat = 0.0;
  double t_hat_se = 0.0;
  double captured_mass = 0.0;        // estimate of P(next event <= cap)
  std::vector<double> mark_scores;   // sum to captured_mass
};

/// 1-based position of `k_true` when scores are sorted descending; ties go to
/// the lower mark index.
inline int rank_of_true(std::span<const double> scores, int k_true) {
  if (k_true < 0 || std::size_t(k_true) >= scores.size()) throw UsageError("rank_of_true: mark out of range");
  const double s = scores[std::size_t(k_true)];
  int rank = 1;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (scores[k] > s || (scores[k] == s && int(k) < k_true)) ++rank;
  return rank;
}

/// Next-event density after a fixed history, with its shared MC points.
class NextEventDensity {
 public:
  /// `states` holds one decoder state per latent draw, all conditioned on the
  /// same history ending at `t_last`; they must live on `scope`'s tape.
  NextEventDensity(const Scope& scope, const Decoder& dec, std::vector<DecoderState> states, double t_last,
                   const PredictConfig& cfg, Rng& rng)
      : scope_(&scope), dec_(&dec), states_(std::move(states)), t_last_(t_last) {
    cfg.validate();
    if (states_.empty()) throw UsageError("NextEventDensity: no decoder state");
    cap_ = t_last + cfg.horizon;
    const std::size_t n = std::size_t(cfg.mc_samples);
    points_.resize(n);
    for (auto& t : points_) t = t_last + cfg.horizon * uniform_open_left(rng);
    std::sort(points_.begin(), points_.end());
    std::vector<double> query(n + 1);
    query[0] = t_last;
    std::copy(points_.begin(), points_.end(), query.begin() + 1);
    for (const auto& st : states_) {
      ad::Tensor R;
      {
        ad::TapeRewind scratch(scope.tape);
        R = dec.rates(scope, st, query).value();
      }
      Draw d;
      d.rates = ad::Tensor(R.rows(), n);
      d.total.assign(n, 0.0);
      d.cum.assign(n, 0.0);
      double prev_t = t_last, prev_lam = 0.0;
      for (std::size_t k = 0; k < R.rows(); ++k) prev_lam += R(k, 0);
      d.lam0 = prev_lam;
      double cum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double lam = 0.0;
        for (std::size_t k = 0; k < R.rows(); ++k) {
          d.rates(k, j) = R(k, j + 1);
          lam += R(k, j + 1);
        }
        if (!std::isfinite(lam) || !(lam > 0.0)) throw NumericError("NextEventDensity: non-positive or non-finite intensity");
        cum += 0.5 * (points_[j] - prev_t) * (prev_lam + lam);
        d.total[j] = lam;
        d.cum[j] = cum;
        prev_t = points_[j];
        prev_lam = lam;
      }
      draws_.push_back(std::move(d));
    }
  }

  double t_last() const { return t_last_; }
  double horizon_cap() const { return cap_; }
  std::span<const double> points() const { return points_; }

  struct Value {
    double density = 0.0;
    double se = 0.0;  // MC standard error of the inner compensator, propagated
  };

  /// Density at t in (t_last, cap].
  Value density(double t) const {
    if (!(t > t_last_)) throw UsageError("next_event_density: t must follow the last event");
    if (t > cap_) throw UsageError("next_event_density: t beyond the horizon cap");
    const double ts[1] = {t};
    const std::size_t m = std::size_t(std::upper_bound(points_.begin(), points_.end(), t) - points_.begin());
    const double n = double(points_.size());
    const double span = cap_ - t_last_;
    Value v;
    double var = 0.0;
    for (std::size_t d = 0; d < draws_.size(); ++d) {
      const auto& dr = draws_[d];
      ad::Tensor R;
      {
        ad::TapeRewind scratch(scope_->tape);
        R = dec_->rates(*scope_, states_[d], ts).value();
      }
      double lam = 0.0;
      for (std::size_t k = 0; k < R.rows(); ++k) lam += R(k, 0);
      const double base_t = m ? points_[m - 1] : t_last_;
      const double base_lam = m ? dr.total[m - 1] : dr.lam0;
      const double comp = (m ? dr.cum[m - 1] : 0.0) + 0.5 * (t - base_t) * (base_lam + lam);
      const double p = lam * std::exp(-comp);
      // Spread of the plain MC estimate span/n * sum_{t_j <= t} lambda(t_j).
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        s1 += dr.total[j];
        s2 += dr.total[j] * dr.total[j];
      }
      const double mean = s1 / n;
      const double comp_var = span * span * std::max(0.0, s2 / n - mean * mean) / n;
      v.density += p;
      var += p * p * comp_var;
    }
    const double nd = double(draws_.size());
    v.density /= nd;
    v.se = std::sqrt(var) / nd;
    return v;
  }

  NextEventPrediction predict() const {
    const std::size_t n = points_.size();
    const double span = cap_ - t_last_;
    const double w = span / double(n);
    const std::size_t K = draws_.front().rates.rows();
    NextEventPrediction out;
    out.t_last = t_last_;
    out.horizon_cap = cap_;
    out.mark_scores.assign(K, 0.0);
    std::vector<double> p(n, 0.0);
    const double nd = double(draws_.size());
    for (const auto& dr : draws_) {
      for (std::size_t j = 0; j < n; ++j) {
        const double surv = std::exp(-dr.cum[j]);
        p[j] += dr.total[j] * surv / nd;
        // lambda_k / lambda * p = lambda_k * survival
        for (std::size_t k = 0; k < K; ++k) out.mark_scores[k] += w * dr.rates(k, j) * surv / nd;
      }
    }
    double mass = 0.0, first = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mass += w * p[j];
      first += w * points_[j] * p[j];
    }
    if (!(mass >= 1e-6)) throw NumericError("predict: captured probability mass below 1e-6 before the horizon cap");
    out.captured_mass = mass;
    out.t_hat = first / mass;
    // Ratio-estimator standard error.
    double r2 = 0.0;
    const double mean_b = mass / span;
    for (std::size_t j = 0; j < n; ++j) {
      const double resid = (points_[j] - out.t_hat) * p[j];
      r2 += resid * resid;
    }
    out.t_hat_se = n > 1 ? std::sqrt(r2 / double(n - 1) / double(n)) / mean_b : 0.0;
    return out;
  }

 private:
  struct Draw {
    ad::Tensor rates;  // K x n at the shared points
    std::vector<double> total, cum;
    double lam0 = 0.0;  // total intensity at t_last
  };

  const Scope* scope_;
  const Decoder* dec_;
  std::vector<DecoderState> states_;
  double t_last_ = 0.0, cap_ = 0.0;
  std::vector<double> points_;
  std::vector<Draw> draws_;
};

namespace detail {

inline std::vector<ad::Var> latent_vars(const Scope& s, const Decoder& dec, std::span<const ad::Tensor> zs) {
  std::vector<ad::Var> out;
  if (!dec.personalized()) {
    if (!zs.empty()) throw UsageError("predict: model takes no z");
    out.emplace_back();
    return out;
  }
  if (zs.empty()) throw UsageError("predict: personalized model needs at least one z draw");
  for (const auto& z : zs) out.push_back(s.constant(z));
  return out;
}

}  // namespace detail

/// Prediction after the first `n_prefix` events of `history`.
inline NextEventPrediction predict_next(const Model& model, std::span<const ad::Tensor> zs, const Sequence& history,
                                        std::size_t n_prefix, const PredictConfig& cfg, Rng& rng) {
  if (n_prefix > history.size()) throw UsageError("predict: prefix longer than the sequence");
  ad::Tape tape(false);
  Scope s{tape, model.params()};
  const Decoder& dec = model.decoder();
  std::vector<DecoderState> states;
  for (ad::Var z : detail::latent_vars(s, dec, zs)) {
    DecoderState st = dec.init_state(s, z);
    for (std::size_t i = 0; i < n_prefix; ++i) st = dec.update_state(s, st, history.events[i], z);
    states.push_back(st);
  }
  const double t_last = n_prefix ? history.events[n_prefix - 1].time : 0.0;
  return NextEventDensity(s, dec, std::move(states), t_last, cfg, rng).predict();
}

inline double predict_time(const Model& model, std::span<const ad::Tensor> zs, const Sequence& history,
                           std::size_t n_prefix, const PredictConfig& cfg, Rng& rng) {
  return predict_next(model, zs, history, n_prefix, cfg, rng).t_hat;
}

inline std::vector<double> predict_mark_scores(const Model& model, std::span<const ad::Tensor> zs,
                                               const Sequence& history, std::size_t n_prefix,
                                               const PredictConfig& cfg, Rng& rng) {
  return predict_next(model, zs, history, n_prefix, cfg, rng).mark_scores;
}

struct PredictionRow {
  std::string user_id;
  std::string seq_id;
  std::size_t event_index = 0;
  double t_true = 0.0;
  double t_hat = 0.0;
  double l1 = 0.0;
  int k_true = 0;
  int rank = 0;
  double captured_mass = 0.0;
  double horizon_cap = 0.0;
};

struct PredictOptions {
  PredictConfig predict;
  int n_z = 5;
  int max_refs = 8;
  std::size_t min_prefix = 1;  // predict events from this index on
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Predicts every event of every sequence from index `min_prefix` on, given
/// the events before it. MoE models average over posterior draws from the
/// user's other sequences in the same split.
inline std::vector<PredictionRow> predict_dataset(const Model& model, const Dataset& ds, const PredictOptions& opt) {
  opt.predict.validate();
  if (opt.n_z < 1) throw UsageError("predict: n_z must be positive");
  const auto index = ds.index();
  std::vector<std::vector<PredictionRow>> per(index.size());
  parallel_for(index.size(), opt.threads, [&](std::size_t i) {
    const auto [u, j] = index[i];
    const auto& user = ds.users[u];
    const Sequence& seq = user.reference_sequences[j];
    Rng rng = substream(opt.seed, {0x9ED1, u, j});
    ad::Tape tape(false);
    Scope s{tape, model.params()};
    const Decoder& dec = model.decoder();
    std::vector<ad::Var> zs;
    if (model.personalized()) {
      const auto refs = reference_set(user, j, opt.max_refs, false, rng);
      const PosteriorMixture q = model.encoder()->build_posterior(s, refs);
      for (int d = 0; d < opt.n_z; ++d) zs.push_back(s.constant(sample_z(s, q, rng).z.value()));
    } else {
      zs.emplace_back();
    }
    std::vector<DecoderState> states;
    for (ad::Var z : zs) states.push_back(dec.init_state(s, z));
    for (std::size_t e = 0; e < seq.size(); ++e) {
      if (e >= opt.min_prefix) {
        const double t_last = e ? seq.events[e - 1].time : 0.0;
        auto pred = NextEventDensity(s, dec, states, t_last, opt.predict, rng).predict();
        const auto& ev = seq.events[e];
        per[i].push_back({user.user_id, seq.seq_id, e, ev.time, pred.t_hat, std::abs(pred.t_hat - ev.time), ev.mark,
                          rank_of_true(pred.mark_scores, ev.mark), pred.captured_mass, pred.horizon_cap});
      }
      for (std::size_t d = 0; d < states.size(); ++d) states[d] = dec.update_state(s, states[d], seq.events[e], zs[d]);
    }
  });
  std::vector<PredictionRow> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

struct PredictionSummary {
  std::size_t n = 0;
  double mean_l1 = 0.0;
  double mean_rank = 0.0;
  double top1 = 0.0;  // fraction with rank 1
  double mean_captured_mass = 0.0;
};

inline PredictionSummary summarize_predictions(std::span<const PredictionRow> rows) {
  PredictionSummary s;
  s.n = rows.size();
  if (rows.empty()) return s;
  for (const auto& r : rows) {
    s.mean_l1 += r.l1;
    s.mean_rank += r.rank;
    s.top1 += r.rank == 1 ? 1.0 : 0.0;
    s.mean_captured_mass += r.captured_mass;
  }
  const double n = double(rows.size());
  s.mean_l1 /= n;
  s.mean_rank /= n;
  s.top1 /= n;
  s.mean_captured_mass /= n;
  return s;
}

inline void write_predictions_csv(std::ostream& out, std::span<const PredictionRow> rows) {
  out << "user,seq_id,t_true,t_hat,L1,k_true,rank,captured_mass,horizon_cap\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%.10g,%.10g,%d,%d,%.10g,%.10g\n", r.user_id.c_str(), r.seq_id.c_str(),
                  r.t_true, r.t_hat, r.l1, r.k_true, r.rank, r.captured_mass, r.horizon_cap);
    out << buf;
  }
}

}  // namespace pmtpp
