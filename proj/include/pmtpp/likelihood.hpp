#pragma once

// Sequence log-likelihood with a Monte-Carlo compensator.
//
//   log p(H) = sum_i log lambda_{k_i}(t_i) - int_start^T lambda(t) dt
//
// The integral is estimated per inter-event segment with uniform draws,
// allocating samples in proportion to segment length (at least one each).
// Intensities at event times use the state before that event is absorbed.
// The same draws feed the breakdown
//   SCE  = -(1/n) sum log(lambda_{k_i} / lambda)
//   PP+  = -(1/n) sum log lambda(t_i)
//   PP-  = compensator / (T - start)
// so that -log p = n (SCE + PP+) + (T - start) PP- holds per draw.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "pmtpp/decoders.hpp"
#include "pmtpp/encoder.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

struct MCConfig {
  int train_samples = 150;
  int eval_samples = 500;
  std::uint64_t seed = 0;
};

struct LLBreakdown {
  double log_lik = 0.0;
  double sce = 0.0;
  double pp_plus = 0.0;
  double pp_minus = 0.0;
  std::size_t n_events = 0;
  double t_end = 0.0;  // length of the scored window
  double compensator = 0.0;
  double compensator_se = 0.0;
};

/// Scores events from index `first` on over (start, T], conditioning the
/// decoder on the earlier events. The default scores the whole sequence.
struct EvalWindow {
  std::size_t first = 0;
  double start = 0.0;

  static EvalWindow after_prefix(const Sequence& seq, std::size_t n_prefix) {
    if (n_prefix > seq.size()) throw UsageError("EvalWindow: prefix longer than sequence");
    return {n_prefix, n_prefix == 0 ? 0.0 : seq.events[n_prefix - 1].time};
  }
};

/// Per-event and per-draw terms behind one likelihood evaluation.
struct LLTrace {
  struct EventTerm {
    double time;
    double log_mark_prob;  // log(lambda_k / lambda)
    double log_total;      // log lambda
  };
  struct Draw {
    double time;
    double contribution;  // weighted total intensity; sums to the compensator
  };
  std::vector<EventTerm> events;
  std::vector<Draw> draws;  // sorted by time
};

struct LLResult {
  ad::Var log_lik;
  LLBreakdown stats;
  LLTrace trace;
};

inline LLResult log_likelihood(const Scope& s, const Decoder& dec, ad::Var z, const Sequence& seq, int n_samples,
                               Rng& rng, EvalWindow window = {}) {
  using namespace ad;
  if (n_samples < 1) throw UsageError("log_likelihood: need at least one MC sample");
  if (window.first > seq.size()) throw UsageError("log_likelihood: window starts past the sequence end");
  if (window.first > 0 && window.start < seq.events[window.first - 1].time)
    throw UsageError("log_likelihood: window start precedes conditioned events");
  if (window.first < seq.size() && seq.events[window.first].time <= window.start && window.start > 0.0)
    throw UsageError("log_likelihood: scored event at or before window start");
  const double T = seq.horizon;
  if (!(T > window.start)) throw UsageError("log_likelihood: empty evaluation window");

  DecoderState st = dec.init_state(s, z);
  for (std::size_t i = 0; i < window.first; ++i) st = dec.update_state(s, st, seq.events[i], z);

  const double span_len = T - window.start;
  std::vector<Var> event_terms, comp_terms;
  LLResult out;
  double comp_var = 0.0;
  double a = window.start;
  for (std::size_t i = window.first; i <= seq.size(); ++i) {
    const bool has_event = i < seq.size();
    const double b = has_event ? seq.events[i].time : T;
    const double len = b - a;
    std::size_t m = 0;
    if (len > 0.0) m = std::max<std::size_t>(1, std::size_t(std::llround(double(n_samples) * len / span_len)));
    std::vector<double> times(m + (has_event ? 1 : 0));
    for (std::size_t j = 0; j < m; ++j) times[j] = a + len * uniform01(rng);
    if (has_event) times[m] = b;
    if (!times.empty()) {
      Var R = dec.rates(s, st, times);
      if (m > 0) {
        Tensor w(times.size(), 1);
        for (std::size_t j = 0; j < m; ++j) w[j] = len / double(m);
        Var totals = sum_rows(R);
        comp_terms.push_back(matmul(totals, s.constant(std::move(w))));
        const Tensor& tv = totals.value();
        double mean = 0.0, sq = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          out.trace.draws.push_back({times[j], len * tv[j] / double(m)});
          mean += tv[j];
        }
        mean /= double(m);
        for (std::size_t j = 0; j < m; ++j) sq += (tv[j] - mean) * (tv[j] - mean);
        if (m > 1) comp_var += len * len * (sq / double(m - 1)) / double(m);
      }
      if (has_event) {
        const int k = seq.events[i].mark;
        if (k < 0 || k >= dec.K()) throw UsageError("log_likelihood: mark out of range");
        const Tensor& Rv = R.value();
        double total = 0.0;
        for (std::size_t r = 0; r < Rv.rows(); ++r) total += Rv(r, m);
        const double rk = Rv(std::size_t(k), m);
        if (!(rk > 0.0) || !std::isfinite(total))
          throw NumericError("log_likelihood: non-positive or non-finite intensity at an event");
        event_terms.push_back(ad::log(pick(R, std::size_t(k), m)));
        out.trace.events.push_back({b, std::log(rk / total), std::log(total)});
      }
    }
    if (has_event) st = dec.update_state(s, st, seq.events[i], z);
    a = b;
  }
  std::sort(out.trace.draws.begin(), out.trace.draws.end(),
            [](const LLTrace::Draw& x, const LLTrace::Draw& y) { return x.time < y.time; });

  Var comp = comp_terms.empty() ? s.tape.scalar(0.0) : sum(concat(comp_terms));
  Var ev = event_terms.empty() ? s.tape.scalar(0.0) : sum(concat(event_terms));
  out.log_lik = sub(ev, comp);

  auto& b = out.stats;
  b.n_events = out.trace.events.size();
  b.t_end = span_len;
  b.compensator = comp.item();
  b.compensator_se = std::sqrt(comp_var);
  double sum_mark = 0.0, sum_total = 0.0;
  for (const auto& e : out.trace.events) {
    sum_mark += e.log_mark_prob;
    sum_total += e.log_total;
  }
  if (b.n_events > 0) {
    b.sce = -sum_mark / double(b.n_events);
    b.pp_plus = -sum_total / double(b.n_events);
  }
  b.pp_minus = b.compensator / span_len;
  b.log_lik = out.log_lik.item();
  if (!std::isfinite(b.log_lik)) throw NumericError("log_likelihood: non-finite value");
  return out;
}

/// Breakdown restricted to the part of the window up to each grid time.
/// SCE and PP+ are absent while no event has occurred yet.
struct TimePoint {
  double t = 0.0;
  std::optional<double> sce;
  std::optional<double> pp_plus;
  double pp_minus = 0.0;
  std::size_t n_events = 0;
};

inline std::vector<TimePoint> over_time(const LLTrace& trace, double start, std::span<const double> grid) {
  std::vector<TimePoint> out;
  out.reserve(grid.size());
  for (double t : grid) {
    if (!(t > start)) throw UsageError("over_time: grid time must follow the window start");
    TimePoint p;
    p.t = t;
    double sm = 0.0, st = 0.0;
    for (const auto& e : trace.events) {
      if (e.time > t) break;
      sm += e.log_mark_prob;
      st += e.log_total;
      ++p.n_events;
    }
    if (p.n_events > 0) {
      p.sce = -sm / double(p.n_events);
      p.pp_plus = -st / double(p.n_events);
    }
    double comp = 0.0;
    for (const auto& d : trace.draws) {
      if (d.time > t) break;
      comp += d.contribution;
    }
    p.pp_minus = comp / (t - start);
    out.push_back(p);
  }
  return out;
}

inline std::vector<std::optional<double>> sce_over_time(const LLTrace& trace, double start,
                                                        std::span<const double> grid) {
  std::vector<std::optional<double>> out;
  for (const auto& p : over_time(trace, start, grid)) out.push_back(p.sce);
  return out;
}

struct ElboResult {
  ad::Var objective;  // E_q[log p(H|z)] - beta * KL; maximize
  ad::Var reconstruction;
  LLBreakdown ll;     // averaged over the z draws
  double kl = 0.0;
  std::vector<LLResult> draws;
};

/// beta-ELBO for `target` given reference sequences. A null encoder (or a
/// decoder without latent input) reduces to the plain log-likelihood.
inline ElboResult elbo(const Scope& s, const Decoder& dec, const Encoder* enc, std::span<const Sequence> refs,
                       const Sequence& target, double beta, int n_z, int n_samples, Rng& rng,
                       EvalWindow window = {}) {
  if (beta < 0.0) throw UsageError("elbo: beta must be nonnegative");
  if (n_z < 1) throw UsageError("elbo: need at least one z sample");
  ElboResult out;
  const bool latent = dec.personalized();
  if (latent && !enc) throw UsageError("elbo: personalized decoder needs an encoder");
  PosteriorMixture q;
  std::vector<ad::Var> zs;
  if (latent) q = enc->build_posterior(s, refs);
  const int draws = latent ? n_z : 1;
  std::vector<ad::Var> lls;
  for (int d = 0; d < draws; ++d) {
    ad::Var z;
    if (latent) {
      z = sample_z(s, q, rng).z;
      zs.push_back(z);
    }
    out.draws.push_back(log_likelihood(s, dec, z, target, n_samples, rng, window));
    lls.push_back(out.draws.back().log_lik);
  }
  out.reconstruction = ad::scale(ad::sum(ad::concat(lls)), 1.0 / double(draws));
  for (const auto& r : out.draws) {
    const auto& b = r.stats;
    out.ll.log_lik += b.log_lik / draws;
    out.ll.sce += b.sce / draws;
    out.ll.pp_plus += b.pp_plus / draws;
    out.ll.pp_minus += b.pp_minus / draws;
    out.ll.compensator += b.compensator / draws;
    out.ll.compensator_se += b.compensator_se / draws;
  }
  out.ll.n_events = out.draws.front().stats.n_events;
  out.ll.t_end = out.draws.front().stats.t_end;
  if (latent) {
    ad::Var kl = kl_estimate(s, q, zs);
    out.kl = kl.item();
    out.objective = beta == 0.0 ? out.reconstruction : ad::sub(out.reconstruction, ad::scale(kl, beta));
  } else {
    out.objective = out.reconstruction;
  }
  return out;
}

}  // namespace pmtpp
