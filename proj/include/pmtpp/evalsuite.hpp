#pragma once

// Evaluation protocols: source identification (with a Gamma-Poisson
// baseline), likelihood-over-time curves and sample-quality metrics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/rng.hpp"
#include "pmtpp/sampler.hpp"
#include "pmtpp/scoring.hpp"

namespace pmtpp {

// ---------------------------------------------------------------------------
// Gamma-Poisson baseline: a homogeneous Poisson process whose total rate has a
// Gamma(a, b) prior (shape a, rate b). Marks are ignored.

struct GammaPoissonBaseline {
  double a = 1.0;
  double b = 1.0;

  void validate() const {
    if (!(a > 0.0) || !(b > 0.0)) throw UsageError("Gamma-Poisson prior needs a, b > 0");
  }

  /// Prior with mean `rate` and pseudo-observation time `strength`.
  static GammaPoissonBaseline from_rate(double rate, double strength) {
    if (!(rate > 0.0) || !(strength > 0.0)) throw UsageError("Gamma-Poisson prior needs rate, strength > 0");
    return {strength * rate, strength};
  }

  GammaPoissonBaseline posterior(std::size_t n_events, double window) const {
    validate();
    if (!(window >= 0.0)) throw UsageError("Gamma-Poisson update needs a nonnegative window");
    return {a + double(n_events), b + window};
  }

  double mean() const { return a / b; }
};

/// Total events over total observed time.
inline double mle_rate(const Dataset& ds) {
  double n = 0.0, t = 0.0;
  for (const auto& u : ds.users)
    for (const auto& s : u.reference_sequences) {
      n += double(s.size());
      t += s.horizon;
    }
  if (!(t > 0.0) || !(n > 0.0)) throw DataError("mle_rate: dataset has no events");
  return n / t;
}

/// log p(target | ref) with the rate integrated out under the posterior after `ref`.
inline double gamma_poisson_target_loglik(const GammaPoissonBaseline& prior, const Sequence& ref,
                                          const Sequence& target) {
  const auto post = prior.posterior(ref.size(), ref.horizon);
  const double n = double(target.size());
  const double T = target.horizon;
  return post.a * std::log(post.b) + std::lgamma(post.a + n) - std::lgamma(post.a) - (post.a + n) * std::log(post.b + T);
}

// ---------------------------------------------------------------------------
// Source identification

struct SourceIdTrial {
  Sequence target;  // truncated; its window ends at the last kept event
  Sequence same_ref;
  Sequence diff_ref;
};

/// Target truncated to its first `n` events, with the window ending at the last one.
inline Sequence truncate_target(const Sequence& seq, std::size_t n) {
  if (n == 0 || seq.size() < n) throw UsageError("truncate_target: sequence shorter than the target length");
  Sequence t = split_prefix(seq, n).first;
  t.horizon = t.events.back().time;
  return t;
}

/// Random trials: a target of `target_events` events from one user, another
/// sequence of the same user, and a sequence of a different user. Only
/// sequences with at least `target_events` events serve as targets.
inline std::vector<SourceIdTrial> make_source_id_trials(const Dataset& ds, int n_trials, std::size_t target_events,
                                                        std::uint64_t seed) {
  if (n_trials < 1) throw UsageError("source identification: need at least one trial");
  std::vector<std::size_t> eligible;
  for (std::size_t u = 0; u < ds.users.size(); ++u) {
    const auto& seqs = ds.users[u].reference_sequences;
    if (seqs.size() < 2) continue;
    if (std::any_of(seqs.begin(), seqs.end(), [&](const Sequence& s) { return s.size() >= target_events; }))
      eligible.push_back(u);
  }
  if (eligible.empty() || ds.users.size() < 2)
    throw DataError("source identification: need a user with two sequences (one of at least " +
                    std::to_string(target_events) + " events) and a second user");
  std::vector<SourceIdTrial> out;
  out.reserve(std::size_t(n_trials));
  for (int i = 0; i < n_trials; ++i) {
    Rng rng = substream(seed, {0x51D0, std::uint64_t(i)});
    const std::size_t u = eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
    const auto& seqs = ds.users[u].reference_sequences;
    std::vector<std::size_t> targets;
    for (std::size_t j = 0; j < seqs.size(); ++j)
      if (seqs[j].size() >= target_events) targets.push_back(j);
    const std::size_t tj = targets[std::uniform_int_distribution<std::size_t>(0, targets.size() - 1)(rng)];
    std::size_t rj = std::uniform_int_distribution<std::size_t>(0, seqs.size() - 2)(rng);
    if (rj >= tj) ++rj;
    std::size_t v = std::uniform_int_distribution<std::size_t>(0, ds.users.size() - 2)(rng);
    if (v >= u) ++v;
    const auto& other = ds.users[v].reference_sequences;
    const std::size_t dj = std::uniform_int_distribution<std::size_t>(0, other.size() - 1)(rng);
    out.push_back({truncate_target(seqs[tj], target_events), seqs[rj], other[dj]});
  }
  return out;
}

/// log-likelihood of `target` after conditioning on the single sequence `ref`.
using SourceIdScorer = std::function<double(const Sequence& ref, const Sequence& target, Rng& rng)>;

struct SourceIdResult {
  std::size_t trials = 0;
  double errors = 0.0;  // ties count as half an error on average (coin flip)
  std::size_t ties = 0;
  double error_rate = 0.0;
  double se = 0.0;  // binomial standard error
};

/// Scores each target under both references with common random numbers; an
/// error is the different-user reference scoring higher, ties decided by a
/// fair coin.
inline SourceIdResult source_identification(const SourceIdScorer& scorer, std::span<const SourceIdTrial> trials,
                                            std::uint64_t seed, int threads = 1) {
  if (trials.empty()) throw UsageError("source identification: no trials");
  std::vector<int> err(trials.size(), 0), tie(trials.size(), 0);
  parallel_for(trials.size(), threads, [&](std::size_t i) {
    const auto& tr = trials[i];
    if (tr.same_ref.user_id != tr.target.user_id || tr.diff_ref.user_id == tr.target.user_id)
      throw UsageError("source identification: trial references do not match their roles");
    const Rng base = substream(seed, {0x51E0, i});
    Rng r_same = base, r_diff = base;
    const double same = scorer(tr.same_ref, tr.target, r_same);
    const double diff = scorer(tr.diff_ref, tr.target, r_diff);
    if (diff == same) {
      tie[i] = 1;
      Rng coin = substream(seed, {0x51F0, i});
      err[i] = uniform01(coin) < 0.5;
    } else {
      err[i] = diff > same;
    }
  });
  SourceIdResult r;
  r.trials = trials.size();
  for (std::size_t i = 0; i < trials.size(); ++i) {
    r.errors += err[i];
    r.ties += std::size_t(tie[i]);
  }
  r.error_rate = r.errors / double(r.trials);
  r.se = std::sqrt(std::max(r.error_rate * (1.0 - r.error_rate), 1e-12) / double(r.trials));
  return r;
}

/// Mean over `n_z` posterior draws of log p(target | z), with the posterior
/// built from the reference alone. Decoder-only models ignore the reference.
inline SourceIdScorer model_scorer(const Model& model, int n_z, int mc_samples) {
  return [&model, n_z, mc_samples](const Sequence& ref, const Sequence& target, Rng& rng) {
    const Sequence refs[1] = {ref};
    return score_sequence(model, refs, target, n_z, mc_samples, rng).ll.log_lik;
  };
}

inline SourceIdScorer gamma_poisson_scorer(GammaPoissonBaseline prior) {
  prior.validate();
  return [prior](const Sequence& ref, const Sequence& target, Rng&) {
    return gamma_poisson_target_loglik(prior, ref, target);
  };
}

struct GammaPoissonTuning {
  GammaPoissonBaseline prior;
  double strength = 0.0;
  std::vector<std::pair<double, double>> validation_error;  // (strength, error rate)
};

/// Picks the prior strength with the lowest validation identification error
/// (first on ties); the prior mean stays at `rate`.
inline GammaPoissonTuning tune_gamma_poisson(double rate, std::span<const SourceIdTrial> valid_trials,
                                             std::uint64_t seed,
                                             std::vector<double> strengths = {0.1, 1.0, 10.0, 100.0}) {
  if (strengths.empty()) throw UsageError("Gamma-Poisson tuning: no strengths");
  GammaPoissonTuning out;
  double best = 2.0;
  for (double s : strengths) {
    const auto prior = GammaPoissonBaseline::from_rate(rate, s);
    const double e = source_identification(gamma_poisson_scorer(prior), valid_trials, seed).error_rate;
    out.validation_error.emplace_back(s, e);
    if (e < best) {
      best = e;
      out.prior = prior;
      out.strength = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample quality

/// 1 - |A n B| / |A u B| over distinct marks; 0 when both are empty.
inline double jaccard_distance(const Sequence& a, const Sequence& b) {
  std::set<int> ma, mb;
  for (const auto& e : a.events) ma.insert(e.mark);
  for (const auto& e : b.events) mb.insert(e.mark);
  if (ma.empty() && mb.empty()) return 0.0;
  std::size_t inter = 0;
  for (int m : ma) inter += mb.count(m);
  const std::size_t uni = ma.size() + mb.size() - inter;
  return 1.0 - double(inter) / double(uni);
}

/// Exact 1-D earth mover's distance between two empirical distributions,
/// each uniform over its own points: integral over u of |Qa(u) - Qb(u)|.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw UsageError("wasserstein_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = double(i + 1) / na, next_b = double(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    // Advance whichever quantile step ended (both on an exact tie).
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return total;
}

struct SampleQuality {
  double jd = 0.0;
  double wd = 0.0;
};

/// JD and WD between two suffixes over the same window of length
/// `window_length`. One empty side gives WD = window length; both empty give 0.
inline SampleQuality sample_quality(const Sequence& real_suffix, const Sequence& sampled_suffix,
                                    double window_length) {
  if (!(window_length > 0.0)) throw UsageError("sample_quality: window length must be positive");
  SampleQuality q;
  q.jd = jaccard_distance(real_suffix, sampled_suffix);
  const bool ea = real_suffix.events.empty(), eb = sampled_suffix.events.empty();
  if (ea && eb) {
    q.wd = 0.0;
  } else if (ea || eb) {
    q.wd = window_length;
  } else {
    std::vector<double> ta, tb;
    for (const auto& e : real_suffix.events) ta.push_back(e.time);
    for (const auto& e : sampled_suffix.events) tb.push_back(e.time);
    q.wd = wasserstein_1d(std::move(ta), std::move(tb));
  }
  return q;
}

struct SampleQualityRow {
  std::string user_id;
  std::string seq_id;
  double pi = 0.0;
  std::size_t n_real = 0;
  std::size_t n_sampled = 0;
  double jd = 0.0;
  double wd = 0.0;
  double lambda_star = 0.0;
};

struct SampleQualityResult {
  std::vector<SampleQualityRow> rows;
  double mean_jd = 0.0;
  double mean_wd = 0.0;
};

/// For each sequence: condition on the first fraction `rho` of its events,
/// sample the rest of the window from the model and compare with the real
/// suffix. MoE models draw one z from the posterior over the user's other
/// sequences in the same split.
inline SampleQualityResult evaluate_sample_quality(const Model& model, const Dataset& ds, double rho,
                                                   const ThinningConfig& thinning, int max_refs, std::uint64_t seed,
                                                   int threads = 1) {
  const auto index = ds.index();
  SampleQualityResult out;
  out.rows.resize(index.size());
  parallel_for(index.size(), threads, [&](std::size_t i) {
    const auto [u, j] = index[i];
    const auto& user = ds.users[u];
    const Sequence& seq = user.reference_sequences[j];
    Rng rng = substream(seed, {0x5A70, u, j});
    auto split = split_fraction(seq, rho);
    std::optional<ad::Tensor> z;
    if (model.personalized()) {
      const auto refs = reference_set(user, j, max_refs, false, rng);
      ad::Tape tape(false);
      Scope s{tape, model.params()};
      z = sample_z(s, model.encoder()->build_posterior(s, refs), rng).z.value();
    }
    auto sampled = sample_sequence(model, z, split.prefix, split.pi, seq.horizon, thinning, rng);
    Sequence gen = split_prefix(sampled.sequence, sampled.n_prefix).second;
    const auto q = sample_quality(split.suffix, gen, seq.horizon - split.pi);
    out.rows[i] = {user.user_id, seq.seq_id, split.pi, split.suffix.size(), gen.size(), q.jd, q.wd,
                   sampled.lambda_star};
  });
  for (const auto& r : out.rows) {
    out.mean_jd += r.jd / double(out.rows.size());
    out.mean_wd += r.wd / double(out.rows.size());
  }
  return out;
}

inline void write_sample_quality_csv(std::ostream& out, std::span<const SampleQualityRow> rows) {
  out << "user,seq_id,pi,n_real,n_sampled,jd,wd,lambda_star\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%zu,%zu,%.10g,%.10g,%.10g\n", r.user_id.c_str(), r.seq_id.c_str(),
                  r.pi, r.n_real, r.n_sampled, r.jd, r.wd, r.lambda_star);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Likelihood-over-time curves

/// n evenly spaced times T/n, 2T/n, ..., T.
inline std::vector<double> fraction_grid(double T, int n) {
  if (!(T > 0.0) || n < 1) throw UsageError("fraction_grid: need T > 0 and n >= 1");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[std::size_t(i)] = T * double(i + 1) / double(n);
  return g;
}

struct CurvePoint {
  double t = 0.0;
  double sce = 0.0;       // mean over sequences with at least one event by t
  double pp_plus = 0.0;   // same population as sce
  double pp_minus = 0.0;  // mean over all sequences
  std::size_t n_with_events = 0;
  std::size_t n_sequences = 0;
};

/// Mean curves across scored sequences; every score must carry a curve on the same grid.
inline std::vector<CurvePoint> aggregate_curves(std::span<const SequenceScore> scores) {
  if (scores.empty()) throw UsageError("aggregate_curves: no sequences");
  const std::size_t G = scores.front().curve.size();
  std::vector<CurvePoint> out(G);
  for (const auto& s : scores) {
    if (s.curve.size() != G) throw UsageError("aggregate_curves: sequences scored on different grids");
    for (std::size_t g = 0; g < G; ++g) {
      const auto& p = s.curve[g];
      if (p.t != scores.front().curve[g].t) throw UsageError("aggregate_curves: sequences scored on different grids");
      out[g].t = p.t;
      out[g].pp_minus += p.pp_minus;
      ++out[g].n_sequences;
      if (p.sce) {
        out[g].sce += *p.sce;
        out[g].pp_plus += *p.pp_plus;
        ++out[g].n_with_events;
      }
    }
  }
  for (auto& p : out) {
    p.pp_minus /= double(p.n_sequences);
    if (p.n_with_events) {
      p.sce /= double(p.n_with_events);
      p.pp_plus /= double(p.n_with_events);
    } else {
      p.sce = p.pp_plus = std::nan("");
    }
  }
  return out;
}

inline void write_curves_csv(std::ostream& out, const std::string& model, std::span<const CurvePoint> curve,
                             bool header = true) {
  if (header) out << "model,t,sce,pp_plus,pp_minus,n_with_events,n_sequences\n";
  char buf[512];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%.10g,%.10g,%zu,%zu\n", model.c_str(), p.t, p.sce, p.pp_plus,
                  p.pp_minus, p.n_with_events, p.n_sequences);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// JSON summaries

inline nlohmann::json to_json(const EvalMetrics& m) {
  return {{"nll", m.nll},   {"nll_se", m.nll_se},     {"sce", m.sce},
          {"pp_plus", m.pp_plus}, {"pp_minus", m.pp_minus}, {"kl", m.kl},
          {"n_sequences", m.sequences.size()}};
}

inline nlohmann::json to_json(const SourceIdResult& r) {
  return {{"trials", r.trials}, {"errors", r.errors}, {"ties", r.ties}, {"error_rate", r.error_rate}, {"se", r.se}};
}

inline nlohmann::json to_json(const SampleQualityResult& r) {
  return {{"n_sequences", r.rows.size()}, {"mean_jd", r.mean_jd}, {"mean_wd", r.mean_wd}};
}

}  // namespace pmtpp
