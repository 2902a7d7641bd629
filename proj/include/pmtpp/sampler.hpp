#pragma once

// Thinning sampler with a dominance check.
//
// Candidates come from a homogeneous process at rate lambda_star and are kept
// with probability lambda(t | H) / lambda_star. After a full pass the
// produced sequence is probed at uniform times; if the model intensity ever
// exceeds lambda_star the bound is escalated and the sequence regenerated
// from a fresh RNG substream.

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmtpp/decoders.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

struct ThinningConfig {
  std::optional<double> lambda_star;  // unset: start_multiplier x total intensity at the window start
  double start_multiplier = 10.0;
  double escalation = 2.0;
  int validation_points = 1000;
  int max_escalations = 30;

  void validate() const {
    if (lambda_star && !(*lambda_star > 0.0)) throw UsageError("sampler: lambda_star must be positive");
    if (!(start_multiplier > 0.0)) throw UsageError("sampler: start_multiplier must be positive");
    if (!(escalation > 1.0)) throw UsageError("sampler: escalation must exceed 1");
    if (validation_points < 1 || max_escalations < 0)
      throw UsageError("sampler: validation_points must be positive and max_escalations nonnegative");
  }
};

struct SampleResult {
  Sequence sequence;  // prefix events followed by the sampled ones
  std::size_t n_prefix = 0;
  double lambda_star = 0.0;  // bound that produced the accepted sample
  int escalations = 0;
};

namespace detail {

inline std::vector<double> rates_at(const Scope& s, const Decoder& dec, const DecoderState& st, double t) {
  const double ts[1] = {t};
  auto r = dec.rates(s, st, ts).value().vec();
  for (double v : r)
    if (!std::isfinite(v) || v < 0.0) throw NumericError("sampler: non-finite or negative intensity");
  return r;
}

inline double total(const std::vector<double>& r) {
  double t = 0.0;
  for (double v : r) t += v;
  return t;
}

inline ad::Var latent(const Scope& s, const Decoder& dec, const std::optional<ad::Tensor>& z) {
  if (dec.personalized() != z.has_value())
    throw UsageError(dec.personalized() ? "sampler: personalized model needs z" : "sampler: model takes no z");
  return z ? s.constant(*z) : ad::Var{};
}

}  // namespace detail

/// True iff the intensity conditioned on `sampled` stays at or below
/// `lambda_star` at `n_points` uniform times in [start, T).
inline bool validate_dominance(const Model& model, const std::optional<ad::Tensor>& z, const Sequence& sampled,
                               double start, double lambda_star, int n_points, Rng& rng) {
  if (!(sampled.horizon > start)) throw UsageError("validate_dominance: empty window");
  if (n_points < 1) throw UsageError("validate_dominance: need at least one probe");
  std::vector<double> probes(static_cast<std::size_t>(n_points));
  for (auto& t : probes) t = start + (sampled.horizon - start) * uniform01(rng);
  std::sort(probes.begin(), probes.end());

  const Decoder& dec = model.decoder();
  ad::Tape tape(false);
  Scope s{tape, model.params()};
  ad::Var zv = detail::latent(s, dec, z);
  DecoderState st = dec.init_state(s, zv);
  std::size_t next = 0;
  std::vector<double> batch;
  auto flush = [&] {
    if (batch.empty()) return true;
    const ad::Tensor r = dec.rates(s, st, batch).value();
    batch.clear();
    for (std::size_t j = 0; j < r.cols(); ++j) {
      double tot = 0.0;
      for (std::size_t k = 0; k < r.rows(); ++k) tot += r(k, j);
      if (!(tot <= lambda_star)) return false;  // NaN counts as a violation
    }
    return true;
  };
  for (double t : probes) {
    // History strictly before t.
    while (next < sampled.size() && sampled.events[next].time < t) {
      if (!flush()) return false;
      st = dec.update_state(s, st, sampled.events[next++], zv);
    }
    batch.push_back(t);
  }
  return flush();
}

/// Samples events in (start, T) conditioned on `prefix` (all events <= start).
/// The returned sequence holds the prefix followed by the new events.
inline SampleResult sample_sequence(const Model& model, const std::optional<ad::Tensor>& z, const Sequence& prefix,
                                    double start, double T, const ThinningConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!(T > start) || start < 0.0) throw UsageError("sample_sequence: need 0 <= start < T");
  for (const auto& e : prefix.events)
    if (e.time > start) throw UsageError("sample_sequence: prefix events must not follow the window start");
  const Decoder& dec = model.decoder();
  const std::uint64_t base = rng();

  double lambda_star = 0.0;
  {
    ad::Tape tape(false);
    Scope s{tape, model.params()};
    ad::Var zv = detail::latent(s, dec, z);
    DecoderState st = dec.init_state(s, zv);
    for (const auto& e : prefix.events) st = dec.update_state(s, st, e, zv);
    lambda_star = cfg.lambda_star ? *cfg.lambda_star
                                  : cfg.start_multiplier * detail::total(detail::rates_at(s, dec, st, start));
    if (!(lambda_star > 0.0) || !std::isfinite(lambda_star))
      throw NumericError("sample_sequence: initial intensity bound is not a positive finite number");
  }

  for (int attempt = 0; attempt <= cfg.max_escalations; ++attempt) {
    Rng arng = substream(base, {std::uint64_t(attempt)});
    SampleResult out;
    out.sequence = prefix;
    out.sequence.horizon = T;
    out.n_prefix = prefix.size();
    out.lambda_star = lambda_star;
    out.escalations = attempt;

    ad::Tape tape(false);
    Scope s{tape, model.params()};
    ad::Var zv = detail::latent(s, dec, z);
    DecoderState st = dec.init_state(s, zv);
    for (const auto& e : prefix.events) st = dec.update_state(s, st, e, zv);

    bool violated = false;
    std::exponential_distribution<double> gap(lambda_star);
    double t = start;
    for (;;) {
      t += gap(arng);
      if (t >= T) break;
      const auto r = detail::rates_at(s, dec, st, t);
      const double lam = detail::total(r);
      if (lam > lambda_star) {
        violated = true;
        break;
      }
      if (uniform01(arng) * lambda_star >= lam) continue;
      std::discrete_distribution<int> mark(r.begin(), r.end());
      Event e{t, mark(arng)};
      out.sequence.events.push_back(e);
      st = dec.update_state(s, st, e, zv);
    }
    if (!violated) {
      Rng vrng = substream(base, {std::uint64_t(attempt), 0x7A11});
      if (validate_dominance(model, z, out.sequence, start, lambda_star, cfg.validation_points, vrng)) return out;
    }
    lambda_star *= cfg.escalation;
  }
  throw NumericError("sample_sequence: intensity bound still violated after " + std::to_string(cfg.max_escalations) +
                     " escalations (lambda_star reached " + std::to_string(lambda_star / cfg.escalation) + ")");
}

/// Independent replicates, each from its own substream of `seed`.
inline std::vector<SampleResult> sample_replicates(const Model& model, const std::optional<ad::Tensor>& z,
                                                   const Sequence& prefix, double start, double T,
                                                   const ThinningConfig& cfg, std::uint64_t seed, int n,
                                                   int threads = 1) {
  if (n < 0) throw UsageError("sample_replicates: negative count");
  std::vector<SampleResult> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), threads, [&](std::size_t i) {
    Rng rng = substream(seed, {0x5A3F, i});
    out[i] = sample_sequence(model, z, prefix, start, T, cfg, rng);
    out[i].sequence.seq_id = prefix.seq_id.empty() ? "sample" + std::to_string(i)
                                                   : prefix.seq_id + "/sample" + std::to_string(i);
  });
  return out;
}

/// Event-core JSON record plus a provenance block.
inline nlohmann::json sample_to_json(const SampleResult& r, const std::string& model_id, std::uint64_t seed) {
  nlohmann::json j = sequence_to_json(r.sequence);
  j["provenance"] = {{"model", model_id},
                     {"seed", seed},
                     {"lambda_star", r.lambda_star},
                     {"escalations", r.escalations},
                     {"n_prefix", r.n_prefix}};
  return j;
}

}  // namespace pmtpp
