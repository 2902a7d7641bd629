#pragma once

// Amortized inference over a user's reference sequences.
//
// Each reference sequence is read by a bidirectional GRU over [Phi(dt_i) ; k_i];
// the last forward and first backward hidden states feed two linear heads
// giving one diagonal Gaussian "expert". The posterior is the uniform mixture
// of the experts; an empty reference set falls back to the N(0, I) prior.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "pmtpp/decoders.hpp"
#include "pmtpp/diffgraph.hpp"
#include "pmtpp/embeddings.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

struct EncoderConfig {
  int d_time = 64;
  int d_mark = 32;
  int enc_hidden = 64;
  int latent = 32;
};

struct ExpertGaussian {
  ad::Var mu;
  ad::Var log_sigma;
};

/// Uniform mixture of experts; no experts means the standard normal prior.
struct PosteriorMixture {
  std::size_t latent = 0;
  std::vector<ExpertGaussian> experts;

  bool is_prior() const { return experts.empty(); }
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ad::ParamStore& store, const std::string& name, const EncoderConfig& cfg, MarkEmbedding marks,
          TemporalEmbeddingSpec time)
      : cfg_(cfg), marks_(marks), time_(std::move(time)) {
    if (cfg.enc_hidden <= 0 || cfg.latent <= 0) throw UsageError("EncoderConfig: sizes must be positive");
    if (marks.dim() != cfg.d_mark) throw UsageError("EncoderConfig: d_mark does not match the mark embedding");
    if (time_.dim() != cfg.d_time) throw UsageError("EncoderConfig: d_time does not match the temporal embedding");
    const int in = cfg.d_time + cfg.d_mark;
    const auto H = std::size_t(cfg.enc_hidden);
    const auto L = std::size_t(cfg.latent);
    fwd_ = GruCell(store, name + ".fwd", in, cfg.enc_hidden);
    bwd_ = GruCell(store, name + ".bwd", in, cfg.enc_hidden);
    hf0_ = store.add(name + ".h_fwd_0", H, 1, ad::InitKind::kZeros);
    hb0_ = store.add(name + ".h_bwd_0", H, 1, ad::InitKind::kZeros);
    Wmu_ = store.add(name + ".W_mu", L, 2 * H, ad::InitKind::kUniformFanIn);
    bmu_ = store.add(name + ".b_mu", L, 1, ad::InitKind::kZeros);
    Wsig_ = store.add(name + ".W_sigma", L, 2 * H, ad::InitKind::kUniformFanIn);
    bsig_ = store.add(name + ".b_sigma", L, 1, ad::InitKind::kZeros);
  }

  const EncoderConfig& config() const { return cfg_; }
  const TemporalEmbeddingSpec& time_embedding() const { return time_; }
  ad::ParamRef W_mu() const { return Wmu_; }
  ad::ParamRef b_mu() const { return bmu_; }
  ad::ParamRef W_sigma() const { return Wsig_; }
  ad::ParamRef b_sigma() const { return bsig_; }

  /// Concatenated [forward last ; backward first] hidden state.
  ad::Var summarize(const Scope& s, const Sequence& seq) const {
    using namespace ad;
    const std::size_t n = seq.size();
    if (n == 0) throw UsageError("encode_sequence: empty sequence");
    Tensor phi(std::size_t(cfg_.d_time), n);
    std::vector<std::size_t> marks(n);
    double t_prev = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& e = seq.events[i];
      if (e.mark < 0 || e.mark >= marks_.K())
        throw UsageError("encode_sequence: mark " + std::to_string(e.mark) + " out of range");
      Tensor col = time_.embed(e.time, t_prev);
      for (std::size_t r = 0; r < col.size(); ++r) phi(r, i) = col[r];
      marks[i] = std::size_t(e.mark);
      t_prev = e.time;
    }
    Var X = concat({s.constant(std::move(phi)), gather_rows_as_cols(s.p(marks_.table()), marks)});
    Var GF = fwd_.project(s, X);
    Var GB = bwd_.project(s, X);
    Var hf = s.p(hf0_);
    for (std::size_t i = 0; i < n; ++i) hf = fwd_.step_projected(s, column_at(GF, i), hf);
    Var hb = s.p(hb0_);
    for (std::size_t i = n; i-- > 0;) hb = bwd_.step_projected(s, column_at(GB, i), hb);
    return concat({hf, hb});
  }

  ExpertGaussian encode(const Scope& s, const Sequence& seq) const {
    ad::Var h = summarize(s, seq);
    return {ad::add(ad::matmul(s.p(Wmu_), h), s.p(bmu_)), ad::add(ad::matmul(s.p(Wsig_), h), s.p(bsig_))};
  }

  PosteriorMixture build_posterior(const Scope& s, std::span<const Sequence> refs) const {
    PosteriorMixture q{std::size_t(cfg_.latent), {}};
    q.experts.reserve(refs.size());
    for (const auto& r : refs) q.experts.push_back(encode(s, r));
    return q;
  }

 private:
  EncoderConfig cfg_;
  MarkEmbedding marks_;
  TemporalEmbeddingSpec time_;
  GruCell fwd_, bwd_;
  ad::ParamRef hf0_, hb0_, Wmu_, bmu_, Wsig_, bsig_;
};

struct ZSample {
  ad::Var z;
  std::size_t component = 0;  // meaningless for the prior
  ad::Tensor eps;
};

/// Picks an expert uniformly and reparameterizes z = mu + sigma * eps.
inline ZSample sample_z(const Scope& s, const PosteriorMixture& q, Rng& rng) {
  ZSample out;
  out.eps = ad::Tensor(q.latent, 1);
  for (auto& v : out.eps.data()) v = standard_normal(rng);
  if (q.is_prior()) {
    out.z = s.constant(out.eps);
    return out;
  }
  out.component = std::uniform_int_distribution<std::size_t>(0, q.experts.size() - 1)(rng);
  const auto& ex = q.experts[out.component];
  out.z = ad::add(ex.mu, ad::mul(ad::exp(ex.log_sigma), s.constant(out.eps)));
  return out;
}

inline ad::Var prior_log_density(ad::Var z) {
  const double d = double(z.rows());
  return ad::add_scalar(ad::scale(ad::sum(ad::square(z)), -0.5), -0.5 * d * std::log(2.0 * std::numbers::pi));
}

inline ad::Var expert_log_density(const ExpertGaussian& e, ad::Var z) {
  using namespace ad;
  const double d = double(z.rows());
  Var t = mul(sub(z, e.mu), ad::exp(neg(e.log_sigma)));
  Var quad = scale(sum(square(t)), -0.5);
  return add_scalar(sub(quad, sum(e.log_sigma)), -0.5 * d * std::log(2.0 * std::numbers::pi));
}

/// log q(z) with log-sum-exp over experts; the prior density for an empty mixture.
inline ad::Var log_density(const PosteriorMixture& q, ad::Var z) {
  if (z.rows() != q.latent || z.cols() != 1)
    throw UsageError("log_density: z has shape " + z.value().shape_str() + ", expected (" +
                     std::to_string(q.latent) + "x1)");
  if (q.is_prior()) return prior_log_density(z);
  if (q.experts.size() == 1) return expert_log_density(q.experts[0], z);
  std::vector<ad::Var> parts;
  parts.reserve(q.experts.size());
  for (const auto& e : q.experts) parts.push_back(expert_log_density(e, z));
  // A fixed summation order makes the result bitwise independent of expert order.
  std::sort(parts.begin(), parts.end(), [](const ad::Var& a, const ad::Var& b) { return a.item() < b.item(); });
  return ad::add_scalar(ad::logsumexp(ad::concat(parts)), -std::log(double(q.experts.size())));
}

/// (1/S) sum_s [log q(z_s) - log p(z_s)]; exactly zero for the prior.
inline ad::Var kl_estimate(const Scope& s, const PosteriorMixture& q, std::span<const ad::Var> zs) {
  if (zs.empty()) throw UsageError("kl_estimate: no samples");
  if (q.is_prior()) return s.tape.scalar(0.0);
  std::vector<ad::Var> terms;
  terms.reserve(zs.size());
  for (const auto& z : zs) terms.push_back(ad::sub(log_density(q, z), prior_log_density(z)));
  return ad::scale(ad::sum(ad::concat(terms)), 1.0 / double(zs.size()));
}

}  // namespace pmtpp
