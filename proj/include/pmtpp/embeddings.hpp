#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pmtpp/diffgraph.hpp"
#include "pmtpp/errors.hpp"

namespace pmtpp {

/// Learned K x d_mark lookup table. Encoder and decoder hold the same ParamRef
/// when the table is shared, so their gradients land in the same rows.
class MarkEmbedding {
 public:
  MarkEmbedding() = default;
  MarkEmbedding(ad::ParamStore& store, const std::string& name, int K, int d_mark)
      : K_(K), d_mark_(d_mark), table_(store.add(name, std::size_t(K), std::size_t(d_mark),
                                                  ad::InitKind::kUniformUnit)) {
    if (K <= 0 || d_mark <= 0) throw UsageError("MarkEmbedding: K and d_mark must be positive");
  }

  int K() const { return K_; }
  int dim() const { return d_mark_; }
  ad::ParamRef table() const { return table_; }

  ad::Var embed(ad::Tape& tape, const ad::ParamStore& store, int mark) const {
    if (mark < 0 || mark >= K_)
      throw UsageError("embed_mark: mark " + std::to_string(mark) + " outside [0," + std::to_string(K_) + ")");
    return ad::row_as_column(tape.param(store, table_), std::size_t(mark));
  }

 private:
  int K_ = 0;
  int d_mark_ = 0;
  ad::ParamRef table_;
};

/// Fixed sinusoidal embedding of elapsed time,
///   [sin(alpha_j dt) ; cos(alpha_j dt)],  alpha_j = exp(-j log(T_max) / d_time),
/// for j = 0 .. d_time/2 - 1.
class TemporalEmbeddingSpec {
 public:
  TemporalEmbeddingSpec() = default;
  TemporalEmbeddingSpec(int d_time, double t_max) : d_time_(d_time), t_max_(t_max) {
    if (d_time <= 0 || d_time % 2 != 0) throw UsageError("temporal embedding size must be positive and even");
    if (!(t_max > 0.0) || !std::isfinite(t_max)) throw UsageError("T_max must be positive and finite");
    alpha_.resize(std::size_t(d_time / 2));
    for (int j = 0; j < d_time / 2; ++j) alpha_[std::size_t(j)] = std::exp(-double(j) * std::log(t_max) / double(d_time));
  }

  int dim() const { return d_time_; }
  double t_max() const { return t_max_; }
  const std::vector<double>& alpha() const { return alpha_; }

  ad::Tensor embed(double t, double t_prev) const {
    if (t < t_prev) throw UsageError("embed_time: t precedes the previous event time");
    const double dt = t - t_prev;
    const std::size_t half = alpha_.size();
    ad::Tensor out(2 * half, 1);
    for (std::size_t j = 0; j < half; ++j) {
      out[j] = std::sin(alpha_[j] * dt);
      out[half + j] = std::cos(alpha_[j] * dt);
    }
    return out;
  }

 private:
  int d_time_ = 0;
  double t_max_ = 1.0;
  std::vector<double> alpha_;
};

}  // namespace pmtpp
