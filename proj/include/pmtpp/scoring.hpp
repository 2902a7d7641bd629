#pragma once

// Reference-set construction and held-out scoring shared by training,
// evaluation and the experiment protocols.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmtpp/event.hpp"
#include "pmtpp/likelihood.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

/// The user's other sequences (optionally including the target), capped at
/// `max_refs` by uniform subsampling without replacement; original order kept.
inline std::vector<Sequence> reference_set(const UserRecord& user, std::size_t target, int max_refs,
                                           bool include_target, Rng& rng) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < user.reference_sequences.size(); ++i)
    if (include_target || i != target) idx.push_back(i);
  if (max_refs >= 0 && idx.size() > std::size_t(max_refs)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::size_t(max_refs));
    std::sort(idx.begin(), idx.end());
  }
  std::vector<Sequence> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(user.reference_sequences[i]);
  return out;
}

struct ScoreOptions {
  int n_z = 5;
  int mc_samples = 500;
  int max_refs = 8;
  bool include_target = false;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct SequenceScore {
  std::string user_id;
  std::string seq_id;
  LLBreakdown ll;  // averaged over z draws
  double kl = 0.0;
  std::vector<TimePoint> curve;  // averaged over z draws; empty without a grid
};

/// Scores `target` given explicit references, averaging over posterior draws.
inline SequenceScore score_sequence(const Model& model, std::span<const Sequence> refs, const Sequence& target,
                                    int n_z, int mc_samples, Rng& rng, EvalWindow window = {},
                                    std::span<const double> grid = {}) {
  ad::Tape tape(false);
  Scope s{tape, model.params()};
  auto e = elbo(s, model.decoder(), model.encoder(), refs, target, 0.0, n_z, mc_samples, rng, window);
  SequenceScore out{target.user_id, target.seq_id, e.ll, e.kl, {}};
  if (!grid.empty()) {
    const double nd = double(e.draws.size());
    for (std::size_t d = 0; d < e.draws.size(); ++d) {
      auto pts = over_time(e.draws[d].trace, window.start, grid);
      if (d == 0) {
        out.curve.resize(pts.size());
        for (std::size_t g = 0; g < pts.size(); ++g) {
          out.curve[g].t = pts[g].t;
          out.curve[g].n_events = pts[g].n_events;
          if (pts[g].sce) {
            out.curve[g].sce = 0.0;
            out.curve[g].pp_plus = 0.0;
          }
        }
      }
      for (std::size_t g = 0; g < pts.size(); ++g) {
        if (pts[g].sce) {
          *out.curve[g].sce += *pts[g].sce / nd;
          *out.curve[g].pp_plus += *pts[g].pp_plus / nd;
        }
        out.curve[g].pp_minus += pts[g].pp_minus / nd;
      }
    }
  }
  return out;
}

struct EvalMetrics {
  double nll = 0.0;  // mean over sequences of -log p(H | z), averaged over z draws
  double sce = 0.0;
  double pp_plus = 0.0;
  double pp_minus = 0.0;
  double kl = 0.0;
  double nll_se = 0.0;  // standard error of the mean across sequences
  std::vector<SequenceScore> sequences;
};

inline EvalMetrics summarize_scores(std::vector<SequenceScore> scores) {
  EvalMetrics m;
  const double n = double(scores.size());
  if (scores.empty()) return m;
  double sq = 0.0;
  for (const auto& s : scores) {
    m.nll += -s.ll.log_lik / n;
    m.sce += s.ll.sce / n;
    m.pp_plus += s.ll.pp_plus / n;
    m.pp_minus += s.ll.pp_minus / n;
    m.kl += s.kl / n;
  }
  for (const auto& s : scores) sq += (-s.ll.log_lik - m.nll) * (-s.ll.log_lik - m.nll);
  if (scores.size() > 1) m.nll_se = std::sqrt(sq / (n - 1.0) / n);
  m.sequences = std::move(scores);
  return m;
}

/// Scores every sequence of `ds`, conditioning MoE models on the user's other
/// sequences in the same split. Deterministic for a fixed seed and any thread count.
inline EvalMetrics evaluate_dataset(const Model& model, const Dataset& ds, const ScoreOptions& opt,
                                    std::span<const double> grid = {}) {
  const auto index = ds.index();
  std::vector<SequenceScore> scores(index.size());
  parallel_for(index.size(), opt.threads, [&](std::size_t i) {
    const auto [u, j] = index[i];
    Rng rng = substream(opt.seed, {0xE7A1, u, j});
    const auto& user = ds.users[u];
    std::vector<Sequence> refs;
    if (model.personalized()) refs = reference_set(user, j, opt.max_refs, opt.include_target, rng);
    scores[i] = score_sequence(model, refs, user.reference_sequences[j], opt.n_z, opt.mc_samples, rng, {}, grid);
  });
  return summarize_scores(std::move(scores));
}

}  // namespace pmtpp
