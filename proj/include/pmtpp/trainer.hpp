#pragma once

// Minibatch training of the negative beta-ELBO with Adam, linear learning-rate
// warmup over the first epoch, sawtooth beta annealing, and early stopping on
// validation likelihood. Also the nested-subset curriculum used for data-size
// ablations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pmtpp/diffgraph.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/likelihood.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/rng.hpp"
#include "pmtpp/scoring.hpp"

namespace pmtpp {

struct TrainConfig {
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_epochs = 1.0;
  double beta_max = 1e-3;
  double beta_period = 0.2;  // in epochs
  int batch_size = 64;
  int max_epochs = 30;
  int patience = 3;
  double min_delta = 0.0;  // required improvement of mean validation log-likelihood
  int eval_every = 1;      // epochs between validation passes
  int mc_samples = 150;
  int valid_z = 5;
  int valid_mc_samples = 500;
  int max_refs = 8;
  bool include_target = false;
  bool init_rate_bias = true;  // start RMTPP mark biases at the empirical per-mark rates
  int threads = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw UsageError("trainer.lr must be positive");
    if (beta_max < 0.0) throw UsageError("trainer.beta_max must be nonnegative");
    if (!(beta_period > 0.0 && beta_period <= 1.0)) throw UsageError("trainer.beta_period must lie in (0, 1]");
    if (batch_size < 1 || max_epochs < 1 || patience < 1 || eval_every < 1)
      throw UsageError("trainer: batch_size, max_epochs, patience and eval_every must be positive");
    if (mc_samples < 1 || valid_z < 1 || valid_mc_samples < 1) throw UsageError("trainer: sample counts must be positive");
  }
};

/// beta at a fractional epoch position: linear ramp 0 -> beta_max over each period.
inline double beta_at(const TrainConfig& cfg, double epoch_pos) {
  const double c = epoch_pos / cfg.beta_period;
  return cfg.beta_max * (c - std::floor(c));
}

/// Learning rate for optimizer step `step` (0-based), warming up linearly
/// from 0 over `warmup_steps`.
inline double lr_at(const TrainConfig& cfg, long step, long warmup_steps) {
  if (warmup_steps <= 0) return cfg.lr;
  return cfg.lr * std::min(1.0, double(step) / double(warmup_steps));
}

class Adam {
 public:
  Adam() = default;
  Adam(const ad::ParamStore& store, double beta1, double beta2, double eps)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(ad::zero_grads(store)), v_(ad::zero_grads(store)) {}

  void step(ad::ParamStore& store, const ad::GradBuffer& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t p = 0; p < store.size(); ++p) {
      auto x = store.at(p).value.data();
      const auto& g = grads[p];
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  double b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  ad::GradBuffer m_, v_;
};

struct MetricsRow {
  std::string stage;
  int epoch = 0;
  long step = 0;
  std::string split;
  double nll = 0.0, sce = 0.0, pp_plus = 0.0, pp_minus = 0.0, kl = 0.0, beta = 0.0, lr = 0.0;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "stage,epoch,step,split,nll,sce,pp_plus,pp_minus,kl,beta,lr\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%ld,%s,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.stage.c_str(),
                  r.epoch, r.step, r.split.c_str(), r.nll, r.sce, r.pp_plus, r.pp_minus, r.kl, r.beta, r.lr);
    out << buf;
  }
}

struct StopRule {
  int patience = 3;
  double min_delta = 0.0;
  int max_epochs = 30;
};

struct FitResult {
  int epochs = 0;
  double best_valid_nll = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

/// Sets the RMTPP mark biases to log((n_k + 1) / total observed time) so the
/// first steps are not spent shrinking an intensity that is K times too large.
/// No-op for NHP, whose intensity head has no bias.
inline void init_rate_bias(Model& model, const Dataset& train) {
  if (model.decoder().kind() != DecoderKind::kRMTPP) return;
  std::vector<double> counts(std::size_t(model.config().K), 1.0);
  double time = 0.0;
  for (const auto& u : train.users)
    for (const auto& s : u.reference_sequences) {
      time += s.horizon;
      for (const auto& e : s.events) {
        if (e.mark < 0 || e.mark >= model.config().K) throw UsageError("init_rate_bias: mark out of range");
        counts[std::size_t(e.mark)] += 1.0;
      }
    }
  if (!(time > 0.0)) throw UsageError("init_rate_bias: training data covers no time");
  auto b = model.params().at(model.decoder().b().index).value.data();
  for (std::size_t k = 0; k < b.size(); ++k) b[k] = std::log(counts[k] / time);
}

class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    adam_ = Adam(model_.params(), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
  }

  const TrainConfig& config() const { return cfg_; }
  long steps() const { return step_; }
  const std::vector<MetricsRow>& metrics() const { return rows_; }

  /// Trains until the stop rule fires, then restores the best validation parameters.
  FitResult fit(const Dataset& train, const Dataset& valid, const std::string& stage, const StopRule& rule) {
    const auto index = train.index();
    if (index.empty()) throw UsageError("train: empty training set");
    const std::size_t B = std::size_t(cfg_.batch_size);
    const std::size_t n_batches = (index.size() + B - 1) / B;
    if (warmup_steps_ < 0) warmup_steps_ = std::lround(cfg_.warmup_epochs * double(n_batches));
    if (step_ == 0 && cfg_.init_rate_bias) init_rate_bias(model_, train);

    FitResult res;
    std::vector<ad::Parameter> best = model_.params().all();
    double reference = std::numeric_limits<double>::infinity();  // last significant improvement
    int bad = 0;
    std::vector<ad::GradBuffer> slots(std::min(B, index.size()));
    for (auto& s : slots) s = ad::zero_grads(model_.params());
    std::vector<ElboSummary> results(slots.size());
    ad::GradBuffer total = ad::zero_grads(model_.params());

    for (int epoch = 0; epoch < rule.max_epochs; ++epoch) {
      std::vector<std::size_t> order(index.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng = substream(cfg_.seed, {0x5EED, std::uint64_t(global_epoch_)});
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      ElboSummary acc;
      double beta = 0.0, lr = 0.0;
      for (std::size_t b = 0; b < n_batches; ++b) {
        const std::size_t lo = b * B, hi = std::min(index.size(), lo + B);
        const double epoch_pos = double(epoch) + double(b) / double(n_batches);
        beta = beta_at(cfg_, epoch_pos);
        lr = lr_at(cfg_, step_, warmup_steps_);
        parallel_for(hi - lo, cfg_.threads, [&](std::size_t i) {
          const auto [u, j] = index[order[lo + i]];
          Rng rng = substream(cfg_.seed, {0x7EA1, std::uint64_t(step_), i});
          results[i] = train_one(train.users[u], j, beta, rng, slots[i]);
        });
        for (auto& t : total) t.fill(0.0);
        for (std::size_t i = 0; i < hi - lo; ++i) {
          for (std::size_t p = 0; p < total.size(); ++p) total[p] += slots[i][p];
          acc.add(results[i]);
        }
        const double inv = 1.0 / double(hi - lo);
        double norm2 = 0.0;
        for (auto& t : total)
          for (auto& g : t.data()) {
            g *= inv;
            norm2 += g * g;
          }
        if (!std::isfinite(norm2))
          throw NumericError(diagnostics("non-finite gradient", stage, epoch, norm2));
        adam_.step(model_.params(), total, lr);
        ++step_;
      }
      ++global_epoch_;
      rows_.push_back(acc.row(stage, epoch, step_, "train", beta, lr));

      if ((epoch + 1) % cfg_.eval_every != 0 && epoch + 1 != rule.max_epochs) continue;
      ScoreOptions opt{cfg_.valid_z, cfg_.valid_mc_samples, cfg_.max_refs, cfg_.include_target, cfg_.seed ^ 0xA11D,
                       cfg_.threads};
      EvalMetrics vm = evaluate_dataset(model_, valid, opt);
      if (!std::isfinite(vm.nll)) throw NumericError(diagnostics("non-finite validation loss", stage, epoch, 0.0));
      rows_.push_back({stage, epoch, step_, "valid", vm.nll, vm.sce, vm.pp_plus, vm.pp_minus, vm.kl, beta, lr});
      res.epochs = epoch + 1;
      if (vm.nll < res.best_valid_nll) {
        res.best_valid_nll = vm.nll;
        best = model_.params().all();
      }
      if (vm.nll < reference - rule.min_delta) {
        reference = vm.nll;
        bad = 0;
      } else if (++bad >= rule.patience) {
        res.early_stopped = true;
        break;
      }
    }
    model_.params().all() = std::move(best);
    return res;
  }

  FitResult fit(const Dataset& train, const Dataset& valid) {
    return fit(train, valid, "main", StopRule{cfg_.patience, cfg_.min_delta, cfg_.max_epochs});
  }

 private:
  struct ElboSummary {
    double nll = 0, sce = 0, pp_plus = 0, pp_minus = 0, kl = 0;
    std::size_t n = 0;

    void add(const ElboSummary& o) {
      nll += o.nll;
      sce += o.sce;
      pp_plus += o.pp_plus;
      pp_minus += o.pp_minus;
      kl += o.kl;
      n += o.n;
    }

    MetricsRow row(const std::string& stage, int epoch, long step, const std::string& split, double beta,
                   double lr) const {
      const double d = n ? double(n) : 1.0;
      return {stage, epoch, step, split, nll / d, sce / d, pp_plus / d, pp_minus / d, kl / d, beta, lr};
    }
  };

  ElboSummary train_one(const UserRecord& user, std::size_t j, double beta, Rng& rng, ad::GradBuffer& grads) const {
    const Sequence& target = user.reference_sequences[j];
    std::vector<Sequence> refs;
    if (model_.personalized()) refs = reference_set(user, j, cfg_.max_refs, cfg_.include_target, rng);
    ad::Tape tape;
    Scope s{tape, model_.params()};
    const auto where = [&] {
      return " for sequence " + target.seq_id + " of user " + user.user_id +
             " (RMTPP exponent clamps so far: " + std::to_string(rmtpp_clamp_counter().load()) + ")";
    };
    ElboResult e;
    try {
      e = elbo(s, model_.decoder(), model_.encoder(), refs, target, beta, 1, cfg_.mc_samples, rng);
    } catch (const NumericError& err) {
      throw NumericError("training objective is not finite" + where() + ": " + err.what());
    }
    if (!std::isfinite(e.objective.item())) throw NumericError("training objective is not finite" + where());
    tape.backward(ad::neg(e.objective));
    for (auto& g : grads) g.fill(0.0);
    tape.collect_grads(grads);
    return {-e.ll.log_lik, e.ll.sce, e.ll.pp_plus, e.ll.pp_minus, e.kl, 1};
  }

  std::string diagnostics(const std::string& what, const std::string& stage, int epoch, double norm2) const {
    std::ostringstream os;
    os << what << " (stage " << stage << ", epoch " << epoch << ", step " << step_
       << ", squared grad norm " << norm2 << ", RMTPP exponent clamps " << rmtpp_clamp_counter().load() << ")";
    return os.str();
  }

  Model& model_;
  TrainConfig cfg_;
  Adam adam_;
  long step_ = 0;
  long warmup_steps_ = -1;
  int global_epoch_ = 0;
  std::vector<MetricsRow> rows_;
};

struct AblationPlan {
  std::vector<double> fractions = {0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0};
  double convergence_delta = 0.1;

  void validate() const {
    if (fractions.empty()) throw UsageError("ablation: no fractions");
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      if (!(fractions[i] > 0.0 && fractions[i] <= 1.0)) throw UsageError("ablation: fractions must lie in (0, 1]");
      if (i > 0 && !(fractions[i] > fractions[i - 1])) throw UsageError("ablation: fractions must increase");
    }
  }
};

/// Users of `ds` at positions perm[0 .. ceil(fraction * n)).
inline Dataset user_subset(const Dataset& ds, const std::vector<std::size_t>& perm, double fraction) {
  Dataset out;
  out.K = ds.K;
  out.split = ds.split;
  const auto n = std::size_t(std::ceil(fraction * double(ds.users.size()) - 1e-9));
  for (std::size_t i = 0; i < std::min(n, perm.size()); ++i) out.users.push_back(ds.users[perm[i]]);
  return out;
}

struct StageResult {
  double fraction = 0.0;
  std::size_t n_users = 0;
  FitResult fit;
  EvalMetrics test;
};

/// Trains on nested user subsets of increasing size, carrying parameters and
/// optimizer state between stages; each stage stops once validation
/// log-likelihood has failed to improve by the plan's convergence delta for
/// `patience` consecutive validation passes.
inline std::vector<StageResult> curriculum_ablate(Trainer& trainer, Model& model, const Dataset& train,
                                                  const Dataset& valid, const Dataset& test, const AblationPlan& plan,
                                                  const ScoreOptions& test_opts,
                                                  std::span<const double> grid = {}) {
  plan.validate();
  std::vector<std::size_t> perm(train.users.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = substream(trainer.config().seed, {0xAB1A});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<StageResult> out;
  for (double f : plan.fractions) {
    Dataset sub = user_subset(train, perm, f);
    std::ostringstream stage;
    stage << "frac=" << f;
    StageResult r;
    r.fraction = f;
    r.n_users = sub.users.size();
    r.fit = trainer.fit(sub, valid, stage.str(),
                        StopRule{trainer.config().patience, plan.convergence_delta, trainer.config().max_epochs});
    r.test = evaluate_dataset(model, test, test_opts, grid);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pmtpp
