#pragma once

// Synthetic user populations with known intensities.
//
// Each user has a base rate, a mark distribution and an optional shared
// exponential self-excitation kernel:
//   lambda(t) = mu + alpha * sum_{t_j < t} exp(-omega (t - t_j)),  marks iid ~ p.
// Heterogeneity h in [0, 1] mixes each user's mark distribution between
// uniform (h = 0) and a sparse Dirichlet draw (h = 1), and spreads base rates
// log-normally with sigma = 0.5 h around the configured mean.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmtpp/errors.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

struct Excitation {
  double alpha = 0.0;
  double omega = 1.0;
};

struct SynthUserProfile {
  std::string user_id;
  double base_rate = 1.0;
  std::vector<double> mark_probs;
  std::optional<Excitation> excitation;

  void validate() const {
    if (!(base_rate > 0.0)) throw UsageError("profile " + user_id + ": base rate must be positive");
    double s = 0.0;
    for (double p : mark_probs) {
      if (!(p >= 0.0)) throw UsageError("profile " + user_id + ": negative mark probability");
      s += p;
    }
    if (mark_probs.empty() || std::abs(s - 1.0) > 1e-9)
      throw UsageError("profile " + user_id + ": mark probabilities must sum to 1");
    if (excitation && (excitation->alpha < 0.0 || !(excitation->omega > excitation->alpha)))
      throw UsageError("profile " + user_id + ": excitation needs 0 <= alpha < omega");
  }
};

struct SynthConfig {
  int n_train_users = 600;
  int n_valid_users = 50;
  int n_test_users = 100;
  int seqs_per_user = 4;
  int K = 20;
  double T = 50.0;
  double mean_rate = 0.6;  // about 30 events per sequence
  double heterogeneity = 0.8;
  double dirichlet_concentration = 0.2;
  double excitation_alpha = 0.0;  // 0 disables self-excitation
  double excitation_omega = 1.0;
  int min_events = 5;
  int max_events = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_train_users < 1 || n_valid_users < 0 || n_test_users < 0 || seqs_per_user < 1 || K < 1)
      throw UsageError("synthgen: counts must be positive");
    if (!(T > 0.0) || !(mean_rate > 0.0)) throw UsageError("synthgen: T and mean_rate must be positive");
    if (!(heterogeneity >= 0.0 && heterogeneity <= 1.0)) throw UsageError("synthgen: heterogeneity must lie in [0,1]");
    if (excitation_alpha < 0.0 || (excitation_alpha > 0.0 && !(excitation_omega > excitation_alpha)))
      throw UsageError("synthgen: excitation needs 0 <= alpha < omega");
  }
};

/// Exact log-likelihood of `seq` under the profile's process.
inline double oracle_loglik(const SynthUserProfile& p, const Sequence& seq) {
  double ll = 0.0;
  const double mu = p.base_rate;
  const double alpha = p.excitation ? p.excitation->alpha : 0.0;
  const double omega = p.excitation ? p.excitation->omega : 1.0;
  double excite = 0.0;  // sum_j exp(-omega (t - t_j)) at the current time
  double prev = 0.0;
  double comp = mu * seq.horizon;
  for (const auto& e : seq.events) {
    if (e.mark < 0 || std::size_t(e.mark) >= p.mark_probs.size()) throw UsageError("oracle_loglik: mark out of range");
    excite *= std::exp(-omega * (e.time - prev));
    ll += std::log(mu + alpha * excite) + std::log(p.mark_probs[std::size_t(e.mark)]);
    excite += 1.0;
    prev = e.time;
    if (alpha > 0.0) comp += alpha / omega * -std::expm1(-omega * (seq.horizon - e.time));
  }
  return ll - comp;
}

/// One sequence on [0, T]: exponential gaps for the homogeneous case, exact
/// thinning (the intensity only decays between events) with excitation.
inline Sequence sample_profile_sequence(const SynthUserProfile& p, double T, Rng& rng) {
  Sequence s;
  s.horizon = T;
  s.user_id = p.user_id;
  std::discrete_distribution<int> marks(p.mark_probs.begin(), p.mark_probs.end());
  const double mu = p.base_rate;
  const double alpha = p.excitation ? p.excitation->alpha : 0.0;
  const double omega = p.excitation ? p.excitation->omega : 1.0;
  double t = 0.0, excite = 0.0;
  for (;;) {
    const double bound = mu + alpha * excite;
    const double dt = std::exponential_distribution<double>(bound)(rng);
    excite *= std::exp(-omega * dt);
    t += dt;
    if (t >= T) break;
    if (alpha > 0.0 && uniform01(rng) * bound > mu + alpha * excite) continue;
    s.events.push_back({t, marks(rng)});
    excite += 1.0;
  }
  return s;
}

struct SynthPopulation {
  SplitSet data;
  std::map<std::string, SynthUserProfile> profiles;  // by user id
  std::map<std::string, double> oracle;              // "user/seq_id" -> exact log-likelihood
  std::size_t n_filtered = 0;
};

inline SynthUserProfile draw_profile(const SynthConfig& cfg, const std::string& user_id, Rng& rng) {
  SynthUserProfile p;
  p.user_id = user_id;
  const double h = cfg.heterogeneity;
  const double sigma = 0.5 * h;
  p.base_rate = cfg.mean_rate * std::exp(sigma * standard_normal(rng) - 0.5 * sigma * sigma);
  std::vector<double> dir(std::size_t(cfg.K));
  double tot = 0.0;
  std::gamma_distribution<double> gamma(cfg.dirichlet_concentration, 1.0);
  for (auto& d : dir) tot += d = gamma(rng);
  p.mark_probs.resize(dir.size());
  for (std::size_t k = 0; k < dir.size(); ++k) {
    const double sparse = tot > 0.0 ? dir[k] / tot : 1.0 / double(cfg.K);
    p.mark_probs[k] = (1.0 - h) / double(cfg.K) + h * sparse;
  }
  double s = 0.0;
  for (double v : p.mark_probs) s += v;
  for (double& v : p.mark_probs) v /= s;
  if (cfg.excitation_alpha > 0.0) p.excitation = Excitation{cfg.excitation_alpha, cfg.excitation_omega};
  return p;
}

/// Train/valid/test populations with disjoint users. Sequences whose length
/// falls outside [min_events, max_events] are dropped and counted.
inline SynthPopulation generate_population(const SynthConfig& cfg) {
  cfg.validate();
  SynthPopulation pop;
  const std::pair<Split, int> plan[] = {
      {Split::kTrain, cfg.n_train_users}, {Split::kValid, cfg.n_valid_users}, {Split::kTest, cfg.n_test_users}};
  for (const auto& [split, n_users] : plan) {
    Dataset& ds = split == Split::kTrain ? pop.data.train : split == Split::kValid ? pop.data.valid : pop.data.test;
    ds.K = cfg.K;
    ds.split = split;
    for (int u = 0; u < n_users; ++u) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_u%04d", to_string(split).c_str(), u);
      Rng rng = substream(cfg.seed, {std::uint64_t(split), std::uint64_t(u)});
      SynthUserProfile prof = draw_profile(cfg, id, rng);
      UserRecord rec{id, {}};
      for (int j = 0; j < cfg.seqs_per_user; ++j) {
        Sequence seq = sample_profile_sequence(prof, cfg.T, rng);
        seq.seq_id = "s" + std::to_string(j);
        const int n = int(seq.size());
        if (n < cfg.min_events || n > cfg.max_events) {
          ++pop.n_filtered;
          ++ds.n_filtered;
          continue;
        }
        pop.oracle[seq.user_id + "/" + seq.seq_id] = oracle_loglik(prof, seq);
        rec.reference_sequences.push_back(std::move(seq));
      }
      if (!rec.reference_sequences.empty()) ds.users.push_back(std::move(rec));
      pop.profiles.emplace(id, std::move(prof));
    }
  }
  return pop;
}

inline nlohmann::json profile_to_json(const SynthUserProfile& p) {
  nlohmann::json j = {{"user", p.user_id}, {"base_rate", p.base_rate}, {"mark_probs", p.mark_probs}};
  if (p.excitation) j["excitation"] = {{"alpha", p.excitation->alpha}, {"omega", p.excitation->omega}};
  return j;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
  return {{"n_train_users", c.n_train_users}, {"n_valid_users", c.n_valid_users},
          {"n_test_users", c.n_test_users},   {"seqs_per_user", c.seqs_per_user},
          {"K", c.K},                         {"T", c.T},
          {"mean_rate", c.mean_rate},         {"heterogeneity", c.heterogeneity},
          {"dirichlet_concentration", c.dirichlet_concentration},
          {"excitation_alpha", c.excitation_alpha}, {"excitation_omega", c.excitation_omega},
          {"min_events", c.min_events},       {"max_events", c.max_events},
          {"seed", c.seed}};
}

/// Writes the three splits plus a ground-truth sidecar (profiles, oracle LL).
inline void save_population(const std::string& dir, const SynthPopulation& pop, const SynthConfig& cfg) {
  std::filesystem::create_directories(dir);
  save_split(dir, pop.data.train);
  save_split(dir, pop.data.valid);
  save_split(dir, pop.data.test);
  nlohmann::json truth;
  truth["config"] = synth_config_to_json(cfg);
  truth["n_filtered"] = pop.n_filtered;
  for (const auto& [id, p] : pop.profiles) truth["profiles"].push_back(profile_to_json(p));
  truth["oracle_loglik"] = pop.oracle;
  std::ofstream out(std::filesystem::path(dir) / "ground_truth.json");
  if (!out) throw DataError("cannot write ground truth to " + dir);
  out << truth.dump(1) << '\n';
}

}  // namespace pmtpp
