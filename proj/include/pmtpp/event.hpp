#pragma once

// Events, sequences, users, and datasets plus their JSON Lines form.
//
// One sequence per line:
//   {"user":"u1","seq_id":"s1","T":50.0,"events":[[0.2,3],[0.5,1]]}
// Marks are 0-based. Each split file `<split>.jsonl` may carry a sidecar
// `<split>.manifest.json` with K, split name, and counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmtpp/errors.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

struct Event {
  double time = 0.0;
  int mark = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct Sequence {
  std::vector<Event> events;
  double horizon = 1.0;
  std::string user_id;
  std::string seq_id;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
  double last_time() const { return events.empty() ? 0.0 : events.back().time; }

  friend bool operator==(const Sequence&, const Sequence&) = default;
};

struct UserRecord {
  std::string user_id;
  std::vector<Sequence> reference_sequences;
};

enum class Split { kTrain, kValid, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw UsageError("unknown split '" + s + "' (expected train|valid|test)");
}

struct Dataset {
  std::vector<UserRecord> users;
  int K = 0;
  Split split = Split::kTrain;
  // Sequences dropped by the length filter at load time.
  std::size_t n_filtered = 0;

  std::size_t num_sequences() const {
    std::size_t n = 0;
    for (const auto& u : users) n += u.reference_sequences.size();
    return n;
  }
  std::size_t num_events() const {
    std::size_t n = 0;
    for (const auto& u : users)
      for (const auto& s : u.reference_sequences) n += s.size();
    return n;
  }
  double mean_sequences_per_user() const {
    return users.empty() ? 0.0 : double(num_sequences()) / double(users.size());
  }
  /// (user index, sequence index) for every sequence, in storage order.
  std::vector<std::pair<std::size_t, std::size_t>> index() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t u = 0; u < users.size(); ++u)
      for (std::size_t s = 0; s < users[u].reference_sequences.size(); ++s) out.emplace_back(u, s);
    return out;
  }
  const Sequence& at(std::pair<std::size_t, std::size_t> idx) const {
    return users[idx.first].reference_sequences[idx.second];
  }
};

struct LoadOptions {
  std::size_t min_events = 2;
  std::size_t max_events = 200;
  // Uniform noise in [0, jitter) added to every time before validation; 0 disables.
  double jitter = 0.0;
  std::uint64_t jitter_seed = 0;
};

/// Throws DataError when an invariant does not hold.
inline void validate_sequence(const Sequence& seq, int K) {
  if (!(std::isfinite(seq.horizon) && seq.horizon > 0.0))
    throw DataError("sequence '" + seq.seq_id + "': horizon must be positive and finite");
  double prev = -1.0;
  for (std::size_t i = 0; i < seq.events.size(); ++i) {
    const auto& e = seq.events[i];
    if (!std::isfinite(e.time) || e.time < 0.0)
      throw DataError("sequence '" + seq.seq_id + "': event " + std::to_string(i) + " has invalid time");
    if (e.time <= prev)
      throw DataError("sequence '" + seq.seq_id + "': non-increasing times at event " + std::to_string(i));
    if (e.time > seq.horizon)
      throw DataError("sequence '" + seq.seq_id + "': event " + std::to_string(i) + " after horizon");
    if (e.mark < 0 || e.mark >= K)
      throw DataError("sequence '" + seq.seq_id + "': mark " + std::to_string(e.mark) +
                      " out of range for K=" + std::to_string(K));
    prev = e.time;
  }
}

inline nlohmann::json sequence_to_json(const Sequence& seq) {
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : seq.events) events.push_back({e.time, e.mark});
  nlohmann::json j;
  j["user"] = seq.user_id;
  j["seq_id"] = seq.seq_id;
  j["T"] = seq.horizon;
  j["events"] = std::move(events);
  return j;
}

inline Sequence sequence_from_json(const nlohmann::json& j) {
  Sequence seq;
  seq.user_id = j.at("user").get<std::string>();
  seq.seq_id = j.at("seq_id").get<std::string>();
  seq.horizon = j.at("T").get<double>();
  for (const auto& ev : j.at("events")) {
    if (!ev.is_array() || ev.size() != 2 || !ev[0].is_number() || !ev[1].is_number_integer())
      throw DataError("event must be [time, integer mark]");
    seq.events.push_back({ev[0].get<double>(), ev[1].get<int>()});
  }
  return seq;
}

inline Dataset parse_dataset(std::istream& in, int K, const LoadOptions& opts = {},
                             Split split = Split::kTrain) {
  if (K <= 0) throw UsageError("K must be positive");
  Dataset ds;
  ds.K = K;
  ds.split = split;
  std::map<std::string, std::size_t> user_pos;
  std::set<std::pair<std::string, std::string>> seen_ids;
  Rng jitter_rng(opts.jitter_seed);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sequence seq;
    try {
      seq = sequence_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": parse error: " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (opts.jitter > 0.0) {
      for (auto& e : seq.events) e.time += opts.jitter * uniform01(jitter_rng);
      std::stable_sort(seq.events.begin(), seq.events.end(),
                       [](const Event& a, const Event& b) { return a.time < b.time; });
      if (!seq.events.empty()) seq.horizon = std::max(seq.horizon, seq.events.back().time);
    }
    try {
      validate_sequence(seq, K);
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen_ids.emplace(seq.user_id, seq.seq_id).second)
      throw DataError("line " + std::to_string(lineno) + ": duplicate seq_id '" + seq.seq_id + "'");
    if (seq.size() < opts.min_events || seq.size() > opts.max_events) {
      ++ds.n_filtered;
      continue;
    }
    auto [it, inserted] = user_pos.emplace(seq.user_id, ds.users.size());
    if (inserted) ds.users.push_back(UserRecord{seq.user_id, {}});
    ds.users[it->second].reference_sequences.push_back(std::move(seq));
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, int K, const LoadOptions& opts = {},
                            Split split = Split::kTrain) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file '" + path + "'");
  return parse_dataset(in, K, opts, split);
}

/// Canonical form: users in stored order, sequences in stored order, one per line.
inline void write_dataset(std::ostream& out, const Dataset& ds) {
  for (const auto& u : ds.users)
    for (const auto& s : u.reference_sequences) out << sequence_to_json(s).dump() << '\n';
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
  return {{"K", ds.K},
          {"split", to_string(ds.split)},
          {"n_users", ds.users.size()},
          {"n_sequences", ds.num_sequences()},
          {"n_events", ds.num_events()}};
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file '" + path + "'");
  write_dataset(out, ds);
}

/// Writes `<dir>/<split>.jsonl` and its manifest sidecar.
inline void save_split(const std::string& dir, const Dataset& ds) {
  save_dataset(dir + "/" + to_string(ds.split) + ".jsonl", ds);
  std::ofstream m(dir + "/" + to_string(ds.split) + ".manifest.json", std::ios::binary);
  if (!m) throw DataError("cannot write manifest in '" + dir + "'");
  m << dataset_manifest(ds).dump(2) << '\n';
}

inline Dataset load_split(const std::string& dir, Split split, const LoadOptions& opts = {}) {
  const std::string name = to_string(split);
  std::ifstream m(dir + "/" + name + ".manifest.json");
  if (!m) throw DataError("missing manifest '" + dir + "/" + name + ".manifest.json'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest for split '" + name + "': " + e.what());
  }
  return load_dataset(dir + "/" + name + ".jsonl", manifest.at("K").get<int>(), opts, split);
}

/// Fails on the first user id present in more than one dataset.
inline void check_disjoint_users(const std::vector<const Dataset*>& splits) {
  std::map<std::string, Split> owner;
  for (const Dataset* ds : splits) {
    for (const auto& u : ds->users) {
      auto [it, inserted] = owner.emplace(u.user_id, ds->split);
      if (!inserted)
        throw DataError("user '" + u.user_id + "' appears in both " + to_string(it->second) +
                        " and " + to_string(ds->split));
    }
  }
}

struct SplitSet {
  Dataset train, valid, test;
};

inline SplitSet load_splits(const std::string& dir, const LoadOptions& opts = {}) {
  SplitSet s{load_split(dir, Split::kTrain, opts), load_split(dir, Split::kValid, opts),
             load_split(dir, Split::kTest, opts)};
  check_disjoint_users({&s.train, &s.valid, &s.test});
  return s;
}

/// First `n_events` events and the remainder; both keep horizon and ids.
inline std::pair<Sequence, Sequence> split_prefix(const Sequence& seq, std::size_t n_events) {
  if (n_events > seq.size())
    throw UsageError("split_prefix: n_events " + std::to_string(n_events) + " exceeds length " +
                     std::to_string(seq.size()));
  Sequence head{{seq.events.begin(), seq.events.begin() + std::ptrdiff_t(n_events)}, seq.horizon,
                seq.user_id, seq.seq_id};
  Sequence tail{{seq.events.begin() + std::ptrdiff_t(n_events), seq.events.end()}, seq.horizon,
                seq.user_id, seq.seq_id};
  return {std::move(head), std::move(tail)};
}

struct FractionSplit {
  Sequence prefix;
  Sequence suffix;
  double pi = 0.0;  // time of the last prefix event, 0 when the prefix is empty
};

inline FractionSplit split_fraction(const Sequence& seq, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw UsageError("split_fraction: rho must lie in [0,1]");
  // The epsilon keeps products like 0.3*10 = 3.0000000000000004 from rounding up.
  auto n = std::size_t(std::ceil(rho * double(seq.size()) - 1e-9));
  n = std::min(n, seq.size());
  auto [p, s] = split_prefix(seq, n);
  double pi = p.last_time();
  return {std::move(p), std::move(s), pi};
}

/// Largest gap between consecutive event times (the first gap is measured from 0).
inline double max_consecutive_gap(const Dataset& ds) {
  double best = 0.0;
  for (const auto& u : ds.users)
    for (const auto& s : u.reference_sequences) {
      double prev = 0.0;
      for (const auto& e : s.events) {
        best = std::max(best, e.time - prev);
        prev = e.time;
      }
    }
  return best;
}

inline double mean_interevent_gap(const Dataset& ds) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& u : ds.users)
    for (const auto& s : u.reference_sequences) {
      double prev = 0.0;
      for (const auto& e : s.events) {
        total += e.time - prev;
        prev = e.time;
        ++n;
      }
    }
  return n == 0 ? 1.0 : total / double(n);
}

}  // namespace pmtpp
