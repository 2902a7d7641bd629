#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "pmtpp/event.hpp"

using namespace pmtpp;

namespace {

Dataset parse(const std::string& text, int K, LoadOptions opts = {}) {
  std::istringstream in(text);
  return parse_dataset(in, K, opts);
}

Sequence make_sequence(std::size_t n, double horizon = 100.0) {
  Sequence s;
  s.horizon = horizon;
  s.user_id = "u";
  s.seq_id = "s";
  for (std::size_t i = 0; i < n; ++i) s.events.push_back({double(i + 1), int(i % 3)});
  return s;
}

}  // namespace

TEST(LoadDataset, ParsesSingleLine) {
  auto ds = parse(R"({"user":"u1","seq_id":"s1","T":1.0,"events":[[0.2,3],[0.5,1]]})" "\n", 5);
  ASSERT_EQ(ds.users.size(), 1u);
  ASSERT_EQ(ds.users[0].reference_sequences.size(), 1u);
  const auto& s = ds.users[0].reference_sequences[0];
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.events[0], (Event{0.2, 3}));
  EXPECT_DOUBLE_EQ(s.horizon, 1.0);
}

TEST(LoadDataset, RejectsNonIncreasingTimes) {
  EXPECT_THROW(parse(R"({"user":"u1","seq_id":"s1","T":1.0,"events":[[0.5,1],[0.2,3]]})", 5), DataError);
  EXPECT_THROW(parse(R"({"user":"u1","seq_id":"s1","T":1.0,"events":[[0.5,1],[0.5,3]]})", 5), DataError);
}

TEST(LoadDataset, RejectsMarkOutOfRangeAndTimesPastHorizon) {
  EXPECT_THROW(parse(R"({"user":"u","seq_id":"s","T":1.0,"events":[[0.1,5],[0.2,1]]})", 5), DataError);
  EXPECT_THROW(parse(R"({"user":"u","seq_id":"s","T":1.0,"events":[[0.1,1],[1.2,1]]})", 5), DataError);
}

TEST(LoadDataset, ParseErrorReportsLineNumber) {
  const std::string text =
      R"({"user":"u","seq_id":"a","T":1.0,"events":[[0.1,1],[0.2,1]]})" "\n"
      R"({"user":"u","seq_id":"b","T":1.0,"events":[[0.1,1],)" "\n";
  try {
    parse(text, 5);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, CountsUsersAndMeanReferenceSetSize) {
  std::string text;
  for (int u = 0; u < 3; ++u)
    for (int s = 0; s < 2; ++s)
      text += R"({"user":"u)" + std::to_string(u) + R"(","seq_id":"s)" + std::to_string(s) +
              R"(","T":2.0,"events":[[0.5,0],[1.0,1]]})" "\n";
  auto ds = parse(text, 2);
  EXPECT_EQ(ds.users.size(), 3u);
  EXPECT_DOUBLE_EQ(ds.mean_sequences_per_user(), 2.0);
}

TEST(LoadDataset, LengthFilterDropsShortAndLongSequences) {
  LoadOptions opts;
  opts.min_events = 5;
  opts.max_events = 6;
  std::string text;
  for (int n : {2, 5, 6, 7}) {
    Sequence s = make_sequence(std::size_t(n));
    s.seq_id = "n" + std::to_string(n);
    text += sequence_to_json(s).dump() + "\n";
  }
  auto ds = parse(text, 3, opts);
  EXPECT_EQ(ds.num_sequences(), 2u);
  EXPECT_EQ(ds.n_filtered, 2u);
}

TEST(LoadDataset, JitterBreaksTiesWhenEnabled) {
  const std::string text = R"({"user":"u","seq_id":"s","T":2.0,"events":[[0.5,0],[0.5,1],[1.0,1]]})";
  EXPECT_THROW(parse(text, 2), DataError);
  LoadOptions opts;
  opts.jitter = 1e-3;
  auto ds = parse(text, 2, opts);
  const auto& ev = ds.users[0].reference_sequences[0].events;
  ASSERT_EQ(ev.size(), 3u);
  EXPECT_LT(ev[0].time, ev[1].time);
}

TEST(SaveDataset, CanonicalFormIsStable) {
  std::mt19937_64 rng(5);
  Dataset ds;
  ds.K = 4;
  for (int u = 0; u < 3; ++u) {
    UserRecord rec{"user" + std::to_string(u), {}};
    for (int s = 0; s < 2; ++s) {
      Sequence seq;
      seq.user_id = rec.user_id;
      seq.seq_id = "q" + std::to_string(s);
      seq.horizon = 10.0;
      double t = 0;
      for (int i = 0; i < 6; ++i) {
        t += std::exponential_distribution<double>(1.0)(rng) * 0.5;
        seq.events.push_back({t, int(rng() % 4)});
      }
      seq.horizon = t + 1.0;
      rec.reference_sequences.push_back(seq);
    }
    ds.users.push_back(rec);
  }
  std::ostringstream a;
  write_dataset(a, ds);
  auto reloaded = parse(a.str(), 4);
  std::ostringstream b;
  write_dataset(b, reloaded);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(reloaded.users[1].reference_sequences[1], ds.users[1].reference_sequences[1]);
}

TEST(Splits, SharedUserAcrossSplitsFails) {
  Dataset a, b;
  a.split = Split::kTrain;
  b.split = Split::kTest;
  a.users.push_back({"alice", {}});
  b.users.push_back({"bob", {}});
  EXPECT_NO_THROW(check_disjoint_users({&a, &b}));
  b.users.push_back({"alice", {}});
  EXPECT_THROW(check_disjoint_users({&a, &b}), DataError);
}

TEST(Splits, SaveAndLoadDirectoryWithManifests) {
  auto dir = std::filesystem::temp_directory_path() / "pmtpp_event_splits";
  std::filesystem::create_directories(dir);
  for (Split sp : {Split::kTrain, Split::kValid, Split::kTest}) {
    Dataset ds;
    ds.K = 3;
    ds.split = sp;
    Sequence s = make_sequence(4);
    s.user_id = "u_" + to_string(sp);
    ds.users.push_back({s.user_id, {s}});
    save_split(dir.string(), ds);
  }
  auto all = load_splits(dir.string());
  EXPECT_EQ(all.test.K, 3);
  EXPECT_EQ(all.valid.users[0].user_id, "u_valid");
}

TEST(SplitPrefix, TenOfTwelve) {
  auto [head, tail] = split_prefix(make_sequence(12), 10);
  EXPECT_EQ(head.size(), 10u);
  EXPECT_EQ(tail.size(), 2u);
  EXPECT_EQ(tail.horizon, 100.0);
  EXPECT_EQ(tail.seq_id, "s");
}

TEST(SplitPrefix, BoundaryCases) {
  auto seq = make_sequence(5);
  auto [e0, f0] = split_prefix(seq, 0);
  EXPECT_TRUE(e0.empty());
  EXPECT_EQ(f0.events, seq.events);
  auto [f1, e1] = split_prefix(seq, 5);
  EXPECT_EQ(f1.events, seq.events);
  EXPECT_TRUE(e1.empty());
  EXPECT_THROW(split_prefix(seq, 6), UsageError);
}

TEST(SplitPrefix, ConcatenationReproducesOriginal) {
  for (std::size_t len = 0; len < 8; ++len) {
    auto seq = make_sequence(len);
    for (std::size_t n = 0; n <= len; ++n) {
      auto [a, b] = split_prefix(seq, n);
      auto joined = a.events;
      joined.insert(joined.end(), b.events.begin(), b.events.end());
      EXPECT_EQ(joined, seq.events);
    }
  }
}

TEST(SplitFraction, ThirtyPercentOfTen) {
  auto r = split_fraction(make_sequence(10), 0.3);
  EXPECT_EQ(r.prefix.size(), 3u);
  EXPECT_EQ(r.suffix.size(), 7u);
  EXPECT_DOUBLE_EQ(r.pi, 3.0);
}

TEST(SplitFraction, Extremes) {
  auto seq = make_sequence(10);
  auto none = split_fraction(seq, 0.0);
  EXPECT_TRUE(none.prefix.empty());
  EXPECT_EQ(none.pi, 0.0);
  auto all = split_fraction(seq, 1.0);
  EXPECT_EQ(all.prefix.size(), 10u);
  EXPECT_THROW(split_fraction(seq, 1.5), UsageError);
}

TEST(DatasetStats, MaxConsecutiveGap) {
  Dataset ds;
  Sequence s;
  s.horizon = 10;
  s.events = {{1.0, 0}, {1.5, 0}, {4.0, 0}};
  ds.users.push_back({"u", {s}});
  EXPECT_DOUBLE_EQ(max_consecutive_gap(ds), 2.5);
  EXPECT_NEAR(mean_interevent_gap(ds), 4.0 / 3.0, 1e-15);
}
