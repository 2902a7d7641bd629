// mtpp: command-line front end for data generation, training, evaluation,
// prediction, source identification, sampling and curriculum ablation.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pmtpp/evalsuite.hpp"
#include "pmtpp/event.hpp"
#include "pmtpp/model.hpp"
#include "pmtpp/parallel.hpp"
#include "pmtpp/predictor.hpp"
#include "pmtpp/sampler.hpp"
#include "pmtpp/scoring.hpp"
#include "pmtpp/synthgen.hpp"
#include "pmtpp/trainer.hpp"

#ifndef PMTPP_VERSION
#define PMTPP_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmtpp;

namespace {

struct IdentifySettings {
  int trials = 1000;
  int valid_trials = 1000;
  int target_events = 10;
  int n_z = 5;
  int mc_samples = 500;
  std::vector<double> strengths = {0.1, 1.0, 10.0, 100.0};
};

struct SampleSettings {
  int n = 10;
  double horizon = 0.0;  // 0: the model's training horizon is unknown, so this must be set
  std::string user;      // condition z on this user's sequences (MoE); empty draws z from the prior
};

struct SampleQualitySettings {
  std::vector<double> rho = {0.1, 0.3, 0.5};
  int max_refs = 8;
};

struct Settings {
  DecoderKind model = DecoderKind::kRMTPP;
  Personalization personalization = Personalization::kMoE;
  std::uint64_t seed = 0;
  int threads = default_threads();
  ModelConfig arch;
  TrainConfig trainer;
  LoadOptions data;
  ScoreOptions eval;
  int curve_points = 10;
  PredictOptions predict;
  ThinningConfig thinning;
  SynthConfig synth;
  AblationPlan ablation;
  IdentifySettings identify;
  SampleSettings sample;
  SampleQualitySettings sample_quality;
};

// ---------------------------------------------------------------------------
// Config keys: each maps one dotted name to one settings field.

template <class T>
void assign(T& dst, const json& v, const std::string& name) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      dst = v.is_boolean() ? v.get<bool>() : v.get<double>() != 0.0;
    } else if constexpr (std::is_same_v<T, std::string>) {
      dst = v.is_string() ? v.get<std::string>() : v.dump();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      dst.clear();
      if (v.is_array()) {
        for (const auto& x : v) dst.push_back(x.get<double>());
      } else if (v.is_number()) {
        dst.push_back(v.get<double>());
      } else {
        std::stringstream ss(v.get<std::string>());
        for (std::string tok; std::getline(ss, tok, ',');) dst.push_back(std::stod(tok));
      }
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      if (v.is_null()) dst.reset();
      else dst = v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() && !v.is_number_unsigned()) throw UsageError("expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && v.get<long long>() < 0) throw UsageError("expected a nonnegative integer");
      }
      dst = v.get<T>();
    } else {
      dst = v.get<T>();
    }
  } catch (const UsageError& e) {
    throw UsageError("config key '" + name + "': " + e.what());
  } catch (const std::exception& e) {
    throw UsageError("config key '" + name + "': invalid value " + v.dump());
  }
}

template <class T>
json to_value(const T& v) {
  if constexpr (std::is_same_v<T, std::optional<double>>) return v ? json(*v) : json(nullptr);
  else return json(v);
}

struct Key {
  std::string name;
  std::string section;
  std::string help;
  std::function<json(const Settings&)> get;
  std::function<void(Settings&, const json&)> set;
};

template <class Acc>
Key field(std::string section, std::string name, std::string help, Acc acc) {
  return {name, std::move(section), std::move(help), [acc](const Settings& s) { return to_value(acc(s)); },
          [acc, name](Settings& s, const json& v) { assign(acc(s), v, name); }};
}

#define PM_FIELD(section, name, expr, help) \
  field(section, name, help, [](auto& s) -> auto& { return expr; })

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back({"model", "model", "decoder family: rmtpp | nhp",
                 [](const Settings& s) { return json(to_string(s.model)); },
                 [](Settings& s, const json& v) { s.model = parse_decoder_kind(v.get<std::string>()); }});
    k.push_back({"personalization", "model", "posterior family: moe | none",
                 [](const Settings& s) { return json(to_string(s.personalization)); },
                 [](Settings& s, const json& v) { s.personalization = parse_personalization(v.get<std::string>()); }});
    k.push_back(PM_FIELD("global", "seed", s.seed, "global seed (falls back to MTPP_SEED)"));
    k.push_back(PM_FIELD("global", "threads", s.threads, "worker threads"));

    k.push_back(PM_FIELD("model", "model.hidden_size", s.arch.hidden_size, "decoder hidden size"));
    k.push_back(PM_FIELD("model", "model.d_mark", s.arch.d_mark, "mark embedding size"));
    k.push_back(PM_FIELD("model", "model.latent_size", s.arch.latent_size, "latent z size"));
    k.push_back(PM_FIELD("model", "model.d_time", s.arch.d_time, "temporal embedding size"));
    k.push_back(PM_FIELD("model", "model.enc_hidden", s.arch.enc_hidden, "encoder hidden size"));

    k.push_back(PM_FIELD("trainer", "trainer.lr", s.trainer.lr, "peak learning rate"));
    k.push_back(PM_FIELD("trainer", "trainer.adam_beta1", s.trainer.adam_beta1, "Adam beta1"));
    k.push_back(PM_FIELD("trainer", "trainer.adam_beta2", s.trainer.adam_beta2, "Adam beta2"));
    k.push_back(PM_FIELD("trainer", "trainer.adam_eps", s.trainer.adam_eps, "Adam epsilon"));
    k.push_back(PM_FIELD("trainer", "trainer.warmup_epochs", s.trainer.warmup_epochs, "linear warmup length in epochs"));
    k.push_back(PM_FIELD("trainer", "trainer.beta_max", s.trainer.beta_max, "KL weight ceiling"));
    k.push_back(PM_FIELD("trainer", "trainer.beta_period", s.trainer.beta_period, "KL annealing period in epochs"));
    k.push_back(PM_FIELD("trainer", "trainer.batch_size", s.trainer.batch_size, "sequences per step"));
    k.push_back(PM_FIELD("trainer", "trainer.max_epochs", s.trainer.max_epochs, "epoch cap"));
    k.push_back(PM_FIELD("trainer", "trainer.patience", s.trainer.patience, "validation passes without improvement"));
    k.push_back(PM_FIELD("trainer", "trainer.min_delta", s.trainer.min_delta, "required validation improvement"));
    k.push_back(PM_FIELD("trainer", "trainer.eval_every", s.trainer.eval_every, "epochs between validation passes"));
    k.push_back(PM_FIELD("trainer", "trainer.mc_samples", s.trainer.mc_samples, "compensator samples per sequence"));
    k.push_back(PM_FIELD("trainer", "trainer.valid_z", s.trainer.valid_z, "z draws per validation sequence"));
    k.push_back(PM_FIELD("trainer", "trainer.valid_mc_samples", s.trainer.valid_mc_samples, "validation compensator samples"));
    k.push_back(PM_FIELD("trainer", "trainer.max_refs", s.trainer.max_refs, "reference sequences per posterior"));
    k.push_back(PM_FIELD("trainer", "trainer.include_target", s.trainer.include_target, "condition on the target too"));
    k.push_back(PM_FIELD("trainer", "trainer.init_rate_bias", s.trainer.init_rate_bias, "start RMTPP biases at mark rates"));

    k.push_back(PM_FIELD("data", "data.min_events", s.data.min_events, "drop sequences shorter than this"));
    k.push_back(PM_FIELD("data", "data.max_events", s.data.max_events, "drop sequences longer than this"));
    k.push_back(PM_FIELD("data", "data.jitter", s.data.jitter, "uniform time jitter added at load"));

    k.push_back(PM_FIELD("eval", "eval.n_z", s.eval.n_z, "z draws per test sequence"));
    k.push_back(PM_FIELD("eval", "eval.mc_samples", s.eval.mc_samples, "compensator samples per draw"));
    k.push_back(PM_FIELD("eval", "eval.max_refs", s.eval.max_refs, "reference sequences per posterior"));
    k.push_back(PM_FIELD("eval", "eval.include_target", s.eval.include_target, "condition on the target too"));
    k.push_back(PM_FIELD("curves", "curves.points", s.curve_points, "grid points over the window"));

    k.push_back(PM_FIELD("predict", "predict.mc_samples", s.predict.predict.mc_samples, "shared integration samples"));
    k.push_back(PM_FIELD("predict", "predict.horizon", s.predict.predict.horizon,
                         "integration cap after the last event (0: 10 x mean training gap)"));
    k.push_back(PM_FIELD("predict", "predict.n_z", s.predict.n_z, "z draws per sequence"));
    k.push_back(PM_FIELD("predict", "predict.max_refs", s.predict.max_refs, "reference sequences per posterior"));
    k.push_back(PM_FIELD("predict", "predict.min_prefix", s.predict.min_prefix, "first predicted event index"));

    k.push_back(PM_FIELD("thinning", "thinning.lambda_star", s.thinning.lambda_star, "fixed initial bound (null: automatic)"));
    k.push_back(PM_FIELD("thinning", "thinning.start_multiplier", s.thinning.start_multiplier, "automatic bound multiplier"));
    k.push_back(PM_FIELD("thinning", "thinning.escalation", s.thinning.escalation, "bound growth on violation"));
    k.push_back(PM_FIELD("thinning", "thinning.validation_points", s.thinning.validation_points, "dominance probes"));
    k.push_back(PM_FIELD("thinning", "thinning.max_escalations", s.thinning.max_escalations, "escalations before failing"));

    k.push_back(PM_FIELD("synth", "synth.n_train_users", s.synth.n_train_users, "training users"));
    k.push_back(PM_FIELD("synth", "synth.n_valid_users", s.synth.n_valid_users, "validation users"));
    k.push_back(PM_FIELD("synth", "synth.n_test_users", s.synth.n_test_users, "test users"));
    k.push_back(PM_FIELD("synth", "synth.seqs_per_user", s.synth.seqs_per_user, "sequences per user"));
    k.push_back(PM_FIELD("synth", "synth.K", s.synth.K, "number of marks"));
    k.push_back(PM_FIELD("synth", "synth.T", s.synth.T, "window length"));
    k.push_back(PM_FIELD("synth", "synth.mean_rate", s.synth.mean_rate, "mean total event rate"));
    k.push_back(PM_FIELD("synth", "synth.heterogeneity", s.synth.heterogeneity, "user heterogeneity in [0, 1]"));
    k.push_back(PM_FIELD("synth", "synth.dirichlet_concentration", s.synth.dirichlet_concentration,
                         "mark-preference concentration at heterogeneity 1"));
    k.push_back(PM_FIELD("synth", "synth.excitation_alpha", s.synth.excitation_alpha, "self-excitation jump (0: off)"));
    k.push_back(PM_FIELD("synth", "synth.excitation_omega", s.synth.excitation_omega, "self-excitation decay"));
    k.push_back(PM_FIELD("synth", "synth.min_events", s.synth.min_events, "minimum events per sequence"));
    k.push_back(PM_FIELD("synth", "synth.max_events", s.synth.max_events, "maximum events per sequence"));

    k.push_back(PM_FIELD("ablation", "ablation.fractions", s.ablation.fractions, "increasing user fractions"));
    k.push_back(PM_FIELD("ablation", "ablation.convergence_delta", s.ablation.convergence_delta,
                         "per-stage required validation improvement"));

    k.push_back(PM_FIELD("identify", "identify.trials", s.identify.trials, "test trials"));
    k.push_back(PM_FIELD("identify", "identify.valid_trials", s.identify.valid_trials, "validation trials for the baseline"));
    k.push_back(PM_FIELD("identify", "identify.target_events", s.identify.target_events, "target truncation length"));
    k.push_back(PM_FIELD("identify", "identify.n_z", s.identify.n_z, "z draws per likelihood call"));
    k.push_back(PM_FIELD("identify", "identify.mc_samples", s.identify.mc_samples, "compensator samples per draw"));
    k.push_back(PM_FIELD("identify", "identify.strengths", s.identify.strengths, "baseline prior strengths to tune over"));

    k.push_back(PM_FIELD("sample", "sample.n", s.sample.n, "replicates"));
    k.push_back(PM_FIELD("sample", "sample.horizon", s.sample.horizon, "window length T"));
    k.push_back(PM_FIELD("sample", "sample.user", s.sample.user, "user whose sequences condition z"));

    k.push_back(PM_FIELD("sample_quality", "sample_quality.rho", s.sample_quality.rho, "conditioning fractions"));
    k.push_back(PM_FIELD("sample_quality", "sample_quality.max_refs", s.sample_quality.max_refs,
                         "reference sequences per posterior"));
    return k;
  }();
  return keys;
}

#undef PM_FIELD

const Key& find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return k;
  throw UsageError("unknown config key '" + name + "'");
}

json flag_value(const std::string& s) {
  try {
    return json::parse(s);
  } catch (const json::exception&) {
    return json(s);
  }
}

json snapshot(const Settings& s) {
  json j = json::object();
  for (const auto& k : registry()) j[k.name] = k.get(s);
  return j;
}

// ---------------------------------------------------------------------------
// Run context shared by all subcommands

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), std::streamsize(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), std::size_t(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return o.str();
}

struct Run {
  std::string command;
  Settings s;
  std::string config_path;
  std::map<std::string, std::string> flags;  // dotted key -> raw flag text
  std::string out;
  std::string data;
  std::vector<std::string> checkpoints;
  std::string split = "test";
  json inputs = json::object();
  json extra = json::object();
  std::string started;

  /// File values, then MTPP_SEED for an unset seed, then flags.
  void resolve() {
    bool seed_set = false;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw DataError("cannot open config file '" + config_path + "'");
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw DataError("config file '" + config_path + "': " + e.what());
      }
      if (!j.is_object()) throw DataError("config file '" + config_path + "' must hold a JSON object");
      for (const auto& [name, v] : j.items()) {
        find_key(name).set(s, v);
        seed_set |= name == "seed";
      }
      inputs["config"] = {{"path", config_path}, {"sha256", sha256_file(config_path)}};
    }
    if (!seed_set && !flags.count("seed"))
      if (const char* env = std::getenv("MTPP_SEED")) {
        try {
          s.seed = std::stoull(env);
        } catch (const std::exception&) {
          throw UsageError(std::string("MTPP_SEED is not an unsigned integer: ") + env);
        }
      }
    for (const auto& [name, text] : flags) find_key(name).set(s, flag_value(text));
    if (s.threads < 1) throw UsageError("threads must be positive");
    if (out.empty()) throw UsageError("--out is required");
    fs::create_directories(out);
    started = utc_now();
  }

  fs::path path(const std::string& name) const { return fs::path(out) / name; }

  std::ofstream open(const std::string& name) const {
    std::ofstream f(path(name), std::ios::binary);
    if (!f) throw DataError("cannot write '" + path(name).string() + "'");
    return f;
  }

  void write_json(const std::string& name, const json& j) const { open(name) << j.dump(2) << '\n'; }

  SplitSet load_data() {
    if (data.empty()) throw UsageError("--data is required");
    auto splits = load_splits(data, s.data);
    for (auto split : {Split::kTrain, Split::kValid, Split::kTest}) {
      const std::string name = to_string(split);
      inputs["data"][name] = sha256_file(fs::path(data) / (name + ".jsonl"));
    }
    inputs["data_dir"] = data;
    return splits;
  }

  Model load_model(const std::string& p) {
    inputs["checkpoints"][p] = sha256_file(p);
    Model m = Model::load(p);
    extra["t_max"] = m.config().t_max;
    return m;
  }

  Model single_checkpoint() {
    if (checkpoints.size() != 1) throw UsageError("exactly one --checkpoint is required");
    return load_model(checkpoints.front());
  }

  const Dataset& pick(const SplitSet& d) const {
    switch (parse_split(split)) {
      case Split::kTrain: return d.train;
      case Split::kValid: return d.valid;
      case Split::kTest: return d.test;
    }
    return d.test;
  }

  void write_manifest(const std::vector<std::string>& outputs) const {
    json m;
    m["command"] = command;
    m["code_version"] = PMTPP_VERSION;
    m["config"] = snapshot(s);
    m["seed"] = s.seed;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    m["started_at"] = started;
    m["finished_at"] = utc_now();
    write_json("manifest.json", m);
  }
};

ModelConfig model_config(const Settings& s, const Dataset& train) {
  ModelConfig c = s.arch;
  c.model = s.model;
  c.personalization = s.personalization;
  c.K = train.K;
  c.t_max = max_consecutive_gap(train);
  if (!(c.t_max > 0.0)) throw DataError("training split has no positive gap");
  return c;
}

double mean_gap(const Dataset& ds) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& u : ds.users)
    for (const auto& seq : u.reference_sequences) {
      double prev = 0.0;
      for (const auto& e : seq.events) {
        total += e.time - prev;
        prev = e.time;
        ++n;
      }
    }
  if (n == 0) throw DataError("training split has no events");
  return total / double(n);
}

ScoreOptions eval_options(const Settings& s) {
  ScoreOptions o = s.eval;
  o.seed = s.seed;
  o.threads = s.threads;
  return o;
}

void write_sequence_scores(std::ostream& out, const EvalMetrics& m) {
  out << "user,seq_id,n_events,window,log_lik,sce,pp_plus,pp_minus,kl\n";
  char buf[512];
  for (const auto& q : m.sequences) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", q.user_id.c_str(),
                  q.seq_id.c_str(), q.ll.n_events, q.ll.t_end, q.ll.log_lik, q.ll.sce, q.ll.pp_plus, q.ll.pp_minus,
                  q.kl);
    out << buf;
  }
}

MetricsRow test_row(const std::string& stage, const EvalMetrics& m, long step, int epoch) {
  return {stage, epoch, step, "test", m.nll, m.sce, m.pp_plus, m.pp_minus, m.kl, 0.0, 0.0};
}

double dataset_horizon(const Dataset& ds) {
  double T = 0.0;
  for (const auto& u : ds.users)
    for (const auto& seq : u.reference_sequences) T = std::max(T, seq.horizon);
  return T;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(Run& r) {
  SynthConfig c = r.s.synth;
  c.seed = r.s.seed;
  const auto pop = generate_population(c);
  save_population(r.out, pop, c);
  r.extra["n_filtered"] = pop.n_filtered;
  r.write_manifest({"train.jsonl", "train.manifest.json", "valid.jsonl", "valid.manifest.json", "test.jsonl",
                    "test.manifest.json", "ground_truth.json"});
}

void cmd_train(Run& r) {
  const auto d = r.load_data();
  Model model(model_config(r.s, d.train));
  model.initialize(r.s.seed);
  r.extra["t_max"] = model.config().t_max;
  TrainConfig tc = r.s.trainer;
  tc.seed = r.s.seed;
  tc.threads = r.s.threads;
  Trainer trainer(model, tc);
  const auto fit = trainer.fit(d.train, d.valid);
  const auto test = evaluate_dataset(model, d.test, eval_options(r.s));
  model.save(r.path("model.json"));
  auto rows = trainer.metrics();
  rows.push_back(test_row("main", test, trainer.steps(), fit.epochs));
  auto csv = r.open("metrics.csv");
  write_metrics_csv(csv, rows);
  r.write_json("summary.json", {{"model", model.name()},
                                {"epochs", fit.epochs},
                                {"best_valid_nll", fit.best_valid_nll},
                                {"early_stopped", fit.early_stopped},
                                {"test", to_json(test)}});
  r.write_manifest({"model.json", "metrics.csv", "summary.json"});
}

void cmd_evaluate(Run& r) {
  const auto d = r.load_data();
  const Model model = r.single_checkpoint();
  const auto m = evaluate_dataset(model, r.pick(d), eval_options(r.s));
  auto csv = r.open("sequences.csv");
  write_sequence_scores(csv, m);
  json j = to_json(m);
  j["model"] = model.name();
  j["split"] = r.split;
  r.write_json("metrics.json", j);
  r.write_manifest({"metrics.json", "sequences.csv"});
}

void cmd_curves(Run& r) {
  const auto d = r.load_data();
  const Dataset& ds = r.pick(d);
  const auto grid = fraction_grid(dataset_horizon(ds), r.s.curve_points);
  auto csv = r.open("curves.csv");
  bool header = true;
  for (const auto& p : r.checkpoints) {
    const Model model = r.load_model(p);
    const auto m = evaluate_dataset(model, ds, eval_options(r.s), grid);
    write_curves_csv(csv, model.name(), aggregate_curves(m.sequences), header);
    header = false;
  }
  if (r.checkpoints.empty()) throw UsageError("curves needs at least one --checkpoint");
  r.write_manifest({"curves.csv"});
}

void cmd_predict(Run& r) {
  const auto d = r.load_data();
  const Model model = r.single_checkpoint();
  PredictOptions o = r.s.predict;
  if (!(o.predict.horizon > 0.0)) o.predict.horizon = 10.0 * mean_gap(d.train);
  o.seed = r.s.seed;
  o.threads = r.s.threads;
  r.extra["predict_horizon"] = o.predict.horizon;
  const auto rows = predict_dataset(model, r.pick(d), o);
  auto csv = r.open("predictions.csv");
  write_predictions_csv(csv, rows);
  const auto sm = summarize_predictions(rows);
  r.write_json("predict_summary.json", {{"model", model.name()},
                                        {"split", r.split},
                                        {"n", sm.n},
                                        {"mean_l1", sm.mean_l1},
                                        {"mean_rank", sm.mean_rank},
                                        {"top1", sm.top1},
                                        {"mean_captured_mass", sm.mean_captured_mass},
                                        {"horizon", o.predict.horizon}});
  r.write_manifest({"predictions.csv", "predict_summary.json"});
}

void cmd_identify(Run& r) {
  const auto d = r.load_data();
  const auto& id = r.s.identify;
  const auto target = std::size_t(id.target_events);
  const auto valid_trials = make_source_id_trials(d.valid, id.valid_trials, target, substream(r.s.seed, {1})());
  const auto trials = make_source_id_trials(r.pick(d), id.trials, target, substream(r.s.seed, {2})());
  const std::uint64_t score_seed = substream(r.s.seed, {3})();

  const auto tuned = tune_gamma_poisson(mle_rate(d.train), valid_trials, score_seed, id.strengths);
  json methods = json::array();
  auto csv = r.open("identify.csv");
  csv << "method,trials,error_rate,se,ties\n";
  auto emit = [&](const std::string& name, const SourceIdResult& res) {
    methods.push_back({{"method", name}, {"result", to_json(res)}});
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,%.10g,%zu\n", name.c_str(), res.trials, res.error_rate, res.se,
                  res.ties);
    csv << buf;
  };
  emit("gamma-poisson", source_identification(gamma_poisson_scorer(tuned.prior), trials, score_seed, r.s.threads));
  for (const auto& p : r.checkpoints) {
    const Model model = r.load_model(p);
    emit(model.name(), source_identification(model_scorer(model, id.n_z, id.mc_samples), trials, score_seed,
                                             r.s.threads));
  }
  json tuning = json::array();
  for (const auto& [strength, err] : tuned.validation_error) tuning.push_back({{"strength", strength}, {"error_rate", err}});
  r.write_json("identify.json", {{"split", r.split},
                                 {"trials", trials.size()},
                                 {"target_events", id.target_events},
                                 {"baseline", {{"a", tuned.prior.a}, {"b", tuned.prior.b}, {"strength", tuned.strength},
                                               {"validation", tuning}}},
                                 {"methods", methods}});
  r.write_manifest({"identify.json", "identify.csv"});
}

void cmd_sample(Run& r) {
  const Model model = r.single_checkpoint();
  const auto& sc = r.s.sample;
  if (!(sc.horizon > 0.0)) throw UsageError("sample.horizon must be set to a positive window length");
  std::optional<ad::Tensor> z;
  if (model.personalized()) {
    Rng rng = substream(r.s.seed, {0x2A});
    ad::Tape tape(false);
    Scope scope{tape, model.params()};
    std::vector<Sequence> refs;
    if (!sc.user.empty()) {
      const auto d = r.load_data();
      for (const auto* ds : {&d.train, &d.valid, &d.test})
        for (const auto& u : ds->users)
          if (u.user_id == sc.user) refs = u.reference_sequences;
      if (refs.empty()) throw DataError("sample.user '" + sc.user + "' not found in --data");
    }
    z = sample_z(scope, model.encoder()->build_posterior(scope, refs), rng).z.value();
  } else if (!sc.user.empty()) {
    throw UsageError("sample.user needs a personalized model");
  }
  Sequence prefix;
  prefix.horizon = sc.horizon;
  prefix.user_id = sc.user.empty() ? "prior" : sc.user;
  const auto samples =
      sample_replicates(model, z, prefix, 0.0, sc.horizon, r.s.thinning, r.s.seed, sc.n, r.s.threads);
  auto out = r.open("samples.jsonl");
  for (const auto& smp : samples) out << sample_to_json(smp, model.name(), r.s.seed).dump() << '\n';
  r.write_manifest({"samples.jsonl"});
}

void cmd_sample_quality(Run& r) {
  const auto d = r.load_data();
  const Model model = r.single_checkpoint();
  const auto& q = r.s.sample_quality;
  if (q.rho.empty()) throw UsageError("sample_quality.rho is empty");
  auto table = r.open("sample_quality.csv");
  auto rows = r.open("sample_quality_rows.csv");
  table << "model,rho,n,jd,wd\n";
  json summary = json::array();
  bool header = true;
  for (double rho : q.rho) {
    const auto res = evaluate_sample_quality(model, r.pick(d), rho, r.s.thinning, q.max_refs, r.s.seed, r.s.threads);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%zu,%.10g,%.10g\n", model.name().c_str(), rho, res.rows.size(),
                  res.mean_jd, res.mean_wd);
    table << buf;
    std::ostringstream part;
    write_sample_quality_csv(part, res.rows);
    std::string text = part.str();
    if (!header) text = text.substr(text.find('\n') + 1);
    else rows << "rho,";
    // Prefix every data row with rho.
    std::istringstream lines(text);
    bool first = header;
    for (std::string line; std::getline(lines, line);) {
      if (first) {
        rows << line << '\n';
        first = false;
        continue;
      }
      std::snprintf(buf, sizeof buf, "%.10g,", rho);
      rows << buf << line << '\n';
    }
    header = false;
    json j = to_json(res);
    j["rho"] = rho;
    summary.push_back(j);
  }
  r.write_json("sample_quality.json", {{"model", model.name()}, {"split", r.split}, {"results", summary}});
  r.write_manifest({"sample_quality.csv", "sample_quality_rows.csv", "sample_quality.json"});
}

void cmd_ablate(Run& r) {
  const auto d = r.load_data();
  Model model(model_config(r.s, d.train));
  model.initialize(r.s.seed);
  r.extra["t_max"] = model.config().t_max;
  TrainConfig tc = r.s.trainer;
  tc.seed = r.s.seed;
  tc.threads = r.s.threads;
  Trainer trainer(model, tc);
  const auto grid = fraction_grid(dataset_horizon(d.test), r.s.curve_points);
  const auto stages = curriculum_ablate(trainer, model, d.train, d.valid, d.test, r.s.ablation, eval_options(r.s), grid);
  auto table = r.open("ablation.csv");
  auto curves = r.open("curves.csv");
  table << "model,fraction,n_users,epochs,best_valid_nll,test_nll,test_nll_se,test_sce,test_pp_plus,test_pp_minus,test_kl\n";
  auto rows = trainer.metrics();
  bool header = true;
  for (const auto& st : stages) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%.10g,%zu,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", model.name().c_str(),
                  st.fraction, st.n_users, st.fit.epochs, st.fit.best_valid_nll, st.test.nll, st.test.nll_se,
                  st.test.sce, st.test.pp_plus, st.test.pp_minus, st.test.kl);
    table << buf;
    std::ostringstream label;
    label << model.name() << "@" << st.fraction;
    write_curves_csv(curves, label.str(), aggregate_curves(st.test.sequences), header);
    header = false;
  }
  auto metrics = r.open("metrics.csv");
  write_metrics_csv(metrics, rows);
  model.save(r.path("model.json"));
  r.write_manifest({"ablation.csv", "curves.csv", "metrics.csv", "model.json"});
}

// ---------------------------------------------------------------------------

struct Command {
  std::string name;
  std::string help;
  std::vector<std::string> sections;
  bool data;
  bool checkpoint;  // takes --checkpoint
  bool split;
  void (*run)(Run&);
};

const std::vector<Command>& commands() {
  static const std::vector<Command> c = {
      {"gen-data", "generate a synthetic train/valid/test population", {"global", "synth"}, false, false, false,
       cmd_gen_data},
      {"train", "train a model; writes model.json, metrics.csv, summary.json",
       {"global", "model", "trainer", "data", "eval"}, true, false, false, cmd_train},
      {"evaluate", "score a split: NLL, SCE, PP+, PP-", {"global", "data", "eval"}, true, true, true, cmd_evaluate},
      {"curves", "mean SCE/PP+/PP- up to each grid time", {"global", "data", "eval", "curves"}, true, true, true,
       cmd_curves},
      {"predict", "next-event time and mark prediction", {"global", "data", "predict"}, true, true, true, cmd_predict},
      {"identify", "source identification against the Gamma-Poisson baseline", {"global", "data", "identify"}, true,
       true, true, cmd_identify},
      {"sample", "draw sequences with the thinning sampler", {"global", "data", "thinning", "sample"}, true, true,
       false, cmd_sample},
      {"sample-quality", "Jaccard and Wasserstein distances of sampled continuations",
       {"global", "data", "thinning", "sample_quality"}, true, true, true, cmd_sample_quality},
      {"ablate", "curriculum training over growing user fractions",
       {"global", "model", "trainer", "data", "eval", "curves", "ablation"}, true, false, false, cmd_ablate},
  };
  return c;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Personalized neural marked temporal point processes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(PMTPP_VERSION));

  Run run;
  std::map<std::string, std::string> raw;  // option storage, by key
  const Command* chosen = nullptr;
  std::vector<std::pair<CLI::App*, const Command*>> subs;

  for (const auto& cmd : commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--out", run.out, "output directory")->required();
    sub->add_option("--config", run.config_path, "JSON file of dotted config keys");
    if (cmd.data) sub->add_option("--data", run.data, "dataset directory");
    if (cmd.checkpoint)
      sub->add_option("--checkpoint", run.checkpoints, "model.json from train (repeatable)");
    if (cmd.split) sub->add_option("--split", run.split, "split to use")->check(CLI::IsMember({"train", "valid", "test"}));
    for (const auto& k : registry()) {
      if (std::find(cmd.sections.begin(), cmd.sections.end(), k.section) == cmd.sections.end()) continue;
      const bool short_form = k.section == "model" && k.name.find('.') == std::string::npos;
      if (short_form && cmd.name != "train" && cmd.name != "ablate") continue;
      std::string& slot = raw[cmd.name + "|" + k.name];
      auto* opt = sub->add_option("--" + k.name, slot, k.help)->default_str(k.get(Settings{}).dump());
      if (k.name == "model") opt->check(CLI::IsMember({"rmtpp", "nhp"}));
      if (k.name == "personalization") opt->check(CLI::IsMember({"moe", "none"}));
    }
    subs.emplace_back(sub, &cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  for (const auto& [sub, cmd] : subs)
    if (sub->parsed()) {
      chosen = cmd;
      for (const auto& k : registry()) {
        auto* opt = sub->get_option_no_throw("--" + k.name);
        if (opt && opt->count() > 0) run.flags[k.name] = raw[cmd->name + "|" + k.name];
      }
    }
  run.command = chosen->name;
  run.resolve();
  chosen->run(run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const Error& e) {
    std::cerr << "mtpp: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "mtpp: malformed JSON: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mtpp: " << e.what() << '\n';
    return 1;
  }
}
