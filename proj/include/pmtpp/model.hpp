#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "pmtpp/decoders.hpp"
#include "pmtpp/diffgraph.hpp"
#include "pmtpp/embeddings.hpp"
#include "pmtpp/encoder.hpp"
#include "pmtpp/errors.hpp"
#include "pmtpp/rng.hpp"

namespace pmtpp {

enum class Personalization { kNone, kMoE };

inline std::string to_string(Personalization p) { return p == Personalization::kMoE ? "moe" : "none"; }

inline Personalization parse_personalization(const std::string& s) {
  if (s == "moe") return Personalization::kMoE;
  if (s == "none") return Personalization::kNone;
  throw UsageError("unknown personalization '" + s + "' (expected moe|none)");
}

struct ModelConfig {
  DecoderKind model = DecoderKind::kRMTPP;
  Personalization personalization = Personalization::kMoE;
  int K = 1;
  int hidden_size = 64;
  int d_mark = 32;
  int latent_size = 32;
  int d_time = 64;
  int enc_hidden = 64;
  double t_max = 1.0;  // largest consecutive gap in the training split
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"model", to_string(c.model)},       {"personalization", to_string(c.personalization)},
          {"K", c.K},                          {"hidden_size", c.hidden_size},
          {"d_mark", c.d_mark},                {"latent_size", c.latent_size},
          {"d_time", c.d_time},                {"enc_hidden", c.enc_hidden},
          {"t_max", c.t_max}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.model = parse_decoder_kind(j.at("model").get<std::string>());
    c.personalization = parse_personalization(j.at("personalization").get<std::string>());
    c.K = j.at("K").get<int>();
    c.hidden_size = j.at("hidden_size").get<int>();
    c.d_mark = j.at("d_mark").get<int>();
    c.latent_size = j.at("latent_size").get<int>();
    c.d_time = j.at("d_time").get<int>();
    c.enc_hidden = j.at("enc_hidden").get<int>();
    c.t_max = j.at("t_max").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
}

/// One of the four model variants: {RMTPP, NHP} x {decoder-only, MoE}.
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    const bool moe = cfg.personalization == Personalization::kMoE;
    marks_ = MarkEmbedding(store_, "marks", cfg.K, cfg.d_mark);
    decoder_ = Decoder(store_, "decoder", DecoderConfig{cfg.model, cfg.hidden_size, cfg.d_mark, moe ? cfg.latent_size : 0, cfg.K},
                       marks_);
    if (moe)
      encoder_ = Encoder(store_, "encoder", EncoderConfig{cfg.d_time, cfg.d_mark, cfg.enc_hidden, cfg.latent_size},
                         marks_, TemporalEmbeddingSpec(cfg.d_time, cfg.t_max));
  }

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }
  const Decoder& decoder() const { return decoder_; }
  const Encoder* encoder() const { return encoder_ ? &*encoder_ : nullptr; }
  const MarkEmbedding& marks() const { return marks_; }
  bool personalized() const { return encoder_.has_value(); }
  std::string name() const { return to_string(cfg_.model) + "-" + to_string(cfg_.personalization); }

  void initialize(std::uint64_t seed) {
    Rng rng = substream(seed, {0x1417});
    store_.initialize(rng);
  }

  nlohmann::json to_json() const { return {{"config", pmtpp::to_json(cfg_)}, {"checkpoint", ad::params_to_json(store_)}}; }

  static Model from_json(const nlohmann::json& j) {
    if (!j.contains("config") || !j.contains("checkpoint")) throw DataError("model file: missing config or checkpoint");
    Model m(model_config_from_json(j.at("config")));
    ad::params_from_json(m.store_, j.at("checkpoint"));
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write model file " + path.string());
    out << to_json().dump() << '\n';
  }

  static Model load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open model file " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("model file " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

 private:
  ModelConfig cfg_;
  ad::ParamStore store_;
  MarkEmbedding marks_;
  Decoder decoder_;
  std::optional<Encoder> encoder_;
};

}  // namespace pmtpp
