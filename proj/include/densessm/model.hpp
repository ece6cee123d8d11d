#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "densessm/blocks.hpp"

namespace densessm {

enum class BlockKind { dense_retnet, retnet, dense_mamba, mamba };

std::string to_string(BlockKind k);
BlockKind parse_block_kind(const std::string& s);
inline bool is_retention(BlockKind k) { return k == BlockKind::dense_retnet || k == BlockKind::retnet; }
inline bool is_dense_kind(BlockKind k) { return k == BlockKind::dense_retnet || k == BlockKind::dense_mamba; }

inline constexpr std::int32_t kBosToken = 256;
inline constexpr std::size_t kByteVocab = 257;

struct ModelConfig {
  BlockKind block_kind = BlockKind::dense_retnet;
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t qk_dim = 32;    // retention q and k width
  std::size_t v_dim = 128;    // retention value width (the gate branch matches it)
  std::size_t d_state = 16;   // Mamba
  std::size_t d_inner = 0;    // Mamba; 0 selects 2 * d_model
  std::size_t dt_rank = 0;    // Mamba; 0 selects ceil(d_model / 16)
  DenseConfig dense;
  std::size_t vocab_size = kByteVocab;
  std::size_t max_seq_len = 2048;
  DType dtype = DType::f64;
  std::uint64_t seed = 0;

  /// Every violated constraint, one message each.
  std::vector<std::string> violations() const;
  /// Throws ConfigError listing all violations.
  void validate() const;

  /// Dense settings as used by the layers; baseline kinds force depth 0.
  DenseConfig effective_dense() const;
  std::size_t mamba_inner() const { return d_inner ? d_inner : 2 * d_model; }
  std::size_t mamba_dt_rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
  /// Number of lower layers layer `l` reads (0 when it does not fuse).
  std::size_t sources_at(std::size_t layer) const { return effective_dense().sources_for(layer); }

  /// Flat "model.*" key/value view used by config files and checkpoints.
  std::map<std::string, std::string> to_map() const;
  /// Applies one "model.*" key; returns false for keys it does not own.
  bool set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The 16-layer, 1536-wide DenseRetNet of the 350M comparison (32k vocab).
ModelConfig retnet_350m_config();
/// Small four-layer configuration of the given kind for local runs.
ModelConfig desk_config(BlockKind kind);

/// Closed-form parameter count.
std::size_t count_parameters(const ModelConfig& cfg);

template <class T>
using LayerBlock = std::variant<GauRetentionBlock<T>, MambaBlock<T>>;

template <class T>
using LayerState = std::variant<GauState<T>, MambaState<T>>;

/// Recurrent inference state: per-layer states and the position counter.
template <class T>
class InferenceSession {
 public:
  std::size_t position() const { return position_; }
  const ModelConfig& config() const { return config_; }
  void reset();

 private:
  template <class>
  friend class Model;
  ModelConfig config_;
  std::vector<LayerState<T>> states_;
  std::vector<LayerState<T>> initial_;
  std::size_t position_ = 0;
};

/// Optional instrumentation of a parallel forward pass.
template <class T>
struct ForwardTrace {
  std::vector<Tensor<T>> layer_outputs;             // residual stream after each layer, [B, T, d]
  std::vector<std::vector<std::size_t>> consulted;  // lower layers each layer read from the stash
  std::vector<std::vector<Var<T>>> published;       // signals each layer pushed to the stash
};

enum class SamplerKind { greedy, temperature, top_k };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::greedy;
  double temperature = 1.0;  // <= 0 means greedy
  std::size_t top_k = 0;     // 0 keeps the full distribution
  std::uint64_t seed = 0;
};

template <class T>
struct Generation {
  std::vector<std::int32_t> tokens;  // the n_new sampled tokens
  std::vector<Tensor<T>> logits;     // logits after each consumed token (prompt and generated)
};

template <class T>
class Model {
 public:
  /// Deterministic initialisation from cfg.seed.
  explicit Model(const ModelConfig& cfg);
  Model(const ModelConfig& cfg, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParameterRegistry<T>& registry() { return registry_; }
  const ParameterRegistry<T>& registry() const { return registry_; }
  const LayerBlock<T>& layer(std::size_t l) const { return layers_.at(l); }
  LayerBlock<T>& layer(std::size_t l) { return layers_.at(l); }
  const Var<T>& embedding_table() const { return embed_; }

  /// Parallel mode; logits [B, T, V].
  Var<T> forward_train(const Tokens& tokens, ForwardTrace<T>* trace = nullptr) const;

  InferenceSession<T> new_session() const;
  /// One recurrent step; logits [V].
  Tensor<T> forward_step(InferenceSession<T>& session, std::int32_t token) const;

  /// Consumes the prompt (BOS when empty) in recurrent mode, then samples n_new tokens.
  Generation<T> generate(std::vector<std::int32_t> prompt, std::size_t n_new, const SamplerConfig& sampler) const;

 private:
  void check_session(const InferenceSession<T>& s) const;

  ModelConfig cfg_;
  ParameterRegistry<T> registry_;
  Var<T> embed_;
  Var<T> final_norm_;
  std::vector<LayerBlock<T>> layers_;
};

/// Picks the next token from logits.
template <class T>
std::int32_t sample_token(const Tensor<T>& logits, const SamplerConfig& cfg, std::mt19937_64& rng);

struct ProbeFit {
  double r2 = 0.0;
  bool ridge = false;  // the design matrix was rank deficient
};

/// Least squares with intercept from features [N, p] to targets [N, q];
/// in-sample R^2 averaged over target columns, clamped to [0, 1].
ProbeFit probe_r2(const Tensor<double>& features, const Tensor<double>& targets);

/// R^2 of predicting layer `source` outputs from layer `target` outputs.
template <class T>
ProbeFit degradation_probe(const Model<T>& model, const Tokens& tokens, std::size_t source, std::size_t target);

/// R^2 for every (source <= target) layer pair, row = target, col = source;
/// entries with source > target are left at NaN.
template <class T>
std::vector<std::vector<double>> probe_matrix(const Model<T>& model, const Tokens& tokens, bool* any_ridge = nullptr);

}  // namespace densessm
