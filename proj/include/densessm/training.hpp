#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densessm/checkpoint.hpp"
#include "densessm/data.hpp"
#include "densessm/model.hpp"

namespace densessm {

struct TrainConfig {
  std::uint64_t total_tokens = 5'000'000;
  std::size_t batch_size = 16;  // sequences per step
  std::size_t seq_len = 256;
  double lr_peak = 3e-3;
  double warmup_frac = 0.015;
  double poly_power = 1.0;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.0;  // 0 picks 0.98 for retention models and 0.95 for Mamba
  double eps = 1e-8;
  std::size_t eval_every = 200;
  std::uint64_t eval_tokens = 65536;  // cap on validation tokens per evaluation, 0 = whole split
  std::uint64_t seed = 0;
  double dropout = 0.0;

  void validate() const;
  std::size_t tokens_per_step() const { return batch_size * seq_len; }
  std::size_t total_steps() const;
  std::size_t warmup_steps() const;
  double beta2_for(BlockKind kind) const;

  std::map<std::string, std::string> to_map() const;
  bool set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Linear warmup to lr_peak over warmup_steps(), then
/// lr_peak * (1 - progress)^poly_power down to 0 at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

template <class T>
struct OptimizerState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
};

template <class T>
OptimizerState<T> make_optimizer_state(const ParameterRegistry<T>& params);

/// One AdamW update. Decoupled decay only touches parameters registered with
/// decay = true. Throws NumericError naming the parameter on a non-finite grad.
template <class T>
void adamw_step(ParameterRegistry<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg,
                double beta2);

template <class T>
double global_grad_norm(const ParameterRegistry<T>& params);

/// Rescales all gradients jointly so the global norm is at most max_norm.
/// Returns the scale applied (1 when untouched).
template <class T>
double clip_global_norm(ParameterRegistry<T>& params, double max_norm);

struct EvalResult {
  double nats = 0.0;  // mean next-token cross-entropy
  double perplexity = 0.0;
  std::size_t tokens = 0;
};

/// Teacher-forced evaluation over consecutive non-overlapping windows.
template <class T>
EvalResult eval_perplexity(const Model<T>& model, std::span<const std::int32_t> tokens, std::size_t seq_len,
                           std::size_t max_tokens = 0, std::size_t batch = 8);

struct TrainOptions {
  std::string out_dir;                   // metrics.jsonl and checkpoints; empty writes nothing
  std::ostream* echo = nullptr;          // metrics lines are also written here
  std::string resume_from;               // training checkpoint to continue from
  std::size_t stop_after_steps = 0;      // stop early (with a checkpoint) after this many steps
  bool write_checkpoints = true;
};

struct TrainResult {
  std::size_t steps = 0;
  double last_loss = 0.0;
  double val_loss = 0.0;
  std::vector<nlohmann::json> records;
  bool aborted = false;
  std::string abort_reason;
};

/// Deterministic given (model init, corpus, cfg). Metrics are one JSON object
/// per step plus one per evaluation; evaluations happen every eval_every
/// steps and at the end, each followed by a checkpoint.
template <class T>
TrainResult train(Model<T>& model, const Corpus& corpus, const TrainConfig& cfg, const TrainOptions& opts = {});

/// Model parameters, optimizer moments ("opt.m.*", "opt.v.*") and the step
/// counter in one checkpoint.
template <class T>
Checkpoint<T> training_checkpoint(const Model<T>& model, const OptimizerState<T>& opt, const TrainConfig& cfg,
                                  std::size_t step);

}  // namespace densessm
