#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densessm/model.hpp"

namespace densessm {

struct VerifyCase {
  std::string suite;  // dual_mode, baseline_reduction, zero_gate, causality
  std::string label;  // the config corner
  double max_abs_diff = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  nlohmann::json to_json() const;
};

struct VerifyReport {
  std::vector<VerifyCase> cases;

  bool all_pass() const;
  std::size_t failures() const;
};

struct VerifyOptions {
  std::size_t n_configs = 60;  // dual-mode sweep size
  std::size_t seq_len = 32;
  std::size_t causality_cases = 50;
  std::uint64_t seed = 0;
  double dual_tol = 1e-8;
  double reduction_tol = 1e-12;
};

/// One-line description of the dense/kind corner of a config.
std::string corner_label(const ModelConfig& cfg);

/// Small float64 config (d_model 16, 5 layers) with the given corner.
ModelConfig micro_config(BlockKind kind, const DenseConfig& dense);

/// At least `n` configs covering every value of block kind, m in {0,1,2,4},
/// projection, gate, fusion and frequency in {1,2,4}.
std::vector<ModelConfig> verify_sweep(std::size_t n, std::uint64_t seed);

/// Overwrites every parameter with random values (gates included) so no
/// branch of the model is trivially zero.
template <class T>
void randomize_parameters(Model<T>& model, std::uint64_t seed, double scale = 0.3);

/// Random tokens in [0, 256].
Tokens random_tokens(std::size_t batch, std::size_t seq, std::uint64_t seed);

/// Max |parallel logits - recurrent rollout logits| over T steps.
double dual_mode_diff(const Model<double>& model, const Tokens& tokens);

/// Max |logits[<= t]| change after replacing token t+1.
double causality_diff(const Model<double>& model, const Tokens& tokens, std::size_t t, std::int32_t replacement);

VerifyCase check_dual_mode(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed, double tol);
/// m = 0 dense kind against its vanilla kind with copied parameters.
VerifyCase check_m0_reduction(BlockKind dense_kind, std::uint64_t seed, double tol);
/// Dense model whose gate output layer is zero against the vanilla model sharing its other parameters.
VerifyCase check_zero_gate(const ModelConfig& dense_cfg, std::uint64_t seed, double tol);
VerifyCase check_causality(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed);

VerifyReport run_verify(const VerifyOptions& opts);

}  // namespace densessm
