#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densessm/config.hpp"
#include "densessm/model.hpp"

namespace densessm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitVerify = 4;

struct RunSpec {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;  // sets model.seed and train.seed
  std::optional<std::string> dtype;
};

/// Config file, then overrides in order, then --seed/--dtype.
RunConfig resolve_config(const RunSpec& spec);

/// Writes out_dir/effective.cfg (when out_dir is set) and echoes it to `out`.
void echo_effective_config(const RunConfig& cfg, const RunSpec& spec, std::ostream& out);

struct EvalArgs {
  std::string checkpoint;
  bool heldout = false;
};

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  std::size_t n_new = 64;
  double temperature = 0.0;  // 0 = greedy
  std::size_t top_k = 0;
  std::uint64_t sample_seed = 0;
};

struct VerifyArgs {
  std::size_t n_configs = 60;
  std::size_t causality_cases = 50;
  bool broken_decay_mask = false;  // negative control
};

struct ProbeArgs {
  std::string dense_checkpoint;
  std::string baseline_checkpoint;
  std::size_t batch = 32;  // in-sample R^2 of noise is about d_model / (batch * seq_len)
  std::size_t seq_len = 256;
};

struct ResumeArgs {
  std::string resume_from;
  std::size_t stop_after_steps = 0;
};

int cmd_train(const RunSpec& spec, const ResumeArgs& resume, std::ostream& out, std::ostream& err);
int cmd_eval(const RunSpec& spec, const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_generate(const RunSpec& spec, const GenerateArgs& args, std::ostream& out, std::ostream& err);
int cmd_verify(const RunSpec& spec, const VerifyArgs& args, std::ostream& out, std::ostream& err);
int cmd_ablate(const RunSpec& spec, std::ostream& out, std::ostream& err);
int cmd_probe(const RunSpec& spec, const ProbeArgs& args, std::ostream& out, std::ostream& err);

// Ablation matrix.

struct AblationCell {
  std::string table;  // "4".."7"
  std::string label;
  std::vector<std::string> axis_keys;  // keys this table is allowed to vary
  RunConfig config;
};

/// Rows shaped like the paper's ablation tables, derived from `base`.
std::vector<AblationCell> ablation_matrix(const RunConfig& base);

struct AuditResult {
  bool pass = true;
  std::vector<std::string> violations;
};

/// Every pair of cells within a table may differ only in that table's axis keys.
AuditResult audit_cells(const std::vector<AblationCell>& cells);

struct CellResult {
  AblationCell cell;
  std::size_t params = 0;
  std::vector<double> val_loss;      // per seed
  std::vector<double> heldout_nats;  // per seed
  double median_val = 0.0;
  double median_heldout = 0.0;
  bool ok = true;
  std::string error;

  nlohmann::json to_json() const;
};

double median(std::vector<double> v);

struct AblationRun {
  std::vector<CellResult> cells;
  AuditResult audit;
};

/// Trains every distinct cell once per seed (identical corpus and seeds
/// across cells); cells that fail are marked and the rest still run.
AblationRun run_ablation(const RunConfig& base, std::ostream* progress = nullptr);

std::string render_ablation_table(const AblationRun& run);

/// Which differing keys a pair of configs has.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

}  // namespace densessm
