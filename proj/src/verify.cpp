#include "densessm/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "densessm/init.hpp"

namespace densessm {

nlohmann::json VerifyCase::to_json() const {
  return {{"suite", suite}, {"config", label}, {"max_abs_diff", max_abs_diff}, {"tolerance", tolerance},
          {"pass", pass}};
}

bool VerifyReport::all_pass() const { return failures() == 0; }

std::size_t VerifyReport::failures() const {
  return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [](const auto& c) { return !c.pass; }));
}

std::string corner_label(const ModelConfig& cfg) {
  const DenseConfig d = cfg.effective_dense();
  std::string s = to_string(cfg.block_kind) + " m=" + std::to_string(d.depth_m);
  if (d.depth_m > 0) {
    s += " proj=" + to_string(d.projection) + " gate=" + to_string(d.gate) + " fusion=" + to_string(d.fusion) +
         " freq=" + std::to_string(d.frequency);
    if (!d.shared_gate) s += " per-source-gates";
  }
  return s;
}

ModelConfig micro_config(BlockKind kind, const DenseConfig& dense) {
  ModelConfig c;
  c.block_kind = kind;
  c.n_layers = 5;
  c.d_model = 16;
  c.n_heads = 2;
  c.qk_dim = 8;
  c.v_dim = 16;
  c.d_state = 4;
  c.d_inner = 32;
  c.dt_rank = 1;
  c.dense = dense;
  c.max_seq_len = 64;
  c.dtype = DType::f64;
  return c;
}

std::vector<ModelConfig> verify_sweep(std::size_t n, std::uint64_t seed) {
  std::vector<ModelConfig> grid;
  for (BlockKind kind : {BlockKind::dense_retnet, BlockKind::dense_mamba}) {
    for (std::size_t m : {0, 1, 2, 4}) {
      for (ProjectionKind p : {ProjectionKind::identity, ProjectionKind::linear}) {
        for (GateKind g : {GateKind::mlp, GateKind::linear, GateKind::none}) {
          for (FusionKind f : {FusionKind::add, FusionKind::concat}) {
            for (std::size_t freq : {1, 2, 4}) {
              DenseConfig d;
              d.depth_m = m;
              d.projection = p;
              d.gate = g;
              d.fusion = f;
              d.frequency = freq;
              grid.push_back(micro_config(kind, d));
            }
          }
        }
      }
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(grid.begin(), grid.end(), rng);

  std::vector<ModelConfig> out = {micro_config(BlockKind::retnet, DenseConfig{}),
                                  micro_config(BlockKind::mamba, DenseConfig{})};
  std::vector<bool> taken(grid.size(), false);
  // Cover every axis value first, then fill from the shuffled grid.
  using Pred = std::function<bool(const ModelConfig&)>;
  std::vector<Pred> must;
  for (BlockKind k : {BlockKind::dense_retnet, BlockKind::dense_mamba}) {
    must.push_back([k](const ModelConfig& c) { return c.block_kind == k && c.dense.depth_m > 0; });
  }
  for (std::size_t m : {0, 1, 2, 4}) must.push_back([m](const ModelConfig& c) { return c.dense.depth_m == m; });
  for (auto p : {ProjectionKind::identity, ProjectionKind::linear}) {
    must.push_back([p](const ModelConfig& c) { return c.dense.depth_m > 0 && c.dense.projection == p; });
  }
  for (auto g : {GateKind::mlp, GateKind::linear, GateKind::none}) {
    must.push_back([g](const ModelConfig& c) { return c.dense.depth_m > 0 && c.dense.gate == g; });
  }
  for (auto f : {FusionKind::add, FusionKind::concat}) {
    must.push_back([f](const ModelConfig& c) { return c.dense.depth_m > 0 && c.dense.fusion == f; });
  }
  for (std::size_t freq : {1, 2, 4}) {
    must.push_back([freq](const ModelConfig& c) { return c.dense.depth_m > 0 && c.dense.frequency == freq; });
  }
  for (const auto& pred : must) {
    if (std::any_of(out.begin(), out.end(), pred)) continue;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!taken[i] && pred(grid[i])) {
        taken[i] = true;
        out.push_back(grid[i]);
        break;
      }
    }
  }
  for (std::size_t i = 0; i < grid.size() && out.size() < n; ++i) {
    if (!taken[i]) {
      taken[i] = true;
      out.push_back(grid[i]);
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].seed = seed * 1000 + i;
  return out;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_gate_output(const std::string& name) {
  return name.find(".gate.") != std::string::npos && (ends_with(name, ".w2") || ends_with(name, ".w"));
}

}  // namespace

template <class T>
void randomize_parameters(Model<T>& model, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  for (auto& p : model.registry().params()) {
    const Shape& shape = p.var.shape();
    Tensor<T> v;
    if (ends_with(p.name, "norm")) {
      v = random_normal<T>(shape, 0.1, rng);
      for (auto& x : v.mutable_data()) x += T(1);
    } else if (ends_with(p.name, ".a_log") || ends_with(p.name, ".dt_bias") || ends_with(p.name, ".conv_b") ||
               ends_with(p.name, ".d_skip")) {
      v = random_normal<T>(shape, 0.5, rng);
    } else if (shape.size() == 2) {
      v = random_normal<T>(shape, scale * 2.0 / std::sqrt(static_cast<double>(shape[0])), rng);
    } else {
      v = random_normal<T>(shape, scale, rng);
    }
    p.var.set_value(std::move(v));
  }
}

Tokens random_tokens(std::size_t batch, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, kBosToken);
  std::vector<std::int32_t> ids(batch * seq);
  for (auto& t : ids) t = tok(rng);
  return Tokens(batch, seq, std::move(ids));
}

double dual_mode_diff(const Model<double>& model, const Tokens& tokens) {
  if (tokens.batch != 1) throw ArgumentError("dual-mode comparison takes a single sequence");
  NoGradGuard no_grad;
  const Tensor<double> par = model.forward_train(tokens).value();
  const std::size_t v = model.config().vocab_size;
  InferenceSession<double> session = model.new_session();
  double worst = 0.0;
  for (std::size_t t = 0; t < tokens.seq; ++t) {
    const Tensor<double> step = model.forward_step(session, tokens.at(0, t));
    for (std::size_t j = 0; j < v; ++j) worst = std::max(worst, std::abs(step[j] - par[t * v + j]));
  }
  return worst;
}

double causality_diff(const Model<double>& model, const Tokens& tokens, std::size_t t, std::int32_t replacement) {
  if (t + 1 >= tokens.seq) throw ArgumentError("causality probe needs a position after t");
  NoGradGuard no_grad;
  Tokens changed = tokens;
  for (std::size_t b = 0; b < tokens.batch; ++b) changed.ids[b * tokens.seq + t + 1] = replacement;
  const Tensor<double> a = model.forward_train(tokens).value();
  const Tensor<double> c = model.forward_train(changed).value();
  const std::size_t v = model.config().vocab_size;
  double worst = 0.0;
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t i = 0; i <= t; ++i) {
      const std::size_t row = (b * tokens.seq + i) * v;
      for (std::size_t j = 0; j < v; ++j) worst = std::max(worst, std::abs(a[row + j] - c[row + j]));
    }
  }
  return worst;
}

VerifyCase check_dual_mode(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed, double tol) {
  Model<double> model(cfg);
  randomize_parameters(model, seed);
  VerifyCase c{"dual_mode", corner_label(cfg), 0.0, tol, false};
  c.max_abs_diff = dual_mode_diff(model, random_tokens(1, seq_len, seed + 17));
  c.pass = c.max_abs_diff < tol;
  return c;
}

namespace {

BlockKind vanilla_of(BlockKind k) { return is_retention(k) ? BlockKind::retnet : BlockKind::mamba; }

double logits_diff(const Model<double>& a, const Model<double>& b, const Tokens& tokens) {
  NoGradGuard no_grad;
  return max_abs_diff(a.forward_train(tokens).value(), b.forward_train(tokens).value());
}

void copy_shared(const Model<double>& from, Model<double>& to) {
  for (auto& p : to.registry().params()) {
    const auto* src = from.registry().find(p.name);
    if (!src) throw UsageError("parameter '" + p.name + "' has no counterpart");
    p.var.set_value(src->var.value());
  }
}

}  // namespace

VerifyCase check_m0_reduction(BlockKind dense_kind, std::uint64_t seed, double tol) {
  DenseConfig d;
  d.depth_m = 0;
  ModelConfig dense_cfg = micro_config(dense_kind, d);
  dense_cfg.seed = seed;
  Model<double> dense(dense_cfg);
  randomize_parameters(dense, seed);
  ModelConfig base_cfg = dense_cfg;
  base_cfg.block_kind = vanilla_of(dense_kind);
  Model<double> base(base_cfg);
  copy_shared(dense, base);
  VerifyCase c{"baseline_reduction", corner_label(dense_cfg), 0.0, tol, false};
  c.max_abs_diff = logits_diff(dense, base, random_tokens(2, 32, seed + 5));
  c.pass = c.max_abs_diff < tol;
  return c;
}

VerifyCase check_zero_gate(const ModelConfig& dense_cfg, std::uint64_t seed, double tol) {
  if (dense_cfg.effective_dense().gate == GateKind::none) {
    throw ArgumentError("zero-gate reduction needs a gate with weights");
  }
  Model<double> dense(dense_cfg);
  randomize_parameters(dense, seed);
  Model<double> fresh(dense_cfg);  // untouched gate outputs and concat reductions
  for (auto& p : dense.registry().params()) {
    if (is_gate_output(p.name) || ends_with(p.name, ".reduce")) p.var.set_value(fresh.registry().find(p.name)->var.value());
  }
  ModelConfig base_cfg = dense_cfg;
  base_cfg.block_kind = vanilla_of(dense_cfg.block_kind);
  Model<double> base(base_cfg);
  copy_shared(dense, base);
  VerifyCase c{"zero_gate", corner_label(dense_cfg), 0.0, tol, false};
  c.max_abs_diff = logits_diff(dense, base, random_tokens(2, 32, seed + 9));
  c.pass = c.max_abs_diff < tol;
  return c;
}

VerifyCase check_causality(const ModelConfig& cfg, std::size_t seq_len, std::uint64_t seed) {
  Model<double> model(cfg);
  randomize_parameters(model, seed);
  std::mt19937_64 rng(seed + 3);
  const Tokens tokens = random_tokens(1, seq_len, seed + 11);
  const std::size_t t = std::uniform_int_distribution<std::size_t>(0, seq_len - 2)(rng);
  const std::int32_t original = tokens.at(0, t + 1);
  const std::int32_t replacement = (original + 1 + static_cast<std::int32_t>(rng() % 255)) % (kBosToken + 1);
  VerifyCase c{"causality", corner_label(cfg) + " t=" + std::to_string(t), 0.0, 0.0, false};
  c.max_abs_diff = causality_diff(model, tokens, t, replacement);
  c.pass = c.max_abs_diff == 0.0;
  return c;
}

VerifyReport run_verify(const VerifyOptions& opts) {
  VerifyReport report;
  const auto sweep = verify_sweep(opts.n_configs, opts.seed);
  for (const auto& cfg : sweep) report.cases.push_back(check_dual_mode(cfg, opts.seq_len, cfg.seed, opts.dual_tol));

  for (BlockKind k : {BlockKind::dense_retnet, BlockKind::dense_mamba}) {
    report.cases.push_back(check_m0_reduction(k, opts.seed + 101, opts.reduction_tol));
    for (auto g : {GateKind::mlp, GateKind::linear}) {
      for (auto f : {FusionKind::add, FusionKind::concat}) {
        DenseConfig d;
        d.depth_m = 2;
        d.gate = g;
        d.fusion = f;
        d.projection = f == FusionKind::add ? ProjectionKind::identity : ProjectionKind::linear;
        ModelConfig cfg = micro_config(k, d);
        cfg.seed = opts.seed + 200;
        report.cases.push_back(check_zero_gate(cfg, opts.seed + 201, opts.reduction_tol));
      }
    }
  }
  for (std::size_t i = 0; i < opts.causality_cases; ++i) {
    const ModelConfig& cfg = sweep[i % sweep.size()];
    report.cases.push_back(check_causality(cfg, opts.seq_len, opts.seed * 7919 + 300 + i));
  }
  return report;
}

template void randomize_parameters<float>(Model<float>&, std::uint64_t, double);
template void randomize_parameters<double>(Model<double>&, std::uint64_t, double);

}  // namespace densessm
