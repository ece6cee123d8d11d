#include "densessm/training.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "densessm/ops.hpp"

namespace densessm {

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const char* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end || value.empty()) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::vector<std::string> kTrainKeys = {
    "train.total_tokens", "train.batch_size", "train.seq_len",    "train.lr_peak",     "train.warmup_frac",
    "train.poly_power",   "train.weight_decay", "train.clip_norm", "train.beta1",      "train.beta2",
    "train.eps",          "train.eval_every", "train.eval_tokens", "train.seed",       "train.dropout",
};

}  // namespace

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) bad.push_back("train.warmup_frac must lie in (0, 1)");
  if (!(clip_norm > 0.0)) bad.push_back("train.clip_norm must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) bad.push_back("train.beta1 must lie in (0, 1)");
  if (!(beta2 == 0.0 || (beta2 > 0.0 && beta2 < 1.0))) bad.push_back("train.beta2 must lie in (0, 1) (or 0 for auto)");
  if (!(eps > 0.0)) bad.push_back("train.eps must be positive");
  if (!(lr_peak > 0.0)) bad.push_back("train.lr_peak must be positive");
  if (!(poly_power > 0.0)) bad.push_back("train.poly_power must be positive");
  if (!(weight_decay >= 0.0)) bad.push_back("train.weight_decay must be non-negative");
  if (batch_size == 0 || seq_len == 0) bad.push_back("train.batch_size and train.seq_len must be positive");
  if (eval_every == 0) bad.push_back("train.eval_every must be positive");
  if (total_tokens < batch_size * seq_len) bad.push_back("train.total_tokens must cover at least one step");
  if (dropout != 0.0) bad.push_back("train.dropout must be 0 (dropout is not implemented)");
  if (bad.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& s : bad) msg += "\n  - " + s;
  throw ConfigError(msg);
}

std::size_t TrainConfig::total_steps() const {
  return static_cast<std::size_t>(total_tokens / std::max<std::size_t>(1, tokens_per_step()));
}

std::size_t TrainConfig::warmup_steps() const {
  const auto w = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_steps())));
  return std::max<std::size_t>(1, w);
}

double TrainConfig::beta2_for(BlockKind kind) const {
  if (beta2 > 0.0) return beta2;
  return is_retention(kind) ? 0.98 : 0.95;
}

std::vector<std::string> TrainConfig::keys() { return kTrainKeys; }

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"train.total_tokens", std::to_string(total_tokens)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.seq_len", std::to_string(seq_len)},
      {"train.lr_peak", fmt_double(lr_peak)},
      {"train.warmup_frac", fmt_double(warmup_frac)},
      {"train.poly_power", fmt_double(poly_power)},
      {"train.weight_decay", fmt_double(weight_decay)},
      {"train.clip_norm", fmt_double(clip_norm)},
      {"train.beta1", fmt_double(beta1)},
      {"train.beta2", fmt_double(beta2)},
      {"train.eps", fmt_double(eps)},
      {"train.eval_every", std::to_string(eval_every)},
      {"train.eval_tokens", std::to_string(eval_tokens)},
      {"train.seed", std::to_string(seed)},
      {"train.dropout", fmt_double(dropout)},
  };
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "train.total_tokens") total_tokens = parse_u64(key, value);
  else if (key == "train.batch_size") batch_size = parse_u64(key, value);
  else if (key == "train.seq_len") seq_len = parse_u64(key, value);
  else if (key == "train.lr_peak") lr_peak = parse_double(key, value);
  else if (key == "train.warmup_frac") warmup_frac = parse_double(key, value);
  else if (key == "train.poly_power") poly_power = parse_double(key, value);
  else if (key == "train.weight_decay") weight_decay = parse_double(key, value);
  else if (key == "train.clip_norm") clip_norm = parse_double(key, value);
  else if (key == "train.beta1") beta1 = parse_double(key, value);
  else if (key == "train.beta2") beta2 = parse_double(key, value);
  else if (key == "train.eps") eps = parse_double(key, value);
  else if (key == "train.eval_every") eval_every = parse_u64(key, value);
  else if (key == "train.eval_tokens") eval_tokens = parse_u64(key, value);
  else if (key == "train.seed") seed = parse_u64(key, value);
  else if (key == "train.dropout") dropout = parse_double(key, value);
  else return false;
  return true;
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps || total_steps == 0) return 0.0;
  const std::size_t warm = std::min(cfg.warmup_steps(), total_steps);
  if (step < warm) return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return cfg.lr_peak;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.lr_peak * std::pow(1.0 - progress, cfg.poly_power);
}

template <class T>
OptimizerState<T> make_optimizer_state(const ParameterRegistry<T>& params) {
  OptimizerState<T> s;
  for (const auto& p : params.params()) {
    s.m.emplace_back(p.var.shape());
    s.v.emplace_back(p.var.shape());
  }
  return s;
}

template <class T>
void adamw_step(ParameterRegistry<T>& params, OptimizerState<T>& state, double lr, const TrainConfig& cfg,
                double beta2) {
  auto& ps = params.params();
  if (state.m.size() != ps.size()) throw UsageError("optimizer state does not match the parameter registry");
  for (const auto& p : ps) {
    if (!p.var.grad().all_finite()) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  ++state.step;
  const double b1 = cfg.beta1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    const Tensor<T> g = p.var.grad();
    Tensor<T>& w = p.var.mutable_value();
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double wj = static_cast<double>(w[j]) * (1.0 - decay);
      wj -= lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      w[j] = static_cast<T>(wj);
    }
  }
}

template <class T>
double global_grad_norm(const ParameterRegistry<T>& params) {
  double sq = 0.0;
  for (const auto& p : params.params()) {
    if (!p.var.node()->grad_ready) continue;
    for (T g : p.var.node()->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <class T>
double clip_global_norm(ParameterRegistry<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto& p : params.params()) {
    auto& node = *p.var.node();
    if (!node.grad_ready) continue;
    for (auto& g : node.grad.mutable_data()) g = static_cast<T>(static_cast<double>(g) * scale);
  }
  return scale;
}

template <class T>
EvalResult eval_perplexity(const Model<T>& model, std::span<const std::int32_t> tokens, std::size_t seq_len,
                           std::size_t max_tokens, std::size_t batch) {
  if (tokens.size() < 2) throw ArgumentError("evaluation needs at least two tokens");
  if (seq_len == 0 || batch == 0) throw ArgumentError("evaluation needs positive seq_len and batch");
  std::size_t usable = tokens.size() - 1;
  if (max_tokens > 0) usable = std::min(usable, max_tokens);
  const std::size_t t = std::min(seq_len, usable);
  const std::size_t windows = usable / t;

  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t w0 = 0; w0 < windows; w0 += batch) {
    const std::size_t b = std::min(batch, windows - w0);
    std::vector<std::int32_t> in(b * t), tg(b * t);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t off = (w0 + i) * t;
      std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(off), t, in.begin() + static_cast<std::ptrdiff_t>(i * t));
      std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(off + 1), t,
                  tg.begin() + static_cast<std::ptrdiff_t>(i * t));
    }
    Var<T> logits = model.forward_train(Tokens(b, t, std::move(in)));
    const double mean = static_cast<double>(cross_entropy_logits(logits, tg).value().item());
    total += mean * static_cast<double>(b * t);
    counted += b * t;
  }
  EvalResult r;
  r.tokens = counted;
  r.nats = total / static_cast<double>(counted);
  r.perplexity = std::exp(r.nats);
  return r;
}

template <class T>
Checkpoint<T> training_checkpoint(const Model<T>& model, const OptimizerState<T>& opt, const TrainConfig& cfg,
                                  std::size_t step) {
  Checkpoint<T> ckpt = snapshot(model);
  const auto& ps = model.registry().params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ckpt.tensors.emplace("opt.m." + ps[i].name, opt.m[i]);
    ckpt.tensors.emplace("opt.v." + ps[i].name, opt.v[i]);
  }
  ckpt.meta = {
      {"step", step},
      {"optimizer_step", opt.step},
      {"tokens_seen", static_cast<std::uint64_t>(step) * cfg.tokens_per_step()},
      {"sampler", {{"seed", cfg.seed}, {"cursor", step}}},
      {"train_config", cfg.to_map()},
  };
  return ckpt;
}

namespace {

template <class T>
std::size_t resume_state(Model<T>& model, OptimizerState<T>& opt, const TrainConfig& cfg, const std::string& path) {
  const Checkpoint<T> ckpt = read_checkpoint<T>(path);
  restore(model, ckpt);
  if (!ckpt.meta.contains("step") || !ckpt.meta.contains("train_config")) {
    throw ConfigError("checkpoint '" + path + "' carries no training state");
  }
  TrainConfig saved;
  for (const auto& [k, v] : ckpt.meta["train_config"].items()) saved.set(k, v.template get<std::string>());
  if (!(saved == cfg)) throw ConfigError("resume checkpoint was written with a different train config");
  const auto& ps = model.registry().params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto m = ckpt.tensors.find("opt.m." + ps[i].name);
    auto v = ckpt.tensors.find("opt.v." + ps[i].name);
    if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
      throw ConfigError("checkpoint lacks optimizer moments for '" + ps[i].name + "'");
    }
    opt.m[i] = m->second;
    opt.v[i] = v->second;
  }
  opt.step = ckpt.meta["optimizer_step"].template get<std::uint64_t>();
  return ckpt.meta["step"].template get<std::size_t>();
}

}  // namespace

template <class T>
TrainResult train(Model<T>& model, const Corpus& corpus, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  namespace fs = std::filesystem;
  const std::size_t total = cfg.total_steps();
  const double beta2 = cfg.beta2_for(model.config().block_kind);
  OptimizerState<T> opt = make_optimizer_state(model.registry());
  BatchSampler sampler{cfg.seq_len, cfg.batch_size, cfg.seed, 0};

  std::ofstream metrics;
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    metrics.open(fs::path(opts.out_dir) / "metrics.jsonl", opts.resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) throw ArgumentError("cannot write metrics to '" + opts.out_dir + "'");
  }
  TrainResult result;
  auto emit = [&](nlohmann::json rec) {
    const std::string line = rec.dump();
    if (metrics.is_open()) metrics << line << '\n' << std::flush;
    if (opts.echo) *opts.echo << line << '\n' << std::flush;
    result.records.push_back(std::move(rec));
  };
  auto checkpoint = [&](std::size_t step, const std::string& name) {
    if (opts.out_dir.empty() || !opts.write_checkpoints) return;
    write_checkpoint((fs::path(opts.out_dir) / name).string(), training_checkpoint(model, opt, cfg, step));
  };

  std::size_t step = 0;
  if (!opts.resume_from.empty()) step = resume_state(model, opt, cfg, opts.resume_from);
  sampler.cursor = step;

  const auto start = std::chrono::steady_clock::now();
  auto& registry = model.registry();
  while (step < total) {
    const Batch batch = next_batch(sampler, corpus, Split::train);
    const std::size_t s = step + 1;
    const double lr = lr_at(s, total, cfg);
    double loss_value = 0.0, grad_norm = 0.0;
    try {
      registry.zero_grad();
      Var<T> loss = cross_entropy_logits(model.forward_train(batch.inputs), batch.targets.ids);
      loss_value = static_cast<double>(loss.value().item());
      backward(loss);
      grad_norm = global_grad_norm(registry);
      if (!std::isfinite(grad_norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(s));
      clip_global_norm(registry, cfg.clip_norm);
      adamw_step(registry, opt, lr, cfg, beta2);
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      emit({{"type", "abort"}, {"step", s}, {"reason", e.what()}});
      checkpoint(step, "crash.dssm");
      return result;
    }
    step = s;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit({{"type", "train"},
          {"step", step},
          {"tokens", static_cast<std::uint64_t>(step) * cfg.tokens_per_step()},
          {"loss", loss_value},
          {"lr", lr},
          {"grad_norm", grad_norm},
          {"wall_time", wall}});
    result.last_loss = loss_value;
    result.steps = step;

    const bool stop_here = opts.stop_after_steps > 0 && step >= opts.stop_after_steps && step < total;
    if (step % cfg.eval_every == 0 || step == total) {
      const EvalResult ev = eval_perplexity(model, corpus.split(Split::val), cfg.seq_len, cfg.eval_tokens);
      result.val_loss = ev.nats;
      emit({{"type", "eval"},
            {"step", step},
            {"tokens", static_cast<std::uint64_t>(step) * cfg.tokens_per_step()},
            {"val_loss", ev.nats},
            {"val_ppl", ev.perplexity}});
      checkpoint(step, "checkpoint.dssm");
    } else if (stop_here) {
      checkpoint(step, "checkpoint.dssm");
    }
    if (stop_here) break;
  }
  return result;
}

#define DENSESSM_INSTANTIATE_TRAIN(T)                                                                              \
  template OptimizerState<T> make_optimizer_state<T>(const ParameterRegistry<T>&);                                 \
  template void adamw_step<T>(ParameterRegistry<T>&, OptimizerState<T>&, double, const TrainConfig&, double);      \
  template double global_grad_norm<T>(const ParameterRegistry<T>&);                                                \
  template double clip_global_norm<T>(ParameterRegistry<T>&, double);                                              \
  template EvalResult eval_perplexity<T>(const Model<T>&, std::span<const std::int32_t>, std::size_t, std::size_t, \
                                         std::size_t);                                                             \
  template Checkpoint<T> training_checkpoint<T>(const Model<T>&, const OptimizerState<T>&, const TrainConfig&,     \
                                                std::size_t);                                                      \
  template TrainResult train<T>(Model<T>&, const Corpus&, const TrainConfig&, const TrainOptions&);

DENSESSM_INSTANTIATE_TRAIN(float)
DENSESSM_INSTANTIATE_TRAIN(double)

}  // namespace densessm
