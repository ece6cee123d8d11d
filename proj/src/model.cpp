#include "densessm/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "densessm/init.hpp"
#include "densessm/ops.hpp"

namespace densessm {

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::dense_retnet: return "dense_retnet";
    case BlockKind::retnet: return "retnet";
    case BlockKind::dense_mamba: return "dense_mamba";
    case BlockKind::mamba: return "mamba";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& s) {
  if (s == "dense_retnet") return BlockKind::dense_retnet;
  if (s == "retnet") return BlockKind::retnet;
  if (s == "dense_mamba") return BlockKind::dense_mamba;
  if (s == "mamba") return BlockKind::mamba;
  throw ConfigError("unknown block kind '" + s + "' (expected dense_retnet, retnet, dense_mamba or mamba)");
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  need(n_layers > 0, "model.n_layers must be positive");
  need(d_model > 0, "model.d_model must be positive");
  need(vocab_size >= kByteVocab, "model.vocab_size must be at least 257 (bytes plus BOS)");
  need(max_seq_len > 0, "model.max_seq_len must be positive");
  need(dense.frequency >= 1, "model.dense.frequency must be >= 1");
  if (is_retention(block_kind)) {
    need(n_heads > 0, "model.n_heads must be positive");
    need(qk_dim > 0, "model.qk_dim must be positive");
    need(v_dim > 0, "model.v_dim must be positive");
    if (n_heads > 0) {
      need(qk_dim % n_heads == 0, "model.qk_dim must be divisible by model.n_heads");
      need(v_dim % n_heads == 0, "model.v_dim must be divisible by model.n_heads");
    }
  } else {
    need(d_state > 0, "model.d_state must be positive");
  }
  if (is_dense_kind(block_kind)) {
    need(dense.depth_m < n_layers || n_layers == 0, "model.dense.depth_m must be smaller than model.n_layers");
  }
  return v;
}

void ModelConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

DenseConfig ModelConfig::effective_dense() const {
  DenseConfig d = dense;
  if (!is_dense_kind(block_kind)) d.depth_m = 0;
  return d;
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const char* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end || value.empty()) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("key '" + key + "' expects true or false, got '" + value + "'");
}

const std::vector<std::string> kModelKeys = {
    "model.block_kind", "model.n_layers",        "model.d_model",          "model.n_heads",
    "model.qk_dim",     "model.v_dim",           "model.d_state",          "model.d_inner",
    "model.dt_rank",    "model.dense.depth_m",   "model.dense.projection", "model.dense.gate",
    "model.dense.fusion", "model.dense.frequency", "model.dense.shared_gate", "model.dense.gate_hidden_dim",
    "model.vocab_size", "model.max_seq_len",     "model.dtype",            "model.seed",
};

}  // namespace

std::vector<std::string> ModelConfig::keys() { return kModelKeys; }

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"model.block_kind", to_string(block_kind)},
      {"model.n_layers", std::to_string(n_layers)},
      {"model.d_model", std::to_string(d_model)},
      {"model.n_heads", std::to_string(n_heads)},
      {"model.qk_dim", std::to_string(qk_dim)},
      {"model.v_dim", std::to_string(v_dim)},
      {"model.d_state", std::to_string(d_state)},
      {"model.d_inner", std::to_string(d_inner)},
      {"model.dt_rank", std::to_string(dt_rank)},
      {"model.dense.depth_m", std::to_string(dense.depth_m)},
      {"model.dense.projection", to_string(dense.projection)},
      {"model.dense.gate", to_string(dense.gate)},
      {"model.dense.fusion", to_string(dense.fusion)},
      {"model.dense.frequency", std::to_string(dense.frequency)},
      {"model.dense.shared_gate", dense.shared_gate ? "true" : "false"},
      {"model.dense.gate_hidden_dim", std::to_string(dense.gate_hidden_dim)},
      {"model.vocab_size", std::to_string(vocab_size)},
      {"model.max_seq_len", std::to_string(max_seq_len)},
      {"model.dtype", std::string(dtype_name(dtype))},
      {"model.seed", std::to_string(seed)},
  };
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "model.block_kind") block_kind = parse_block_kind(value);
  else if (key == "model.n_layers") n_layers = parse_size(key, value);
  else if (key == "model.d_model") d_model = parse_size(key, value);
  else if (key == "model.n_heads") n_heads = parse_size(key, value);
  else if (key == "model.qk_dim") qk_dim = parse_size(key, value);
  else if (key == "model.v_dim") v_dim = parse_size(key, value);
  else if (key == "model.d_state") d_state = parse_size(key, value);
  else if (key == "model.d_inner") d_inner = parse_size(key, value);
  else if (key == "model.dt_rank") dt_rank = parse_size(key, value);
  else if (key == "model.dense.depth_m") dense.depth_m = parse_size(key, value);
  else if (key == "model.dense.projection") dense.projection = parse_projection(value);
  else if (key == "model.dense.gate") dense.gate = parse_gate(value);
  else if (key == "model.dense.fusion") dense.fusion = parse_fusion(value);
  else if (key == "model.dense.frequency") dense.frequency = parse_size(key, value);
  else if (key == "model.dense.shared_gate") dense.shared_gate = parse_bool(key, value);
  else if (key == "model.dense.gate_hidden_dim") dense.gate_hidden_dim = parse_size(key, value);
  else if (key == "model.vocab_size") vocab_size = parse_size(key, value);
  else if (key == "model.max_seq_len") max_seq_len = parse_size(key, value);
  else if (key == "model.dtype") {
    try {
      dtype = parse_dtype(value);
    } catch (const Error&) {
      throw ConfigError("model.dtype expects f32 or f64, got '" + value + "'");
    }
  } else if (key == "model.seed") seed = parse_size(key, value);
  else return false;
  return true;
}

ModelConfig retnet_350m_config() {
  ModelConfig c;
  c.block_kind = BlockKind::dense_retnet;
  c.n_layers = 16;
  c.d_model = 1536;
  c.qk_dim = 768;
  c.v_dim = 3072;
  c.n_heads = 2;
  c.dense.depth_m = 2;
  c.dense.gate_hidden_dim = 384;
  c.vocab_size = 32000;
  c.max_seq_len = 2048;
  return c;
}

ModelConfig desk_config(BlockKind kind) {
  ModelConfig c;
  c.block_kind = kind;
  c.n_layers = 4;
  c.d_model = 192;
  c.n_heads = 2;
  c.qk_dim = 96;
  c.v_dim = 384;
  c.d_state = 16;
  c.dense.depth_m = is_dense_kind(kind) ? 2 : 0;
  c.max_seq_len = 1024;
  return c;
}

namespace {

std::size_t transition_params(const DenseConfig& d, std::size_t n, std::size_t gate_in, std::size_t dim) {
  if (n == 0) return 0;
  std::size_t p = 0;
  if (d.projection == ProjectionKind::linear) p += n * dim * dim;
  const std::size_t gates = d.shared_gate ? 1 : n;
  if (d.gate == GateKind::mlp) {
    const std::size_t h = d.gate_hidden(dim);
    p += gates * (gate_in * h + h * dim);
  } else if (d.gate == GateKind::linear) {
    p += gates * gate_in * dim;
  }
  if (d.fusion == FusionKind::concat) p += (n + 1) * dim * dim;
  return p;
}

}  // namespace

std::size_t count_parameters(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const DenseConfig dense = cfg.effective_dense();
  std::size_t total = cfg.vocab_size * d + d;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::size_t n = dense.sources_for(l);
    if (is_retention(cfg.block_kind)) {
      total += d + 2 * d * cfg.qk_dim + 2 * d * cfg.v_dim + cfg.v_dim * d;
      total += transition_params(dense, n, d, cfg.qk_dim) + transition_params(dense, n, d, cfg.v_dim);
    } else {
      const std::size_t di = cfg.mamba_inner(), s = cfg.d_state, r = cfg.mamba_dt_rank();
      total += d + 2 * d * di + kMambaConvWidth * di + di + di * (r + 2 * s) + r * di + di + di * s + di + di * d;
      total += transition_params(dense, n, d, di);
    }
  }
  return total;
}

template <class T>
void InferenceSession<T>::reset() {
  states_ = initial_;
  position_ = 0;
}

template <class T>
Model<T>::Model(const ModelConfig& cfg) : Model(cfg, cfg.seed) {}

template <class T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  if (cfg_.dtype != dtype_of<T>) {
    throw ConfigError("model.dtype is " + std::string(dtype_name(cfg_.dtype)) + " but the model was built as " +
                      std::string(dtype_name(dtype_of<T>)));
  }
  cfg_.seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model;
  const T init_std = static_cast<T>(0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers)));
  const DenseConfig dense = cfg_.effective_dense();

  embed_ = registry_.add("embed", random_normal<T>({cfg_.vocab_size, d}, 0.02, rng), true);
  layers_.reserve(cfg_.n_layers);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l);
    const std::size_t n = dense.sources_for(l);
    if (is_retention(cfg_.block_kind)) {
      layers_.emplace_back(std::in_place_type<GauRetentionBlock<T>>, registry_, prefix,
                           GauDims{d, cfg_.qk_dim, cfg_.v_dim, cfg_.n_heads}, dense, n, init_std, rng);
    } else {
      layers_.emplace_back(std::in_place_type<MambaBlock<T>>, registry_, prefix,
                           MambaDims{d, cfg_.mamba_inner(), cfg_.d_state, cfg_.mamba_dt_rank()}, dense, n, init_std,
                           rng);
    }
  }
  final_norm_ = registry_.add("final_norm", Tensor<T>::full({d}, T(1)), false);
}

template <class T>
Var<T> Model<T>::forward_train(const Tokens& tokens, ForwardTrace<T>* trace) const {
  if (tokens.seq > cfg_.max_seq_len) {
    throw ArgumentError("sequence length " + std::to_string(tokens.seq) + " exceeds model.max_seq_len " +
                        std::to_string(cfg_.max_seq_len));
  }
  const DenseConfig dense = cfg_.effective_dense();
  Var<T> x = embedding(embed_, tokens);
  DenseStash<T> stash(dense.depth_m);
  if (trace) *trace = ForwardTrace<T>{};
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::vector<std::size_t> consulted;
    const auto sources = stash.sources_for(l, dense.sources_for(l), &consulted);
    BlockOutput<T> out =
        std::visit([&](const auto& block) { return block.forward_parallel(x, sources); }, layers_[l]);
    if (trace) {
      trace->layer_outputs.push_back(out.y.value());
      trace->consulted.push_back(std::move(consulted));
      trace->published.push_back(out.published);
    }
    stash.push(l, std::move(out.published));
    x = out.y;
  }
  return matmul_nt(rms_norm(x, final_norm_, T(kNormEps)), embed_);
}

template <class T>
InferenceSession<T> Model<T>::new_session() const {
  InferenceSession<T> s;
  s.config_ = cfg_;
  for (const auto& layer : layers_) {
    s.initial_.push_back(std::visit([](const auto& block) -> LayerState<T> { return block.initial_state(); }, layer));
  }
  s.states_ = s.initial_;
  return s;
}

template <class T>
void Model<T>::check_session(const InferenceSession<T>& s) const {
  if (s.config_ != cfg_ || s.states_.size() != layers_.size()) {
    throw UsageError("inference session was created for a different model configuration");
  }
}

template <class T>
Tensor<T> Model<T>::forward_step(InferenceSession<T>& session, std::int32_t token) const {
  check_session(session);
  NoGradGuard no_grad;
  const DenseConfig dense = cfg_.effective_dense();
  Var<T> x = embedding(embed_, Tokens(1, 1, {token}));
  DenseStash<T> stash(dense.depth_m);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto sources = stash.sources_for(l, dense.sources_for(l));
    BlockOutput<T> out;
    if (const auto* gau = std::get_if<GauRetentionBlock<T>>(&layers_[l])) {
      out = gau->forward_recurrent(x, std::get<GauState<T>>(session.states_[l]), sources);
    } else {
      out = std::get<MambaBlock<T>>(layers_[l])
                .forward_recurrent(x, std::get<MambaState<T>>(session.states_[l]), sources);
    }
    stash.push(l, std::move(out.published));
    x = out.y;
  }
  ++session.position_;
  Var<T> logits = matmul_nt(rms_norm(x, final_norm_, T(kNormEps)), embed_);
  return logits.value().reshape({cfg_.vocab_size});
}

template <class T>
std::int32_t sample_token(const Tensor<T>& logits, const SamplerConfig& cfg, std::mt19937_64& rng) {
  const std::size_t n = logits.numel();
  if (n == 0) throw ArgumentError("cannot sample from empty logits");
  auto argmax = [&] {
    return static_cast<std::int32_t>(std::max_element(logits.ptr(), logits.ptr() + n) - logits.ptr());
  };
  if (cfg.kind == SamplerKind::greedy || cfg.temperature <= 0.0) return argmax();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t keep = n;
  if (cfg.top_k > 0 && cfg.top_k < n) {
    keep = cfg.top_k;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  }
  double top = -INFINITY;
  for (std::size_t i = 0; i < keep; ++i) top = std::max(top, static_cast<double>(logits[order[i]]));
  std::vector<double> w(keep);
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    w[i] = std::exp((static_cast<double>(logits[order[i]]) - top) / cfg.temperature);
    total += w[i];
  }
  double r = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (std::size_t i = 0; i < keep; ++i) {
    if (r < w[i]) return static_cast<std::int32_t>(order[i]);
    r -= w[i];
  }
  return static_cast<std::int32_t>(order[keep - 1]);
}

template <class T>
Generation<T> Model<T>::generate(std::vector<std::int32_t> prompt, std::size_t n_new,
                                 const SamplerConfig& sampler) const {
  if (n_new < 1) throw ArgumentError("generate needs n_new >= 1");
  if (prompt.empty()) prompt.push_back(kBosToken);
  std::mt19937_64 rng(sampler.seed);
  InferenceSession<T> session = new_session();
  Generation<T> g;
  for (std::int32_t tok : prompt) g.logits.push_back(forward_step(session, tok));
  for (std::size_t i = 0; i < n_new; ++i) {
    const std::int32_t next = sample_token(g.logits.back(), sampler, rng);
    g.tokens.push_back(next);
    if (i + 1 < n_new) g.logits.push_back(forward_step(session, next));
  }
  return g;
}

template class InferenceSession<float>;
template class InferenceSession<double>;
template class Model<float>;
template class Model<double>;
template std::int32_t sample_token<float>(const Tensor<float>&, const SamplerConfig&, std::mt19937_64&);
template std::int32_t sample_token<double>(const Tensor<double>&, const SamplerConfig&, std::mt19937_64&);

}  // namespace densessm
