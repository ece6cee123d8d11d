#include "densessm/dense.hpp"

#include <algorithm>

#include "densessm/init.hpp"
#include "densessm/ops.hpp"

namespace densessm {

std::string to_string(ProjectionKind k) { return k == ProjectionKind::identity ? "identity" : "linear"; }

std::string to_string(GateKind k) {
  switch (k) {
    case GateKind::mlp: return "mlp";
    case GateKind::linear: return "linear";
    case GateKind::none: return "none";
  }
  return "?";
}

std::string to_string(FusionKind k) { return k == FusionKind::add ? "add" : "concat"; }

ProjectionKind parse_projection(const std::string& s) {
  if (s == "identity") return ProjectionKind::identity;
  if (s == "linear") return ProjectionKind::linear;
  throw ConfigError("unknown projection '" + s + "' (expected identity or linear)");
}

GateKind parse_gate(const std::string& s) {
  if (s == "mlp") return GateKind::mlp;
  if (s == "linear") return GateKind::linear;
  if (s == "none") return GateKind::none;
  throw ConfigError("unknown gate '" + s + "' (expected mlp, linear or none)");
}

FusionKind parse_fusion(const std::string& s) {
  if (s == "add") return FusionKind::add;
  if (s == "concat") return FusionKind::concat;
  throw ConfigError("unknown fusion '" + s + "' (expected add or concat)");
}

void DenseConfig::validate() const {
  if (frequency < 1) throw ConfigError("dense.frequency must be >= 1");
}

bool DenseConfig::fuses_at(std::size_t layer) const {
  return depth_m > 0 && layer >= 1 && (layer + 1) % frequency == 0;
}

std::size_t DenseConfig::sources_for(std::size_t layer) const {
  return fuses_at(layer) ? std::min(depth_m, layer) : 0;
}

std::size_t DenseConfig::gate_hidden(std::size_t target_dim) const {
  return gate_hidden_dim ? gate_hidden_dim : (target_dim + 1) / 2;
}

template <class T>
void DenseStash<T>::push(std::size_t layer, std::vector<Var<T>> signals) {
  if (depth_ == 0) return;
  entries_.insert(entries_.begin(), Entry{layer, std::move(signals)});
  if (entries_.size() > depth_) entries_.pop_back();
}

template <class T>
std::vector<const typename DenseStash<T>::Entry*> DenseStash<T>::sources_for(std::size_t target, std::size_t m,
                                                                           std::vector<std::size_t>* consulted) const {
  std::vector<const Entry*> out;
  for (const auto& e : entries_) {
    if (out.size() == m) break;
    if (e.layer >= target) throw UsageError("dense stash holds a state from layer >= the reading layer");
    if (e.layer + m < target) break;  // older than l - m
    out.push_back(&e);
    if (consulted) consulted->push_back(e.layer);
  }
  return out;
}

template <class T>
SelectiveTransition<T>::SelectiveTransition(ParameterRegistry<T>& registry, const std::string& prefix,
                                            const DenseConfig& cfg, std::size_t n_sources, std::size_t gate_in_dim,
                                            std::size_t dim, T init_std, std::mt19937_64& rng)
    : cfg_(cfg), n_sources_(n_sources), dim_(dim) {
  if (n_sources == 0) return;
  if (cfg.projection == ProjectionKind::linear) {
    for (std::size_t i = 0; i < n_sources; ++i) {
      proj_.push_back(registry.add(prefix + ".proj." + std::to_string(i), Tensor<T>::identity(dim), true));
    }
  }
  const std::size_t n_gates = cfg.shared_gate ? 1 : n_sources;
  for (std::size_t g = 0; g < n_gates; ++g) {
    const std::string gp = prefix + ".gate." + std::to_string(g);
    if (cfg.gate == GateKind::mlp) {
      const std::size_t hidden = cfg.gate_hidden(dim);
      w1_.push_back(registry.add(gp + ".w1", random_normal<T>({gate_in_dim, hidden}, init_std, rng), true));
      w2_.push_back(registry.add(gp + ".w2", Tensor<T>(Shape{hidden, dim}), true));
    } else if (cfg.gate == GateKind::linear) {
      w1_.push_back(registry.add(gp + ".w", Tensor<T>(Shape{gate_in_dim, dim}), true));
    }
  }
  if (cfg.fusion == FusionKind::concat) {
    Tensor<T> r(Shape{(n_sources + 1) * dim, dim});
    for (std::size_t b = 0; b <= n_sources; ++b) {
      for (std::size_t i = 0; i < dim; ++i) r[(b * dim + i) * dim + i] = T(1);
    }
    reduce_ = registry.add(prefix + ".reduce", std::move(r), true);
  }
}

template <class T>
Var<T> SelectiveTransition<T>::gate(const Var<T>& x, std::size_t source) const {
  if (source >= n_sources_) throw IndexError("transition source index out of range");
  const std::size_t g = gate_index(source);
  switch (cfg_.gate) {
    case GateKind::mlp: return matmul(silu(matmul(x, w1_[g])), w2_[g]);
    case GateKind::linear: return matmul(x, w1_[g]);
    case GateKind::none: return Var<T>();
  }
  return Var<T>();
}

template <class T>
Var<T> SelectiveTransition<T>::project(const Var<T>& h_src, std::size_t source) const {
  if (cfg_.projection == ProjectionKind::identity) return h_src;
  return matmul(h_src, proj_.at(source));
}

template <class T>
Var<T> SelectiveTransition<T>::transition(const Var<T>& h_src, const Var<T>& x, std::size_t source) const {
  Var<T> projected = project(h_src, source);
  if (projected.shape().back() != dim_) {
    throw DimensionError("transition: projected source width " + std::to_string(projected.shape().back()) +
                         " differs from target width " + std::to_string(dim_));
  }
  Var<T> g = gate(x, source);
  if (!g.defined()) return projected;
  if (g.shape() != projected.shape()) {
    throw DimensionError("transition: gate " + shape_str(g.shape()) + " vs projected source " +
                         shape_str(projected.shape()));
  }
  return mul(projected, g);
}

template <class T>
Var<T> SelectiveTransition<T>::fuse(const Var<T>& h_cur, const std::vector<Var<T>>& transformed) const {
  if (transformed.empty()) return h_cur;
  if (cfg_.fusion == FusionKind::add) {
    Var<T> out = h_cur;
    for (const auto& h : transformed) out = add(out, h);
    return out;
  }
  if (!reduce_.defined() || reduce_.dim(0) != (transformed.size() + 1) * dim_) {
    throw ConfigError("concat fusion without matching reduction weights");
  }
  std::vector<Var<T>> parts{h_cur};
  parts.insert(parts.end(), transformed.begin(), transformed.end());
  return matmul(concat_last(parts), reduce_);
}

template <class T>
Var<T> SelectiveTransition<T>::transition_state(const Var<T>& h_src, const Var<T>& x, std::size_t source) const {
  if (h_src.rank() < 2 || h_src.shape()[h_src.rank() - 2] != dim_) {
    throw DimensionError("transition_state: state " + shape_str(h_src.shape()) + " has no channel axis of width " +
                         std::to_string(dim_));
  }
  Var<T> projected =
      cfg_.projection == ProjectionKind::identity ? h_src : project_channels(h_src, proj_.at(source));
  Var<T> g = gate(x, source);
  if (!g.defined()) return projected;
  return scale_channels(projected, g);
}

template <class T>
Var<T> SelectiveTransition<T>::fuse_state(const Var<T>& h_cur, const std::vector<Var<T>>& transformed) const {
  if (transformed.empty()) return h_cur;
  if (cfg_.fusion == FusionKind::add) {
    Var<T> out = h_cur;
    for (const auto& h : transformed) out = add(out, h);
    return out;
  }
  if (!reduce_.defined() || reduce_.dim(0) != (transformed.size() + 1) * dim_) {
    throw ConfigError("concat fusion without matching reduction weights");
  }
  Var<T> out = project_channels(h_cur, slice_rows(reduce_, 0, dim_));
  for (std::size_t k = 0; k < transformed.size(); ++k) {
    out = add(out, project_channels(transformed[k], slice_rows(reduce_, (k + 1) * dim_, dim_)));
  }
  return out;
}

template <class T>
Var<T> transition(const Var<T>& h_src, const Var<T>& x, const SelectiveTransition<T>& params, std::size_t source) {
  return params.transition(h_src, x, source);
}

template <class T>
std::vector<Var<T>> gather(const std::vector<const typename DenseStash<T>::Entry*>& sources, std::size_t signal,
                           const Var<T>& x, const SelectiveTransition<T>& params) {
  std::vector<Var<T>> out;
  for (std::size_t i = 0; i < sources.size() && i < params.n_sources(); ++i) {
    out.push_back(params.transition(sources[i]->signals.at(signal), x, i));
  }
  return out;
}

template <class T>
Var<T> fuse(const Var<T>& h_cur, const std::vector<Var<T>>& transformed, const SelectiveTransition<T>& params) {
  return params.fuse(h_cur, transformed);
}

template <class T>
std::pair<Var<T>, Var<T>> dense_kv(const Var<T>& k, const Var<T>& v,
                                   const std::vector<const typename DenseStash<T>::Entry*>& sources, const Var<T>& x,
                                   const SelectiveTransition<T>& k_params, const SelectiveTransition<T>& v_params) {
  if (sources.empty()) return {k, v};
  return {k_params.fuse(k, gather<T>(sources, 0, x, k_params)), v_params.fuse(v, gather<T>(sources, 1, x, v_params))};
}

template <class T>
Var<T> scale_channels(const Var<T>& h, const Var<T>& g) {
  if (h.rank() != g.rank() + 1 || !std::equal(g.shape().begin(), g.shape().end(), h.shape().begin())) {
    throw DimensionError("scale_channels: state " + shape_str(h.shape()) + " vs gate " + shape_str(g.shape()));
  }
  const std::size_t rows = g.numel(), ss = h.shape().back();
  Tensor<T> out(h.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t n = 0; n < ss; ++n) out[r * ss + n] = h.value()[r * ss + n] * g.value()[r];
  }
  return record<T>(std::move(out), {h, g}, "scale_channels", [rows, ss](Node<T>& self) {
    const T* gr = self.grad.ptr();
    const T* ph = self.parents[0]->value.ptr();
    const T* pg = self.parents[1]->value.ptr();
    T* gh = self.parent_grad(0);
    T* gg = self.parent_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t n = 0; n < ss; ++n) {
        if (gh) gh[r * ss + n] += gr[r * ss + n] * pg[r];
        if (gg) gg[r] += gr[r * ss + n] * ph[r * ss + n];
      }
    }
  });
}

template <class T>
Var<T> project_channels(const Var<T>& h, const Var<T>& w) {
  if (h.rank() < 2 || w.rank() != 2 || h.shape()[h.rank() - 2] != w.dim(0)) {
    throw DimensionError("project_channels: state " + shape_str(h.shape()) + " vs weight " + shape_str(w.shape()));
  }
  const std::size_t dd = w.dim(0), de = w.dim(1), ss = h.shape().back();
  const std::size_t outer = h.numel() / (dd * ss);
  Shape os = h.shape();
  os[os.size() - 2] = de;
  Tensor<T> out(os);
  const T* ph = h.value().ptr();
  const T* pw = w.value().ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t d = 0; d < dd; ++d) {
      for (std::size_t e = 0; e < de; ++e) {
        const T wv = pw[d * de + e];
        for (std::size_t n = 0; n < ss; ++n) out[(o * de + e) * ss + n] += ph[(o * dd + d) * ss + n] * wv;
      }
    }
  }
  return record<T>(std::move(out), {h, w}, "project_channels", [outer, dd, de, ss](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* ph = self.parents[0]->value.ptr();
    const T* pw = self.parents[1]->value.ptr();
    T* gh = self.parent_grad(0);
    T* gw = self.parent_grad(1);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t d = 0; d < dd; ++d) {
        for (std::size_t e = 0; e < de; ++e) {
          for (std::size_t n = 0; n < ss; ++n) {
            const T gv = g[(o * de + e) * ss + n];
            if (gh) gh[(o * dd + d) * ss + n] += gv * pw[d * de + e];
            if (gw) gw[d * de + e] += gv * ph[(o * dd + d) * ss + n];
          }
        }
      }
    }
  });
}

#define DENSESSM_INSTANTIATE_DENSE(T)                                                                          \
  template class DenseStash<T>;                                                                                \
  template class SelectiveTransition<T>;                                                                       \
  template Var<T> transition<T>(const Var<T>&, const Var<T>&, const SelectiveTransition<T>&, std::size_t);     \
  template std::vector<Var<T>> gather<T>(const std::vector<const DenseStash<T>::Entry*>&, std::size_t,         \
                                         const Var<T>&, const SelectiveTransition<T>&);                        \
  template Var<T> fuse<T>(const Var<T>&, const std::vector<Var<T>>&, const SelectiveTransition<T>&);          \
  template std::pair<Var<T>, Var<T>> dense_kv<T>(const Var<T>&, const Var<T>&,                                 \
                                                 const std::vector<const DenseStash<T>::Entry*>&,              \
                                                 const Var<T>&, const SelectiveTransition<T>&,                 \
                                                 const SelectiveTransition<T>&);                               \
  template Var<T> scale_channels<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> project_channels<T>(const Var<T>&, const Var<T>&);

DENSESSM_INSTANTIATE_DENSE(float)
DENSESSM_INSTANTIATE_DENSE(double)

}  // namespace densessm
