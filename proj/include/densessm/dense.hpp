#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "densessm/autograd.hpp"

namespace densessm {

enum class ProjectionKind { identity, linear };
enum class GateKind { mlp, linear, none };
enum class FusionKind { add, concat };

std::string to_string(ProjectionKind k);
std::string to_string(GateKind k);
std::string to_string(FusionKind k);
ProjectionKind parse_projection(const std::string& s);
GateKind parse_gate(const std::string& s);
FusionKind parse_fusion(const std::string& s);

/// The ablation surface of the dense hidden connection.
struct DenseConfig {
  std::size_t depth_m = 2;  // 0 disables dense connections
  ProjectionKind projection = ProjectionKind::identity;
  GateKind gate = GateKind::mlp;
  FusionKind fusion = FusionKind::add;
  std::size_t frequency = 1;  // fuse at every f-th layer
  bool shared_gate = true;    // one gate for all m sources of a layer
  std::size_t gate_hidden_dim = 0;  // 0 selects ceil(target_dim / 2)

  void validate() const;

  /// Whether layer `layer` (0-based) injects lower-layer states.
  bool fuses_at(std::size_t layer) const;
  /// Number of lower layers consulted by `layer`; clipped at the bottom.
  std::size_t sources_for(std::size_t layer) const;
  std::size_t gate_hidden(std::size_t target_dim) const;

  friend bool operator==(const DenseConfig&, const DenseConfig&) = default;
};

/// Lower-layer signals published during one forward pass (or one timestep),
/// newest first: entry i belongs to layer l-1-i when read by layer l.
template <class T>
class DenseStash {
 public:
  struct Entry {
    std::size_t layer;
    std::vector<Var<T>> signals;  // {k, v} for retention, {h} for Mamba
  };

  explicit DenseStash(std::size_t depth = 0) : depth_(depth) {}

  void push(std::size_t layer, std::vector<Var<T>> signals);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t depth() const { return depth_; }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }

  /// Entries layer `target` may read: the newest min(m, available) ones.
  /// Records every consulted layer index into `consulted` when given.
  std::vector<const Entry*> sources_for(std::size_t target, std::size_t m,
                                        std::vector<std::size_t>* consulted = nullptr) const;

 private:
  std::size_t depth_;
  std::vector<Entry> entries_;  // newest first
};

/// Parameters of the selective transition and fusion for one target signal
/// (a layer's k, v or SSM state) with `n_sources` lower layers.
template <class T>
class SelectiveTransition {
 public:
  SelectiveTransition() = default;

  /// Registers parameters as "<prefix>.proj.<i>", "<prefix>.gate.<g>.w1"/"w2"
  /// (mlp) or ".w" (linear), and "<prefix>.reduce" (concat). The gate's last
  /// layer starts at zero, projections at identity, and the concat reduction
  /// at stacked identity blocks, so a fresh transition contributes nothing.
  SelectiveTransition(ParameterRegistry<T>& registry, const std::string& prefix, const DenseConfig& cfg,
                      std::size_t n_sources, std::size_t gate_in_dim, std::size_t dim, T init_std,
                      std::mt19937_64& rng);

  std::size_t n_sources() const { return n_sources_; }
  std::size_t dim() const { return dim_; }
  const DenseConfig& config() const { return cfg_; }

  /// Gate(x) for source `source`: W2 silu(W1 x), W x, or an undefined Var
  /// for gate=none (meaning all ones).
  Var<T> gate(const Var<T>& x, std::size_t source) const;
  /// Proj(h_src) on the trailing dimension.
  Var<T> project(const Var<T>& h_src, std::size_t source) const;
  /// phi(h_src) = Proj(h_src) * Gate(x).
  Var<T> transition(const Var<T>& h_src, const Var<T>& x, std::size_t source) const;
  /// add: h_cur + sum H; concat: [h_cur; H_1; ...] times the reduction.
  Var<T> fuse(const Var<T>& h_cur, const std::vector<Var<T>>& transformed) const;

  // The same operations on an SSM state [.., D, S] whose channel axis is D:
  // gate broadcast over S and projection/reduction acting on channels.
  Var<T> transition_state(const Var<T>& h_src, const Var<T>& x, std::size_t source) const;
  Var<T> fuse_state(const Var<T>& h_cur, const std::vector<Var<T>>& transformed) const;

  // Exposed for constructed-weight tests.
  std::vector<Var<T>>& projections() { return proj_; }
  std::vector<Var<T>>& gate_w1() { return w1_; }
  std::vector<Var<T>>& gate_w2() { return w2_; }
  Var<T>& reduction() { return reduce_; }

 private:
  std::size_t gate_index(std::size_t source) const { return cfg_.shared_gate ? 0 : source; }

  DenseConfig cfg_;
  std::size_t n_sources_ = 0;
  std::size_t dim_ = 0;
  std::vector<Var<T>> proj_;
  std::vector<Var<T>> w1_;  // mlp first layer, or the linear gate
  std::vector<Var<T>> w2_;  // mlp second layer
  Var<T> reduce_;
};

/// transition() as a free function.
template <class T>
Var<T> transition(const Var<T>& h_src, const Var<T>& x, const SelectiveTransition<T>& params, std::size_t source);

/// H = [phi(h^{l-1}); ...; phi(h^{l-m})] for signal `signal` of each source.
template <class T>
std::vector<Var<T>> gather(const std::vector<const typename DenseStash<T>::Entry*>& sources, std::size_t signal,
                           const Var<T>& x, const SelectiveTransition<T>& params);

template <class T>
Var<T> fuse(const Var<T>& h_cur, const std::vector<Var<T>>& transformed, const SelectiveTransition<T>& params);

/// k' = Fuse(k, [phi_k(k^{l-i})]), v' = Fuse(v, [phi_v(v^{l-i})]) with
/// independent transitions for keys and values.
template <class T>
std::pair<Var<T>, Var<T>> dense_kv(const Var<T>& k, const Var<T>& v,
                                   const std::vector<const typename DenseStash<T>::Entry*>& sources, const Var<T>& x,
                                   const SelectiveTransition<T>& k_params, const SelectiveTransition<T>& v_params);

/// h [.., D, S] scaled per channel by g [.., D].
template <class T>
Var<T> scale_channels(const Var<T>& h, const Var<T>& g);
/// out[.., e, n] = sum_d h[.., d, n] w[d, e].
template <class T>
Var<T> project_channels(const Var<T>& h, const Var<T>& w);

}  // namespace densessm
