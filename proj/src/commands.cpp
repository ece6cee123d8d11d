#include "densessm/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <type_traits>

#include "densessm/checkpoint.hpp"
#include "densessm/data.hpp"
#include "densessm/init.hpp"
#include "densessm/training.hpp"
#include "densessm/verify.hpp"

namespace densessm {

namespace fs = std::filesystem;

namespace {

template <class F>
auto with_dtype(DType dtype, F&& f) {
  if (dtype == DType::f32) return f(std::type_identity<float>{});
  return f(std::type_identity<double>{});
}

/// Runs `body`, mapping library errors to exit codes.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

void require_checkpoint(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string("missing ") + flag + " checkpoint path");
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArgumentError("cannot write '" + path.string() + "'");
  out << text;
}

nlohmann::json corpus_manifest(const Corpus& c) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : c.files) files.push_back({{"path", f.path}, {"bytes", f.bytes}, {"crc32", f.crc}});
  return {{"tokens", c.tokens.size()}, {"train_tokens", c.train_end}, {"val_tokens", c.tokens.size() - c.train_end},
          {"hash", c.hash}, {"files", files}};
}

}  // namespace

RunConfig resolve_config(const RunSpec& spec) {
  RunConfig cfg = spec.config_path.empty() ? RunConfig{} : load_config_file(spec.config_path);
  for (const auto& o : spec.overrides) apply_override(cfg, o);
  if (spec.seed) {
    cfg.model.seed = *spec.seed;
    cfg.train.seed = *spec.seed;
  }
  if (spec.dtype) cfg.set("model.dtype", *spec.dtype);
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

void echo_effective_config(const RunConfig& cfg, const RunSpec& spec, std::ostream& out) {
  const std::string text = cfg.render();
  if (!spec.out_dir.empty()) {
    fs::create_directories(spec.out_dir);
    write_text(fs::path(spec.out_dir) / "effective.cfg", text);
  }
  out << "# effective config\n";
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) out << "# " << line << '\n';
}

int cmd_train(const RunSpec& spec, const ResumeArgs& resume, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(spec);
    echo_effective_config(cfg, spec, out);
    const Corpus corpus = load_corpus(cfg.data);
    if (!spec.out_dir.empty()) write_text(fs::path(spec.out_dir) / "manifest.json", corpus_manifest(corpus).dump(2));
    return with_dtype(cfg.model.dtype, [&]<class T>(std::type_identity<T>) {
      Model<T> model(cfg.model);
      TrainOptions opts;
      opts.out_dir = spec.out_dir;
      opts.echo = &out;
      opts.resume_from = resume.resume_from;
      opts.stop_after_steps = resume.stop_after_steps;
      const TrainResult r = train(model, corpus, cfg.train, opts);
      if (r.aborted) {
        err << "training aborted: " << r.abort_reason << '\n';
        return kExitNumeric;
      }
      return kExitOk;
    });
  });
}

int cmd_eval(const RunSpec& spec, const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(spec);
    require_checkpoint(args.checkpoint, "--checkpoint");
    const ModelConfig mc = peek_checkpoint_config(args.checkpoint);
    const Corpus corpus = args.heldout ? load_heldout(cfg.data) : load_corpus(cfg.data);
    const auto tokens = args.heldout ? std::span<const std::int32_t>(corpus.tokens) : corpus.split(Split::val);
    return with_dtype(mc.dtype, [&]<class T>(std::type_identity<T>) {
      const Model<T> model = load<T>(args.checkpoint);
      const EvalResult r = eval_perplexity(model, tokens, cfg.train.seq_len, cfg.train.eval_tokens);
      nlohmann::json j = {{"split", args.heldout ? "heldout" : "val"},
                          {"nats_per_byte", r.nats},
                          {"perplexity", r.perplexity},
                          {"tokens", r.tokens}};
      out << j.dump() << '\n';
      if (!spec.out_dir.empty()) {
        fs::create_directories(spec.out_dir);
        write_text(fs::path(spec.out_dir) / "eval.json", j.dump(2) + "\n");
      }
      return kExitOk;
    });
  });
}

int cmd_generate(const RunSpec& spec, const GenerateArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    require_checkpoint(args.checkpoint, "--checkpoint");
    const ModelConfig mc = peek_checkpoint_config(args.checkpoint);
    (void)spec;
    const ByteTokenizer tok;
    std::vector<std::int32_t> prompt{kBosToken};
    const auto body = tok.encode(args.prompt);
    prompt.insert(prompt.end(), body.begin(), body.end());
    SamplerConfig sampler;
    sampler.temperature = args.temperature;
    sampler.top_k = args.top_k;
    sampler.seed = args.sample_seed;
    sampler.kind = args.temperature <= 0.0 ? SamplerKind::greedy
                   : args.top_k > 0       ? SamplerKind::top_k
                                          : SamplerKind::temperature;
    return with_dtype(mc.dtype, [&]<class T>(std::type_identity<T>) {
      const Model<T> model = load<T>(args.checkpoint);
      const Generation<T> g = model.generate(prompt, args.n_new, sampler);
      out << args.prompt << tok.decode(g.tokens) << '\n';
      return kExitOk;
    });
  });
}

int cmd_verify(const RunSpec& spec, const VerifyArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(spec);
    echo_effective_config(cfg, spec, out);
    testing::set_decay_mask_fault(args.broken_decay_mask);
    struct Reset {
      ~Reset() { testing::set_decay_mask_fault(false); }
    } reset;

    VerifyOptions opts;
    opts.n_configs = args.n_configs;
    opts.causality_cases = args.causality_cases;
    opts.seed = cfg.model.seed;
    VerifyReport report = run_verify(opts);

    ModelConfig own = cfg.model;
    own.dtype = DType::f64;
    report.cases.push_back(check_dual_mode(own, std::min<std::size_t>(32, own.max_seq_len), own.seed, opts.dual_tol));
    report.cases.back().label = "configured " + report.cases.back().label;

    std::ofstream file;
    if (!spec.out_dir.empty()) {
      fs::create_directories(spec.out_dir);
      file.open(fs::path(spec.out_dir) / "verify.jsonl", std::ios::trunc);
    }
    for (const auto& c : report.cases) {
      const std::string line = c.to_json().dump();
      out << line << '\n';
      if (file.is_open()) file << line << '\n';
    }
    const std::size_t bad = report.failures();
    out << "verify: " << report.cases.size() - bad << "/" << report.cases.size() << " cases within tolerance\n";
    if (bad == 0) return kExitOk;
    for (const auto& c : report.cases) {
      if (!c.pass) err << "violation: " << c.suite << " [" << c.label << "] max_abs_diff=" << c.max_abs_diff << '\n';
    }
    return kExitVerify;
  });
}

int cmd_probe(const RunSpec& spec, const ProbeArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&]() -> int {
    const RunConfig cfg = resolve_config(spec);
    require_checkpoint(args.dense_checkpoint, "--dense");
    require_checkpoint(args.baseline_checkpoint, "--baseline");
    const ModelConfig dc = peek_checkpoint_config(args.dense_checkpoint);
    const ModelConfig bc = peek_checkpoint_config(args.baseline_checkpoint);
    if (dc.n_layers != bc.n_layers || dc.d_model != bc.d_model || dc.dtype != bc.dtype ||
        is_retention(dc.block_kind) != is_retention(bc.block_kind)) {
      err << "usage error: probe needs a dense and a baseline checkpoint of the same family, depth, width and dtype\n";
      return kExitConfig;
    }
    const Corpus corpus = load_corpus(cfg.data);
    const std::size_t seq = std::min({args.seq_len, dc.max_seq_len, corpus.split(Split::val).size() - 1});
    BatchSampler sampler{seq, args.batch, cfg.train.seed, 0};
    const Batch batch = batch_at(sampler, corpus, Split::val, 0);

    return with_dtype(dc.dtype, [&]<class T>(std::type_identity<T>) {
      const Model<T> dense = load<T>(args.dense_checkpoint);
      const Model<T> base = load<T>(args.baseline_checkpoint);
      bool ridge_d = false, ridge_b = false;
      const auto rd = probe_matrix(dense, batch.inputs, &ridge_d);
      const auto rb = probe_matrix(base, batch.inputs, &ridge_b);

      // Null control: the same regression against pure noise targets.
      ForwardTrace<T> trace;
      {
        NoGradGuard ng;
        dense.forward_train(batch.inputs, &trace);
      }
      const Tensor<T>& last = trace.layer_outputs.back();
      const std::size_t d = last.dim(2);
      const Tensor<double> feats = tensor_cast<double>(last).reshape({last.numel() / d, d});
      std::mt19937_64 rng(cfg.train.seed + 99);
      const ProbeFit noise = probe_r2(feats, random_normal<double>({feats.dim(0), d}, 1.0, rng));

      const std::size_t layers = rd.size();
      nlohmann::json rows = nlohmann::json::array();
      nlohmann::json delta = nlohmann::json::array();
      double delta_sum = 0.0;
      std::size_t off_diag = 0;
      for (std::size_t t = 0; t < layers; ++t) {
        nlohmann::json drow = nlohmann::json::array();
        for (std::size_t s = 0; s < layers; ++s) {
          if (s > t) {
            drow.push_back(nullptr);
            continue;
          }
          const double dlt = rd[t][s] - rb[t][s];
          drow.push_back(dlt);
          rows.push_back({{"target", t}, {"source", s}, {"dense", rd[t][s]}, {"baseline", rb[t][s]}, {"delta", dlt}});
          if (s < t) {
            delta_sum += dlt;
            ++off_diag;
          }
        }
        delta.push_back(drow);
      }
      auto to_json = [](const std::vector<std::vector<double>>& m) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& row : m) {
          nlohmann::json r = nlohmann::json::array();
          for (double v : row) {
            if (std::isnan(v)) r.push_back(nullptr);
            else r.push_back(v);
          }
          j.push_back(r);
        }
        return j;
      };
      const double mean_delta = off_diag ? delta_sum / static_cast<double>(off_diag) : 0.0;
      nlohmann::json report = {{"dense", to_json(rd)},
                               {"baseline", to_json(rb)},
                               {"delta", delta},
                               {"mean_offdiag_delta", mean_delta},
                               {"dense_ge_baseline", mean_delta >= 0.0},
                               {"noise_target_r2", noise.r2},
                               {"ridge_used", ridge_d || ridge_b || noise.ridge},
                               {"samples", batch.inputs.ids.size()}};
      out << report.dump(2) << '\n';
      if (!spec.out_dir.empty()) {
        fs::create_directories(spec.out_dir);
        write_text(fs::path(spec.out_dir) / "probe.json", report.dump(2) + "\n");
        std::string lines;
        for (const auto& r : rows) lines += r.dump() + "\n";
        write_text(fs::path(spec.out_dir) / "probe.jsonl", lines);
      }
      return kExitOk;
    });
  });
}

// Ablation.

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  const auto ma = a.to_map(), mb = b.to_map();
  std::vector<std::string> out;
  for (const auto& [k, v] : ma) {
    auto it = mb.find(k);
    if (it == mb.end() || it->second != v) out.push_back(k);
  }
  return out;
}

std::vector<AblationCell> ablation_matrix(const RunConfig& base_in) {
  RunConfig base = base_in;
  if (base.model.block_kind == BlockKind::retnet) base.model.block_kind = BlockKind::dense_retnet;
  if (base.model.block_kind == BlockKind::mamba) base.model.block_kind = BlockKind::dense_mamba;
  // Four sources need at least five layers.
  base.model.n_layers = std::max<std::size_t>(base.model.n_layers, 5);
  base.model.dense = DenseConfig{};
  base.model.dense.depth_m = 2;
  base.model.dense.gate_hidden_dim = base_in.model.dense.gate_hidden_dim;
  base.train.total_tokens = base.ablate.tokens_per_cell;

  const BlockKind vanilla = is_retention(base.model.block_kind) ? BlockKind::retnet : BlockKind::mamba;
  std::vector<AblationCell> cells;
  auto add = [&](const std::string& table, const std::string& label, std::vector<std::string> axis,
                 const std::function<void(RunConfig&)>& edit) {
    RunConfig c = base;
    edit(c);
    cells.push_back({table, label, std::move(axis), c});
  };
  const auto& tables = base.ablate.tables;
  auto wanted = [&](const char* t) { return std::find(tables.begin(), tables.end(), t) != tables.end(); };

  if (wanted("4")) {
    const std::vector<std::string> axis{"model.block_kind", "model.dense.projection", "model.dense.gate"};
    add("4", "none / none (baseline)", axis, [&](RunConfig& c) { c.model.block_kind = vanilla; });
    for (auto p : {ProjectionKind::identity, ProjectionKind::linear}) {
      for (auto g : {GateKind::mlp, GateKind::linear}) {
        add("4", to_string(p) + " / " + to_string(g), axis, [&](RunConfig& c) {
          c.model.dense.projection = p;
          c.model.dense.gate = g;
        });
      }
    }
  }
  if (wanted("5")) {
    const std::vector<std::string> axis{"model.dense.depth_m", "model.dense.shared_gate"};
    for (auto [m, shared] : std::vector<std::pair<std::size_t, bool>>{{1, true}, {2, true}, {2, false}, {4, true}, {4, false}}) {
      add("5", "m=" + std::to_string(m) + (shared ? " shared gate" : " per-source gates"), axis, [&](RunConfig& c) {
        c.model.dense.depth_m = m;
        c.model.dense.shared_gate = shared;
      });
    }
  }
  if (wanted("6")) {
    const std::vector<std::string> axis{"model.dense.fusion"};
    add("6", "concat", axis, [](RunConfig& c) { c.model.dense.fusion = FusionKind::concat; });
    add("6", "add", axis, [](RunConfig& c) { c.model.dense.fusion = FusionKind::add; });
  }
  if (wanted("7")) {
    const std::vector<std::string> axis{"model.dense.frequency"};
    for (std::size_t f : {1, 2, 4}) {
      add("7", f == 1 ? "every layer" : "every " + std::to_string(f) + " layers", axis,
          [&](RunConfig& c) { c.model.dense.frequency = f; });
    }
  }
  return cells;
}

AuditResult audit_cells(const std::vector<AblationCell>& cells) {
  AuditResult r;
  std::set<std::pair<std::string, std::string>> labels;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!labels.insert({cells[i].table, cells[i].label}).second) {
      r.pass = false;
      r.violations.push_back("table " + cells[i].table + ": duplicate label '" + cells[i].label + "'");
    }
    for (std::size_t j = i + 1; j < cells.size(); ++j) {
      if (cells[i].table != cells[j].table) continue;
      const auto& axis = cells[i].axis_keys;
      for (const auto& k : config_diff(cells[i].config, cells[j].config)) {
        if (std::find(axis.begin(), axis.end(), k) == axis.end()) {
          r.pass = false;
          r.violations.push_back("table " + cells[i].table + ": '" + cells[i].label + "' vs '" + cells[j].label +
                                 "' differ in undeclared key " + k);
        }
      }
    }
  }
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json CellResult::to_json() const {
  return {{"table", cell.table},
          {"label", cell.label},
          {"params", params},
          {"val_loss", val_loss},
          {"heldout_nats_per_byte", heldout_nats},
          {"median_val_loss", ok ? nlohmann::json(median_val) : nlohmann::json(nullptr)},
          {"median_heldout_nats_per_byte", ok ? nlohmann::json(median_heldout) : nlohmann::json(nullptr)},
          {"median_heldout_byte_ppl", ok ? nlohmann::json(std::exp(median_heldout)) : nlohmann::json(nullptr)},
          {"ok", ok},
          {"error", error}};
}

AblationRun run_ablation(const RunConfig& base, std::ostream* progress) {
  AblationRun run;
  const auto cells = ablation_matrix(base);
  run.audit = audit_cells(cells);
  const Corpus corpus = load_corpus(base.data);
  const Corpus heldout = load_heldout(base.data);

  std::map<std::string, CellResult> cache;  // identical configs are trained once
  for (const auto& cell : cells) {
    const std::string key = cell.config.render();
    auto it = cache.find(key);
    if (it == cache.end()) {
      CellResult res;
      res.cell = cell;
      res.params = count_parameters(cell.config.model);
      for (std::uint64_t seed : base.ablate.seeds) {
        RunConfig c = cell.config;
        c.model.seed = seed;
        c.train.seed = seed;
        try {
          with_dtype(c.model.dtype, [&]<class T>(std::type_identity<T>) {
            Model<T> model(c.model);
            const TrainResult tr = train(model, corpus, c.train, TrainOptions{});
            if (tr.aborted) throw NumericError(tr.abort_reason);
            res.val_loss.push_back(tr.val_loss);
            const EvalResult h = eval_perplexity(model, std::span<const std::int32_t>(heldout.tokens), c.train.seq_len,
                                                 base.ablate.heldout_tokens);
            res.heldout_nats.push_back(h.nats);
            return 0;
          });
        } catch (const std::exception& e) {
          res.ok = false;
          res.error = e.what();
        }
        if (progress) {
          *progress << "ablate: table " << cell.table << " [" << cell.label << "] seed " << seed
                    << (res.ok ? "" : " FAILED: " + res.error) << '\n'
                    << std::flush;
        }
        if (!res.ok) break;
      }
      if (res.ok) {
        res.median_val = median(res.val_loss);
        res.median_heldout = median(res.heldout_nats);
      }
      it = cache.emplace(key, std::move(res)).first;
    }
    CellResult r = it->second;
    r.cell = cell;
    run.cells.push_back(std::move(r));
  }
  return run;
}

std::string render_ablation_table(const AblationRun& run) {
  std::ostringstream os;
  std::string current;
  for (const auto& c : run.cells) {
    if (c.cell.table != current) {
      current = c.cell.table;
      os << "\nTable " << current << " analogue\n";
      os << std::left << std::setw(28) << "cell" << std::right << std::setw(10) << "#param" << std::setw(12)
         << "in-domain" << std::setw(14) << "held-out n/b" << '\n';
    }
    os << std::left << std::setw(28) << c.cell.label << std::right << std::setw(10) << c.params;
    if (c.ok) {
      os << std::fixed << std::setprecision(4) << std::setw(12) << c.median_val << std::setw(14) << c.median_heldout;
    } else {
      os << std::setw(12) << "FAILED" << std::setw(14) << "-";
    }
    os.unsetf(std::ios::floatfield);
    os << '\n';
  }
  os << "\nconfig-diff audit: " << (run.audit.pass ? "pass" : "FAIL") << '\n';
  for (const auto& v : run.audit.violations) os << "  " << v << '\n';
  return os.str();
}

int cmd_ablate(const RunSpec& spec, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(spec);
    echo_effective_config(cfg, spec, out);
    const AblationRun run = run_ablation(cfg, &err);
    std::string jsonl;
    for (const auto& c : run.cells) jsonl += c.to_json().dump() + "\n";
    nlohmann::json audit = {{"pass", run.audit.pass}, {"violations", run.audit.violations}};
    const std::string table = render_ablation_table(run);
    if (!spec.out_dir.empty()) {
      fs::create_directories(spec.out_dir);
      write_text(fs::path(spec.out_dir) / "table.jsonl", jsonl);
      write_text(fs::path(spec.out_dir) / "table.txt", table);
      write_text(fs::path(spec.out_dir) / "audit.json", audit.dump(2) + "\n");
    }
    out << jsonl << table;
    const bool all_ok = std::all_of(run.cells.begin(), run.cells.end(), [](const auto& c) { return c.ok; });
    return all_ok && run.audit.pass ? kExitOk : kExitFailure;
  });
}

}  // namespace densessm
