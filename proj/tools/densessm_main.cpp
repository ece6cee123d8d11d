// densessm: train, eval, generate, verify, ablate, probe.

#include <CLI11.hpp>
#include <iostream>

#include "densessm/commands.hpp"

namespace {

struct Common {
  densessm::RunSpec spec;
  std::uint64_t seed = 0;
  std::string dtype;
};

void add_common(CLI::App* cmd, Common& c, const char* default_out) {
  cmd->add_option("--config", c.spec.config_path, "flat key = value config file");
  cmd->add_option("--override", c.spec.overrides, "key=value, repeatable")->allow_extra_args(false);
  c.spec.out_dir = default_out;
  cmd->add_option("--out", c.spec.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "sets model.seed and train.seed");
  cmd->add_option("--dtype", c.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

densessm::RunSpec finish(CLI::App* cmd, Common& c) {
  densessm::RunSpec spec = c.spec;
  spec.command = cmd->get_name();
  if (cmd->count("--seed")) spec.seed = c.seed;
  if (!c.dtype.empty()) spec.dtype = c.dtype;
  return spec;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DenseSSM lab: dense hidden connections for RetNet and Mamba language models"};
  app.require_subcommand(1);

  Common train_c, eval_c, gen_c, verify_c, ablate_c, probe_c;

  auto* train = app.add_subcommand("train", "train a model, writing metrics.jsonl and checkpoints");
  add_common(train, train_c, "runs/train");
  densessm::ResumeArgs resume;
  train->add_option("--resume", resume.resume_from, "continue from a training checkpoint");
  train->add_option("--stop-after", resume.stop_after_steps, "stop after this many steps (with a checkpoint)");

  auto* eval = app.add_subcommand("eval", "validation or held-out nats/byte of a checkpoint");
  add_common(eval, eval_c, "");
  densessm::EvalArgs eval_args;
  eval->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint");
  eval->add_flag("--heldout", eval_args.heldout, "evaluate on the held-out corpus");

  auto* gen = app.add_subcommand("generate", "sample text in recurrent mode");
  add_common(gen, gen_c, "");
  densessm::GenerateArgs gen_args;
  gen->add_option("--checkpoint", gen_args.checkpoint, "model checkpoint");
  gen->add_option("--prompt", gen_args.prompt, "prompt text");
  gen->add_option("-n,--tokens", gen_args.n_new, "number of new tokens")->check(CLI::PositiveNumber);
  gen->add_option("--temperature", gen_args.temperature, "0 selects greedy decoding");
  gen->add_option("--top-k", gen_args.top_k, "keep the k most likely tokens");
  gen->add_option("--sample-seed", gen_args.sample_seed, "sampling seed");

  auto* verify = app.add_subcommand("verify", "dual-mode, baseline-reduction and causality suites");
  add_common(verify, verify_c, "runs/verify");
  densessm::VerifyArgs verify_args;
  verify->add_option("--configs", verify_args.n_configs, "dual-mode sweep size");
  verify->add_option("--causality-cases", verify_args.causality_cases, "random causality cases");
  verify->add_flag("--break-decay-mask", verify_args.broken_decay_mask, "negative control: off-by-one decay mask")
      ->group("");

  auto* ablate = app.add_subcommand("ablate", "train the ablation matrix");
  add_common(ablate, ablate_c, "runs/ablate");

  auto* probe = app.add_subcommand("probe", "degradation probe R^2 for a dense/baseline checkpoint pair");
  add_common(probe, probe_c, "runs/probe");
  densessm::ProbeArgs probe_args;
  probe->add_option("--dense", probe_args.dense_checkpoint, "dense model checkpoint");
  probe->add_option("--baseline", probe_args.baseline_checkpoint, "baseline model checkpoint");
  probe->add_option("--batch", probe_args.batch, "probe sequences")->check(CLI::PositiveNumber);
  probe->add_option("--seq-len", probe_args.seq_len, "probe sequence length")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : densessm::kExitConfig;
  }

  auto& out = std::cout;
  auto& err = std::cerr;
  if (*train) return densessm::cmd_train(finish(train, train_c), resume, out, err);
  if (*eval) return densessm::cmd_eval(finish(eval, eval_c), eval_args, out, err);
  if (*gen) return densessm::cmd_generate(finish(gen, gen_c), gen_args, out, err);
  if (*verify) return densessm::cmd_verify(finish(verify, verify_c), verify_args, out, err);
  if (*ablate) return densessm::cmd_ablate(finish(ablate, ablate_c), out, err);
  if (*probe) return densessm::cmd_probe(finish(probe, probe_c), probe_args, out, err);
  return densessm::kExitConfig;
}
