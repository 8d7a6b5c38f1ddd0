#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "aemim/checkpoint.hpp"
#include "aemim/config.hpp"
#include "aemim/pretrain.hpp"

namespace {

using namespace aemim;

struct CommonArgs {
  std::string config_path;
  std::string output_dir;
  std::string run_id;
  int64_t seed = -1;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "JSON config file; defaults apply when omitted");
  cmd->add_option("--output", args->output_dir, "output directory (overrides config)");
  cmd->add_option("--run-id", args->run_id, "run identifier (overrides config)");
  cmd->add_option("--seed", args->seed, "master seed for training, data, probe and finetune");
  cmd->add_flag("--dry-run", args->dry_run, "print the resolved plan and exit");
}

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path);
  if (!args.output_dir.empty()) cfg.output_dir = args.output_dir;
  if (!args.run_id.empty()) cfg.run_id = args.run_id;
  if (args.seed >= 0) {
    uint64_t s = static_cast<uint64_t>(args.seed);
    cfg.train.seed = s;
    cfg.data.synth.seed = s;
    cfg.probe.seed = s;
    cfg.finetune.seed = s;
  }
  cfg.validate();
  return cfg;
}

std::string run_dir(const RunConfig& cfg) {
  std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / cfg.run_id;
  std::filesystem::create_directories(dir);
  return dir.string();
}

Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.data.kind == "folder") return load_image_folder(cfg.data.folder, cfg.model.image_size);
  SynthSpec spec = cfg.data.synth;
  spec.image_size = cfg.model.image_size;
  return synth_dataset(spec);
}

void print_plan(const RunConfig& cfg, const std::string& action, const Dataset* data) {
  std::cout << "action: " << action << "\n";
  std::cout << "config_hash: " << config_hash(cfg) << "\n";
  if (data) {
    std::cout << "train_samples: " << data->train.size() << "\n";
    std::cout << "val_samples: " << data->val.size() << "\n";
    int64_t spe = static_cast<int64_t>(data->train.size()) / cfg.train.batch_size;
    std::cout << "steps_per_epoch: " << spe << "\n";
    std::cout << "total_steps: " << spe * cfg.train.epochs << "\n";
  }
  std::cout << serialize_config(cfg).dump(2) << "\n";
}

FinetuneExtract load_encoder_input(const std::string& pretrain_path,
                                   const std::string& encoder_path) {
  if (!encoder_path.empty()) {
    CheckpointData ck = load_checkpoint(encoder_path);
    return unpack_encoder(ck);
  }
  if (pretrain_path.empty())
    throw ConfigError("either --checkpoint (pretrain) or --encoder is required");
  CheckpointData ck = load_checkpoint(pretrain_path);
  ParamStore params;
  OptimizerState opt;
  TrainRngs rngs = TrainRngs::make(0);
  unpack_pretrain(ck, params, opt, rngs);
  return extract_finetune_params(params);
}

int cmd_pretrain(const CommonArgs& args, const std::string& resume, bool fast, bool baseline) {
  RunConfig cfg = resolve_config(args);
  if (fast) {
    cfg.train.adv_ratio_alpha = 0.25;
    cfg.train.attack.steps_T = 1;
  }
  Dataset data = load_dataset(cfg);
  if (args.dry_run) {
    print_plan(cfg, baseline ? "pretrain (baseline mae)" : "pretrain", &data);
    return 0;
  }
  std::string dir = run_dir(cfg);
  PretrainOptions opts;
  opts.checkpoint_path = dir + "/pretrain.ckpt";
  opts.metrics_path = dir + "/metrics.jsonl";
  opts.resume_path = resume;
  opts.mode = baseline ? TrainMode::BaselineMae : TrainMode::Aemim;
  opts.run_id = cfg.run_id;
  PretrainResult res = run_pretrain(cfg, data, opts);
  std::cout << "pretrain done: steps=" << res.opt.step << " checkpoint=" << opts.checkpoint_path
            << "\n";
  return 0;
}

int cmd_probe(const CommonArgs& args, const std::string& ckpt, const std::string& enc) {
  RunConfig cfg = resolve_config(args);
  Dataset data = load_dataset(cfg);
  if (args.dry_run) {
    print_plan(cfg, "probe", &data);
    return 0;
  }
  FinetuneExtract ex = load_encoder_input(ckpt, enc);
  EvalResult r = linear_probe(ex, cfg.model, data, cfg.probe);
  std::string dir = run_dir(cfg);
  save_checkpoint(pack_classifier(r.classifier, config_hash(cfg)), dir + "/probe.ckpt");
  export_metrics({{cfg.run_id, 0, "probe_top1", r.top1, wall_ms_now()}}, dir + "/metrics.jsonl");
  std::cout << "probe top1: " << r.top1 << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& ckpt, const std::string& enc) {
  RunConfig cfg = resolve_config(args);
  Dataset data = load_dataset(cfg);
  if (args.dry_run) {
    print_plan(cfg, "finetune", &data);
    return 0;
  }
  FinetuneExtract ex = load_encoder_input(ckpt, enc);
  EvalResult r = finetune(ex, cfg.model, data, cfg.finetune);
  std::string dir = run_dir(cfg);
  save_checkpoint(pack_classifier(r.classifier, config_hash(cfg)), dir + "/finetune.ckpt");
  export_metrics({{cfg.run_id, 0, "finetune_top1", r.top1, wall_ms_now()}},
                 dir + "/metrics.jsonl");
  std::cout << "finetune top1: " << r.top1 << "\n";
  return 0;
}

int cmd_attack_eval(const CommonArgs& args, const std::string& classifier_path) {
  RunConfig cfg = resolve_config(args);
  Dataset data = load_dataset(cfg);
  if (args.dry_run) {
    print_plan(cfg, "attack-eval", &data);
    return 0;
  }
  CheckpointData ck = load_checkpoint(classifier_path);
  Classifier clf = unpack_classifier(ck, cfg.model);
  EvalAttacker atk = cfg.eval.attacker == "fgsm" ? EvalAttacker::Fgsm : EvalAttacker::Pgd20;
  RobustnessCurve curve =
      robustness_curve(clf, data.val, cfg.eval.eps_list, atk, cfg.eval.max_samples);
  std::string dir = run_dir(cfg);
  std::vector<MetricRecord> recs;
  std::cout << "attacker: " << curve.attacker << " samples: " << curve.samples << "\n";
  for (const auto& p : curve.points) {
    std::cout << "  eps " << p.epsilon << " -> top1 " << p.top1 << "\n";
    recs.push_back({cfg.run_id, llround(p.epsilon), "robust_top1", p.top1, wall_ms_now()});
  }
  export_metrics(recs, dir + "/robustness.jsonl");
  return 0;
}

int cmd_export_encoder(const CommonArgs& args, const std::string& ckpt, const std::string& out) {
  RunConfig cfg = resolve_config(args);
  if (args.dry_run) {
    print_plan(cfg, "export-encoder", nullptr);
    return 0;
  }
  CheckpointData ck = load_checkpoint(ckpt);
  ParamStore params;
  OptimizerState opt;
  TrainRngs rngs = TrainRngs::make(0);
  unpack_pretrain(ck, params, opt, rngs);
  FinetuneExtract ex = extract_finetune_params(params);
  std::string dest = out.empty() ? run_dir(cfg) + "/encoder.ckpt" : out;
  save_checkpoint(pack_encoder(ex, ck.config_hash), dest);
  std::cout << "encoder written to " << dest << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-image-modeling co-training with online adversarial examples"};
  app.require_subcommand(1);

  CommonArgs pre_args, probe_args, ft_args, atk_args, exp_args;
  std::string resume, pre_ckpt, pre_enc, ft_ckpt, ft_enc, clf_path, exp_ckpt, exp_out;
  bool fast = false, baseline = false;

  CLI::App* pre = app.add_subcommand("pretrain", "co-train encoder and decoder");
  add_common(pre, &pre_args);
  pre->add_option("--resume", resume, "continue from a pretrain checkpoint");
  pre->add_flag("--fast", fast, "fast variant: attack 25% of the batch with a single step");
  pre->add_flag("--baseline-mae", baseline, "plain masked autoencoder, no adversarial branch");

  CLI::App* probe = app.add_subcommand("probe", "linear probe on a frozen encoder");
  add_common(probe, &probe_args);
  probe->add_option("--checkpoint", pre_ckpt, "pretrain checkpoint");
  probe->add_option("--encoder", pre_enc, "exported encoder checkpoint");

  CLI::App* ft = app.add_subcommand("finetune", "end-to-end finetune of the encoder");
  add_common(ft, &ft_args);
  ft->add_option("--checkpoint", ft_ckpt, "pretrain checkpoint");
  ft->add_option("--encoder", ft_enc, "exported encoder checkpoint");

  CLI::App* atk = app.add_subcommand("attack-eval", "robust accuracy over an epsilon grid");
  add_common(atk, &atk_args);
  atk->add_option("--classifier", clf_path, "classifier checkpoint from probe or finetune")
      ->required();

  CLI::App* exp = app.add_subcommand("export-encoder", "strip a pretrain checkpoint to encoder");
  add_common(exp, &exp_args);
  exp->add_option("--checkpoint", exp_ckpt, "pretrain checkpoint")->required();
  exp->add_option("--out", exp_out, "destination file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(pre_args, resume, fast, baseline);
    if (probe->parsed()) return cmd_probe(probe_args, pre_ckpt, pre_enc);
    if (ft->parsed()) return cmd_finetune(ft_args, ft_ckpt, ft_enc);
    if (atk->parsed()) return cmd_attack_eval(atk_args, clf_path);
    if (exp->parsed()) return cmd_export_encoder(exp_args, exp_ckpt, exp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
