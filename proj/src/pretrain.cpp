#include "aemim/pretrain.hpp"

#include <cmath>
#include <cstdio>

#include "aemim/harness.hpp"

namespace aemim {

PretrainResult run_pretrain(const RunConfig& cfg, const Dataset& data,
                            const PretrainOptions& opts) {
  cfg.validate();
  const int64_t n = static_cast<int64_t>(data.train.size());
  const int64_t batch = cfg.train.batch_size;
  const int64_t spe = n / batch;
  if (spe < 1)
    throw ConfigError("train: batch_size " + std::to_string(batch) +
                      " exceeds training set of " + std::to_string(n));
  const int64_t total = static_cast<int64_t>(cfg.train.epochs) * spe;
  const int64_t warmup = llround(cfg.train.warmup_epochs * static_cast<double>(spe));
  const double peak = cfg.train.effective_lr();
  const uint64_t hash = config_hash(cfg);

  PretrainResult res;
  res.steps_per_epoch = spe;
  res.total_steps = total;
  TrainRngs rngs = TrainRngs::make(cfg.train.seed);
  Rng aug;

  if (!opts.resume_path.empty()) {
    CheckpointData ck = load_checkpoint(opts.resume_path);
    require_config_hash(ck, hash);
    unpack_pretrain(ck, res.params, res.opt, rngs);
    auto it = ck.rng_states.find("aug");
    if (it != ck.rng_states.end()) aug.restore(it->second);
  } else {
    res.params = init_params(cfg.model, cfg.train.seed);
  }

  auto save = [&](int64_t step_done) {
    if (opts.checkpoint_path.empty()) return;
    CheckpointData ck = pack_pretrain(res.params, res.opt, rngs,
                                      static_cast<int>(step_done / spe), hash);
    ck.rng_states["aug"] = aug.serialize();
    ck.meta["run_id"] = opts.run_id;
    ck.meta["steps_per_epoch"] = std::to_string(spe);
    ck.meta["total_steps"] = std::to_string(total);
    save_checkpoint(ck, opts.checkpoint_path);
  };

  std::vector<MetricRecord> pending;
  auto flush = [&]() {
    if (!opts.metrics_path.empty() && !pending.empty()) export_metrics(pending, opts.metrics_path);
    pending.clear();
  };
  auto record = [&](int64_t step, const char* name, double value) {
    pending.push_back({opts.run_id, step, name, value, wall_ms_now()});
  };

  std::vector<int> order;
  int64_t order_epoch = -1;
  int64_t gs = res.opt.step;
  int64_t session_steps = 0;

  while (gs < total && (opts.max_steps < 0 || session_steps < opts.max_steps)) {
    const int64_t e = gs / spe;
    const int64_t pos = gs % spe;
    if (pos == 0) {
      order = Rng(cfg.train.seed, "order." + std::to_string(e)).permutation(n);
      aug = Rng(cfg.train.seed, "aug." + std::to_string(e));
      order_epoch = e;
    } else if (order_epoch != e) {
      // Resumed mid-epoch: the shuffle is recomputable, the augmentation
      // stream state came from the checkpoint.
      order = Rng(cfg.train.seed, "order." + std::to_string(e)).permutation(n);
      order_epoch = e;
    }

    std::vector<Tensor> images;
    images.reserve(batch);
    for (int64_t i = pos * batch; i < (pos + 1) * batch; ++i)
      images.push_back(augment(data.train[order[i]].image, cfg.model.image_size, aug));

    const double lr = lr_at(gs + 1, total, warmup, peak, cfg.train.min_lr);
    StepMetrics sm = train_step(images, res.params, res.opt, cfg.train, cfg.model, rngs, lr,
                                opts.mode, nullptr);
    gs = res.opt.step;
    ++session_steps;

    record(sm.step, "loss_clean", sm.loss_clean);
    record(sm.step, "loss_adv", sm.loss_adv);
    record(sm.step, "loss_total", sm.total);
    record(sm.step, "lr", sm.lr);
    record(sm.step, "attack_ladv", sm.attack_ladv);
    res.metrics.push_back(sm);

    if (gs % spe == 0) {
      flush();
      save(gs);
      if (!opts.quiet) {
        double cl = 0.0, ad = 0.0;
        int64_t cnt = 0;
        for (auto it = res.metrics.rbegin(); it != res.metrics.rend() && cnt < spe; ++it, ++cnt) {
          cl += it->loss_clean;
          ad += it->loss_adv;
        }
        std::fprintf(stderr, "[%s] epoch %lld/%d loss_clean=%.4f loss_adv=%.4f lr=%.3g\n",
                     opts.run_id.c_str(), static_cast<long long>(gs / spe), cfg.train.epochs,
                     cl / cnt, ad / cnt, sm.lr);
      }
    }
  }

  if (gs % spe != 0 || session_steps == 0) {
    flush();
    save(gs);
  }
  flush();
  res.finished = (gs >= total);
  return res;
}

}  // namespace aemim
