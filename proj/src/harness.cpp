#include "aemim/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "aemim/attack.hpp"
#include "aemim/mim.hpp"
#include "aemim/ops.hpp"

namespace aemim {

namespace {

MaskSpec empty_mask(int n_patches) {
  MaskSpec m;
  m.n_patches = n_patches;
  m.ratio = 0.0;
  return m;
}

// Patch-token rows of the encoder output (row 0 is the class token).
std::vector<int> patch_rows(int n_patches) {
  std::vector<int> rows(static_cast<size_t>(n_patches));
  for (int i = 0; i < n_patches; ++i) rows[static_cast<size_t>(i)] = i + 1;
  return rows;
}

Tensor onehot(const std::vector<int>& labels, int num_classes) {
  auto y = Tensor::zeros({static_cast<int>(labels.size()), num_classes});
  for (size_t i = 0; i < labels.size(); ++i)
    (*y.data)[i * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[i])] = 1.0f;
  return y;
}

// Mean cross-entropy of logits [B,K] against integer labels.
Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
  auto y = onehot(labels, logits.shape[1]);
  return scale(sum_all(mul(log_softmax(logits, -1), y)),
               -1.0f / static_cast<float>(labels.size()));
}

int argmax_row(const Tensor& t, int row) {
  const int k = t.shape[static_cast<size_t>(t.ndim() - 1)];
  const float* p = t.ptr() + static_cast<size_t>(row) * k;
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

ParamStore cloned_encoder_store(const FinetuneExtract& enc) {
  FinetuneExtract copy;
  for (const auto& [n, t] : enc.psi_e) copy.psi_e.emplace(n, t.clone());
  for (const auto& [n, t] : enc.phi_c_e) copy.phi_c_e.emplace(n, t.clone());
  return to_encoder_store(copy);
}

double top1_features(const Tensor& head_w, const Tensor& head_b,
                     const std::vector<Tensor>& features, const std::vector<int>& labels) {
  int hits = 0;
  for (size_t i = 0; i < features.size(); ++i) {
    auto logits = add(matmul(reshape(features[i], {1, features[i].shape[0]}), head_w), head_b);
    if (argmax_row(logits, 0) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(features.size());
}

}  // namespace

// Frozen features for probing and classification: mean over patch tokens of
// the shared trunk, before the reconstruction-side adapter norm.
Tensor encode_pooled(const FinetuneExtract& enc, const ModelConfig& cfg, const Tensor& image) {
  auto store = to_encoder_store(enc);
  auto f = encode(patchify(image, cfg.patch_size), empty_mask(cfg.n_patches()), Domain::Clean,
                  store, cfg, /*final_norm=*/false);
  return mean_rows(gather_rows(f, patch_rows(cfg.n_patches())));
}

int predict(const Classifier& clf, const Tensor& image) {
  auto f = encode_pooled(clf.encoder, clf.model, image);
  auto logits = add(matmul(reshape(f, {1, clf.model.enc_dim}), clf.head_w), clf.head_b);
  return argmax_row(logits, 0);
}

EvalResult linear_probe(const FinetuneExtract& enc, const ModelConfig& cfg, const Dataset& data,
                        const ProbeConfig& cfg_probe) {
  cfg_probe.validate();
  if (data.train.empty() || data.val.empty())
    throw ConfigError("linear_probe: dataset has an empty split");

  std::vector<Tensor> train_f, val_f;
  std::vector<int> train_y, val_y;
  for (const auto& s : data.train) {
    train_f.push_back(encode_pooled(enc, cfg, s.image));
    train_y.push_back(s.label);
  }
  for (const auto& s : data.val) {
    val_f.push_back(encode_pooled(enc, cfg, s.image));
    val_y.push_back(s.label);
  }

  const int k = data.num_classes, d = cfg.enc_dim;
  auto w = Tensor::zeros({d, k});
  auto b = Tensor::zeros({k});
  w.set_requires_grad();
  b.set_requires_grad();
  OptimizerState opt;

  const int n = static_cast<int>(train_f.size());
  for (int epoch = 0; epoch < cfg_probe.epochs; ++epoch) {
    Rng order_rng(cfg_probe.seed, "probe.order." + std::to_string(epoch));
    auto order = order_rng.permutation(n);
    for (int start = 0; start < n; start += cfg_probe.batch_size) {
      const int stop = std::min(n, start + cfg_probe.batch_size);
      auto batch = Tensor::zeros({stop - start, d});
      std::vector<int> labels;
      for (int i = start; i < stop; ++i) {
        const int src = order[static_cast<size_t>(i)];
        std::copy(train_f[static_cast<size_t>(src)].data->begin(),
                  train_f[static_cast<size_t>(src)].data->end(),
                  batch.data->begin() + static_cast<long>(i - start) * d);
        labels.push_back(train_y[static_cast<size_t>(src)]);
      }
      Tape tape;
      Tape::Scope scope(tape);
      auto loss = ce_loss(add(matmul(batch, w), b), labels);
      tape.backward(loss);
      opt.step += 1;
      auto gw = tape.grad_tensor(w);
      auto gb = tape.grad_tensor(b);
      adamw_apply("head/w", w, &gw, opt, cfg_probe.lr, cfg_probe.weight_decay, 0.9, 0.999, 1e-8);
      adamw_apply("head/b", b, &gb, opt, cfg_probe.lr, cfg_probe.weight_decay, 0.9, 0.999, 1e-8);
    }
  }

  EvalResult res;
  res.top1 = top1_features(w, b, val_f, val_y);
  res.classifier =
      Classifier{enc, cfg, w, b, k};
  return res;
}

namespace {

// Geometric per-layer lr multiplier: embedding lowest, head full rate.
double layer_multiplier(const std::string& name, int depth, double decay) {
  int level;
  if (name.rfind("head/", 0) == 0 || name.find("enc.norm") != std::string::npos) {
    level = depth + 1;
  } else if (name.find(".blk") != std::string::npos) {
    auto pos = name.find(".blk") + 4;
    level = std::stoi(name.substr(pos)) + 1;
  } else {
    level = 0;  // patch embed, class token
  }
  return std::pow(decay, depth + 1 - level);
}

}  // namespace

EvalResult finetune(const FinetuneExtract& enc, const ModelConfig& cfg, const Dataset& data,
                    const FinetuneConfig& cfg_ft) {
  cfg_ft.validate();
  if (data.train.empty() || data.val.empty())
    throw ConfigError("finetune: dataset has an empty split");

  auto store = cloned_encoder_store(enc);
  const int k = data.num_classes, d = cfg.enc_dim;
  auto head_w = Tensor::zeros({d, k});
  auto head_b = Tensor::zeros({k});
  head_w.set_requires_grad();
  head_b.set_requires_grad();
  OptimizerState opt;
  Rng aug_rng(cfg_ft.seed, "ft.aug");

  const int n = static_cast<int>(data.train.size());
  const auto mask0 = empty_mask(cfg.n_patches());
  const auto rows = patch_rows(cfg.n_patches());
  const int64_t total_steps =
      static_cast<int64_t>(cfg_ft.epochs) * ((n + cfg_ft.batch_size - 1) / cfg_ft.batch_size);
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg_ft.epochs; ++epoch) {
    Rng order_rng(cfg_ft.seed, "ft.order." + std::to_string(epoch));
    auto order = order_rng.permutation(n);
    for (int start = 0; start < n; start += cfg_ft.batch_size) {
      const int stop = std::min(n, start + cfg_ft.batch_size);
      const int b = stop - start;
      GradientMap grads;
      const float w_sample = 1.0f / static_cast<float>(b);
      for (int i = start; i < stop; ++i) {
        const auto& sample = data.train[static_cast<size_t>(order[static_cast<size_t>(i)])];
        Tensor img = cfg_ft.use_augment ? augment(sample.image, cfg.image_size, aug_rng)
                                        : sample.image;
        Tape tape;
        Tape::Scope scope(tape);
        auto f = encode(patchify(img, cfg.patch_size), mask0, Domain::Clean, store, cfg,
                        /*final_norm=*/false);
        auto pooled = reshape(mean_rows(gather_rows(f, rows)), {1, d});
        auto loss = ce_loss(add(matmul(pooled, head_w), head_b), {sample.label});
        tape.backward(scale(loss, w_sample));
        auto take = [&](const std::string& qname, Tensor& p) {
          const std::vector<float>* g = tape.grad(p);
          if (!g) return;
          auto [it, fresh] = grads.try_emplace(qname, Tensor::zeros(p.shape));
          for (size_t e = 0; e < g->size(); ++e) (*it->second.data)[e] += (*g)[e];
        };
        store.for_each([&](const char* part, const std::string& name, Tensor& p) {
          if (std::string_view(part) != "phi_a") take(qualified_name(part, name), p);
        });
        take("head/w", head_w);
        take("head/b", head_b);
      }

      const double lr = lr_at(step, total_steps, total_steps / 20, cfg_ft.base_lr, 0.0);
      step += 1;
      opt.step += 1;
      auto apply = [&](const std::string& qname, Tensor& p) {
        auto git = grads.find(qname);
        adamw_apply(qname, p, git == grads.end() ? nullptr : &git->second, opt,
                    lr * layer_multiplier(qname, cfg.enc_depth, cfg_ft.layer_decay),
                    cfg_ft.weight_decay, 0.9, 0.999, 1e-8);
      };
      store.for_each([&](const char* part, const std::string& name, Tensor& p) {
        if (std::string_view(part) != "phi_a") apply(qualified_name(part, name), p);
      });
      apply("head/w", head_w);
      apply("head/b", head_b);
    }
  }

  FinetuneExtract tuned;
  tuned.psi_e = store.psi;
  tuned.phi_c_e = store.phi_c;
  Classifier clf{tuned, cfg, head_w, head_b, k};
  int hits = 0;
  for (const auto& s : data.val)
    if (predict(clf, s.image) == s.label) ++hits;
  EvalResult res;
  res.top1 = static_cast<double>(hits) / static_cast<double>(data.val.size());
  res.classifier = std::move(clf);
  return res;
}

namespace {

Classifier frozen_copy(const Classifier& clf) {
  Classifier out = clf;
  for (auto& [n, t] : out.encoder.psi_e) t.requires_grad = t.leaf = false;
  for (auto& [n, t] : out.encoder.phi_c_e) t.requires_grad = t.leaf = false;
  out.head_w.requires_grad = out.head_w.leaf = false;
  out.head_b.requires_grad = out.head_b.leaf = false;
  return out;
}

}  // namespace

Tensor eval_attack(const Classifier& clf, const Tensor& image, int label, double eps, int steps,
                   double mu) {
  auto frozen = frozen_copy(clf);
  auto store = to_encoder_store(frozen.encoder);
  const auto mask0 = empty_mask(frozen.model.n_patches());
  const auto rows = patch_rows(frozen.model.n_patches());
  auto x_a = image.clone();
  x_a.requires_grad = false;
  x_a.leaf = false;
  for (int t = 0; t < steps; ++t) {
    Tensor g;
    {
      Tape tape;
      Tape::Scope scope(tape);
      auto leaf = x_a;
      leaf.set_requires_grad();
      auto f = encode(patchify(leaf, frozen.model.patch_size), mask0, Domain::Clean, store,
                      frozen.model, /*final_norm=*/false);
      auto pooled = reshape(mean_rows(gather_rows(f, rows)), {1, frozen.model.enc_dim});
      auto loss = ce_loss(add(matmul(pooled, frozen.head_w), frozen.head_b), {label});
      tape.backward(loss);
      g = tape.grad_tensor(leaf);
    }
    auto cand = Tensor::zeros(x_a.shape);
    for (size_t i = 0; i < cand.numel(); ++i) {
      float gv = (*g.data)[i];
      float s = gv > 0.0f ? 1.0f : (gv < 0.0f ? -1.0f : 0.0f);
      (*cand.data)[i] = (*x_a.data)[i] + static_cast<float>(mu) * s;
    }
    x_a = project(cand, image, eps);
  }
  return x_a;
}

RobustnessCurve robustness_curve(const Classifier& clf, const std::vector<LabeledSample>& samples,
                                 const std::vector<double>& eps_list, EvalAttacker attacker,
                                 int max_samples) {
  for (size_t i = 0; i + 1 < eps_list.size(); ++i)
    if (eps_list[i] >= eps_list[i + 1])
      throw ConfigError("robustness_curve: eps_list must be strictly increasing");
  if (samples.empty()) throw ConfigError("robustness_curve: no evaluation samples");

  const int n = std::min<int>(max_samples, static_cast<int>(samples.size()));
  RobustnessCurve curve;
  curve.attacker = attacker == EvalAttacker::Fgsm ? "fgsm" : "pgd20";
  curve.samples = n;
  for (double eps : eps_list) {
    int hits = 0;
    for (int i = 0; i < n; ++i) {
      const auto& s = samples[static_cast<size_t>(i)];
      Tensor x = s.image;
      if (eps > 0.0) {
        x = attacker == EvalAttacker::Fgsm
                ? eval_attack(clf, s.image, s.label, eps, 1, eps)
                : eval_attack(clf, s.image, s.label, eps, 20, 2.5 * eps / 20.0);
      }
      if (predict(clf, x) == s.label) ++hits;
    }
    curve.points.push_back({eps, static_cast<double>(hits) / n});
  }
  return curve;
}

void export_metrics(const std::vector<MetricRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("export_metrics: cannot open " + path);
  for (const auto& r : records) {
    nlohmann::json j{{"run_id", r.run_id},
                     {"step", r.step},
                     {"metric", r.name},
                     {"value", r.value},
                     {"wall_ms", r.wall_ms}};
    out << j.dump() << "\n";
  }
  out.flush();
  if (!out) throw IoError("export_metrics: write failed for " + path);
}

std::vector<MetricRecord> parse_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("parse_metrics: cannot open " + path);
  std::vector<MetricRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    records.push_back(MetricRecord{j.at("run_id").get<std::string>(), j.at("step").get<int64_t>(),
                                   j.at("metric").get<std::string>(), j.at("value").get<double>(),
                                   j.at("wall_ms").get<double>()});
  }
  return records;
}

double wall_ms_now() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace aemim
