#include "aemim/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "aemim/rng.hpp"

extern char** environ;

namespace aemim {
namespace {

using nlohmann::json;

// Pulls fields out of a json object and complains about leftovers, so a
// misspelled key fails instead of silently using the default.
class field_reader {
 public:
  field_reader(const json& j, std::string scope) : obj_(j), scope_(std::move(scope)) {
    if (!obj_.is_object()) throw ConfigError(scope_ + ": expected a JSON object");
  }

  ~field_reader() noexcept(false) {
    if (!obj_.empty() && !std::uncaught_exceptions())
      throw ConfigError("unknown config key " + scope_ + "." + obj_.begin().key());
  }

  bool take(const char* key, json* out) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return false;
    *out = *it;
    obj_.erase(it);
    return true;
  }

  void number(const char* key, double* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_number()) throw ConfigError(scope_ + "." + key + ": expected a number");
    *out = v.get<double>();
  }

  void number(const char* key, float* out) {
    double d = *out;
    number(key, &d);
    *out = static_cast<float>(d);
  }

  void integer(const char* key, int* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_number_integer()) throw ConfigError(scope_ + "." + key + ": expected an integer");
    *out = v.get<int>();
  }

  void integer(const char* key, uint64_t* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<int64_t>() < 0))
      throw ConfigError(scope_ + "." + key + ": expected a non-negative integer");
    *out = v.get<uint64_t>();
  }

  void boolean(const char* key, bool* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_boolean()) throw ConfigError(scope_ + "." + key + ": expected a boolean");
    *out = v.get<bool>();
  }

  void text(const char* key, std::string* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_string()) throw ConfigError(scope_ + "." + key + ": expected a string");
    *out = v.get<std::string>();
  }

  void number_list(const char* key, std::vector<double>* out) {
    json v;
    if (!take(key, &v)) return;
    if (!v.is_array()) throw ConfigError(scope_ + "." + key + ": expected an array of numbers");
    out->clear();
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(scope_ + "." + key + ": expected an array of numbers");
      out->push_back(e.get<double>());
    }
  }

  const std::string& scope() const { return scope_; }

 private:
  json obj_;
  std::string scope_;
};

AdapterScope parse_adapter_scope(const std::string& s, const std::string& where) {
  if (s == "none") return AdapterScope::None;
  if (s == "norm") return AdapterScope::Norm;
  if (s == "cls_token") return AdapterScope::ClsToken;
  if (s == "both") return AdapterScope::Both;
  throw ConfigError(where + ": expected one of none|norm|cls_token|both, got " + s);
}

const char* adapter_scope_name(AdapterScope s) {
  switch (s) {
    case AdapterScope::None: return "none";
    case AdapterScope::Norm: return "norm";
    case AdapterScope::ClsToken: return "cls_token";
    case AdapterScope::Both: return "both";
  }
  return "norm";
}

DistanceKind parse_distance(const std::string& s, const std::string& where) {
  if (s == "l2") return DistanceKind::L2;
  if (s == "kl") return DistanceKind::KL;
  throw ConfigError(where + ": expected l2 or kl, got " + s);
}

InitNoise parse_init_noise(const std::string& s, const std::string& where) {
  if (s == "uniform_ball") return InitNoise::UniformBall;
  if (s == "zero") return InitNoise::Zero;
  throw ConfigError(where + ": expected uniform_ball or zero, got " + s);
}

void read_model(const json& j, ModelConfig* m) {
  field_reader r(j, "model");
  r.integer("image_size", &m->image_size);
  r.integer("patch_size", &m->patch_size);
  r.integer("channels", &m->channels);
  r.integer("enc_dim", &m->enc_dim);
  r.integer("enc_depth", &m->enc_depth);
  r.integer("enc_heads", &m->enc_heads);
  r.integer("dec_dim", &m->dec_dim);
  r.integer("dec_depth", &m->dec_depth);
  r.integer("dec_heads", &m->dec_heads);
  json v;
  if (r.take("adapter_scope", &v)) {
    if (!v.is_string()) throw ConfigError("model.adapter_scope: expected a string");
    m->adapter_scope = parse_adapter_scope(v.get<std::string>(), "model.adapter_scope");
  }
  r.boolean("adapt_decoder", &m->adapt_decoder);
}

void read_attack(const json& j, AttackConfig* a) {
  field_reader r(j, "train.attack");
  r.number("epsilon", &a->epsilon);
  r.number("step_size_mu", &a->step_size_mu);
  r.integer("steps_t", &a->steps_T);
  json v;
  if (r.take("distance", &v)) {
    if (!v.is_string()) throw ConfigError("train.attack.distance: expected a string");
    a->distance = parse_distance(v.get<std::string>(), "train.attack.distance");
  }
  if (r.take("init_noise", &v)) {
    if (!v.is_string()) throw ConfigError("train.attack.init_noise: expected a string");
    a->init_noise = parse_init_noise(v.get<std::string>(), "train.attack.init_noise");
  }
}

void read_train(const json& j, TrainConfig* t) {
  field_reader r(j, "train");
  r.number("lambda_ratio", &t->lambda_ratio);
  r.number("adv_ratio_alpha", &t->adv_ratio_alpha);
  r.number("base_lr", &t->base_lr);
  r.integer("batch_size", &t->batch_size);
  r.number("weight_decay", &t->weight_decay);
  r.number("beta1", &t->beta1);
  r.number("beta2", &t->beta2);
  r.number("adam_eps", &t->adam_eps);
  r.integer("epochs", &t->epochs);
  r.number("warmup_epochs", &t->warmup_epochs);
  r.number("min_lr", &t->min_lr);
  r.number("grad_clip", &t->grad_clip);
  r.integer("seed", &t->seed);
  r.number("mask_ratio", &t->mask_ratio);
  r.boolean("normalize_targets", &t->normalize_targets);
  json v;
  if (r.take("attack", &v)) read_attack(v, &t->attack);
}

void read_synth(const json& j, SynthSpec* s) {
  field_reader r(j, "data.synth");
  r.integer("num_classes", &s->num_classes);
  r.integer("samples_per_class", &s->samples_per_class);
  r.integer("image_size", &s->image_size);
  r.integer("seed", &s->seed);
  r.text("generator", &s->generator);
}

void read_data(const json& j, DataConfig* d) {
  field_reader r(j, "data");
  r.text("kind", &d->kind);
  r.text("folder", &d->folder);
  json v;
  if (r.take("synth", &v)) read_synth(v, &d->synth);
}

void read_eval(const json& j, EvalConfig* e) {
  field_reader r(j, "eval");
  r.number_list("eps_list", &e->eps_list);
  r.text("attacker", &e->attacker);
  r.integer("max_samples", &e->max_samples);
}

void read_probe(const json& j, ProbeConfig* p) {
  field_reader r(j, "probe");
  r.integer("epochs", &p->epochs);
  r.integer("batch_size", &p->batch_size);
  r.number("lr", &p->lr);
  r.number("weight_decay", &p->weight_decay);
  r.integer("seed", &p->seed);
}

void read_finetune(const json& j, FinetuneConfig* f) {
  field_reader r(j, "finetune");
  r.integer("epochs", &f->epochs);
  r.integer("batch_size", &f->batch_size);
  r.number("base_lr", &f->base_lr);
  r.number("weight_decay", &f->weight_decay);
  r.number("layer_decay", &f->layer_decay);
  r.boolean("use_augment", &f->use_augment);
  r.integer("seed", &f->seed);
}

// Environment overrides: AEMIM_TRAIN__BASE_LR=3e-4 becomes train.base_lr.
// The value is parsed as JSON when possible so numbers and booleans keep
// their types; anything unparseable is taken as a string.
void apply_env_overrides(json* root) {
  const std::string prefix = "AEMIM_";
  std::vector<std::string> entries;
  for (char** e = environ; e && *e; ++e) entries.emplace_back(*e);
  std::sort(entries.begin(), entries.end());
  for (const auto& entry : entries) {
    if (entry.rfind(prefix, 0) != 0) continue;
    auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = entry.substr(prefix.size(), eq - prefix.size());
    std::string value = entry.substr(eq + 1);
    std::vector<std::string> path;
    size_t start = 0;
    while (true) {
      auto sep = key.find("__", start);
      std::string part = key.substr(start, sep == std::string::npos ? std::string::npos : sep - start);
      for (auto& c : part) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      path.push_back(part);
      if (sep == std::string::npos) break;
      start = sep + 2;
    }
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;
    json* node = root;
    for (size_t i = 0; i + 1 < path.size(); ++i) node = &(*node)[path[i]];
    (*node)[path.back()] = parsed;
  }
}

}  // namespace

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  field_reader r(j, "config");
  json v;
  if (r.take("model", &v)) read_model(v, &cfg.model);
  if (r.take("train", &v)) read_train(v, &cfg.train);
  if (r.take("data", &v)) read_data(v, &cfg.data);
  if (r.take("eval", &v)) read_eval(v, &cfg.eval);
  if (r.take("probe", &v)) read_probe(v, &cfg.probe);
  if (r.take("finetune", &v)) read_finetune(v, &cfg.finetune);
  r.text("output_dir", &cfg.output_dir);
  r.text("run_id", &cfg.run_id);
  cfg.validate();
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  json root = json::object();
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    bool blank = true;
    for (char c : text)
      if (!std::isspace(static_cast<unsigned char>(c))) { blank = false; break; }
    if (!blank) {
      root = json::parse(text, nullptr, false);
      if (root.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON");
    }
  }
  apply_env_overrides(&root);
  return config_from_json(root);
}

json serialize_config(const RunConfig& cfg) {
  json j;
  const ModelConfig& m = cfg.model;
  j["model"] = {
      {"image_size", m.image_size},   {"patch_size", m.patch_size}, {"channels", m.channels},
      {"enc_dim", m.enc_dim},         {"enc_depth", m.enc_depth},   {"enc_heads", m.enc_heads},
      {"dec_dim", m.dec_dim},         {"dec_depth", m.dec_depth},   {"dec_heads", m.dec_heads},
      {"adapter_scope", adapter_scope_name(m.adapter_scope)},
      {"adapt_decoder", m.adapt_decoder},
  };
  const TrainConfig& t = cfg.train;
  j["train"] = {
      {"lambda_ratio", t.lambda_ratio},
      {"adv_ratio_alpha", t.adv_ratio_alpha},
      {"base_lr", t.base_lr},
      {"batch_size", t.batch_size},
      {"weight_decay", t.weight_decay},
      {"beta1", t.beta1},
      {"beta2", t.beta2},
      {"adam_eps", t.adam_eps},
      {"epochs", t.epochs},
      {"warmup_epochs", t.warmup_epochs},
      {"min_lr", t.min_lr},
      {"grad_clip", t.grad_clip},
      {"seed", t.seed},
      {"mask_ratio", t.mask_ratio},
      {"normalize_targets", t.normalize_targets},
      {"attack",
       {{"epsilon", t.attack.epsilon},
        {"step_size_mu", t.attack.step_size_mu},
        {"steps_t", t.attack.steps_T},
        {"distance", t.attack.distance == DistanceKind::L2 ? "l2" : "kl"},
        {"init_noise", t.attack.init_noise == InitNoise::UniformBall ? "uniform_ball" : "zero"}}},
  };
  j["data"] = {
      {"kind", cfg.data.kind},
      {"folder", cfg.data.folder},
      {"synth",
       {{"num_classes", cfg.data.synth.num_classes},
        {"samples_per_class", cfg.data.synth.samples_per_class},
        {"image_size", cfg.data.synth.image_size},
        {"seed", cfg.data.synth.seed},
        {"generator", cfg.data.synth.generator}}},
  };
  j["eval"] = {
      {"eps_list", cfg.eval.eps_list},
      {"attacker", cfg.eval.attacker},
      {"max_samples", cfg.eval.max_samples},
  };
  j["probe"] = {
      {"epochs", cfg.probe.epochs},         {"batch_size", cfg.probe.batch_size},
      {"lr", cfg.probe.lr},                 {"weight_decay", cfg.probe.weight_decay},
      {"seed", cfg.probe.seed},
  };
  j["finetune"] = {
      {"epochs", cfg.finetune.epochs},
      {"batch_size", cfg.finetune.batch_size},
      {"base_lr", cfg.finetune.base_lr},
      {"weight_decay", cfg.finetune.weight_decay},
      {"layer_decay", cfg.finetune.layer_decay},
      {"use_augment", cfg.finetune.use_augment},
      {"seed", cfg.finetune.seed},
  };
  j["output_dir"] = cfg.output_dir;
  j["run_id"] = cfg.run_id;
  return j;
}

uint64_t config_hash(const RunConfig& cfg) {
  json all = serialize_config(cfg);
  json core;
  core["model"] = all["model"];
  core["train"] = all["train"];
  core["data"] = all["data"];
  return fnv1a64(core.dump());
}

}  // namespace aemim
