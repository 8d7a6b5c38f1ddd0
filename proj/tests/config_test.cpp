#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "aemim/config.hpp"

using namespace aemim;
namespace fs = std::filesystem;

namespace {

fs::path write_config(const char* tag, const std::string& text) {
  fs::path path = fs::temp_directory_path() / (std::string("aemim_cfg_") + tag + ".json");
  std::ofstream(path) << text;
  return path;
}

}  // namespace

TEST_CASE("defaults load from an empty path and a blank file") {
  RunConfig from_empty = parse_config("");
  RunConfig defaults;
  CHECK(serialize_config(from_empty) == serialize_config(defaults));
  CHECK(from_empty.model.image_size == 32);
  CHECK(from_empty.train.lambda_ratio == 0.5);
  CHECK(from_empty.train.attack.epsilon == 2.0);
  CHECK(from_empty.train.attack.steps_T == 2);
  CHECK(from_empty.data.kind == "synth");
  CHECK(from_empty.eval.eps_list == std::vector<double>{0, 1, 2, 4, 8});

  auto blank = write_config("blank", "  \n\t ");
  CHECK(serialize_config(parse_config(blank.string())) == serialize_config(defaults));
  fs::remove(blank);
}

TEST_CASE("serialization round-trips every field") {
  RunConfig cfg;
  cfg.model.image_size = 16;
  cfg.model.patch_size = 4;
  cfg.model.enc_dim = 48;
  cfg.model.adapter_scope = AdapterScope::Both;
  cfg.train.lambda_ratio = 0.25;
  cfg.train.adv_ratio_alpha = 0.5;
  cfg.train.attack.epsilon = 4.0;
  cfg.train.attack.steps_T = 1;
  cfg.train.attack.distance = DistanceKind::KL;
  cfg.train.seed = 123;
  cfg.data.synth.num_classes = 4;
  cfg.eval.attacker = "fgsm";
  cfg.probe.epochs = 13;
  cfg.finetune.layer_decay = 0.9;
  cfg.output_dir = "elsewhere";
  cfg.run_id = "trial7";

  RunConfig back = config_from_json(serialize_config(cfg));
  CHECK(serialize_config(back) == serialize_config(cfg));
  CHECK(back.train.attack.distance == DistanceKind::KL);
  CHECK(back.model.adapter_scope == AdapterScope::Both);
  CHECK(back.run_id == "trial7");
}

TEST_CASE("unknown keys are rejected by name at every level") {
  CHECK_THROWS_WITH_AS(config_from_json({{"mystery", 1}}),
                       doctest::Contains("config.mystery"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json({{"train", {{"lamda", 0.5}}}}),
                       doctest::Contains("train.lamda"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json({{"train", {{"attack", {{"epsilonn", 1}}}}}}),
                       doctest::Contains("train.attack.epsilonn"), ConfigError);
  CHECK_THROWS_WITH_AS(config_from_json({{"data", {{"synth", {{"classes", 4}}}}}}),
                       doctest::Contains("data.synth.classes"), ConfigError);
}

TEST_CASE("type and range errors carry the offending field") {
  CHECK_THROWS_AS(config_from_json({{"train", {{"base_lr", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"train", {{"lambda_ratio", 1.5}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"train", {{"attack", {{"distance", "cosine"}}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json({{"train", {{"attack", {{"init_noise", "gauss"}}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"adapter_scope", "everything"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"data", {{"kind", "imagenet"}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"eval", {{"eps_list", {2.0, 1.0}}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"model", {{"image_size", 33}}}}), ConfigError);
}

TEST_CASE("config files parse and bad JSON is called out") {
  auto good = write_config("good", R"({"train": {"base_lr": 0.002, "epochs": 3}})");
  RunConfig cfg = parse_config(good.string());
  CHECK(cfg.train.base_lr == 0.002);
  CHECK(cfg.train.epochs == 3);
  fs::remove(good);

  auto bad = write_config("bad", "{not json");
  CHECK_THROWS_AS(parse_config(bad.string()), ConfigError);
  fs::remove(bad);

  CHECK_THROWS_AS(parse_config("/nonexistent/aemim.json"), IoError);
}

TEST_CASE("environment variables override file values") {
  auto file = write_config("env", R"({"train": {"base_lr": 0.001}})");
  setenv("AEMIM_TRAIN__BASE_LR", "3e-4", 1);
  setenv("AEMIM_TRAIN__ATTACK__STEPS_T", "5", 1);
  setenv("AEMIM_RUN_ID", "from_env", 1);
  RunConfig cfg = parse_config(file.string());
  CHECK(cfg.train.base_lr == 3e-4);
  CHECK(cfg.train.attack.steps_T == 5);
  CHECK(cfg.run_id == "from_env");

  // Unknown keys injected through the environment still fail the strict parse.
  setenv("AEMIM_TRAIN__TYPO", "1", 1);
  CHECK_THROWS_WITH_AS(parse_config(file.string()), doctest::Contains("train.typo"), ConfigError);
  unsetenv("AEMIM_TRAIN__TYPO");

  unsetenv("AEMIM_TRAIN__BASE_LR");
  unsetenv("AEMIM_TRAIN__ATTACK__STEPS_T");
  unsetenv("AEMIM_RUN_ID");
  CHECK(parse_config(file.string()).train.base_lr == 0.001);
  fs::remove(file);
}

TEST_CASE("the config hash tracks the training trajectory only") {
  RunConfig a;
  uint64_t base = config_hash(a);
  CHECK(config_hash(a) == base);  // stable

  RunConfig b = a;
  b.run_id = "other";
  b.output_dir = "elsewhere";
  b.eval.max_samples = 7;
  b.probe.epochs = 2;
  b.finetune.epochs = 1;
  CHECK(config_hash(b) == base);  // none of these change the trajectory

  RunConfig c = a;
  c.train.base_lr *= 2;
  CHECK(config_hash(c) != base);
  RunConfig d = a;
  d.model.enc_dim = 32;
  CHECK(config_hash(d) != base);
  RunConfig e = a;
  e.data.synth.seed = 99;
  CHECK(config_hash(e) != base);
  RunConfig f = a;
  f.train.attack.steps_T = 1;
  f.train.adv_ratio_alpha = 0.25;
  CHECK(config_hash(f) != base);
}

TEST_CASE("validation rejects inconsistent composite configs") {
  RunConfig cfg;
  cfg.data.kind = "folder";
  cfg.data.folder = "";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.data.folder = "somewhere";
  CHECK_NOTHROW(cfg.validate());

  RunConfig bad_eval;
  bad_eval.eval.attacker = "autoattack";
  CHECK_THROWS_AS(bad_eval.validate(), ConfigError);

  RunConfig bad_model;
  bad_model.model.enc_heads = 3;  // does not divide enc_dim=64... 64%3 != 0
  CHECK_THROWS_AS(bad_model.validate(), ConfigError);
}
