#include "aemim/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <nlohmann/json.hpp>

namespace aemim {

namespace {

constexpr char kMagic[8] = {'A', 'E', 'M', 'I', 'M', 'C', 'P', '1'};
constexpr uint32_t kVersion = 1;

static_assert(sizeof(float) == 4, "float32 payload layout");

void append_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>(v >> (8 * i) & 0xff));
}

void append_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>(v >> (8 * i) & 0xff));
}

uint32_t read_u32(const std::string& buf, size_t& pos) {
  if (pos + 4 > buf.size())
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint ends inside a field");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

uint64_t read_u64(const std::string& buf, size_t& pos) {
  if (pos + 8 > buf.size())
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint ends inside a field");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t hash_from_hex(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

}  // namespace

void save_checkpoint(const CheckpointData& ckpt, const std::string& path) {
  nlohmann::json manifest;
  manifest["format_version"] = kVersion;
  manifest["config_hash"] = hash_hex(ckpt.config_hash);
  manifest["epoch"] = ckpt.epoch;
  manifest["opt_step"] = ckpt.opt_step;
  manifest["rng"] = ckpt.rng_states;
  manifest["meta"] = ckpt.meta;
  auto tensors = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    nlohmann::json entry;
    entry["name"] = t.name;
    entry["partition"] = t.partition;
    entry["shape"] = t.value.shape;
    tensors.push_back(entry);
  }
  manifest["tensors"] = tensors;
  const std::string manifest_bytes = manifest.dump();

  std::string payload;
  for (const auto& t : ckpt.tensors) {
    append_u64(payload, t.value.numel());
    const size_t off = payload.size();
    payload.resize(off + t.value.numel() * 4);
    std::memcpy(payload.data() + off, t.value.ptr(), t.value.numel() * 4);
  }

  std::string blob;
  blob.append(kMagic, sizeof(kMagic));
  append_u32(blob, kVersion);
  append_u64(blob, manifest_bytes.size());
  blob += manifest_bytes;
  append_u64(blob, payload.size());
  blob += payload;
  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(blob.size())));
  append_u32(blob, crc);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + tmp);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("save_checkpoint: write failed for " + tmp);
  }
  int fd = ::open(tmp.c_str(), O_RDONLY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_checkpoint: rename to " + path + " failed: " + ec.message());
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();

  if (blob.size() < sizeof(kMagic) + 4)
    throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint smaller than header");
  if (std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "not a checkpoint file (bad magic): " + path);
  size_t pos = sizeof(kMagic);
  const uint32_t version = read_u32(blob, pos);
  if (version != kVersion)
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint format version " + std::to_string(version) +
                              ", expected " + std::to_string(kVersion));

  const uint64_t manifest_len = read_u64(blob, pos);
  if (pos + manifest_len > blob.size())
    throw CheckpointError(CheckpointError::Kind::Truncated, "manifest extends past end of file");
  const std::string manifest_bytes = blob.substr(pos, manifest_len);
  pos += manifest_len;
  const uint64_t payload_len = read_u64(blob, pos);
  if (pos + payload_len + 4 > blob.size())
    throw CheckpointError(CheckpointError::Kind::Truncated, "payload extends past end of file");
  const size_t payload_start = pos;
  pos += payload_len;

  const size_t crc_pos = pos;
  uint32_t stored_crc = read_u32(blob, pos);
  uint32_t computed = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(blob.data()), static_cast<uInt>(crc_pos)));
  if (stored_crc != computed)
    throw CheckpointError(CheckpointError::Kind::Corrupted,
                          "checkpoint checksum mismatch in " + path);
  if (pos != blob.size())
    throw CheckpointError(CheckpointError::Kind::Corrupted, "trailing bytes after checksum");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_bytes);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Corrupted,
                          std::string("manifest is not valid JSON: ") + e.what());
  }

  CheckpointData ckpt;
  ckpt.config_hash = hash_from_hex(manifest.at("config_hash").get<std::string>());
  ckpt.epoch = manifest.at("epoch").get<int>();
  ckpt.opt_step = manifest.at("opt_step").get<int64_t>();
  ckpt.rng_states = manifest.at("rng").get<std::map<std::string, std::string>>();
  ckpt.meta = manifest.at("meta").get<std::map<std::string, std::string>>();

  size_t ppos = payload_start;
  const size_t payload_end = payload_start + payload_len;
  for (const auto& entry : manifest.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.partition = entry.at("partition").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    const uint64_t count = read_u64(blob, ppos);
    if (count != shape_numel(shape))
      throw CheckpointError(CheckpointError::Kind::Corrupted,
                            "tensor " + t.name + " payload size disagrees with manifest shape");
    if (ppos + count * 4 > payload_end)
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "tensor " + t.name + " extends past the payload");
    t.value = Tensor::zeros(shape);
    std::memcpy(t.value.ptr(), blob.data() + ppos, count * 4);
    ppos += count * 4;
    ckpt.tensors.push_back(std::move(t));
  }
  if (ppos != payload_end)
    throw CheckpointError(CheckpointError::Kind::Corrupted,
                          "payload length disagrees with manifest tensor table");
  return ckpt;
}

void require_config_hash(const CheckpointData& ckpt, uint64_t expected) {
  if (ckpt.config_hash != expected)
    throw CheckpointError(CheckpointError::Kind::HashMismatch,
                          "checkpoint was produced by a different configuration (hash " +
                              hash_hex(ckpt.config_hash) + ", expected " + hash_hex(expected) +
                              ")");
}

CheckpointData pack_pretrain(const ParamStore& params, const OptimizerState& opt,
                             const TrainRngs& rngs, int epoch, uint64_t config_hash) {
  CheckpointData ckpt;
  ckpt.config_hash = config_hash;
  ckpt.epoch = epoch;
  ckpt.opt_step = opt.step;
  ckpt.rng_states["mask"] = rngs.mask.serialize();
  ckpt.rng_states["attack"] = rngs.attack.serialize();
  ckpt.rng_states["subset"] = rngs.subset.serialize();
  ckpt.meta["kind"] = "pretrain";
  params.for_each([&](const char* partition, const std::string& name, const Tensor& t) {
    ckpt.tensors.push_back({partition, name, t});
  });
  for (const auto& [name, t] : opt.m) ckpt.tensors.push_back({"opt_m", name, t});
  for (const auto& [name, t] : opt.v) ckpt.tensors.push_back({"opt_v", name, t});
  return ckpt;
}

void unpack_pretrain(const CheckpointData& ckpt, ParamStore& params, OptimizerState& opt,
                     TrainRngs& rngs) {
  params = ParamStore{};
  opt = OptimizerState{};
  for (const auto& t : ckpt.tensors) {
    Tensor v = t.value;
    if (t.partition == "psi") {
      v.set_requires_grad();
      params.psi.emplace(t.name, std::move(v));
    } else if (t.partition == "phi_c") {
      v.set_requires_grad();
      params.phi_c.emplace(t.name, std::move(v));
    } else if (t.partition == "phi_a") {
      v.set_requires_grad();
      params.phi_a.emplace(t.name, std::move(v));
    } else if (t.partition == "opt_m") {
      opt.m.emplace(t.name, std::move(v));
    } else if (t.partition == "opt_v") {
      opt.v.emplace(t.name, std::move(v));
    } else {
      throw CheckpointError(CheckpointError::Kind::Corrupted,
                            "unexpected partition " + t.partition + " in pretrain checkpoint");
    }
  }
  opt.step = ckpt.opt_step;
  rngs.mask.restore(ckpt.rng_states.at("mask"));
  rngs.attack.restore(ckpt.rng_states.at("attack"));
  rngs.subset.restore(ckpt.rng_states.at("subset"));
}

CheckpointData pack_classifier(const Classifier& clf, uint64_t config_hash) {
  CheckpointData ckpt;
  ckpt.config_hash = config_hash;
  ckpt.meta["kind"] = "classifier";
  ckpt.meta["num_classes"] = std::to_string(clf.num_classes);
  for (const auto& [name, t] : clf.encoder.psi_e) ckpt.tensors.push_back({"psi", name, t});
  for (const auto& [name, t] : clf.encoder.phi_c_e) ckpt.tensors.push_back({"phi_c", name, t});
  ckpt.tensors.push_back({"head", "w", clf.head_w});
  ckpt.tensors.push_back({"head", "b", clf.head_b});
  return ckpt;
}

Classifier unpack_classifier(const CheckpointData& ckpt, const ModelConfig& cfg) {
  Classifier clf;
  clf.model = cfg;
  for (const auto& t : ckpt.tensors) {
    if (t.partition == "psi") {
      clf.encoder.psi_e.emplace(t.name, t.value);
    } else if (t.partition == "phi_c") {
      clf.encoder.phi_c_e.emplace(t.name, t.value);
    } else if (t.partition == "head" && t.name == "w") {
      clf.head_w = t.value;
    } else if (t.partition == "head" && t.name == "b") {
      clf.head_b = t.value;
    } else {
      throw CheckpointError(CheckpointError::Kind::Corrupted,
                            "unexpected tensor " + t.partition + "/" + t.name +
                                " in classifier checkpoint");
    }
  }
  auto it = ckpt.meta.find("num_classes");
  if (it == ckpt.meta.end() || clf.head_w.numel() == 0)
    throw CheckpointError(CheckpointError::Kind::Corrupted,
                          "classifier checkpoint lacks a head");
  clf.num_classes = std::stoi(it->second);
  return clf;
}

CheckpointData pack_encoder(const FinetuneExtract& ex, uint64_t config_hash) {
  CheckpointData ckpt;
  ckpt.config_hash = config_hash;
  ckpt.meta["kind"] = "encoder";
  for (const auto& [name, t] : ex.psi_e) ckpt.tensors.push_back({"psi", name, t});
  for (const auto& [name, t] : ex.phi_c_e) ckpt.tensors.push_back({"phi_c", name, t});
  return ckpt;
}

FinetuneExtract unpack_encoder(const CheckpointData& ckpt) {
  FinetuneExtract ex;
  for (const auto& t : ckpt.tensors) {
    Tensor v = t.value;
    v.set_requires_grad();
    if (t.partition == "psi") {
      ex.psi_e.emplace(t.name, std::move(v));
    } else if (t.partition == "phi_c") {
      ex.phi_c_e.emplace(t.name, std::move(v));
    } else {
      throw CheckpointError(CheckpointError::Kind::Corrupted,
                            "unexpected partition " + t.partition + " in encoder checkpoint");
    }
  }
  return ex;
}

}  // namespace aemim
