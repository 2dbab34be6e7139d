#include "reflowtts/checkpoint.h"

#include <filesystem>
#include <map>

#include "binio.h"
#include "reflowtts/error.h"

namespace rf {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'R', 'F', 'T', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  const double* data;
};

}  // namespace

std::vector<std::string> trainable_names(const VelocityModel& model,
                                         const std::string& freeze_prefix) {
  std::vector<std::string> out;
  for (const auto& [name, t] : model.params().entries()) {
    if (freeze_prefix.empty() || name.rfind(freeze_prefix, 0) != 0) out.push_back(name);
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config,
                                            const VelocityModel& model,
                                            const NormStats& norm,
                                            const TrainerState* trainer,
                                            const std::vector<std::string>& trainable) {
  nlohmann::ordered_json header;
  header["config"] = config.to_json();
  header["model"] = model_config_to_json(model.config());
  header["generation"] = model.generation();
  header["norm"] = {{"mean", norm.mean}, {"std", norm.std}};
  std::vector<NamedTensor> tensors;
  for (const auto& [name, t] : model.params().entries()) {
    tensors.push_back({name, t.shape(), t.data().data()});
  }
  if (trainer) {
    const std::vector<std::string> names =
        trainable.empty() ? trainable_names(model, "") : trainable;
    if (trainer->adam.m.size() != names.size() || trainer->adam.v.size() != names.size()) {
      throw ValueError("optimizer state covers " + std::to_string(trainer->adam.m.size()) +
                       " tensors but " + std::to_string(names.size()) + " are trainable");
    }
    header["trainer"] = {{"iteration", trainer->iteration},
                         {"rng", trainer->rng},
                         {"adam_step", trainer->adam.step},
                         {"trainable", names}};
    for (std::size_t i = 0; i < names.size(); ++i) {
      const Shape shape = model.params().get(names[i]).shape();
      if (trainer->adam.m[i].size() != numel(shape) || trainer->adam.v[i].size() != numel(shape)) {
        throw ShapeError("optimizer moments for " + names[i] + " do not match its shape");
      }
      tensors.push_back({"adam.m." + names[i], shape, trainer->adam.m[i].data()});
      tensors.push_back({"adam.v." + names[i], shape, trainer->adam.v[i].data()});
    }
  } else {
    header["trainer"] = nullptr;
  }

  binio::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string text = header.dump();
  w.u64(text.size());
  w.bytes(text.data(), text.size());
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t nbytes = 8 * numel(t.shape);
    w.str(t.name);
    w.u8(kDtypeF64);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u64(d);
    w.u64(offset);
    w.u64(nbytes);
    offset += nbytes;
  }
  for (const auto& t : tensors) {
    for (std::size_t i = 0; i < numel(t.shape); ++i) w.f64(t.data[i]);
  }
  return std::move(w.buffer());
}

CheckpointContents decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw FormatError("not a checkpoint: bad magic (expected \"RFTT\")");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version: found " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::uint64_t header_len = r.u64();
  r.need(header_len);
  std::string text(header_len, '\0');
  r.bytes(text.data(), header_len);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  std::vector<TensorRecord> manifest;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF64) throw FormatError("tensor " + rec.name + " has unknown dtype");
    const std::uint32_t ndim = r.u32();
    r.need(std::size_t{8} * ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) rec.shape.push_back(r.u64());
    rec.offset = r.u64();
    rec.nbytes = r.u64();
    if (rec.nbytes != 8 * numel(rec.shape)) {
      throw FormatError("tensor " + rec.name + " byte size disagrees with its shape");
    }
    manifest.push_back(std::move(rec));
  }
  const std::size_t payload = r.offset();
  const std::size_t payload_size = bytes.size() - payload;
  std::uint64_t expected = 0;
  for (const auto& rec : manifest) {
    if (rec.offset != expected) {
      throw FormatError("tensor " + rec.name + " overlaps or leaves a gap in the payload");
    }
    if (rec.nbytes > payload_size || rec.offset > payload_size - rec.nbytes) {
      throw FormatError("truncated file: tensor " + rec.name + " runs past the end");
    }
    expected += rec.nbytes;
  }
  if (expected != payload_size) {
    throw FormatError("checkpoint payload holds " + std::to_string(payload_size) +
                      " bytes, manifest covers " + std::to_string(expected));
  }
  auto read_tensor = [&](const TensorRecord& rec) {
    binio::Reader pr(bytes.data() + payload + rec.offset, rec.nbytes);
    std::vector<double> v(numel(rec.shape));
    for (auto& x : v) x = pr.f64();
    return v;
  };
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& rec : manifest) by_name[rec.name] = &rec;

  RunConfig config;
  ModelConfig model_config;
  NormStats norm;
  std::uint64_t generation = 1;
  try {
    config = RunConfig::from_json(header.at("config"));
    model_config = model_config_from_json(header.at("model"));
    generation = header.at("generation").get<std::uint64_t>();
    norm.mean = header.at("norm").at("mean").get<std::vector<float>>();
    norm.std = header.at("norm").at("std").get<std::vector<float>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }

  CheckpointContents out{config, VelocityModel(model_config, 0), std::move(norm), std::nullopt,
                         manifest};
  out.model.set_generation(generation);
  for (const auto& [name, shape] : out.model.params().manifest()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + name);
    if (it->second->shape != shape) {
      throw FormatError("parameter " + name + " has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(shape));
    }
    const std::vector<double> v = read_tensor(*it->second);
    std::copy(v.begin(), v.end(), out.model.params().get(name).mutable_data().begin());
  }

  const json& tj = header.at("trainer");
  if (!tj.is_null()) {
    TrainerState state;
    std::vector<std::string> names;
    try {
      state.iteration = tj.at("iteration").get<std::size_t>();
      state.rng = tj.at("rng").get<std::string>();
      state.adam.step = tj.at("adam_step").get<std::int64_t>();
      names = tj.at("trainable").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint trainer state is malformed: ") + e.what());
    }
    for (const auto& name : names) {
      const auto m = by_name.find("adam.m." + name);
      const auto v = by_name.find("adam.v." + name);
      if (m == by_name.end() || v == by_name.end()) {
        throw FormatError("checkpoint lacks optimizer moments for " + name);
      }
      state.adam.m.push_back(read_tensor(*m->second));
      state.adam.v.push_back(read_tensor(*v->second));
    }
    out.trainer = std::move(state);
  }
  return out;
}

void save_checkpoint(const std::string& path, const RunConfig& config,
                     const VelocityModel& model, const NormStats& norm,
                     const TrainerState* trainer,
                     const std::vector<std::string>& trainable) {
  const auto bytes = encode_checkpoint(config, model, norm, trainer, trainable);
  const std::string tmp = path + ".tmp";
  binio::write_file(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

CheckpointContents load_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace rf
