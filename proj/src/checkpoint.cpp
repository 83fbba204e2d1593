#include "nbnlab/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

namespace nbnlab {
namespace {

using json = nlohmann::ordered_json;

constexpr std::array<char, 8> kMagic{'N', 'B', 'N', 'L', 'C', 'K', 'P', 'T'};

std::runtime_error ckpt_error(const std::filesystem::path& path, const std::string& what) {
  return std::runtime_error(path.string() + ": " + what);
}

template <class UInt>
void put_uint(std::ostream& os, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class UInt>
UInt get_uint(std::istream& is, const std::filesystem::path& path) {
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw ckpt_error(path, "truncated checkpoint");
    v |= static_cast<UInt>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void put_values(std::ostream& os, std::span<const double> values) {
  for (double d : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    put_uint(os, bits);
  }
}

void get_values(std::istream& is, std::span<double> out, const std::filesystem::path& path) {
  for (double& d : out) {
    const auto bits = get_uint<std::uint64_t>(is, path);
    std::memcpy(&d, &bits, sizeof d);
  }
}

json model_json(const ModelConfig& m) {
  return {{"input_dim", m.input_dim},
          {"widths", m.widths},
          {"blocks", m.blocks},
          {"num_classes", m.num_classes},
          {"norm_policy", to_string(m.norm_policy)},
          {"magnitude_scope", to_string(m.magnitude_scope)},
          {"use_logit_rectifier", m.use_logit_rectifier},
          {"loss", to_string(m.loss_kind)},
          {"var_reg_strength", m.var_reg_strength},
          {"nbn_normalize", m.nbn_normalize}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.input_dim = j.at("input_dim").get<std::size_t>();
  m.widths = j.at("widths").get<std::vector<std::size_t>>();
  m.blocks = j.at("blocks").get<std::vector<std::size_t>>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  m.norm_policy = norm_policy_from_string(j.at("norm_policy").get<std::string>());
  m.magnitude_scope = share_scope_from_string(j.at("magnitude_scope").get<std::string>());
  m.use_logit_rectifier = j.at("use_logit_rectifier").get<bool>();
  m.loss_kind = loss_kind_from_string(j.at("loss").get<std::string>());
  m.var_reg_strength = j.at("var_reg_strength").get<double>();
  m.nbn_normalize = j.at("nbn_normalize").get<bool>();
  return m;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  return model_from_json(json::parse(text));
}

void save_checkpoint(const std::filesystem::path& path, Model& model,
                     const TrainerSnapshot* trainer, const std::string& experiment) {
  std::vector<std::pair<std::string, std::span<const double>>> blobs;
  json header;
  header["format"] = "nbnlab-checkpoint";
  header["model"] = model_json(model.config());
  header["experiment"] = experiment;

  json params = json::array();
  for (const Parameter& p : model.parameters()) {
    json entry{{"name", p.name}, {"shape", p.tensor.shape()}};
    if (p.magnitude) {
      entry["scope"] = to_string(p.magnitude->scope);
      entry["trainable"] = p.magnitude->trainable;
    }
    params.push_back(std::move(entry));
    blobs.emplace_back(p.name, p.tensor.data());
  }
  header["parameters"] = std::move(params);

  json buffers = json::array();
  for (const Buffer& b : model.buffers()) {
    buffers.push_back({{"name", b.name}, {"size", b.values->size()}});
    blobs.emplace_back(b.name, *b.values);
  }
  header["buffers"] = std::move(buffers);

  if (trainer != nullptr) {
    json velocity = json::array();
    for (const auto& [name, v] : trainer->state.velocity) {
      velocity.push_back({{"name", name}, {"size", v.size()}});
      blobs.emplace_back("velocity:" + name, v);
    }
    header["trainer"] = {{"stage", trainer->stage},
                         {"step", trainer->state.step},
                         {"rng", trainer->state.rng},
                         {"velocity", std::move(velocity)}};
  } else {
    header["trainer"] = nullptr;
  }

  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ckpt_error(path, "cannot open for writing");
    out.write(kMagic.data(), kMagic.size());
    put_uint<std::uint32_t>(out, kCheckpointVersion);
    put_uint<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, values] : blobs) put_values(out, values);
    if (!out) throw ckpt_error(path, "write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ckpt_error(path, "cannot open checkpoint");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    throw ckpt_error(path, "not a checkpoint (bad magic)");
  const auto version = get_uint<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw ckpt_error(path, "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_uint<std::uint64_t>(in, path);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len)))
    throw ckpt_error(path, "truncated header");

  json header;
  Checkpoint ck;
  try {
    header = json::parse(text);
    ck.model_config = model_from_json(header.at("model"));
    ck.experiment = header.at("experiment").get<std::string>();
  } catch (const json::exception& e) {
    throw ckpt_error(path, std::string("malformed header: ") + e.what());
  }
  ck.model.emplace(ck.model_config, 0);
  Model& model = *ck.model;

  std::map<std::string, Parameter> by_name;
  for (Parameter& p : model.parameters()) by_name.emplace(p.name, p);
  if (header.at("parameters").size() != by_name.size())
    throw ckpt_error(path, "parameter count does not match the architecture");
  for (const json& entry : header.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ckpt_error(path, "unexpected parameter " + name);
    Parameter& p = it->second;
    if (entry.at("shape").get<Shape>() != p.tensor.shape())
      throw ckpt_error(path, "shape mismatch for " + name);
    get_values(in, p.tensor.mutable_data(), path);
    if (p.magnitude) p.magnitude->trainable = entry.at("trainable").get<bool>();
  }

  std::map<std::string, std::vector<double>*> buffers;
  for (const Buffer& b : model.buffers()) buffers.emplace(b.name, b.values);
  for (const json& entry : header.at("buffers")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ckpt_error(path, "unexpected buffer " + name);
    if (entry.at("size").get<std::size_t>() != it->second->size())
      throw ckpt_error(path, "size mismatch for buffer " + name);
    get_values(in, *it->second, path);
  }

  if (const json& t = header.at("trainer"); !t.is_null()) {
    TrainerSnapshot snap;
    snap.stage = t.at("stage").get<int>();
    snap.state.step = t.at("step").get<std::size_t>();
    snap.state.rng = t.at("rng").get<std::string>();
    for (const json& v : t.at("velocity")) {
      std::vector<double> values(v.at("size").get<std::size_t>());
      get_values(in, values, path);
      snap.state.velocity.emplace(v.at("name").get<std::string>(), std::move(values));
    }
    ck.trainer = std::move(snap);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw ckpt_error(path, "trailing bytes after checkpoint payload");
  return ck;
}

}  // namespace nbnlab
