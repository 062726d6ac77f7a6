#include "icd/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include "icd/tensor_io.hpp"

namespace icd {

namespace {
constexpr const char* kHeader = "ICDC v1";
}

std::string meta_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double meta_get_double(const Checkpoint& ckpt, const std::string& key) {
  auto it = ckpt.meta.find(key);
  if (it == ckpt.meta.end()) throw FormatError("checkpoint: missing meta key " + key);
  return std::stod(it->second);
}

void save_checkpoint(const std::filesystem::path& path, const ConvNet& net,
                     const std::map<std::string, std::string>& extra_meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_checkpoint: cannot open " + path.string());

  std::map<std::string, std::string> meta = extra_meta;
  meta["stages"] = stages_str(net.spec().stages);
  meta["feature_channels"] = std::to_string(net.spec().feature_channels);
  meta["map_width"] = std::to_string(net.spec().map_width);
  meta["num_classes"] = std::to_string(net.spec().num_classes);

  os << kHeader << '\n';
  os << "meta " << meta.size() << '\n';
  for (const auto& [k, v] : meta) os << k << " = " << v << '\n';
  os << "tensors " << net.params().size() << '\n';
  for (const Parameter& p : net.params()) {
    os << "name " << p.name << '\n';
    write_tensor(os, p.value);
    os << '\n';
  }
  if (!os) throw FormatError("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_checkpoint: cannot open " + path.string());

  std::string line;
  if (!std::getline(is, line) || line != kHeader) {
    throw FormatError("load_checkpoint: bad header in " + path.string());
  }
  Checkpoint ckpt;

  std::size_t meta_count = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "meta %zu", &meta_count) != 1) {
    throw FormatError("load_checkpoint: missing meta section");
  }
  for (std::size_t i = 0; i < meta_count; ++i) {
    if (!std::getline(is, line)) throw FormatError("load_checkpoint: truncated meta section");
    const auto sep = line.find(" = ");
    if (sep == std::string::npos) throw FormatError("load_checkpoint: bad meta line '" + line + "'");
    ckpt.meta[line.substr(0, sep)] = line.substr(sep + 3);
  }

  std::size_t tensor_count = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "tensors %zu", &tensor_count) != 1) {
    throw FormatError("load_checkpoint: missing tensors section");
  }
  for (std::size_t i = 0; i < tensor_count; ++i) {
    if (!std::getline(is, line) || line.rfind("name ", 0) != 0) {
      throw FormatError("load_checkpoint: missing tensor name line");
    }
    const std::string name = line.substr(5);
    Tensor t = read_tensor(is);
    if (!std::getline(is, line)) throw FormatError("load_checkpoint: truncated after tensor " + name);
    ckpt.tensors.emplace_back(name, std::move(t));
  }

  auto need = [&](const char* key) {
    auto it = ckpt.meta.find(key);
    if (it == ckpt.meta.end()) throw FormatError(std::string("load_checkpoint: missing ") + key);
    return it->second;
  };
  ckpt.spec.stages = parse_stages(need("stages"));
  ckpt.spec.feature_channels = std::stoul(need("feature_channels"));
  ckpt.spec.map_width = std::stoul(need("map_width"));
  ckpt.spec.num_classes = std::stoul(need("num_classes"));
  ckpt.spec.validate();
  return ckpt;
}

ConvNet checkpoint_to_net(const Checkpoint& ckpt, bool trainable) {
  return ConvNet(ckpt.spec, ckpt.tensors, trainable);
}

}  // namespace icd
