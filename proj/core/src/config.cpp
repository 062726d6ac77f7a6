#include "icd/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace icd {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: cannot parse number '" + value + "' for " + key);
  }
}

std::size_t to_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config: cannot parse count '" + value + "' for " + key);
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("config: cannot parse boolean '" + value + "' for " + key);
}

std::vector<std::size_t> to_size_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(to_size(key, trim(item)));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

std::optional<std::array<double, 3>> to_channel_triplet(const std::string& key,
                                                        const std::string& value) {
  if (value == "auto") return std::nullopt;
  std::array<double, 3> out{};
  std::istringstream is(value);
  std::string item;
  std::size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i >= 3) throw ConfigError("config: expected 3 values for " + key);
    out[i++] = to_double(key, trim(item));
  }
  if (i != 3) throw ConfigError("config: expected 3 values for " + key);
  return out;
}

std::string size_list_str(const std::vector<std::size_t>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    os << v[i];
  }
  return os.str();
}

std::string double_str(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string triplet_str(const std::optional<std::array<double, 3>>& t) {
  if (!t) return "auto";
  return double_str((*t)[0]) + "," + double_str((*t)[1]) + "," + double_str((*t)[2]);
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  // dataset
  if (key == "dataset") cfg.dataset.kind = parse_dataset_kind(value);
  else if (key == "data_path") cfg.dataset.path = value;
  else if (key == "num_classes") cfg.dataset.num_classes = to_size(key, value);
  else if (key == "image_size") cfg.dataset.image_size = to_size(key, value);
  else if (key == "train_size") cfg.dataset.train_size = to_size(key, value);
  else if (key == "test_size") cfg.dataset.test_size = to_size(key, value);
  else if (key == "data_seed") cfg.dataset.seed = to_size(key, value);
  else if (key == "noise_sigma") cfg.dataset.noise_sigma = to_double(key, value);
  else if (key == "augment") cfg.train.augment = to_bool(key, value);
  else if (key == "norm_mean") cfg.norm_mean = to_channel_triplet(key, value);
  else if (key == "norm_std") cfg.norm_std = to_channel_triplet(key, value);
  // models
  else if (key == "teacher_stages") cfg.teacher_stages = parse_stages(value);
  else if (key == "student_stages") cfg.student_stages = parse_stages(value);
  // optimization
  else if (key == "epochs") cfg.train.epochs = to_size(key, value);
  else if (key == "batch_size") cfg.train.batch_size = to_size(key, value);
  else if (key == "lr") cfg.train.lr = to_double(key, value);
  else if (key == "lr_decay_epochs") cfg.train.lr_decay_epochs = to_size_list(key, value);
  else if (key == "lr_decay_factor") cfg.train.lr_decay_factor = to_double(key, value);
  else if (key == "momentum") cfg.train.momentum = to_double(key, value);
  else if (key == "weight_decay") cfg.train.weight_decay = to_double(key, value);
  else if (key == "schedule_scale") cfg.train.schedule_scale = to_double(key, value);
  else if (key == "seed") cfg.train.seed = to_size(key, value);
  // distillation
  else if (key == "scales") cfg.train.distill.scales = to_size_list(key, value);
  else if (key == "temperature") cfg.train.distill.temperature = to_double(key, value);
  else if (key == "alpha") cfg.train.distill.alpha = to_double(key, value);
  else if (key == "gamma") cfg.train.distill.gamma = to_double(key, value);
  else if (key == "kd_weight") {
    cfg.train.distill.kd_weight = to_double(key, value);
    cfg.kd_weight_set = true;
  }
  else if (key == "warmup_epochs") cfg.train.distill.warmup_epochs = to_size(key, value);
  else if (key == "gram_mode") cfg.train.distill.gram_mode = parse_gram_mode(value);
  else if (key == "eps") cfg.train.distill.eps = to_double(key, value);
  else if (key == "cell_mean") cfg.train.distill.cell_mean = to_bool(key, value);
  else if (key == "tau_squared") cfg.train.distill.tau_squared = to_bool(key, value);
  // io
  else if (key == "method") cfg.method = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "teacher_ckpt") cfg.teacher_ckpt = value;
  else if (key == "student_ckpt") cfg.student_ckpt = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    }
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key on line " + std::to_string(lineno));
    }
    apply_config_entry(cfg, key, value);
  }
  return cfg;
}

void RunConfig::finalize() {
  if (!kd_weight_set) train.distill.kd_weight = train.distill.alpha;
  dataset.validate();
  train.validate();
  parse_method(method);
  if (static_cast<bool>(norm_mean) != static_cast<bool>(norm_std)) {
    throw ConfigError("config: norm_mean and norm_std must both be auto or both explicit");
  }
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["dataset"] = dataset_kind_str(cfg.dataset.kind);
  kv["data_path"] = cfg.dataset.path;
  kv["num_classes"] = std::to_string(cfg.dataset.num_classes);
  kv["image_size"] = std::to_string(cfg.dataset.image_size);
  kv["train_size"] = std::to_string(cfg.dataset.train_size);
  kv["test_size"] = std::to_string(cfg.dataset.test_size);
  kv["data_seed"] = std::to_string(cfg.dataset.seed);
  kv["noise_sigma"] = double_str(cfg.dataset.noise_sigma);
  kv["augment"] = cfg.train.augment ? "true" : "false";
  kv["norm_mean"] = triplet_str(cfg.norm_mean);
  kv["norm_std"] = triplet_str(cfg.norm_std);
  kv["teacher_stages"] = stages_str(cfg.teacher_stages);
  kv["student_stages"] = stages_str(cfg.student_stages);
  kv["epochs"] = std::to_string(cfg.train.epochs);
  kv["batch_size"] = std::to_string(cfg.train.batch_size);
  kv["lr"] = double_str(cfg.train.lr);
  kv["lr_decay_epochs"] = size_list_str(cfg.train.lr_decay_epochs);
  kv["lr_decay_factor"] = double_str(cfg.train.lr_decay_factor);
  kv["momentum"] = double_str(cfg.train.momentum);
  kv["weight_decay"] = double_str(cfg.train.weight_decay);
  kv["schedule_scale"] = double_str(cfg.train.schedule_scale);
  kv["seed"] = std::to_string(cfg.train.seed);
  kv["scales"] = size_list_str(cfg.train.distill.scales);
  kv["temperature"] = double_str(cfg.train.distill.temperature);
  kv["alpha"] = double_str(cfg.train.distill.alpha);
  kv["gamma"] = double_str(cfg.train.distill.gamma);
  kv["kd_weight"] = double_str(cfg.train.distill.kd_weight);
  kv["warmup_epochs"] = std::to_string(cfg.train.distill.warmup_epochs);
  kv["gram_mode"] = gram_mode_str(cfg.train.distill.gram_mode);
  kv["eps"] = double_str(cfg.train.distill.eps);
  kv["cell_mean"] = cfg.train.distill.cell_mean ? "true" : "false";
  kv["tau_squared"] = cfg.train.distill.tau_squared ? "true" : "false";
  kv["method"] = cfg.method;
  kv["out_dir"] = cfg.out_dir;
  kv["teacher_ckpt"] = cfg.teacher_ckpt;
  kv["student_ckpt"] = cfg.student_ckpt;
  return kv;
}

}  // namespace icd
