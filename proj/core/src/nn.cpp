#include "icd/nn.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace icd {

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

constexpr std::size_t kKernel = 3;
constexpr std::size_t kPad = 1;

}  // namespace

void ConvNetSpec::validate() const {
  if (stages.empty()) throw ConfigError("ConvNetSpec: no stages");
  for (const StageSpec& s : stages) {
    if (s.channels == 0) throw ConfigError("ConvNetSpec: stage channels must be positive");
    if (s.stride == 0) throw ConfigError("ConvNetSpec: stage stride must be positive");
  }
  if (feature_channels != stages.back().channels) {
    throw ConfigError("ConvNetSpec: feature_channels " + std::to_string(feature_channels) +
                      " != last stage channels " + std::to_string(stages.back().channels));
  }
  if (!is_power_of_two(map_width)) {
    throw ConfigError("ConvNetSpec: map_width " + std::to_string(map_width) +
                      " must be a power of two");
  }
  if (num_classes < 2) throw ConfigError("ConvNetSpec: need at least 2 classes");
}

std::size_t ConvNetSpec::output_width(const std::vector<StageSpec>& stages,
                                      std::size_t image_size) {
  std::size_t w = image_size;
  for (const StageSpec& s : stages) {
    if (w + 2 * kPad < kKernel) throw ConfigError("ConvNetSpec: input too small for stage stack");
    w = (w + 2 * kPad - kKernel) / s.stride + 1;
  }
  return w;
}

ConvNetSpec ConvNetSpec::make(std::vector<StageSpec> stages, std::size_t image_size,
                              std::size_t num_classes) {
  ConvNetSpec spec;
  spec.feature_channels = stages.empty() ? 0 : stages.back().channels;
  spec.map_width = output_width(stages, image_size);
  spec.stages = std::move(stages);
  spec.num_classes = num_classes;
  spec.validate();
  return spec;
}

ConvNetSpec ConvNetSpec::teacher_default(std::size_t num_classes, std::size_t image_size) {
  return make({{16, 2}, {32, 2}, {64, 2}, {128, 1}}, image_size, num_classes);
}

ConvNetSpec ConvNetSpec::student_default(std::size_t num_classes, std::size_t image_size) {
  return make({{16, 2}, {32, 2}, {64, 2}}, image_size, num_classes);
}

std::string stages_str(const std::vector<StageSpec>& stages) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) os << ',';
    os << stages[i].channels << ':' << stages[i].stride;
  }
  return os.str();
}

std::vector<StageSpec> parse_stages(const std::string& text) {
  std::vector<StageSpec> stages;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("stage list: expected channels:stride, got '" + item + "'");
    }
    try {
      stages.push_back({static_cast<std::size_t>(std::stoul(item.substr(0, colon))),
                        static_cast<std::size_t>(std::stoul(item.substr(colon + 1)))});
    } catch (const std::exception&) {
      throw ConfigError("stage list: cannot parse '" + item + "'");
    }
  }
  if (stages.empty()) throw ConfigError("stage list: empty");
  return stages;
}

LogitMap::LogitMap(Tensor v) : values(std::move(v)) {
  if (values.rank() != 4 || values.shape()[2] != values.shape()[3]) {
    throw ShapeError("LogitMap: expected [batch,K,w,w], got " + shape_str(values.shape()));
  }
  if (!all_finite(values.data())) throw NumericError("LogitMap: non-finite entries");
}

namespace {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

ConvNet::ConvNet(ConvNetSpec spec, Rng& init_rng, bool trainable)
    : spec_(std::move(spec)), trainable_(trainable) {
  spec_.validate();
  std::size_t cin = 3;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const std::size_t cout = spec_.stages[i].channels;
    const std::string prefix = "stage" + std::to_string(i);
    params_.push_back(
        {prefix + ".weight", kaiming_uniform({cout, cin, kKernel, kKernel}, cin * kKernel * kKernel,
                                             init_rng)});
    params_.push_back({prefix + ".bias", Tensor::zeros({cout}, true)});
    cin = cout;
  }
  params_.push_back(
      {"classifier.weight",
       kaiming_uniform({spec_.feature_channels, spec_.num_classes}, spec_.feature_channels,
                       init_rng)});
  if (!trainable_) {
    for (Parameter& p : params_) p.value = p.value.detached();
  }
}

ConvNet::ConvNet(ConvNetSpec spec, const std::vector<std::pair<std::string, Tensor>>& tensors,
                 bool trainable)
    : spec_(std::move(spec)), trainable_(trainable) {
  spec_.validate();
  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  auto take = [&](const std::string& name, Shape expected) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing parameter " + name);
    if (it->second.shape() != expected) {
      throw FormatError("checkpoint: parameter " + name + " has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(expected));
    }
    Tensor t = trainable ? it->second.leaf_with_grad() : it->second.detached();
    by_name.erase(it);
    return t;
  };
  std::size_t cin = 3;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const std::size_t cout = spec_.stages[i].channels;
    const std::string prefix = "stage" + std::to_string(i);
    params_.push_back({prefix + ".weight", take(prefix + ".weight", {cout, cin, kKernel, kKernel})});
    params_.push_back({prefix + ".bias", take(prefix + ".bias", {cout})});
    cin = cout;
  }
  params_.push_back({"classifier.weight", take("classifier.weight",
                                               {spec_.feature_channels, spec_.num_classes})});
  if (!by_name.empty()) {
    throw FormatError("checkpoint: unexpected parameter " + by_name.begin()->first);
  }
}

Tensor forward_features_with(const ConvNetSpec& spec, const std::vector<Tensor>& params,
                             const Tensor& images) {
  if (images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2] != images.shape()[3]) {
    throw ShapeError("forward_features: expected [B,3,S,S] images, got " +
                     shape_str(images.shape()));
  }
  if (ConvNetSpec::output_width(spec.stages, images.shape()[2]) != spec.map_width) {
    throw ShapeError("forward_features: input size " + std::to_string(images.shape()[2]) +
                     " does not produce a " + std::to_string(spec.map_width) + "-wide map");
  }
  if (params.size() != 2 * spec.stages.size() + 1) {
    throw ShapeError("forward_features: expected " + std::to_string(2 * spec.stages.size() + 1) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  Tensor x = images;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    x = relu(conv2d(x, params[2 * i], params[2 * i + 1], spec.stages[i].stride, kPad));
  }
  return x;
}

Tensor ConvNet::forward_features(const Tensor& images) const {
  std::vector<Tensor> tensors;
  tensors.reserve(params_.size());
  for (const Parameter& p : params_) tensors.push_back(p.value);
  return forward_features_with(spec_, tensors, images);
}

LogitMap ConvNet::logit_map(const Tensor& images) const {
  return project_logit_map(forward_features(images), classifier());
}

void ConvNet::replace_param(std::size_t index, Tensor value) {
  if (value.shape() != params_.at(index).value.shape()) {
    throw ShapeError("replace_param: shape mismatch for " + params_[index].name);
  }
  params_[index].value = std::move(value);
}

LogitMap project_logit_map(const Tensor& features, const Tensor& w) {
  return LogitMap(project_positions(features, w));
}

Tensor global_logits(const LogitMap& map) {
  const Tensor pooled = pool_cells_scale(map.values, 1);  // [B,1,K]
  return reshape(pooled, {map.batch(), map.classes()});
}

}  // namespace icd
