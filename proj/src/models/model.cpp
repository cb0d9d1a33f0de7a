#include "vitfl/model.hpp"

#include <algorithm>
#include <cmath>

#include "vitfl/error.hpp"
#include "vitfl/ops.hpp"
#include "zoo.hpp"

namespace vitfl {

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::TinyVit: return "tiny_vit";
    case Arch::TinyCnn: return "tiny_cnn";
    case Arch::TinyMlp: return "tiny_mlp";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  if (s == "tiny_vit") return Arch::TinyVit;
  if (s == "tiny_cnn") return Arch::TinyCnn;
  if (s == "tiny_mlp") return Arch::TinyMlp;
  throw ConfigError("", "unknown architecture '" + s + "' (expected tiny_vit, tiny_cnn or tiny_mlp)");
}

ModelSpec ModelSpec::tiny_vit() {
  ModelSpec s;
  s.arch = Arch::TinyVit;
  return s;
}

ModelSpec ModelSpec::tiny_cnn() {
  ModelSpec s;
  s.arch = Arch::TinyCnn;
  return s;
}

ModelSpec ModelSpec::tiny_mlp() {
  ModelSpec s;
  s.arch = Arch::TinyMlp;
  return s;
}

ModelSpec ModelSpec::defaults_for(Arch arch) {
  ModelSpec s;
  s.arch = arch;
  return s;
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& m) { throw ShapeError("model spec: " + m); };
  if (channels == 0 || height == 0 || width == 0) fail("input dimensions must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (projection_dim == 0) fail("projection_dim must be positive");
  switch (arch) {
    case Arch::TinyVit:
      if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0)
        fail("height and width must be divisible by patch_size");
      if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
        fail("embed_dim must be divisible by num_heads");
      if (num_blocks == 0 || mlp_ratio == 0) fail("num_blocks and mlp_ratio must be positive");
      break;
    case Arch::TinyCnn: {
      if (num_stages == 0 || base_channels == 0 || blocks_per_stage == 0)
        fail("num_stages, base_channels and blocks_per_stage must be positive");
      std::size_t h = height, w = width;
      for (std::size_t s = 1; s < num_stages; ++s) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      if (h == 0 || w == 0 || (num_stages > 1 && (height < 2 || width < 2)))
        fail("input too small for the number of stages");
      break;
    }
    case Arch::TinyMlp:
      if (hidden_widths.empty()) fail("tiny_mlp needs at least one hidden layer");
      for (std::size_t w : hidden_widths)
        if (w == 0) fail("hidden widths must be positive");
      break;
  }
}

void CaptureSink::record(const std::string& name, const Tensor& t, std::size_t rows) {
  if (!wants(name)) return;
  const std::size_t cols = t.numel() / rows;
  std::vector<double> values(t.data().begin(), t.data().end());
  results_[name] = ActivationMatrix{name, Matrix(rows, cols, std::move(values)), 0};
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

Tensor& Model::add_param(std::string name, Shape shape, std::size_t layer, std::vector<double> init,
                         ParamKind kind) {
  if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
  Tensor t = Tensor::from(std::move(shape), std::move(init), kind == ParamKind::Trainable);
  index_[name] = params_.size();
  params_.push_back(ParamTensor{std::move(name), t, kind, layer});
  num_layers_ = std::max(num_layers_, layer + 1);
  return params_.back().value;
}

Tensor& Model::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("model has no parameter '" + name + "'");
  return params_[it->second].value;
}

void Model::add_capture_point(std::string name) {
  capture_points_.push_back(CapturePoint{std::move(name), CapturePosition::AfterBlockOutput,
                                         capture_points_.size()});
}

std::vector<double> Model::he_normal(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal(0.0, sd);
  return v;
}

std::vector<double> Model::trunc_normal(std::size_t count, double stddev, Rng& rng) {
  std::vector<double> v(count);
  for (double& x : v) x = rng.truncated_normal(stddev);
  return v;
}

void Model::add_heads(std::size_t feature_dim, std::size_t layer, bool transformer_init, Rng& rng) {
  const std::size_t c = spec_.num_classes, p = spec_.projection_dim;
  auto weights = [&](std::size_t out, std::size_t in) {
    return transformer_init ? trunc_normal(out * in, 0.02, rng) : he_normal(out * in, in, rng);
  };
  add_param("head.weight", {c, feature_dim}, layer, weights(c, feature_dim));
  add_param("head.bias", {c}, layer, std::vector<double>(c, 0.0));
  add_param("proj.0.weight", {feature_dim, feature_dim}, layer, weights(feature_dim, feature_dim));
  add_param("proj.0.bias", {feature_dim}, layer, std::vector<double>(feature_dim, 0.0));
  add_param("proj.1.weight", {p, feature_dim}, layer, weights(p, feature_dim));
  add_param("proj.1.bias", {p}, layer, std::vector<double>(p, 0.0));
}

void Model::check_batch(const Tensor& batch) const {
  if (!batch.defined() || batch.rank() != 4 || batch.dim(0) == 0 ||
      batch.dim(1) != spec_.channels || batch.dim(2) != spec_.height || batch.dim(3) != spec_.width) {
    throw ShapeError("batch shape " + (batch.defined() ? to_string(batch.shape()) : "undefined") +
                     " does not match model input [m x " + std::to_string(spec_.channels) + " x " +
                     std::to_string(spec_.height) + " x " + std::to_string(spec_.width) + "]");
  }
}

Tensor Model::forward(const Tensor& batch, Mode mode) {
  check_batch(batch);
  CaptureSink sink;
  Tensor features = backbone(batch, mode, sink);
  return ops::linear(features, param("head.weight"), param("head.bias"));
}

ForwardOutput Model::forward_with_capture(const Tensor& batch, Mode mode,
                                          const std::vector<std::string>& points) {
  check_batch(batch);
  std::set<std::string> wanted;
  for (const auto& p : points) {
    const bool known = std::any_of(capture_points_.begin(), capture_points_.end(),
                                   [&](const CapturePoint& c) { return c.layer_name == p; });
    if (!known) throw ShapeError("unknown capture point '" + p + "'");
    wanted.insert(p);
  }
  CaptureSink sink(std::move(wanted));
  Tensor features = backbone(batch, mode, sink);
  ForwardOutput out;
  out.logits = ops::linear(features, param("head.weight"), param("head.bias"));
  out.activations = std::move(sink.results());
  return out;
}

Tensor Model::representation(const Tensor& batch, Mode mode) { return forward_both(batch, mode).representation; }

Model::Outputs Model::forward_both(const Tensor& batch, Mode mode) {
  check_batch(batch);
  CaptureSink sink;
  Tensor features = backbone(batch, mode, sink);
  Outputs out;
  out.logits = ops::linear(features, param("head.weight"), param("head.bias"));
  Tensor h = ops::relu(ops::linear(features, param("proj.0.weight"), param("proj.0.bias")));
  out.representation = ops::linear(h, param("proj.1.weight"), param("proj.1.bias"));
  return out;
}

ModelParams Model::snapshot() const {
  ModelParams out;
  for (const auto& p : params_) {
    out.push_back(NamedArray{p.name, p.value.shape(),
                             std::vector<double>(p.value.data().begin(), p.value.data().end()), p.kind,
                             p.layer});
  }
  return out;
}

void Model::load(const ModelParams& params) {
  if (params.size() != params_.size()) {
    throw ShapeError("load: expected " + std::to_string(params_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (auto& p : params_) {
    const NamedArray& src = params.at(p.name);
    if (src.shape != p.value.shape()) {
      throw ShapeError("load: shape mismatch for '" + p.name + "' " + to_string(src.shape) + " vs " +
                       to_string(p.value.shape()));
    }
    detail::check_finite(src.values, "load");
    std::copy(src.values.begin(), src.values.end(), p.value.mutable_data().begin());
  }
}

void Model::zero_grad() {
  for (auto& p : params_) {
    if (p.kind != ParamKind::Trainable) continue;
    auto g = p.value.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

std::size_t Model::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.kind == ParamKind::Trainable) n += p.value.numel();
  return n;
}

std::unique_ptr<Model> Model::clone() const {
  auto m = build_model(spec_, 0);
  m->load(snapshot());
  return m;
}

std::unique_ptr<Model> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  switch (spec.arch) {
    case Arch::TinyVit: return zoo::make_tiny_vit(spec, seed);
    case Arch::TinyCnn: return zoo::make_tiny_cnn(spec, seed);
    case Arch::TinyMlp: return zoo::make_tiny_mlp(spec, seed);
  }
  throw Error("unreachable architecture");
}

std::size_t count_trainable_parameters(const ModelSpec& spec) {
  return build_model(spec, 0)->trainable_count();
}

}  // namespace vitfl
