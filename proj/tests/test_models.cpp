#include <cmath>
#include <cstring>

#include "doctest.h"
#include "vitfl/error.hpp"
#include "vitfl/model.hpp"
#include "vitfl/oracles.hpp"

using namespace vitfl;

namespace {

Tensor random_batch(const ModelSpec& s, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(m * s.input_size());
  for (double& x : v) x = rng.uniform();
  return Tensor::from({m, s.channels, s.height, s.width}, std::move(v));
}

bool same_bytes(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].values.size() != b[i].values.size()) return false;
    if (std::memcmp(a[i].values.data(), b[i].values.data(), a[i].values.size() * sizeof(double)))
      return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("model-zoo") {

TEST_CASE("tiny vit token arithmetic") {
  const ModelSpec s = ModelSpec::tiny_vit();
  CHECK(s.patch_size == 4);
  CHECK(s.embed_dim == 64);
  CHECK(s.num_heads == 4);
  CHECK(s.num_blocks == 4);
  CHECK(s.num_tokens() == 64);

  auto m = build_model(s, 1);
  // embed + one point per block + pooled features
  CHECK(m->capture_points().size() == 6);
  CHECK(m->penultimate_layer() == "pool");
  const auto out = m->forward_with_capture(random_batch(s, 2, 3), Mode::Eval, {"block0", "pool"});
  CHECK(out.logits.shape() == Shape{2, 10});
  CHECK(out.activations.at("block0").values.cols() == 64 * 64);
  CHECK(out.activations.at("pool").values.cols() == 64);
}

TEST_CASE("construction is deterministic per seed") {
  for (Arch a : {Arch::TinyVit, Arch::TinyCnn, Arch::TinyMlp}) {
    const ModelSpec s = ModelSpec::defaults_for(a);
    CHECK(same_bytes(build_model(s, 42)->snapshot(), build_model(s, 42)->snapshot()));
    CHECK_FALSE(same_bytes(build_model(s, 42)->snapshot(), build_model(s, 43)->snapshot()));
  }
}

TEST_CASE("default vit and cnn sizes are comparable") {
  const double vit = static_cast<double>(count_trainable_parameters(ModelSpec::tiny_vit()));
  const double cnn = static_cast<double>(count_trainable_parameters(ModelSpec::tiny_cnn()));
  CHECK(std::abs(vit - cnn) / std::max(vit, cnn) <= 0.25);
}

TEST_CASE("parameter count by traversal") {
  // MLP: 3072-128-64 backbone, 10-way classifier, 64-64-32 projection head.
  const std::size_t want = (3072 * 128 + 128) + (128 * 64 + 64) + (64 * 10 + 10) +
                           (64 * 64 + 64) + (64 * 32 + 32);
  CHECK(count_trainable_parameters(ModelSpec::tiny_mlp()) == want);
  auto m = build_model(ModelSpec::tiny_mlp(), 0);
  CHECK(m->trainable_count() == want);
  CHECK(m->snapshot().total_values() == want);
}

TEST_CASE("capture at the penultimate layer of a 50-sample probe") {
  for (Arch a : {Arch::TinyVit, Arch::TinyCnn, Arch::TinyMlp}) {
    ModelSpec s = ModelSpec::defaults_for(a);
    s.height = s.width = 16;
    auto m = build_model(s, 5);
    const auto out = m->forward_with_capture(random_batch(s, 50, 9), Mode::Eval,
                                             {m->penultimate_layer()});
    const auto& act = out.activations.at(m->penultimate_layer()).values;
    CHECK(act.rows() == 50);
    CHECK(act.cols() > 0);
  }
}

TEST_CASE("empty capture set yields logits only") {
  ModelSpec s = ModelSpec::tiny_mlp();
  auto m = build_model(s, 1);
  const auto out = m->forward_with_capture(random_batch(s, 3, 1), Mode::Eval, {});
  CHECK(out.activations.empty());
  CHECK(out.logits.shape() == Shape{3, 10});
  CHECK_THROWS_AS(m->forward_with_capture(random_batch(s, 3, 1), Mode::Eval, {"nope"}), ShapeError);
}

TEST_CASE("mlp capture widths match the declared hidden widths") {
  ModelSpec s = ModelSpec::tiny_mlp();
  s.hidden_widths = {40, 24, 12};
  auto m = build_model(s, 1);
  std::vector<std::string> names;
  for (const auto& p : m->capture_points()) names.push_back(p.layer_name);
  REQUIRE(names.size() == 3);
  const auto out = m->forward_with_capture(random_batch(s, 4, 2), Mode::Eval, names);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(m->capture_points()[i].ordering_index == i);
    CHECK(out.activations.at(names[i]).values.rows() == 4);
    CHECK(out.activations.at(names[i]).values.cols() == s.hidden_widths[i]);
  }
}

TEST_CASE("projection head") {
  for (Arch a : {Arch::TinyVit, Arch::TinyCnn, Arch::TinyMlp}) {
    ModelSpec s = ModelSpec::defaults_for(a);
    s.height = s.width = 16;
    s.projection_dim = 12;
    auto m1 = build_model(s, 8);
    auto m2 = build_model(s, 8);
    const Tensor x = random_batch(s, 5, 4);
    const Tensor r1 = m1->representation(x, Mode::Eval);
    CHECK(r1.shape() == Shape{5, 12});
    const Tensor r2 = m2->representation(x, Mode::Eval);
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r2[i]);

    const auto both = m1->forward_both(x, Mode::Eval);
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(both.representation[i] == r1[i]);
  }
}

TEST_CASE("model gradients, including the projection path, match finite differences") {
  for (const ModelSpec& s : oracles::gradient_check_specs()) {
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
      const auto g = oracles::check_model_gradients(s, seed, 3, 4);
      INFO(to_string(s.arch) << " seed " << seed << " at " << g.worst);
      CHECK(g.max_rel_error < 1e-4);
      CHECK(g.checked > 0);
    }
  }
}

TEST_CASE("batch norm buffers move in training mode only") {
  ModelSpec s = ModelSpec::tiny_cnn();
  s.height = s.width = 8;
  s.num_stages = 2;
  s.base_channels = 4;
  auto m = build_model(s, 2);
  const ModelParams before = m->snapshot();
  m->forward(random_batch(s, 4, 1), Mode::Eval);
  CHECK(m->snapshot() == before);
  m->forward(random_batch(s, 4, 1), Mode::Train);
  bool moved = false;
  const ModelParams after = m->snapshot();
  for (std::size_t i = 0; i < after.size(); ++i) {
    if (after[i].kind == ParamKind::Buffer) moved |= after[i].values != before[i].values;
    else CHECK(after[i].values == before[i].values);
  }
  CHECK(moved);
}

TEST_CASE("invalid specs are rejected") {
  ModelSpec s = ModelSpec::tiny_vit();
  s.patch_size = 5;
  CHECK_THROWS_AS(s.validate(), ShapeError);
  s = ModelSpec::tiny_vit();
  s.num_heads = 3;
  CHECK_THROWS_AS(s.validate(), ShapeError);
  CHECK_THROWS_AS(arch_from_string("resnet"), Error);
}

}  // TEST_SUITE
