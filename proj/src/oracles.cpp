#include "vitfl/oracles.hpp"

#include <algorithm>
#include <cmath>

#include "vitfl/error.hpp"
#include "vitfl/fl.hpp"
#include "vitfl/ops.hpp"
#include "vitfl/rng.hpp"

namespace vitfl::oracles {

double hsic1_direct(const Matrix& k, const Matrix& l) {
  const std::size_t n = k.rows();
  if (n < 4 || k.cols() != n || l.rows() != n || l.cols() != n) throw ShapeError("hsic1_direct: bad sizes");
  Matrix kt = k, lt = l;
  for (std::size_t i = 0; i < n; ++i) kt(i, i) = lt(i, i) = 0.0;
  Matrix prod(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < n; ++t) prod(i, j) += kt(i, t) * lt(t, j);
  double trace = 0.0, ones_k = 0.0, ones_l = 0.0, ones_kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    trace += prod(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      ones_k += kt(i, j);
      ones_l += lt(i, j);
      ones_kl += prod(i, j);
    }
  }
  const double nd = static_cast<double>(n);
  const double term2 = ones_k * ones_l / ((nd - 1) * (nd - 2));
  const double term3 = 2.0 / (nd - 2) * ones_kl;
  return (trace + term2 - term3) / (nd * (nd - 3));
}

double weighted_mean(std::span<const double> values, std::span<const double> weights) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    num += weights[i] * values[i];
    den += weights[i];
  }
  return num / den;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

void GradCheck::merge(const GradCheck& other) {
  checked += other.checked;
  kinks += other.kinks;
  if (!other.worst.empty() && (worst.empty() || other.max_rel_error > max_rel_error)) {
    max_rel_error = other.max_rel_error;
    worst = other.worst;
  }
}

GradCheck check_gradients(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& leaves,
                          std::size_t coords_per_leaf, std::uint64_t seed, double h) {
  std::vector<Tensor> ls;
  for (const auto& [name, t] : leaves) {
    if (!t.requires_grad()) throw Error("check_gradients: leaf '" + name + "' does not require grad");
    ls.push_back(t);
    ls.back().zero_grad();
  }
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : ls) {
    if (t.has_grad()) analytic.emplace_back(t.grad().begin(), t.grad().end());
    else analytic.emplace_back(t.numel(), 0.0);
  }

  auto eval = [&] {
    NoGradGuard guard;
    return loss_fn().item();
  };
  Rng rng(seed);
  GradCheck out;
  for (std::size_t li = 0; li < ls.size(); ++li) {
    Tensor& t = ls[li];
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > coords_per_leaf) {
      rng.shuffle(coords);
      coords.resize(coords_per_leaf);
    }
    for (std::size_t i : coords) {
      auto v = t.mutable_data();
      const double orig = v[i];
      v[i] = orig + h;
      const double up = eval();
      v[i] = orig - h;
      const double down = eval();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double err = relative_error(analytic[li][i], numeric);
      ++out.checked;
      if (err > 1e-6) {
        const double mid = eval();
        const double fwd = (up - mid) / h, bwd = (mid - down) / h;
        if (relative_error(fwd, bwd) > 1e-2 &&
            std::min(relative_error(analytic[li][i], fwd), relative_error(analytic[li][i], bwd)) < 1e-2) {
          ++out.kinks;
          continue;
        }
      }
      if (out.worst.empty() || err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = leaves[li].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Fixed random linear functional of the output, so every output entry
// contributes to the checked scalar.
Tensor probe(const Tensor& out, const Tensor& weights) { return ops::sum(ops::mul(out, weights)); }

GradCheck op_case(std::uint64_t seed, const std::vector<Shape>& shapes,
                  const std::function<Tensor(const std::vector<Tensor>&)>& op, double sd = 1.0) {
  Rng rng(seed);
  std::vector<Tensor> in;
  std::vector<std::pair<std::string, Tensor>> leaves;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    in.push_back(random_tensor(shapes[i], rng, sd));
    leaves.emplace_back("input" + std::to_string(i), in.back());
  }
  Tensor w;
  {
    NoGradGuard guard;
    w = random_tensor(op(in).shape(), rng, 1.0, false);
  }
  return check_gradients([&] { return probe(op(in), w); }, leaves, 64, seed ^ 0x5eed);
}

}  // namespace

GradCheck check_model_gradients(const ModelSpec& spec, std::uint64_t seed, std::size_t batch,
                                std::size_t coords_per_param) {
  auto model = build_model(spec, seed);
  Rng rng(derive_seed({seed, 0x6C}));
  std::vector<double> pixels(batch * spec.input_size());
  for (double& p : pixels) p = rng.uniform();
  const Tensor x = Tensor::from({batch, spec.channels, spec.height, spec.width}, pixels);
  std::vector<int> y(batch);
  for (int& c : y) c = static_cast<int>(rng.below(spec.num_classes));
  const Tensor r = random_tensor({batch, spec.projection_dim}, rng, 1.0, false);

  std::vector<std::pair<std::string, Tensor>> leaves;
  for (auto& p : model->parameters())
    if (p.kind == ParamKind::Trainable) leaves.emplace_back(p.name, p.value);
  auto loss = [&] {
    auto out = model->forward_both(x, Mode::Train);
    return ops::add(ops::cross_entropy(out.logits, y),
                    ops::scale(ops::sum(ops::mul(out.representation, r)), 1.0 / static_cast<double>(batch)));
  };
  return check_gradients(loss, leaves, coords_per_param, derive_seed({seed, 0xFD}));
}

std::vector<ModelSpec> gradient_check_specs() {
  ModelSpec vit = ModelSpec::tiny_vit();
  vit.height = vit.width = 8;
  vit.patch_size = 4;
  vit.embed_dim = 8;
  vit.num_heads = 2;
  vit.num_blocks = 2;
  vit.num_classes = 5;
  vit.projection_dim = 4;

  ModelSpec cnn = ModelSpec::tiny_cnn();
  cnn.height = cnn.width = 8;
  cnn.num_stages = 2;
  cnn.base_channels = 4;
  cnn.num_classes = 5;
  cnn.projection_dim = 4;

  ModelSpec mlp = ModelSpec::tiny_mlp();
  mlp.channels = 1;
  mlp.height = mlp.width = 4;
  mlp.hidden_widths = {8, 6};
  mlp.num_classes = 5;
  mlp.projection_dim = 4;
  return {vit, cnn, mlp};
}

std::vector<OpCase> op_gradient_cases() {
  std::vector<OpCase> c;
  c.push_back({"matmul", [](std::uint64_t s) {
                 return op_case(s, {{3, 4}, {4, 2}}, [](auto& in) { return ops::matmul(in[0], in[1]); });
               }});
  c.push_back({"linear", [](std::uint64_t s) {
                 return op_case(s, {{3, 4}, {5, 4}, {5}},
                                [](auto& in) { return ops::linear(in[0], in[1], in[2]); });
               }});
  c.push_back({"add_sub_mul", [](std::uint64_t s) {
                 return op_case(s, {{2, 3}, {2, 3}, {2, 3}}, [](auto& in) {
                   return ops::mul(ops::sub(ops::add(in[0], in[1]), in[2]), in[1]);
                 });
               }});
  c.push_back({"scale_mean", [](std::uint64_t s) {
                 return op_case(s, {{3, 3}}, [](auto& in) {
                   return ops::reshape(ops::add(ops::mean(in[0]), ops::sum(ops::scale(in[0], -1.5))), {1});
                 });
               }});
  c.push_back({"relu", [](std::uint64_t s) {
                 return op_case(s, {{4, 5}}, [](auto& in) { return ops::relu(in[0]); });
               }});
  c.push_back({"gelu", [](std::uint64_t s) {
                 return op_case(s, {{4, 5}}, [](auto& in) { return ops::gelu(in[0]); });
               }});
  c.push_back({"softmax_rows", [](std::uint64_t s) {
                 return op_case(s, {{3, 5}}, [](auto& in) { return ops::softmax_rows(in[0]); });
               }});
  c.push_back({"cross_entropy", [](std::uint64_t s) {
                 return op_case(s, {{4, 6}}, [](auto& in) {
                   const std::vector<int> y{0, 5, 2, 2};
                   return ops::reshape(ops::cross_entropy(in[0], y), {1});
                 });
               }});
  c.push_back({"layer_norm", [](std::uint64_t s) {
                 return op_case(s, {{3, 6}, {6}, {6}},
                                [](auto& in) { return ops::layer_norm(in[0], in[1], in[2]); });
               }});
  c.push_back({"attention", [](std::uint64_t s) {
                 return op_case(s, {{2 * 3, 3 * 4}},
                                [](auto& in) { return ops::attention(in[0], 2, 3, 2); });
               }});
  c.push_back({"conv2d", [](std::uint64_t s) {
                 return op_case(s, {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}},
                                [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 1, 1); });
               }});
  c.push_back({"conv2d_strided", [](std::uint64_t s) {
                 return op_case(s, {{2, 2, 6, 6}, {3, 2, 1, 1}},
                                [](auto& in) { return ops::conv2d(in[0], in[1], Tensor(), 2, 0); });
               }});
  c.push_back({"batch_norm2d", [](std::uint64_t s) {
                 return op_case(s, {{3, 2, 3, 3}, {2}, {2}}, [](auto& in) {
                   std::vector<double> mean(2, 0.0), var(2, 1.0);
                   return ops::batch_norm2d(in[0], in[1], in[2], mean, var, true);
                 });
               }});
  c.push_back({"global_avg_pool", [](std::uint64_t s) {
                 return op_case(s, {{2, 3, 4, 4}}, [](auto& in) { return ops::global_avg_pool(in[0]); });
               }});
  c.push_back({"mean_tokens", [](std::uint64_t s) {
                 return op_case(s, {{6, 4}}, [](auto& in) { return ops::mean_tokens(in[0], 3); });
               }});
  c.push_back({"patchify", [](std::uint64_t s) {
                 return op_case(s, {{2, 3, 4, 4}}, [](auto& in) { return ops::patchify(in[0], 2); });
               }});
  c.push_back({"add_tiled", [](std::uint64_t s) {
                 return op_case(s, {{6, 4}, {3, 4}}, [](auto& in) { return ops::add_tiled(in[0], in[1]); });
               }});
  c.push_back({"cosine_rows", [](std::uint64_t s) {
                 return op_case(s, {{4, 5}, {4, 5}}, [](auto& in) { return ops::cosine_rows(in[0], in[1]); });
               }});
  c.push_back({"concat_cols", [](std::uint64_t s) {
                 return op_case(s, {{4}, {4}, {4}}, [](auto& in) { return ops::concat_cols(in); });
               }});
  c.push_back({"moon_loss", [](std::uint64_t s) {
                 return op_case(s, {{5, 6}, {5, 6}, {5, 6}}, [](auto& in) {
                   return ops::reshape(moon_loss(in[0], in[1], in[2], 0.5), {1});
                 });
               }});
  return c;
}

}  // namespace vitfl::oracles
