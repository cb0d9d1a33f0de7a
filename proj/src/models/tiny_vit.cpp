#include <string>

#include "vitfl/ops.hpp"
#include "zoo.hpp"

namespace vitfl::zoo {

namespace {

// Pre-norm transformer encoder over non-overlapping patches, mean-pooled over
// tokens (no class token).
//
// layer indices: 0 = patch embedding + positional embedding,
//                1..num_blocks = encoder blocks,
//                num_blocks+1 = final norm and heads.
class TinyVit final : public Model {
 public:
  TinyVit(const ModelSpec& spec, std::uint64_t seed) : Model(spec) {
    Rng rng(seed);
    const std::size_t d = spec.embed_dim, t = spec.num_tokens();
    const std::size_t patch_dim = spec.channels * spec.patch_size * spec.patch_size;
    const std::size_t hidden = d * spec.mlp_ratio;

    add_param("embed.weight", {d, patch_dim}, 0, trunc_normal(d * patch_dim, 0.02, rng));
    add_param("embed.bias", {d}, 0, std::vector<double>(d, 0.0));
    add_param("embed.pos", {t, d}, 0, trunc_normal(t * d, 0.02, rng));
    add_capture_point("embed");

    for (std::size_t b = 0; b < spec.num_blocks; ++b) {
      const std::string p = block_prefix(b);
      const std::size_t layer = b + 1;
      add_param(p + "norm1.weight", {d}, layer, std::vector<double>(d, 1.0));
      add_param(p + "norm1.bias", {d}, layer, std::vector<double>(d, 0.0));
      add_param(p + "attn.qkv.weight", {3 * d, d}, layer, trunc_normal(3 * d * d, 0.02, rng));
      add_param(p + "attn.qkv.bias", {3 * d}, layer, std::vector<double>(3 * d, 0.0));
      add_param(p + "attn.proj.weight", {d, d}, layer, trunc_normal(d * d, 0.02, rng));
      add_param(p + "attn.proj.bias", {d}, layer, std::vector<double>(d, 0.0));
      add_param(p + "norm2.weight", {d}, layer, std::vector<double>(d, 1.0));
      add_param(p + "norm2.bias", {d}, layer, std::vector<double>(d, 0.0));
      add_param(p + "mlp.fc1.weight", {hidden, d}, layer, trunc_normal(hidden * d, 0.02, rng));
      add_param(p + "mlp.fc1.bias", {hidden}, layer, std::vector<double>(hidden, 0.0));
      add_param(p + "mlp.fc2.weight", {d, hidden}, layer, trunc_normal(d * hidden, 0.02, rng));
      add_param(p + "mlp.fc2.bias", {d}, layer, std::vector<double>(d, 0.0));
      add_capture_point("block" + std::to_string(b));
    }
    const std::size_t last = spec.num_blocks + 1;
    add_param("norm.weight", {d}, last, std::vector<double>(d, 1.0));
    add_param("norm.bias", {d}, last, std::vector<double>(d, 0.0));
    add_capture_point("pool");
    add_heads(d, last, true, rng);
  }

 protected:
  Tensor backbone(const Tensor& batch, Mode, CaptureSink& sink) override {
    const ModelSpec& s = spec();
    const std::size_t m = batch.dim(0), t = s.num_tokens();
    Tensor x = ops::patchify(batch, s.patch_size);
    x = ops::linear(x, param("embed.weight"), param("embed.bias"));
    x = ops::add_tiled(x, param("embed.pos"));
    sink.record("embed", x, m);

    for (std::size_t b = 0; b < s.num_blocks; ++b) {
      const std::string p = block_prefix(b);
      Tensor h = ops::layer_norm(x, param(p + "norm1.weight"), param(p + "norm1.bias"));
      h = ops::linear(h, param(p + "attn.qkv.weight"), param(p + "attn.qkv.bias"));
      h = ops::attention(h, m, t, s.num_heads);
      h = ops::linear(h, param(p + "attn.proj.weight"), param(p + "attn.proj.bias"));
      x = ops::add(x, h);
      h = ops::layer_norm(x, param(p + "norm2.weight"), param(p + "norm2.bias"));
      h = ops::gelu(ops::linear(h, param(p + "mlp.fc1.weight"), param(p + "mlp.fc1.bias")));
      h = ops::linear(h, param(p + "mlp.fc2.weight"), param(p + "mlp.fc2.bias"));
      x = ops::add(x, h);
      sink.record("block" + std::to_string(b), x, m);
    }
    x = ops::layer_norm(x, param("norm.weight"), param("norm.bias"));
    Tensor pooled = ops::mean_tokens(x, t);
    sink.record("pool", pooled, m);
    return pooled;
  }

 private:
  static std::string block_prefix(std::size_t b) { return "blocks." + std::to_string(b) + "."; }
};

}  // namespace

std::unique_ptr<Model> make_tiny_vit(const ModelSpec& spec, std::uint64_t seed) {
  return std::make_unique<TinyVit>(spec, seed);
}

}  // namespace vitfl::zoo
