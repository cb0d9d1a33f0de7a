#include <string>

#include "vitfl/ops.hpp"
#include "zoo.hpp"

namespace vitfl::zoo {

namespace {

// Pre-activation residual network:
//   stem: conv3x3
//   block: a = relu(bn1(x)); h = conv3x3(a, stride); h = conv3x3(relu(bn2(h)))
//          out = shortcut + h, shortcut = x or conv1x1(a, stride) on a
//          channel/stride change
//   head: relu(bn(x)) -> global average pool
// Batch-norm running statistics are Buffer parameters and are averaged by the
// server like every other parameter.
//
// layer indices: 0 = stem, 1.. = residual blocks in order, last = final norm
// and heads.
class TinyCnn final : public Model {
 public:
  TinyCnn(const ModelSpec& spec, std::uint64_t seed) : Model(spec) {
    Rng rng(seed);
    const std::size_t c0 = spec.base_channels;
    add_param("stem.weight", {c0, spec.channels, 3, 3}, 0,
              he_normal(c0 * spec.channels * 9, spec.channels * 9, rng));
    add_capture_point("stem");

    std::size_t in = c0, layer = 1;
    for (std::size_t s = 0; s < spec.num_stages; ++s) {
      const std::size_t out = c0 << s;
      for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
        const std::string p = prefix(s, b);
        add_bn(p + "bn1", in, layer);
        add_param(p + "conv1.weight", {out, in, 3, 3}, layer, he_normal(out * in * 9, in * 9, rng));
        add_bn(p + "bn2", out, layer);
        add_param(p + "conv2.weight", {out, out, 3, 3}, layer, he_normal(out * out * 9, out * 9, rng));
        if (in != out || stride(s, b) != 1)
          add_param(p + "shortcut.weight", {out, in, 1, 1}, layer, he_normal(out * in, in, rng));
        in = out;
        ++layer;
      }
      add_capture_point("stage" + std::to_string(s));
    }
    add_bn("norm", in, layer);
    add_capture_point("pool");
    add_heads(in, layer, false, rng);
  }

 protected:
  Tensor backbone(const Tensor& batch, Mode mode, CaptureSink& sink) override {
    const ModelSpec& s = spec();
    const std::size_t m = batch.dim(0);
    const bool train = mode == Mode::Train;
    const Tensor none;
    Tensor x = ops::conv2d(batch, param("stem.weight"), none, 1, 1);
    sink.record("stem", x, m);
    for (std::size_t st = 0; st < s.num_stages; ++st) {
      for (std::size_t b = 0; b < s.blocks_per_stage; ++b) {
        const std::string p = prefix(st, b);
        Tensor a = ops::relu(bn(p + "bn1", x, train));
        Tensor shortcut = x;
        if (has_param(p + "shortcut.weight"))
          shortcut = ops::conv2d(a, param(p + "shortcut.weight"), none, stride(st, b), 0);
        Tensor h = ops::conv2d(a, param(p + "conv1.weight"), none, stride(st, b), 1);
        h = ops::relu(bn(p + "bn2", h, train));
        h = ops::conv2d(h, param(p + "conv2.weight"), none, 1, 1);
        x = ops::add(shortcut, h);
      }
      sink.record("stage" + std::to_string(st), x, m);
    }
    x = ops::relu(bn("norm", x, train));
    Tensor pooled = ops::global_avg_pool(x);
    sink.record("pool", pooled, m);
    return pooled;
  }

 private:
  static std::string prefix(std::size_t s, std::size_t b) {
    return "stages." + std::to_string(s) + "." + std::to_string(b) + ".";
  }
  static std::size_t stride(std::size_t s, std::size_t b) { return (s > 0 && b == 0) ? 2 : 1; }

  bool has_param(const std::string& name) const {
    for (const auto& p : parameters())
      if (p.name == name) return true;
    return false;
  }

  void add_bn(const std::string& p, std::size_t c, std::size_t layer) {
    add_param(p + ".weight", {c}, layer, std::vector<double>(c, 1.0));
    add_param(p + ".bias", {c}, layer, std::vector<double>(c, 0.0));
    add_param(p + ".running_mean", {c}, layer, std::vector<double>(c, 0.0), ParamKind::Buffer);
    add_param(p + ".running_var", {c}, layer, std::vector<double>(c, 1.0), ParamKind::Buffer);
  }

  Tensor bn(const std::string& p, const Tensor& x, bool train) {
    return ops::batch_norm2d(x, param(p + ".weight"), param(p + ".bias"),
                             param(p + ".running_mean").mutable_data(),
                             param(p + ".running_var").mutable_data(), train);
  }
};

}  // namespace

std::unique_ptr<Model> make_tiny_cnn(const ModelSpec& spec, std::uint64_t seed) {
  return std::make_unique<TinyCnn>(spec, seed);
}

}  // namespace vitfl::zoo
