#include <string>

#include "vitfl/ops.hpp"
#include "zoo.hpp"

namespace vitfl::zoo {

namespace {

// Flatten -> [linear -> relu] per hidden width. Layer i is hidden layer i;
// the heads sit on the last layer index.
class TinyMlp final : public Model {
 public:
  TinyMlp(const ModelSpec& spec, std::uint64_t seed) : Model(spec) {
    Rng rng(seed);
    std::size_t in = spec.input_size();
    for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) {
      const std::size_t out = spec.hidden_widths[i];
      add_param(name(i, "weight"), {out, in}, i, he_normal(out * in, in, rng));
      add_param(name(i, "bias"), {out}, i, std::vector<double>(out, 0.0));
      add_capture_point("hidden" + std::to_string(i));
      in = out;
    }
    add_heads(in, spec.hidden_widths.size(), false, rng);
  }

 protected:
  Tensor backbone(const Tensor& batch, Mode, CaptureSink& sink) override {
    const std::size_t m = batch.dim(0);
    Tensor x = ops::reshape(batch, {m, spec().input_size()});
    for (std::size_t i = 0; i < spec().hidden_widths.size(); ++i) {
      x = ops::relu(ops::linear(x, param(name(i, "weight")), param(name(i, "bias"))));
      sink.record("hidden" + std::to_string(i), x, m);
    }
    return x;
  }

 private:
  static std::string name(std::size_t i, const char* what) {
    return "fc" + std::to_string(i) + "." + what;
  }
};

}  // namespace

std::unique_ptr<Model> make_tiny_mlp(const ModelSpec& spec, std::uint64_t seed) {
  return std::make_unique<TinyMlp>(spec, seed);
}

}  // namespace vitfl::zoo
