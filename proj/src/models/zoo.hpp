#pragma once

#include <cstdint>
#include <memory>

#include "vitfl/model.hpp"

namespace vitfl::zoo {

std::unique_ptr<Model> make_tiny_vit(const ModelSpec& spec, std::uint64_t seed);
std::unique_ptr<Model> make_tiny_cnn(const ModelSpec& spec, std::uint64_t seed);
std::unique_ptr<Model> make_tiny_mlp(const ModelSpec& spec, std::uint64_t seed);

}  // namespace vitfl::zoo
