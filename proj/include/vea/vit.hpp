#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"

namespace vea {

struct ViTConfig {
  int64_t image_size = 32;
  int64_t patch_size = 8;
  int64_t channels = 3;
  int64_t embed_dim = 64;
  int64_t depth = 4;
  int64_t num_heads = 4;
  double mlp_ratio = 4.0;
  int64_t num_classes = 10;

  void validate() const;
  int64_t grid() const { return image_size / patch_size; }
  int64_t patch_tokens() const { return grid() * grid(); }
  int64_t tokens() const { return patch_tokens() + 1; }  // + class token
  int64_t patch_dim() const { return channels * patch_size * patch_size; }
  int64_t head_dim() const { return embed_dim / num_heads; }
  int64_t mlp_hidden() const {
    return static_cast<int64_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
  }
  /// Closed-form parameter count for this configuration.
  int64_t param_count() const;

  bool operator==(const ViTConfig&) const = default;
};

/// Small pre-norm Vision Transformer: patch embed -> depth x [LN, MSA,
/// residual; LN, MLP, residual] -> final LN -> class-token head.
struct ViTModel {
  ViTConfig config;
  std::vector<std::pair<std::string, Tensor>> params;  // fixed, named order

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  void set_requires_grad(bool flag);
  void clear_grads();
};

/// Forward-time interception points. Hooks receive the tensor and the block
/// index and must return a same-shape tensor that stays on the tape.
struct InterceptorSet {
  /// Applied to each block's post-softmax attention scores [B, H, T, T].
  std::function<Tensor(const Tensor&, int64_t)> attention_hook;
  /// Applied to each block's MLP output [B, T, D] before the residual add.
  std::function<Tensor(const Tensor&, int64_t)> mlp_hook;

  bool empty() const { return !attention_hook && !mlp_hook; }
};

/// Expected parameter names and shapes, in storage order.
std::vector<std::pair<std::string, Shape>> parameter_spec(const ViTConfig& config);

ViTModel init_params(const ViTConfig& config, Rng rng);

/// Logits [B, num_classes], differentiable w.r.t. images when requested.
Tensor forward(const ViTModel& model, const Tensor& images,
               const InterceptorSet& interceptors = {});

void save_checkpoint(const ViTModel& model, const std::string& path);
ViTModel load_checkpoint(const std::string& path);

}  // namespace vea
