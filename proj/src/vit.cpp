#include "vea/vit.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "vea/ops.hpp"
#include "vea/serialize.hpp"

namespace vea {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 ||
      depth <= 0 || num_heads <= 0 || num_classes <= 0 || mlp_ratio <= 0.0) {
    throw ConfigError("ViTConfig: all extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("ViTConfig: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("ViTConfig: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
}

int64_t ViTConfig::param_count() const {
  int64_t d = embed_dim, h = mlp_hidden();
  int64_t per_block = 2 * d            // ln1
                      + d * 3 * d + 3 * d  // qkv
                      + d * d + d          // attention output
                      + 2 * d              // ln2
                      + d * h + h          // mlp in
                      + h * d + d;         // mlp out
  return patch_dim() * d + d  // patch projection
         + d                  // class token
         + tokens() * d       // positional embedding
         + depth * per_block
         + 2 * d              // final ln
         + d * num_classes + num_classes;  // head
}

std::vector<std::pair<std::string, Shape>> parameter_spec(const ViTConfig& c) {
  std::vector<std::pair<std::string, Shape>> spec;
  int64_t d = c.embed_dim, h = c.mlp_hidden();
  spec.emplace_back("patch_proj.w", Shape{c.patch_dim(), d});
  spec.emplace_back("patch_proj.b", Shape{d});
  spec.emplace_back("cls_token", Shape{d});
  spec.emplace_back("pos_embed", Shape{c.tokens(), d});
  for (int64_t b = 0; b < c.depth; ++b) {
    std::string p = "block" + std::to_string(b) + ".";
    spec.emplace_back(p + "ln1.g", Shape{d});
    spec.emplace_back(p + "ln1.b", Shape{d});
    spec.emplace_back(p + "qkv.w", Shape{d, 3 * d});
    spec.emplace_back(p + "qkv.b", Shape{3 * d});
    spec.emplace_back(p + "attn_out.w", Shape{d, d});
    spec.emplace_back(p + "attn_out.b", Shape{d});
    spec.emplace_back(p + "ln2.g", Shape{d});
    spec.emplace_back(p + "ln2.b", Shape{d});
    spec.emplace_back(p + "mlp_in.w", Shape{d, h});
    spec.emplace_back(p + "mlp_in.b", Shape{h});
    spec.emplace_back(p + "mlp_out.w", Shape{h, d});
    spec.emplace_back(p + "mlp_out.b", Shape{d});
  }
  spec.emplace_back("final_ln.g", Shape{d});
  spec.emplace_back("final_ln.b", Shape{d});
  spec.emplace_back("head.w", Shape{d, c.num_classes});
  spec.emplace_back("head.b", Shape{c.num_classes});
  return spec;
}

Tensor& ViTModel::param(const std::string& name) {
  for (auto& [n, t] : params) {
    if (n == name) return t;
  }
  throw ConfigError("ViTModel: no parameter named '" + name + "'");
}

const Tensor& ViTModel::param(const std::string& name) const {
  for (const auto& [n, t] : params) {
    if (n == name) return t;
  }
  throw ConfigError("ViTModel: no parameter named '" + name + "'");
}

void ViTModel::set_requires_grad(bool flag) {
  for (auto& [n, t] : params) t.set_requires_grad(flag);
}

void ViTModel::clear_grads() {
  for (auto& [n, t] : params) t.clear_grad();
}

namespace {

bool is_weight(const std::string& name) {
  // Trainable matrices get truncated-normal init; biases zeros; norms identity.
  return name.ends_with(".w") || name == "cls_token" || name == "pos_embed";
}

bool is_norm_gain(const std::string& name) { return name.ends_with(".g"); }

}  // namespace

ViTModel init_params(const ViTConfig& config, Rng rng) {
  config.validate();
  ViTModel model;
  model.config = config;
  auto spec = parameter_spec(config);
  for (size_t i = 0; i < spec.size(); ++i) {
    const auto& [name, shape] = spec[i];
    int64_t n = shape_numel(shape);
    std::vector<double> values(static_cast<size_t>(n), 0.0);
    if (is_weight(name)) {
      Rng stream = rng.derive(i);
      for (auto& v : values) v = stream.trunc_normal(0.02);
    } else if (is_norm_gain(name)) {
      std::fill(values.begin(), values.end(), 1.0);
    }
    model.params.emplace_back(name, Tensor::from_vector(shape, std::move(values)));
  }
  return model;
}

namespace {

Tensor apply_hook(const std::function<Tensor(const Tensor&, int64_t)>& hook,
                  const Tensor& x, int64_t block) {
  Tensor y = hook(x, block);
  if (y.shape() != x.shape()) {
    throw ShapeError("interceptor changed tensor shape from " + shape_str(x.shape()) +
                     " to " + shape_str(y.shape()));
  }
  return y;
}

}  // namespace

Tensor forward(const ViTModel& model, const Tensor& images,
               const InterceptorSet& interceptors) {
  const ViTConfig& c = model.config;
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size) {
    throw ConfigError("forward: image shape " + shape_str(s) + " does not match config");
  }
  int64_t bsz = s[0], d = c.embed_dim, heads = c.num_heads, hd = c.head_dim();
  int64_t t = c.tokens();

  Tensor tok = add(matmul(extract_patches(images, c.patch_size), model.param("patch_proj.w")),
                   model.param("patch_proj.b"));
  Tensor cls = broadcast_to(reshape(model.param("cls_token"), {1, 1, d}), {bsz, 1, d});
  tok = concat_axis(cls, tok, 1);
  tok = add(tok, model.param("pos_embed"));

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int64_t b = 0; b < c.depth; ++b) {
    std::string p = "block" + std::to_string(b) + ".";
    Tensor h = layernorm(tok, model.param(p + "ln1.g"), model.param(p + "ln1.b"));
    Tensor qkv = add(matmul(h, model.param(p + "qkv.w")), model.param(p + "qkv.b"));
    auto split_heads = [&](int64_t offset) {
      Tensor part = slice_axis(qkv, 2, offset, d);
      return transpose_dims(reshape(part, {bsz, t, heads, hd}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(0);
    Tensor k = split_heads(d);
    Tensor v = split_heads(2 * d);
    Tensor attn = softmax(scale(matmul(q, k, /*transpose_b=*/true), attn_scale), -1);
    if (interceptors.attention_hook) attn = apply_hook(interceptors.attention_hook, attn, b);
    Tensor ctx = reshape(transpose_dims(matmul(attn, v), {0, 2, 1, 3}), {bsz, t, d});
    ctx = add(matmul(ctx, model.param(p + "attn_out.w")), model.param(p + "attn_out.b"));
    tok = add(tok, ctx);

    Tensor h2 = layernorm(tok, model.param(p + "ln2.g"), model.param(p + "ln2.b"));
    Tensor m = add(matmul(gelu(add(matmul(h2, model.param(p + "mlp_in.w")),
                                   model.param(p + "mlp_in.b"))),
                          model.param(p + "mlp_out.w")),
                   model.param(p + "mlp_out.b"));
    if (interceptors.mlp_hook) m = apply_hook(interceptors.mlp_hook, m, b);
    tok = add(tok, m);
  }

  Tensor hf = layernorm(tok, model.param("final_ln.g"), model.param("final_ln.b"));
  Tensor cls_out = reshape(slice_axis(hf, 1, 0, 1), {bsz, d});
  return add(matmul(cls_out, model.param("head.w")), model.param("head.b"));
}

void save_checkpoint(const ViTModel& model, const std::string& path) {
  std::ostringstream body;
  std::ostringstream manifest;
  nlohmann::json cfg{{"image_size", model.config.image_size},
                     {"patch_size", model.config.patch_size},
                     {"channels", model.config.channels},
                     {"embed_dim", model.config.embed_dim},
                     {"depth", model.config.depth},
                     {"num_heads", model.config.num_heads},
                     {"mlp_ratio", model.config.mlp_ratio},
                     {"num_classes", model.config.num_classes}};
  manifest << "config " << cfg.dump() << "\n";
  for (const auto& [name, tensor] : model.params) {
    int64_t offset = static_cast<int64_t>(body.tellp());
    manifest << name;
    const Shape& s = tensor.shape();
    manifest << " ";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) manifest << ",";
      manifest << s[i];
    }
    manifest << " " << offset << "\n";
    write_tensor(body, tensor);
  }
  atomic_write_file(path, body.str());
  atomic_write_file(path + ".manifest", manifest.str());
}

ViTModel load_checkpoint(const std::string& path) {
  if (!file_exists(path) || !file_exists(path + ".manifest")) {
    throw IoError("checkpoint missing: " + path);
  }
  std::istringstream manifest(read_text_file(path + ".manifest"));
  std::string line;
  if (!std::getline(manifest, line) || !line.starts_with("config ")) {
    throw IoError("checkpoint manifest missing config line: " + path);
  }
  ViTConfig config;
  try {
    auto cfg = nlohmann::json::parse(line.substr(7));
    config.image_size = cfg.at("image_size").get<int64_t>();
    config.patch_size = cfg.at("patch_size").get<int64_t>();
    config.channels = cfg.at("channels").get<int64_t>();
    config.embed_dim = cfg.at("embed_dim").get<int64_t>();
    config.depth = cfg.at("depth").get<int64_t>();
    config.num_heads = cfg.at("num_heads").get<int64_t>();
    config.mlp_ratio = cfg.at("mlp_ratio").get<double>();
    config.num_classes = cfg.at("num_classes").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint manifest config unreadable: ") + e.what());
  }
  config.validate();

  std::map<std::string, int64_t> offsets;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_csv;
    int64_t offset;
    if (!(ls >> name >> shape_csv >> offset)) {
      throw IoError("checkpoint manifest: malformed line '" + line + "'");
    }
    offsets[name] = offset;
  }

  std::ifstream body(path, std::ios::binary);
  if (!body) throw IoError("cannot open checkpoint body: " + path);

  ViTModel model;
  model.config = config;
  for (const auto& [name, shape] : parameter_spec(config)) {
    auto it = offsets.find(name);
    if (it == offsets.end()) {
      throw IoError("checkpoint " + path + ": missing parameter '" + name + "'");
    }
    body.clear();
    body.seekg(it->second);
    Tensor t;
    try {
      t = read_tensor(body);
    } catch (const IoError& e) {
      throw IoError("checkpoint " + path + ": parameter '" + name + "': " + e.what());
    }
    if (t.shape() != shape) {
      throw ConfigError("checkpoint " + path + ": parameter '" + name + "' has shape " +
                        shape_str(t.shape()) + ", config requires " + shape_str(shape));
    }
    model.params.emplace_back(name, std::move(t));
  }
  return model;
}

}  // namespace vea
