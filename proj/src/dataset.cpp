#include "vea/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vea/serialize.hpp"

namespace vea {

void DatasetSpec::validate() const {
  if (image_size < 16 || channels != 3 || num_classes != 10) {
    throw ConfigError("DatasetSpec: generator supports 3-channel 10-class images of size >= 16");
  }
  if (train_count <= 0 || eval_candidates <= 0 || bo_candidates <= 0) {
    throw ConfigError("DatasetSpec: all split counts must be positive");
  }
  if (noise_std < 0.0 || color_jitter < 0.0) {
    throw ConfigError("DatasetSpec: noise parameters must be nonnegative");
  }
}

Tensor Dataset::gather_images(const std::vector<int64_t>& indices) const {
  int64_t per = images.numel() / images.dim(0);
  std::vector<double> out(static_cast<size_t>(static_cast<int64_t>(indices.size()) * per));
  const double* src = images.data();
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t idx = indices[i];
    if (idx < 0 || idx >= images.dim(0)) throw ShapeError("gather_images: index out of range");
    std::copy(src + idx * per, src + (idx + 1) * per,
              out.begin() + static_cast<std::ptrdiff_t>(static_cast<int64_t>(i) * per));
  }
  Shape shape = images.shape();
  shape[0] = static_cast<int64_t>(indices.size());
  return Tensor::from_vector(std::move(shape), std::move(out));
}

std::vector<int64_t> Dataset::gather_labels(const std::vector<int64_t>& indices) const {
  std::vector<int64_t> out;
  out.reserve(indices.size());
  for (int64_t idx : indices) out.push_back(labels[static_cast<size_t>(idx)]);
  return out;
}

namespace {

enum ShapeKind { kSquare = 0, kDisk, kTriangle, kHStripes, kVStripes };

struct Color {
  double r, g, b;
};

// Two palettes shared across all five shapes, so color alone decides only
// half the label and the probe has to pick up geometry.
constexpr Color kPalettes[2] = {{0.85, 0.25, 0.25}, {0.25, 0.35, 0.85}};

void render_image(double* out, int64_t hw, int64_t label, const DatasetSpec& spec, Rng& rng) {
  int shape = static_cast<int>(label / 2);
  int palette = static_cast<int>(label % 2);

  double bg = rng.uniform(0.40, 0.65);
  Color bgc{bg + rng.uniform(-0.05, 0.05), bg + rng.uniform(-0.05, 0.05),
            bg + rng.uniform(-0.05, 0.05)};
  Color fg = kPalettes[palette];
  double j = spec.color_jitter;
  fg.r += rng.uniform(-j, j);
  fg.g += rng.uniform(-j, j);
  fg.b += rng.uniform(-j, j);

  double scale = static_cast<double>(hw) / 32.0;
  double cx = rng.uniform(10.0, 22.0) * scale;
  double cy = rng.uniform(10.0, 22.0) * scale;
  double r = rng.uniform(6.5, 10.5) * scale;
  int64_t stripe = std::max<int64_t>(2, static_cast<int64_t>(std::llround(3.0 * scale)));

  auto inside = [&](int64_t y, int64_t x) -> bool {
    double dx = static_cast<double>(x) - cx;
    double dy = static_cast<double>(y) - cy;
    switch (shape) {
      case kSquare:
        return std::fabs(dx) <= r * 0.9 && std::fabs(dy) <= r * 0.9;
      case kDisk:
        return dx * dx + dy * dy <= r * r;
      case kTriangle: {
        if (dy < -r || dy > r) return false;
        double half = (dy + r) / (2.0 * r) * r;
        return std::fabs(dx) <= half;
      }
      case kHStripes: {
        if (std::fabs(dx) > r || std::fabs(dy) > r) return false;
        return ((static_cast<int64_t>(dy + r) / stripe) % 2) == 0;
      }
      case kVStripes: {
        if (std::fabs(dx) > r || std::fabs(dy) > r) return false;
        return ((static_cast<int64_t>(dx + r) / stripe) % 2) == 0;
      }
      default:
        return false;
    }
  };

  for (int64_t y = 0; y < hw; ++y) {
    for (int64_t x = 0; x < hw; ++x) {
      bool fgp = inside(y, x);
      double base[3] = {fgp ? fg.r : bgc.r, fgp ? fg.g : bgc.g, fgp ? fg.b : bgc.b};
      for (int64_t c = 0; c < 3; ++c) {
        double v = base[c] + rng.normal() * spec.noise_std;
        out[c * hw * hw + y * hw + x] = std::min(std::max(v, 0.0), 1.0);
      }
    }
  }
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec, Rng rng) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  int64_t n = spec.total();
  int64_t hw = spec.image_size;
  int64_t per = spec.channels * hw * hw;
  std::vector<double> images(static_cast<size_t>(n * per));
  data.labels.resize(static_cast<size_t>(n));

  for (int64_t i = 0; i < n; ++i) {
    // Round-robin labels keep every split's class marginal uniform (+-1).
    int64_t label = i % spec.num_classes;
    data.labels[static_cast<size_t>(i)] = label;
    Rng image_rng = rng.derive(static_cast<uint64_t>(i));
    render_image(images.data() + i * per, hw, label, spec, image_rng);
  }
  data.images = Tensor::from_vector({n, spec.channels, hw, hw}, std::move(images));

  int64_t at = 0;
  auto take = [&](int64_t count) {
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = at + i;
    at += count;
    return idx;
  };
  data.train_idx = take(spec.train_count);
  data.eval_candidate_idx = take(spec.eval_candidates);
  data.bo_candidate_idx = take(spec.bo_candidates);
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) {
  nlohmann::json header;
  header["image_size"] = data.spec.image_size;
  header["channels"] = data.spec.channels;
  header["num_classes"] = data.spec.num_classes;
  header["train_count"] = data.spec.train_count;
  header["eval_candidates"] = data.spec.eval_candidates;
  header["bo_candidates"] = data.spec.bo_candidates;
  header["noise_std"] = data.spec.noise_std;
  header["color_jitter"] = data.spec.color_jitter;
  header["labels"] = data.labels;
  std::ostringstream body;
  body << header.dump() << "\n";
  write_tensor(body, data.images);
  atomic_write_file(path, body.str());
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset: " + path);
  std::string header_line;
  if (!std::getline(is, header_line)) throw IoError("dataset header missing: " + path);
  Dataset data;
  try {
    auto header = nlohmann::json::parse(header_line);
    data.spec.image_size = header.at("image_size").get<int64_t>();
    data.spec.channels = header.at("channels").get<int64_t>();
    data.spec.num_classes = header.at("num_classes").get<int64_t>();
    data.spec.train_count = header.at("train_count").get<int64_t>();
    data.spec.eval_candidates = header.at("eval_candidates").get<int64_t>();
    data.spec.bo_candidates = header.at("bo_candidates").get<int64_t>();
    data.spec.noise_std = header.at("noise_std").get<double>();
    data.spec.color_jitter = header.at("color_jitter").get<double>();
    data.labels = header.at("labels").get<std::vector<int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset header unreadable: ") + e.what());
  }
  data.images = read_tensor(is);
  if (data.images.dim(0) != static_cast<int64_t>(data.labels.size()) ||
      data.images.dim(0) != data.spec.total()) {
    throw IoError("dataset " + path + ": size mismatch between header and payload");
  }
  int64_t at = 0;
  auto take = [&](int64_t count) {
    std::vector<int64_t> idx(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = at + i;
    at += count;
    return idx;
  };
  data.train_idx = take(data.spec.train_count);
  data.eval_candidate_idx = take(data.spec.eval_candidates);
  data.bo_candidate_idx = take(data.spec.bo_candidates);
  return data;
}

}  // namespace vea
