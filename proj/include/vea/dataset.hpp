#pragma once

#include <string>
#include <vector>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"

namespace vea {

struct DatasetSpec {
  int64_t image_size = 32;
  int64_t channels = 3;
  int64_t num_classes = 10;
  int64_t train_count = 3000;
  int64_t eval_candidates = 600;  // filtered down to the attack set
  int64_t bo_candidates = 2400;   // filtered down to the BO pool
  double noise_std = 0.30;
  double color_jitter = 0.14;

  void validate() const;
  int64_t total() const { return train_count + eval_candidates + bo_candidates; }
};

/// Synthetic 10-class task: five shape families x two palettes, with jittered
/// geometry, per-image color jitter and pixel noise. Split tags are index
/// ranges into one image tensor; the splits are disjoint by construction.
struct Dataset {
  DatasetSpec spec;
  Tensor images;  // [N, C, H, W] in [0,1]
  std::vector<int64_t> labels;
  std::vector<int64_t> train_idx;
  std::vector<int64_t> eval_candidate_idx;
  std::vector<int64_t> bo_candidate_idx;

  Tensor gather_images(const std::vector<int64_t>& indices) const;
  std::vector<int64_t> gather_labels(const std::vector<int64_t>& indices) const;
};

Dataset make_dataset(const DatasetSpec& spec, Rng rng);

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace vea
