#pragma once

#include <vector>

#include "vea/rng.hpp"
#include "vea/tensor.hpp"
#include "vea/vit.hpp"

namespace vea {

struct TrainHyper {
  int64_t epochs = 30;
  int64_t batch_size = 100;
  double lr = 0.08;
  double momentum = 0.9;
  double min_accuracy = 0.90;  // eval gate
};

/// SGD-with-momentum training on cross-entropy. Throws TrainingError with the
/// final accuracy when the eval gate is missed.
ViTModel train_model(const ViTConfig& config, const Tensor& train_images,
                     const std::vector<int64_t>& train_labels,
                     const Tensor& eval_images,
                     const std::vector<int64_t>& eval_labels,
                     const TrainHyper& hyper, Rng rng);

/// Tape-free view: same config, detached parameter tensors (shared buffers).
ViTModel detached_view(const ViTModel& model);

double evaluate_accuracy(const ViTModel& model, const Tensor& images,
                         const std::vector<int64_t>& labels,
                         int64_t batch_size = 250);

/// Multinomial logistic regression on raw pixels; returns final train-set
/// accuracy. Used to confirm the dataset is not linearly trivial.
double train_linear_probe(const Tensor& images, const std::vector<int64_t>& labels,
                          Rng rng, int64_t epochs = 80, double lr = 0.5);

}  // namespace vea
