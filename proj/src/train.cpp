#include "vea/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vea/ops.hpp"

namespace vea {

namespace {

Tensor gather_rows(const Tensor& images, const std::vector<int64_t>& order,
                   int64_t start, int64_t count) {
  int64_t per = images.numel() / images.dim(0);
  std::vector<double> out(static_cast<size_t>(count * per));
  const double* src = images.data();
  for (int64_t i = 0; i < count; ++i) {
    int64_t idx = order[static_cast<size_t>(start + i)];
    std::copy(src + idx * per, src + (idx + 1) * per,
              out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape shape = images.shape();
  shape[0] = count;
  return Tensor::from_vector(std::move(shape), std::move(out));
}

}  // namespace

ViTModel detached_view(const ViTModel& model) {
  ViTModel view;
  view.config = model.config;
  view.params.reserve(model.params.size());
  for (const auto& [name, tensor] : model.params) {
    view.params.emplace_back(name, tensor.detach());
  }
  return view;
}

double evaluate_accuracy(const ViTModel& model, const Tensor& images,
                         const std::vector<int64_t>& labels, int64_t batch_size) {
  ViTModel view = detached_view(model);
  int64_t n = images.dim(0);
  if (n != static_cast<int64_t>(labels.size())) {
    throw ShapeError("evaluate_accuracy: label count mismatch");
  }
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  int64_t correct = 0;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t count = std::min(batch_size, n - start);
    Tensor batch = gather_rows(images, order, start, count);
    auto pred = argmax_rows(forward(view, batch));
    for (int64_t i = 0; i < count; ++i) {
      if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

ViTModel train_model(const ViTConfig& config, const Tensor& train_images,
                     const std::vector<int64_t>& train_labels,
                     const Tensor& eval_images,
                     const std::vector<int64_t>& eval_labels,
                     const TrainHyper& hyper, Rng rng) {
  config.validate();
  if (train_images.dim(0) != static_cast<int64_t>(train_labels.size())) {
    throw ShapeError("train_model: label count mismatch");
  }
  ViTModel model = init_params(config, rng.derive(0));
  model.set_requires_grad(true);

  std::vector<std::vector<double>> velocity;
  velocity.reserve(model.params.size());
  for (const auto& [name, t] : model.params) {
    velocity.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }

  int64_t n = train_images.dim(0);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = rng.derive(1);

  for (int64_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double lr = hyper.lr;
    if (epoch >= (hyper.epochs * 9) / 10) {
      lr *= 0.04;
    } else if (epoch >= (hyper.epochs * 7) / 10) {
      lr *= 0.2;
    }
    for (int64_t start = 0; start < n; start += hyper.batch_size) {
      int64_t count = std::min(hyper.batch_size, n - start);
      Tensor batch = gather_rows(train_images, order, start, count);
      std::vector<int64_t> batch_labels(static_cast<size_t>(count));
      for (int64_t i = 0; i < count; ++i) {
        batch_labels[static_cast<size_t>(i)] =
            train_labels[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
      }
      Tensor loss = cross_entropy(forward(model, batch), batch_labels);
      backward(loss);
      for (size_t pi = 0; pi < model.params.size(); ++pi) {
        Tensor& p = model.params[pi].second;
        if (!p.has_grad()) continue;
        Tensor g = p.grad();
        double* w = p.mutable_data();
        const double* gd = g.data();
        std::vector<double>& v = velocity[pi];
        for (int64_t i = 0; i < p.numel(); ++i) {
          v[static_cast<size_t>(i)] = hyper.momentum * v[static_cast<size_t>(i)] - lr * gd[i];
          w[i] += v[static_cast<size_t>(i)];
        }
        p.clear_grad();
      }
    }
  }

  model.set_requires_grad(false);
  double accuracy = evaluate_accuracy(model, eval_images, eval_labels);
  if (accuracy < hyper.min_accuracy) {
    throw TrainingError("training gate missed: eval accuracy " +
                        std::to_string(accuracy) + " < " +
                        std::to_string(hyper.min_accuracy));
  }
  return model;
}

double train_linear_probe(const Tensor& images, const std::vector<int64_t>& labels,
                          Rng rng, int64_t epochs, double lr) {
  int64_t n = images.dim(0);
  int64_t dim = images.numel() / n;
  int64_t classes = 1 + *std::max_element(labels.begin(), labels.end());
  Tensor x = reshape(images.detach(), {n, dim});
  Tensor w = Tensor::zeros({dim, classes}, /*requires_grad=*/true);
  Tensor bias = Tensor::zeros({classes}, /*requires_grad=*/true);

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int64_t batch = 200;
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double step = lr / (1.0 + 0.05 * static_cast<double>(epoch));
    for (int64_t start = 0; start < n; start += batch) {
      int64_t count = std::min(batch, n - start);
      Tensor xb = gather_rows(x, order, start, count);
      std::vector<int64_t> yb(static_cast<size_t>(count));
      for (int64_t i = 0; i < count; ++i) {
        yb[static_cast<size_t>(i)] = labels[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
      }
      Tensor loss = cross_entropy(add(matmul(xb, w), bias), yb);
      backward(loss);
      for (Tensor* p : {&w, &bias}) {
        if (!p->has_grad()) continue;
        Tensor g = p->grad();
        double* pd = p->mutable_data();
        const double* gd = g.data();
        for (int64_t i = 0; i < p->numel(); ++i) pd[i] -= step * gd[i];
        p->clear_grad();
      }
    }
  }

  auto pred = argmax_rows(add(matmul(reshape(images.detach(), {n, dim}), w.detach()),
                              bias.detach()));
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace vea
