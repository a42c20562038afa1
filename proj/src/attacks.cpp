#include "vea/attacks.hpp"

#include <cmath>

#include "vea/ops.hpp"

namespace vea {

void AttackConfig::validate() const {
  if (epsilon <= 0.0) throw ConfigError("AttackConfig: epsilon must be > 0");
  if (iterations < 1) throw ConfigError("AttackConfig: iterations must be >= 1");
  if (q < 1.0) throw ConfigError("AttackConfig: q must be >= 1");
  if (mu < 0.0) throw ConfigError("AttackConfig: mu must be >= 0");
  if (loop < 1) throw ConfigError("AttackConfig: loop must be >= 1");
  if (b < 0.0) throw ConfigError("AttackConfig: b must be >= 0");
  if (di_prob < 0.0 || di_prob > 1.0) throw ConfigError("AttackConfig: di_prob must be in [0,1]");
  if (di_scale_max < 1.0) throw ConfigError("AttackConfig: di_scale_max must be >= 1");
  if (ti_kernel_size < 1 || ti_kernel_size % 2 == 0) {
    throw ConfigError("AttackConfig: ti_kernel_size must be odd");
  }
  if (ti_sigma <= 0.0) throw ConfigError("AttackConfig: ti_sigma must be > 0");
}

PerturbationState PerturbationState::init(const Tensor& x_clean, double epsilon) {
  if (epsilon <= 0.0) throw ConfigError("PerturbationState: epsilon must be > 0");
  PerturbationState st;
  st.x_clean = x_clean.detach();
  st.x_adv = x_clean.detach();
  st.g_momentum = Tensor::zeros(x_clean.shape());
  st.epsilon = epsilon;
  st.iteration = 0;
  return st;
}

void PerturbationState::check_invariants() const {
  const double budget = epsilon + 1e-9;
  const double* adv = x_adv.data();
  const double* clean = x_clean.data();
  int64_t n = x_adv.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!(std::fabs(adv[i] - clean[i]) <= budget)) {
      throw InvariantError("perturbation exceeds the L-inf budget at iteration " +
                           std::to_string(iteration));
    }
    if (!(adv[i] >= 0.0 && adv[i] <= 1.0)) {
      throw InvariantError("adversarial pixel outside [0,1] at iteration " +
                           std::to_string(iteration));
    }
  }
}

PerturbationState fgsm_step(const PerturbationState& state, const Tensor& grad,
                            double alpha) {
  if (grad.shape() != state.x_adv.shape()) {
    throw ShapeError("fgsm_step: gradient shape " + shape_str(grad.shape()) +
                     " does not match images " + shape_str(state.x_adv.shape()));
  }
  PerturbationState next = state;
  int64_t n = state.x_adv.numel();
  std::vector<double> out(static_cast<size_t>(n));
  const double* x = state.x_adv.data();
  const double* xc = state.x_clean.data();
  const double* g = grad.data();
  const double eps = state.epsilon;
  for (int64_t i = 0; i < n; ++i) {
    double step = g[i] > 0.0 ? alpha : (g[i] < 0.0 ? -alpha : 0.0);
    double v = x[i] + step;
    v = std::min(std::max(v, xc[i] - eps), xc[i] + eps);
    v = std::min(std::max(v, 0.0), 1.0);
    out[static_cast<size_t>(i)] = v;
  }
  next.x_adv = Tensor::from_vector(state.x_adv.shape(), std::move(out));
  next.iteration = state.iteration + 1;
  next.check_invariants();
  return next;
}

Tensor momentum_update(const Tensor& g_prev, const Tensor& grad, double mu) {
  if (g_prev.shape() != grad.shape()) {
    throw ShapeError("momentum_update: shape mismatch");
  }
  int64_t n = grad.numel();
  int64_t batch = (grad.ndim() == 4) ? grad.dim(0) : 1;
  int64_t per = n / batch;
  const double* gp = g_prev.data();
  const double* g = grad.data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t b = 0; b < batch; ++b) {
    const double* gs = g + b * per;
    double norm = 0.0;
    for (int64_t i = 0; i < per; ++i) norm += std::fabs(gs[i]);
    double* os = out.data() + b * per;
    const double* ps = gp + b * per;
    if (norm > 0.0) {
      for (int64_t i = 0; i < per; ++i) os[i] = mu * ps[i] + gs[i] / norm;
    } else {
      for (int64_t i = 0; i < per; ++i) os[i] = mu * ps[i];
    }
  }
  return Tensor::from_vector(grad.shape(), std::move(out));
}

Tensor di_transform(const Tensor& images, double di_prob, double di_scale_max,
                    Rng& rng) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[2] != s[3]) {
    throw ShapeError("di_transform: expects square [B,C,H,H] images");
  }
  if (di_prob < 0.0 || di_prob > 1.0) throw ConfigError("di_transform: bad di_prob");
  if (di_scale_max < 1.0) throw ConfigError("di_transform: di_scale_max must be >= 1");
  int64_t h = s[2];
  if (rng.next_double() >= di_prob) return images;
  int64_t target = static_cast<int64_t>(std::floor(di_scale_max * static_cast<double>(h)));
  int64_t rnd = (target > h) ? rng.uniform_int(h, target) : h;
  Tensor resized = bilinear_resize(images, rnd, rnd);
  int64_t slack = target - rnd;
  int64_t top = slack > 0 ? rng.uniform_int(0, slack + 1) : 0;
  int64_t left = slack > 0 ? rng.uniform_int(0, slack + 1) : 0;
  Tensor padded = pad2d(resized, top, left, target, target);
  return bilinear_resize(padded, h, h);
}

Tensor gaussian_kernel2d(int64_t size, double sigma) {
  if (size < 1 || size % 2 == 0) throw ConfigError("gaussian_kernel2d: size must be odd");
  if (sigma <= 0.0) throw ConfigError("gaussian_kernel2d: sigma must be > 0");
  int64_t c = size / 2;
  std::vector<double> k(static_cast<size_t>(size * size));
  double total = 0.0;
  for (int64_t i = 0; i < size; ++i) {
    for (int64_t j = 0; j < size; ++j) {
      double di = static_cast<double>(i - c), dj = static_cast<double>(j - c);
      double v = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      k[static_cast<size_t>(i * size + j)] = v;
      total += v;
    }
  }
  for (auto& v : k) v /= total;
  return Tensor::from_vector({size, size}, std::move(k));
}

Tensor ti_smooth(const Tensor& grad, int64_t kernel_size, double sigma) {
  return conv2d_fixed_kernel(grad, gaussian_kernel2d(kernel_size, sigma));
}

}  // namespace vea
