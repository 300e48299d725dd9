#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "geoseg/tensor.hpp"

namespace geoseg {

struct SgdConfig {
  double learning_rate = 1e-3;
  double momentum = 0.99;
  double weight_decay = 5e-4;
  std::size_t lr_halving_period_iters = 5000;  // 0 disables halving
  std::size_t minibatch = 1;
  double clip_norm = 0;  // rescale the global gradient to at most this L2 norm; 0 disables

  void validate() const {
    if (!(learning_rate >= 0) || !(momentum >= 0) || !(weight_decay >= 0))
      fail(ErrorKind::config, "sgd: rates must be nonnegative");
    if (!(momentum < 1)) fail(ErrorKind::config, "sgd: momentum must be < 1");
    if (!(clip_norm >= 0)) fail(ErrorKind::config, "sgd: clip norm must be nonnegative");
    if (minibatch == 0) fail(ErrorKind::config, "sgd: minibatch must be >= 1");
  }

  // lr * 0.5^floor(iteration / period)
  double learning_rate_at(std::size_t iteration) const {
    if (lr_halving_period_iters == 0) return learning_rate;
    return learning_rate * std::pow(0.5, static_cast<double>(iteration / lr_halving_period_iters));
  }
};

// Momentum SGD with L2 weight decay:
//   v <- m*v - lr_t*(g + wd*p);  p <- p + v
// Velocity buffers are created on first use and matched to params by position.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const SgdConfig& config() const { return cfg_; }

  void step(std::span<DiffTensor> params, std::size_t iteration) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (const auto& p : params) velocity_.emplace_back(p.shape());
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!params[k].grad().all_finite())
        fail(ErrorKind::numeric, "sgd: non-finite gradient in parameter " + std::to_string(k) +
                                     " " + shape_string(params[k].shape()) + " at iteration " +
                                     std::to_string(iteration));
      if (velocity_[k].shape != params[k].shape())
        fail(ErrorKind::shape, "sgd: parameter " + std::to_string(k) + " changed shape");
    }
    const double lr = cfg_.learning_rate_at(iteration);
    double gscale = 1;
    if (cfg_.clip_norm > 0) {
      double sq = 0;
      for (const auto& p : params)
        for (Scalar g : p.grad().data) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) gscale = cfg_.clip_norm / norm;
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k].value().data;
      const auto& g = params[k].grad().data;
      auto& v = velocity_[k].data;
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = static_cast<Scalar>(cfg_.momentum * v[i] - lr * (gscale * g[i] + cfg_.weight_decay * p[i]));
        p[i] += v[i];
      }
    }
  }

  void reset() { velocity_.clear(); }

 private:
  SgdConfig cfg_;
  std::vector<Tensor> velocity_;
};

inline void zero_grads(std::span<DiffTensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace geoseg
