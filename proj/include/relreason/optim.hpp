#pragma once

#include <cmath>
#include <span>
#include <string>

#include "relreason/layers.hpp"

namespace relreason {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// In-place Adam update with bias correction. `step` is the 1-based index of
/// this update.
template <typename S>
void adam_step(std::span<S> param, std::span<const S> grad, std::span<S> m, std::span<S> v, std::size_t step,
               const AdamOptions& opts) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adam_step: parameter has " + std::to_string(param.size()) + " elements but grad/moments have " +
                     std::to_string(grad.size()) + "/" + std::to_string(m.size()) + "/" + std::to_string(v.size()));
  }
  const double c1 = 1.0 - std::pow(opts.beta1, double(step));
  const double c2 = 1.0 - std::pow(opts.beta2, double(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = opts.beta1 * m[i] + (1.0 - opts.beta1) * g;
    const double vi = opts.beta2 * v[i] + (1.0 - opts.beta2) * g * g;
    m[i] = S(mi);
    v[i] = S(vi);
    param[i] = S(param[i] - opts.lr * (mi / c1) / (std::sqrt(vi / c2) + opts.eps));
  }
}

/// Common interface so training loops and checkpoints can treat Adam and SGD
/// alike. Parameters are shared handles; step() reads their accumulated
/// gradients (missing gradients count as zero) and zero_grad() clears them.
template <typename S>
class Optimizer {
 public:
  explicit Optimizer(NamedTensors<S> params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;

  virtual void step() = 0;
  /// Moment buffers plus the step counter, named after their parameters.
  virtual NamedTensors<S> state() const = 0;

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return std::size_t(step_count_.data()[0]); }
  const NamedTensors<S>& params() const { return params_; }

 protected:
  static std::vector<S> grad_or_zero(const Tensor<S>& t) {
    if (t.has_grad()) return {t.grad().begin(), t.grad().end()};
    return std::vector<S>(t.size(), S(0));
  }
  NamedTensors<S> buffers_like(const std::string& suffix) const {
    NamedTensors<S> out;
    for (const auto& p : params_) out.push_back({p.name + suffix, Tensor<S>(p.tensor.shape())});
    return out;
  }

  NamedTensors<S> params_;
  double lr_ = 0.0;
  Tensor<S> step_count_{Shape{1}};
};

template <typename S>
class Adam final : public Optimizer<S> {
 public:
  Adam(NamedTensors<S> params, AdamOptions opts = {})
      : Optimizer<S>(std::move(params)), opts_(opts), m_(this->buffers_like(".adam_m")), v_(this->buffers_like(".adam_v")) {
    this->lr_ = opts.lr;
  }

  void step() override {
    const std::size_t t = this->steps() + 1;
    this->step_count_.data()[0] = S(t);
    AdamOptions opts = opts_;
    opts.lr = this->lr_;
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      const auto g = this->grad_or_zero(this->params_[i].tensor);
      adam_step<S>(this->params_[i].tensor.data(), g, m_[i].tensor.data(), v_[i].tensor.data(), t, opts);
    }
  }

  NamedTensors<S> state() const override {
    NamedTensors<S> out = m_;
    out.insert(out.end(), v_.begin(), v_.end());
    out.push_back({"adam.step", this->step_count_});
    return out;
  }

 private:
  AdamOptions opts_;
  NamedTensors<S> m_, v_;
};

/// SGD with classical momentum: buf = mu * buf + g; p -= lr * buf.
template <typename S>
class Sgd final : public Optimizer<S> {
 public:
  Sgd(NamedTensors<S> params, double lr, double momentum = 0.9)
      : Optimizer<S>(std::move(params)), momentum_(momentum), buf_(this->buffers_like(".sgd_momentum")) {
    this->lr_ = lr;
  }

  void step() override {
    this->step_count_.data()[0] = S(this->steps() + 1);
    for (std::size_t i = 0; i < this->params_.size(); ++i) {
      const auto g = this->grad_or_zero(this->params_[i].tensor);
      auto p = this->params_[i].tensor.data();
      auto b = buf_[i].tensor.data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        b[k] = S(momentum_ * b[k] + g[k]);
        p[k] = S(p[k] - this->lr_ * b[k]);
      }
    }
  }

  NamedTensors<S> state() const override {
    NamedTensors<S> out = buf_;
    out.push_back({"sgd.step", this->step_count_});
    return out;
  }

 private:
  double momentum_;
  NamedTensors<S> buf_;
};

/// Learning rate divided by 10 at 50% and again at 75% of training.
inline double step_schedule(double base_lr, std::size_t epoch, std::size_t total_epochs) {
  double lr = base_lr;
  if (2 * epoch >= total_epochs) lr /= 10.0;
  if (4 * epoch >= 3 * total_epochs) lr /= 10.0;
  return lr;
}

}  // namespace relreason
