#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "r3seg/errors.hpp"
#include "r3seg/segmenter.hpp"
#include "r3seg/tensor.hpp"

namespace r3seg {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // L2 term folded into the gradient
};

// Adam over named parameter refs. Moment tensors are keyed by parameter name
// so optimizer state survives checkpoint round trips exactly.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t steps() const { return t_; }

  void step(const std::vector<segmenter::ParamRef>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (const auto& p : params) {
      Tensor& m = moment(m_, p);
      Tensor& v = moment(v_, p);
      for (size_t i = 0; i < p.value->d.size(); ++i) {
        const double g = p.grad->d[i] + cfg_.weight_decay * p.value->d[i];
        m.d[i] = cfg_.beta1 * m.d[i] + (1.0 - cfg_.beta1) * g;
        v.d[i] = cfg_.beta2 * v.d[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m.d[i] / bc1;
        const double vhat = v.d[i] / bc2;
        p.value->d[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  // Checkpoint surface: moments in name-sorted order plus the step counter.
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void restore_steps(int64_t t) { t_ = t; }

 private:
  Tensor& moment(std::map<std::string, Tensor>& store, const segmenter::ParamRef& p) {
    auto it = store.find(p.name);
    if (it == store.end())
      it = store.emplace(p.name, Tensor(p.value->rows, p.value->cols)).first;
    else if (!it->second.same_shape(*p.value))
      throw StructureError("Adam: moment shape mismatch for " + p.name);
    return it->second;
  }

  AdamConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace r3seg
