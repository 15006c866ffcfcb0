#include "ssldetr/optimizer.hpp"

#include <cmath>

#include "ssldetr/errors.hpp"

namespace ssldetr {

AdamW::AdamW(double learning_rate, double weight_decay, double beta1,
             double beta2, double eps)
    : lr_(learning_rate), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr_ < 0.0 || wd_ < 0.0 || beta1_ < 0.0 || beta1_ >= 1.0 || beta2_ < 0.0 ||
      beta2_ >= 1.0 || eps_ <= 0.0) {
    throw ConfigError("AdamW: invalid hyperparameters");
  }
}

double AdamW::step(const std::vector<Parameter*>& params, double clip_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (int64_t i = 0; i < p->grad.numel(); ++i) sq += p->grad[i] * p->grad[i];
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NumericError("AdamW: non-finite gradient norm");
  }
  const double factor = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    auto [it, inserted] = moments_.try_emplace(p->name);
    if (inserted) {
      it->second.m = Tensor::zeros(p->value.shape());
      it->second.v = Tensor::zeros(p->value.shape());
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad[i] * factor;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p->value[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->value[i]);
    }
    p->zero_grad();
  }
  return norm;
}

std::map<std::string, Tensor> AdamW::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, mom] : moments_) {
    out.emplace("optim.m." + name, mom.m);
    out.emplace("optim.v." + name, mom.v);
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state,
                       int64_t steps_taken) {
  t_ = steps_taken;
  moments_.clear();
  for (const auto& [key, tensor] : state) {
    if (key.rfind("optim.m.", 0) == 0) {
      moments_[key.substr(8)].m = tensor;
    } else if (key.rfind("optim.v.", 0) == 0) {
      moments_[key.substr(8)].v = tensor;
    }
  }
  for (const auto& [name, mom] : moments_) {
    if (!mom.m.same_shape(mom.v) || mom.m.numel() == 0) {
      throw ContractError("AdamW::load_state: inconsistent moments for \"" + name + "\"");
    }
  }
}

}  // namespace ssldetr
