#include "snaplab/optim.hpp"

#include <cmath>

namespace snaplab {

AdamW::AdamW(std::vector<Param*> params, AdamWOptions options) : params_(std::move(params)), opt_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Param* p : params_) {
    m_.push_back(Tensor::Zero(p->value().rows(), p->value().cols()));
    v_.push_back(Tensor::Zero(p->value().rows(), p->value().cols()));
  }
}

void AdamW::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor g = params_[i]->grad();
    m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
    v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g.cwiseProduct(g);
    Tensor& w = params_[i]->value();
    w *= 1.0 - opt_.learning_rate * opt_.weight_decay;
    w.array() -= opt_.learning_rate * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
  }
}

}  // namespace snaplab
