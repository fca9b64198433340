#pragma once

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ldit/graph.hpp"
#include "ldit/layers.hpp"
#include "ldit/tensor.hpp"

namespace ldit {

// Adam with gradient accumulation across the per-sample tapes of a minibatch.
// Parameters are registered once (canonical order fixes update determinism);
// each sample's backward pass deposits into gsum via accumulate(), and step()
// applies one bias-corrected update using the scaled sum, then clears it.
template <typename S>
class Adam {
  public:
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit Adam(const ParamList<S>& plist, double lr_) : lr(lr_) {
        using Arr = typename Tensor<S>::Array;
        for (const auto& p : plist) {
            index_[p.tensor] = params_.size();
            params_.push_back(p.tensor);
            m_.emplace_back(Arr::Zero(p.tensor->size()));
            v_.emplace_back(Arr::Zero(p.tensor->size()));
            gsum_.emplace_back(Arr::Zero(p.tensor->size()));
        }
    }

    void accumulate(const Graph<S>& g) {
        for (const auto& b : g.bound) {
            auto it = index_.find(b.param);
            if (it == index_.end()) {
                throw std::logic_error("optimizer: gradient for unregistered parameter");
            }
            if (g.has_grad(b.var)) gsum_[it->second] += g.grad(b.var).data;
        }
    }

    // One update with gradient g = gsum * scale (scale is typically 1/batch).
    void step(double scale) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, t_);
        const double bc2 = 1.0 - std::pow(beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto g = (gsum_[i] * static_cast<S>(scale)).eval();
            m_[i] = static_cast<S>(beta1) * m_[i] + static_cast<S>(1.0 - beta1) * g;
            v_[i] = static_cast<S>(beta2) * v_[i] + static_cast<S>(1.0 - beta2) * g.square();
            params_[i]->data -= static_cast<S>(lr) *
                                (m_[i] / static_cast<S>(bc1)) /
                                ((v_[i] / static_cast<S>(bc2)).sqrt() + static_cast<S>(eps));
            gsum_[i].setZero();
        }
    }

  private:
    std::vector<Tensor<S>*> params_;
    std::vector<typename Tensor<S>::Array> m_, v_, gsum_;
    std::unordered_map<const void*, std::size_t> index_;
    long t_ = 0;
};

} // namespace ldit
