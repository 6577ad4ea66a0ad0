#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "hardcon/autodiff.hpp"
#include "hardcon/error.hpp"

namespace hardcon::optim {

/// Running averages E[g^2] and E[dx^2] for one parameter tensor.
struct AdaDeltaSlot {
    std::vector<double> sq_grad;
    std::vector<double> sq_update;
};

/// One AdaDelta update in place:
///   E[g^2]  <- rho E[g^2] + (1 - rho) g^2
///   dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
///   param   += dx
inline void adadelta_update(std::span<double> param, std::span<const double> grad, AdaDeltaSlot& slot, double rho,
                            double eps) {
    if (grad.size() != param.size() || slot.sq_grad.size() != param.size() || slot.sq_update.size() != param.size()) {
        throw ContractViolation("adadelta: parameter/gradient/state shape mismatch");
    }
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        double& eg = slot.sq_grad[i];
        double& ex = slot.sq_update[i];
        eg = rho * eg + (1.0 - rho) * g * g;
        const double dx = -std::sqrt(ex + eps) / std::sqrt(eg + eps) * g;
        ex = rho * ex + (1.0 - rho) * dx * dx;
        param[i] += dx;
    }
}

class AdaDelta {
public:
    AdaDelta() = default;
    explicit AdaDelta(std::vector<Tensor> params, double rho = 0.95, double eps = 1e-6)
        : params_(std::move(params)), rho_(rho), eps_(eps) {
        if (!(rho_ >= 0.0 && rho_ < 1.0) || !(eps_ > 0.0)) throw ConfigError("adadelta: need 0 <= rho < 1 and eps > 0");
        slots_.reserve(params_.size());
        for (const auto& p : params_) {
            slots_.push_back({std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)});
        }
    }

    double rho() const { return rho_; }
    double eps() const { return eps_; }
    const std::vector<AdaDeltaSlot>& state() const { return slots_; }

    /// Applies one update to every parameter from its accumulated gradient.
    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            adadelta_update(params_[k].data(), params_[k].grad(), slots_[k], rho_, eps_);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor> params_;
    std::vector<AdaDeltaSlot> slots_;
    double rho_ = 0.95;
    double eps_ = 1e-6;
};

/// Fires once the metric has failed to strictly increase for `patience`
/// consecutive observations.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience = 3) : patience_(patience) {
        if (patience_ < 1) throw ConfigError("early stopping patience must be >= 1");
    }

    bool update(double metric) {
        ++observations_;
        if (metric > best_) {
            best_ = metric;
            since_improvement_ = 0;
            improved_ = true;
        } else {
            ++since_improvement_;
            improved_ = false;
        }
        return since_improvement_ >= patience_;
    }

    /// Whether the last observation set a new best.
    bool improved() const { return improved_; }
    double best() const { return best_; }
    int epochs_since_improvement() const { return since_improvement_; }
    int patience() const { return patience_; }
    int observations() const { return observations_; }

private:
    int patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    int since_improvement_ = 0;
    int observations_ = 0;
    bool improved_ = false;
};

} // namespace hardcon::optim
