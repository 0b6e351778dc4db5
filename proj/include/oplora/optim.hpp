#pragma once

// SGD, heavy-ball momentum and Adam over a list of leaf tensors, with a
// linear-warmup / linear-decay learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "oplora/autodiff.hpp"
#include "oplora/errors.hpp"

namespace oplora {

enum class ScheduleKind { warmup_linear_decay, constant };

struct Schedule {
  ScheduleKind kind = ScheduleKind::warmup_linear_decay;
  std::int64_t warmup_steps = 50;
  std::int64_t total_steps = 1000;
};

/// lr_peak * t / warmup on [0, warmup], then linear down to 0 at total_steps.
inline double schedule_lr(const Schedule& schedule, double lr_peak, std::int64_t t) {
  if (t < 0 || t > schedule.total_steps) {
    throw ContractError("schedule_lr: step " + std::to_string(t) + " outside [0, " +
                        std::to_string(schedule.total_steps) + "]");
  }
  if (schedule.kind == ScheduleKind::constant) return lr_peak;
  if (t == schedule.total_steps) return 0.0;
  const auto warmup = schedule.warmup_steps;
  const auto total = schedule.total_steps;
  if (warmup < 0 || warmup >= total) {
    throw ContractError("schedule_lr: warmup " + std::to_string(warmup) + " must lie in [0, total " +
                        std::to_string(total) + ")");
  }
  if (t <= warmup) {
    return warmup == 0 ? lr_peak : lr_peak * static_cast<double>(t) / static_cast<double>(warmup);
  }
  return lr_peak * static_cast<double>(total - t) / static_cast<double>(total - warmup);
}

enum class OptimizerKind { sgd, momentum, adam };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "momentum") return OptimizerKind::momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd, momentum or adam)");
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr_peak = 1e-3;
  double momentum_coeff = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  // Per-parameter buffers, positionally matched to the params list:
  // velocity for momentum, first moment for Adam.
  std::vector<Matrix> first;
  std::vector<Matrix> second;  // Adam second moment
};

namespace detail {
inline void ensure_buffers(std::vector<Matrix>& buffers, const std::vector<Tensor>& params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.push_back(Matrix::Zero(p.rows(), p.cols()));
    return;
  }
  if (buffers.size() != params.size()) {
    throw ContractError("optimizer: parameter list changed length (" + std::to_string(buffers.size()) +
                        " buffers, " + std::to_string(params.size()) + " params)");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].rows() != params[i].rows() || buffers[i].cols() != params[i].cols()) {
      throw ContractError("optimizer: buffer shape " + shape_str(buffers[i]) + " no longer matches parameter '" +
                          params[i].name() + "' " + shape_str(params[i].value()));
    }
  }
}
}  // namespace detail

/// One update with lr = schedule_lr(schedule, lr_peak, step_count).
///
/// Momentum uses v <- mu v + g, p <- p - lr v. Adam uses the usual bias
/// corrections with t = step_count + 1. Grads are left in place.
inline void step(OptimizerState& state, const Schedule& schedule, const std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad()) {
      throw ContractError("optimizer step: parameter " + std::to_string(i) + " '" + params[i].name() +
                          "' has no grad");
    }
  }
  const double lr = schedule_lr(schedule, state.lr_peak, state.step_count);
  switch (state.kind) {
    case OptimizerKind::sgd:
      for (const auto& p : params) p.mutable_value() -= lr * *p.grad();
      break;
    case OptimizerKind::momentum:
      detail::ensure_buffers(state.first, params);
      for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& v = state.first[i];
        v = state.momentum_coeff * v + *params[i].grad();
        params[i].mutable_value() -= lr * v;
      }
      break;
    case OptimizerKind::adam: {
      detail::ensure_buffers(state.first, params);
      detail::ensure_buffers(state.second, params);
      const double t = static_cast<double>(state.step_count + 1);
      const double c1 = 1.0 - std::pow(state.beta1, t);
      const double c2 = 1.0 - std::pow(state.beta2, t);
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = *params[i].grad();
        Matrix& m = state.first[i];
        Matrix& v = state.second[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
        const Matrix m_hat = m / c1;
        const Matrix v_hat = v / c2;
        params[i].mutable_value().array() -= lr * m_hat.array() / (v_hat.array().sqrt() + state.eps);
      }
      break;
    }
  }
  ++state.step_count;
}

}  // namespace oplora
