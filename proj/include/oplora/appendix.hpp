#pragma once

// Numerical check of the first-order expansion of gradient descent on the
// scalar-reparameterised regression w = w1 * w2: the exact composite step
// and its expansion differ by eta^2 g1 g2, so halving eta should quarter the
// residual. Also compares plain and reparameterised descent at a matched lr.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "oplora/config.hpp"
#include "oplora/models.hpp"
#include "oplora/rng.hpp"
#include "oplora/spectral.hpp"

namespace oplora {

struct AppendixConfig {
  std::uint64_t seed = 0;
  std::int64_t samples = 64;
  std::int64_t dim = 8;
  double noise = 0.1;
  std::vector<double> ladder{1e-2, 5e-3, 2.5e-3, 1.25e-3};
  double ratio_lo = 0.2;
  double ratio_hi = 0.3;
  std::int64_t compare_steps = 100;
  double compare_lr = 0.05;
  double unstable_factor = 2.5;  // plain lr = factor / L for the stability probe
};

struct AppendixRung {
  double eta = 0.0;
  double residual = 0.0;
};

struct AppendixReport {
  std::vector<AppendixRung> rungs;
  std::vector<double> ratios;  // residual(eta_{k+1}) / residual(eta_k)
  bool ratios_in_band = false;
  double zero_eta_residual = 0.0;

  double lr = 0.0;
  std::int64_t steps = 0;
  double plain_loss_initial = 0.0;
  double plain_loss_final = 0.0;
  double op_loss_final = 0.0;

  double smoothness = 0.0;  // L = largest eigenvalue of X^T X / N
  double unstable_lr = 0.0;
  bool plain_diverged_above_threshold = false;

  bool passed() const { return ratios_in_band && zero_eta_residual == 0.0; }
};

/// y = X w* + noise with X, w* standard normal; the starting point is w1 ~ N(0, 1/d), w2 = 1.
inline OpRegression make_appendix_problem(const AppendixConfig& cfg) {
  Philox4x32 rng(mix64(cfg.seed ^ fnv1a("appendix")));
  RegressionData data{Matrix(cfg.samples, cfg.dim), Matrix(cfg.samples, 1)};
  Matrix w_star(cfg.dim, 1);
  for (Index j = 0; j < cfg.dim; ++j) w_star(j, 0) = rng.normal();
  for (Index i = 0; i < cfg.samples; ++i)
    for (Index j = 0; j < cfg.dim; ++j) data.x(i, j) = rng.normal();
  data.y = data.x * w_star;
  for (Index i = 0; i < cfg.samples; ++i) data.y(i, 0) += cfg.noise * rng.normal();
  Matrix w1(cfg.dim, 1);
  for (Index j = 0; j < cfg.dim; ++j) w1(j, 0) = rng.normal() / std::sqrt(static_cast<double>(cfg.dim));
  return OpRegression::make(std::move(w1), 1.0, std::move(data));
}

namespace detail {

inline double gd_plain(Matrix w, const RegressionData& data, double lr, std::int64_t steps, bool& diverged) {
  diverged = false;
  double loss = 0.0;
  for (std::int64_t t = 0; t <= steps; ++t) {
    const Tensor wt = Tensor::parameter(w, "w");
    const Tensor l = plain_reg_loss(wt, data);
    loss = l.item();
    if (!std::isfinite(loss) || loss > 1e12) {
      diverged = true;
      return loss;
    }
    if (t == steps) break;
    backward(l);
    w -= lr * *wt.grad();
  }
  return loss;
}

inline double gd_overparameterized(OpRegression model, double lr, std::int64_t steps) {
  const OpRegression m = OpRegression::make(model.w1.value(), model.w2.item(), model.data);
  double loss = 0.0;
  for (std::int64_t t = 0; t <= steps; ++t) {
    zero_grad(m.parameters());
    const Tensor l = reg_loss(m);
    loss = l.item();
    if (t == steps || !std::isfinite(loss)) break;
    backward(l);
    for (const auto& p : m.parameters()) p.mutable_value() -= lr * *p.grad();
  }
  return loss;
}

}  // namespace detail

inline AppendixReport verify_appendix(const AppendixConfig& cfg = {}) {
  const OpRegression model = make_appendix_problem(cfg);
  AppendixReport rep;
  for (double eta : cfg.ladder) rep.rungs.push_back({eta, composite_update_check(model, eta)});
  rep.ratios_in_band = rep.rungs.size() >= 2;
  for (std::size_t k = 1; k < rep.rungs.size(); ++k) {
    const double r = rep.rungs[k].residual / rep.rungs[k - 1].residual;
    rep.ratios.push_back(r);
    if (!(r >= cfg.ratio_lo && r <= cfg.ratio_hi)) rep.ratios_in_band = false;
  }
  rep.zero_eta_residual = composite_update_check(model, 0.0);

  rep.lr = cfg.compare_lr;
  rep.steps = cfg.compare_steps;
  const Matrix w0 = model.effective_weight();
  bool diverged = false;
  rep.plain_loss_initial = detail::gd_plain(w0, model.data, cfg.compare_lr, 0, diverged);
  rep.plain_loss_final = detail::gd_plain(w0, model.data, cfg.compare_lr, cfg.compare_steps, diverged);
  rep.op_loss_final = detail::gd_overparameterized(model, cfg.compare_lr, cfg.compare_steps);

  const double s_max = singular_values(model.data.x).maxCoeff();
  rep.smoothness = s_max * s_max / static_cast<double>(cfg.samples);
  rep.unstable_lr = cfg.unstable_factor / rep.smoothness;
  bool blew_up = false;
  const double probe_loss = detail::gd_plain(w0, model.data, rep.unstable_lr, 200, blew_up);
  rep.plain_diverged_above_threshold = blew_up || probe_loss > rep.plain_loss_initial;
  return rep;
}

inline json to_json(const AppendixReport& r) {
  json rungs = json::array();
  for (const auto& g : r.rungs) rungs.push_back({{"eta", g.eta}, {"residual", g.residual}});
  return {{"rungs", rungs},
          {"ratios", r.ratios},
          {"ratios_in_band", r.ratios_in_band},
          {"zero_eta_residual", r.zero_eta_residual},
          {"compare", {{"lr", r.lr},
                       {"steps", r.steps},
                       {"plain_loss_initial", r.plain_loss_initial},
                       {"plain_loss_final", r.plain_loss_final},
                       {"overparameterized_loss_final", r.op_loss_final}}},
          {"stability", {{"smoothness_L", r.smoothness},
                         {"threshold_2_over_L", 2.0 / r.smoothness},
                         {"probe_lr", r.unstable_lr},
                         {"plain_diverged", r.plain_diverged_above_threshold}}},
          {"passed", r.passed()}};
}

}  // namespace oplora
