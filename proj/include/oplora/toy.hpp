#pragma once

// Desk-scale adapter fine-tuning: pre-train a two-layer ReLU network on a
// synthetic regression task, freeze it, then fit adapters on its first
// layer to a shifted task and compare variants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "oplora/config.hpp"
#include "oplora/models.hpp"
#include "oplora/optim.hpp"
#include "oplora/rng.hpp"

namespace oplora {

struct DenseNet {
  Matrix w1, b1, w2, b2;  // w1: hidden x in, w2: out x hidden, biases column vectors
};

struct ToyTask {
  DenseNet pretrained;  // frozen after pre-training
  Matrix x_train, y_train;
  Matrix x_hold, y_hold;
  double pretrain_loss = 0.0;
};

namespace detail {

inline Matrix gaussian(Index rows, Index cols, Philox4x32& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

/// w2 relu(pre + b1) + b2, where pre = w1 x is supplied by the caller.
inline Tensor net_head(const Tensor& pre, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return add_bias(matmul(w2, relu(add_bias(pre, b1))), b2);
}

/// Mean over samples (columns) of the squared output error.
inline Tensor sample_mse(const Tensor& pred, const Matrix& y) {
  return scalar_mul(frobenius_sq(sub(pred, Tensor::constant(y))), 1.0 / static_cast<double>(y.cols()));
}

inline Matrix eval_net(const DenseNet& n, const Matrix& x) {
  return n.w2 * ((n.w1 * x).colwise() + n.b1.col(0)).cwiseMax(0.0) + n.b2.col(0).replicate(1, x.cols());
}

}  // namespace detail

/// Teacher data, a pre-trained student, and shifted targets produced by the
/// student with a low-rank perturbation of its first-layer weight.
inline ToyTask make_toy_task(const ToySpec& spec) {
  Philox4x32 rng(mix64(spec.seed ^ fnv1a("toy-task")));
  DenseNet teacher;
  teacher.w1 = Matrix(spec.d_hidden, spec.d_in);
  fill_kaiming_uniform(teacher.w1, rng);
  teacher.b1 = detail::gaussian(spec.d_hidden, 1, rng, 0.1);
  teacher.w2 = Matrix(spec.d_out, spec.d_hidden);
  fill_kaiming_uniform(teacher.w2, rng);
  teacher.b2 = detail::gaussian(spec.d_out, 1, rng, 0.1);

  ToyTask task;
  task.x_train = detail::gaussian(spec.d_in, spec.samples, rng);
  task.x_hold = detail::gaussian(spec.d_in, spec.holdout, rng);
  const Matrix y_pre = detail::eval_net(teacher, task.x_train);

  const Tensor w1 = Tensor::parameter(Matrix(spec.d_hidden, spec.d_in), "w1");
  const Tensor w2 = Tensor::parameter(Matrix(spec.d_out, spec.d_hidden), "w2");
  fill_kaiming_uniform(w1.mutable_value(), rng);
  fill_kaiming_uniform(w2.mutable_value(), rng);
  const Tensor b1 = Tensor::parameter(Matrix::Zero(spec.d_hidden, 1), "b1");
  const Tensor b2 = Tensor::parameter(Matrix::Zero(spec.d_out, 1), "b2");
  const std::vector<Tensor> params{w1, b1, w2, b2};
  OptimizerState opt;
  opt.kind = OptimizerKind::adam;
  opt.lr_peak = spec.pretrain_lr;
  const Schedule sched{ScheduleKind::constant, 0, spec.pretrain_steps};
  const Tensor x = Tensor::constant(task.x_train);
  for (std::int64_t t = 0; t <= spec.pretrain_steps; ++t) {
    zero_grad(params);
    const Tensor loss = detail::sample_mse(detail::net_head(matmul(w1, x), b1, w2, b2), y_pre);
    task.pretrain_loss = loss.item();
    if (t == spec.pretrain_steps) break;
    backward(loss);
    step(opt, sched, params);
  }
  task.pretrained = {w1.value(), b1.value(), w2.value(), b2.value()};

  DenseNet shifted = task.pretrained;
  const Matrix u = detail::gaussian(spec.d_hidden, spec.shift_rank, rng);
  const Matrix v = detail::gaussian(spec.d_in, spec.shift_rank, rng);
  shifted.w1 += spec.shift_scale / std::sqrt(static_cast<double>(spec.d_in * spec.shift_rank)) * u * v.transpose();
  task.y_train = detail::eval_net(shifted, task.x_train);
  task.y_hold = detail::eval_net(shifted, task.x_hold);
  return task;
}

struct ToyRun {
  AdapterVariant variant = AdapterVariant::plain_lora;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double holdout_loss = 0.0;
  double merge_max_abs_diff = 0.0;
  bool diverged = false;
};

/// Fine-tunes one adapter on the first layer of the frozen network.
inline ToyRun finetune_adapter(const ToyTask& task, const ToySpec& spec, AdapterVariant variant, double lr,
                               std::uint64_t seed, OptimizerKind optimizer, std::int64_t latent, std::int64_t hidden) {
  const std::string cell = std::string(to_string(variant)) + "-" + std::string(to_string(optimizer)) + "-lr" +
                           std::to_string(lr);
  Philox4x32 rng(derive_stream_key(spec.seed, cell, seed));
  AdapterLayer layer(task.pretrained.w1, spec.rank, spec.alpha, variant, latent, hidden);
  layer.init(rng);
  const Tensor b1 = Tensor::constant(task.pretrained.b1);
  const Tensor w2 = Tensor::constant(task.pretrained.w2);
  const Tensor b2 = Tensor::constant(task.pretrained.b2);
  const Tensor x = Tensor::constant(task.x_train);

  ToyRun run{variant, lr, seed};
  const auto params = layer.parameters();
  OptimizerState opt;
  opt.kind = optimizer;
  opt.lr_peak = lr;
  const Schedule sched{ScheduleKind::warmup_linear_decay, spec.finetune_steps / 10, spec.finetune_steps};
  for (std::int64_t t = 0; t <= spec.finetune_steps; ++t) {
    zero_grad(params);
    const Tensor loss = detail::sample_mse(detail::net_head(adapter_forward(layer, x), b1, w2, b2), task.y_train);
    const double l = loss.item();
    if (t == 0) run.initial_loss = l;
    run.final_loss = l;
    if (!std::isfinite(l) || l > 1e12) {
      run.diverged = true;
      run.final_loss = std::numeric_limits<double>::infinity();
      return run;
    }
    if (t == spec.finetune_steps) break;
    backward(loss);
    step(opt, sched, params);
  }

  const Matrix merged = merge(layer);
  DenseNet net = task.pretrained;
  net.w1 = merged;
  const Matrix y_merged = detail::eval_net(net, task.x_hold);
  const Tensor hold = Tensor::constant(task.x_hold);
  const Matrix y_live = detail::net_head(adapter_forward(layer, hold), b1, w2, b2).value();
  run.merge_max_abs_diff = (y_merged - y_live).cwiseAbs().maxCoeff();
  run.holdout_loss = (y_merged - task.y_hold).squaredNorm() / static_cast<double>(task.y_hold.cols());
  return run;
}

struct ToyVariantSummary {
  AdapterVariant variant = AdapterVariant::plain_lora;
  std::map<double, double> mean_final_by_lr;
  double best_lr = 0.0;
  double best_mean_final = std::numeric_limits<double>::infinity();
  double max_merge_diff = 0.0;
  std::int64_t parameter_count = 0;
};

struct ToyReport {
  double pretrain_loss = 0.0;
  double baseline_loss = 0.0;       // frozen model on the shifted task
  double step0_max_deviation = 0.0;  // max |adapter loss before training - baseline|
  std::vector<ToyRun> runs;
  std::vector<ToyVariantSummary> variants;

  const ToyVariantSummary& variant(AdapterVariant v) const {
    for (const auto& s : variants)
      if (s.variant == v) return s;
    throw ContractError("toy report has no variant " + std::string(to_string(v)));
  }
};

inline ToyReport toy_finetune(const SweepConfig& config,
                              const std::vector<AdapterVariant>& variants = {AdapterVariant::plain_lora,
                                                                             AdapterVariant::op_lora,
                                                                             AdapterVariant::plain_dora,
                                                                             AdapterVariant::op_dora}) {
  const ToySpec spec = config.toy.value_or(ToySpec{});
  const ToyTask task = make_toy_task(spec);
  ToyReport rep;
  rep.pretrain_loss = task.pretrain_loss;
  rep.baseline_loss =
      (detail::eval_net(task.pretrained, task.x_train) - task.y_train).squaredNorm() / static_cast<double>(task.y_train.cols());
  const OptimizerKind optimizer = config.optimizers.front();
  const auto hidden = config.hidden_widths.front();
  for (auto v : variants) {
    ToyVariantSummary s;
    s.variant = v;
    s.parameter_count = AdapterLayer(task.pretrained.w1, spec.rank, spec.alpha, v, config.latent, hidden).parameter_count();
    for (double lr : spec.lrs) {
      double sum = 0.0;
      for (auto seed : config.seeds) {
        ToyRun r = finetune_adapter(task, spec, v, lr, seed, optimizer, config.latent, hidden);
        rep.step0_max_deviation = std::max(rep.step0_max_deviation, std::abs(r.initial_loss - rep.baseline_loss));
        sum += r.final_loss;
        s.max_merge_diff = std::max(s.max_merge_diff, r.merge_max_abs_diff);
        rep.runs.push_back(r);
      }
      const double mean = sum / static_cast<double>(config.seeds.size());
      s.mean_final_by_lr[lr] = mean;
      if (mean < s.best_mean_final) {
        s.best_mean_final = mean;
        s.best_lr = lr;
      }
    }
    rep.variants.push_back(std::move(s));
  }
  return rep;
}

inline json to_json(const ToyReport& r) {
  json variants = json::array();
  for (const auto& s : r.variants) {
    json by_lr = json::array();
    for (const auto& [lr, m] : s.mean_final_by_lr) by_lr.push_back({{"lr", lr}, {"mean_final_loss", m}});
    variants.push_back({{"variant", std::string(to_string(s.variant))},
                        {"parameter_count", s.parameter_count},
                        {"best_lr", s.best_lr},
                        {"best_mean_final_loss", s.best_mean_final},
                        {"max_merge_abs_diff", s.max_merge_diff},
                        {"mean_final_by_lr", by_lr}});
  }
  json runs = json::array();
  for (const auto& x : r.runs) {
    runs.push_back({{"variant", std::string(to_string(x.variant))},
                    {"lr", x.lr},
                    {"seed", x.seed},
                    {"initial_loss", x.initial_loss},
                    {"final_loss", std::isfinite(x.final_loss) ? json(x.final_loss) : json(nullptr)},
                    {"holdout_loss", x.holdout_loss},
                    {"merge_max_abs_diff", x.merge_max_abs_diff},
                    {"diverged", x.diverged}});
  }
  return {{"pretrain_loss", r.pretrain_loss},
          {"baseline_loss", r.baseline_loss},
          {"step0_max_deviation", r.step0_max_deviation},
          {"variants", variants},
          {"runs", runs}};
}

}  // namespace oplora
