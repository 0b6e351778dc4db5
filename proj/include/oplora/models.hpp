#pragma once

// Trainable model families: free low-rank factorisation (MF), its
// MLP-generated counterpart (OP-MF), the scalar-reparameterised linear
// regression, and low-rank adapters over a frozen linear layer.
//
// Models hold Tensor handles, so copying a model aliases its parameters.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oplora/autodiff.hpp"
#include "oplora/errors.hpp"
#include "oplora/rng.hpp"

namespace oplora {

using Index = Eigen::Index;

/// Kaiming-uniform bound with ReLU gain: sqrt(2) * sqrt(3 / fan_in).
inline double kaiming_bound(Index fan_in) {
  return std::sqrt(2.0) * std::sqrt(3.0 / static_cast<double>(fan_in));
}

inline void fill_uniform(Matrix& m, double bound, Philox4x32& rng) {
  // Row-major draw order so the stream layout matches the flattening convention.
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

inline void fill_kaiming_uniform(Matrix& m, Philox4x32& rng) { fill_uniform(m, kaiming_bound(m.cols()), rng); }

// ---------------------------------------------------------------------------
// MLP generator

struct OutputSegment {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  bool zero_init = false;

  Index size() const { return rows * cols; }
};

/// flat = W2 relu(W1 z + b1) + b2, split row-major into named segments.
class MlpGenerator {
 public:
  MlpGenerator(std::vector<OutputSegment> segments, Index latent = 128, Index hidden = 32)
      : segments_(std::move(segments)), latent_(latent), hidden_(hidden) {
    if (latent < 1 || hidden < 1) throw ContractError("MlpGenerator: latent and hidden must be >= 1");
    for (const auto& s : segments_) out_ += s.size();
    z_ = Tensor::parameter(Matrix::Zero(latent, 1), "z");
    w1_ = Tensor::parameter(Matrix::Zero(hidden, latent), "W1");
    b1_ = Tensor::parameter(Matrix::Zero(hidden, 1), "b1");
    w2_ = Tensor::parameter(Matrix::Zero(out_, hidden), "W2");
    b2_ = Tensor::parameter(Matrix::Zero(out_, 1), "b2");
  }

  /// W1 and the W2 rows of non-zero segments ~ U(-b, b) (Kaiming, ReLU gain);
  /// biases and zero_init rows exactly 0; z ~ N(0, 1) / sqrt(latent).
  void init(Philox4x32& rng) {
    Matrix& z = z_.mutable_value();
    for (Index i = 0; i < latent_; ++i) z(i, 0) = rng.normal() / std::sqrt(static_cast<double>(latent_));
    fill_kaiming_uniform(w1_.mutable_value(), rng);
    b1_.mutable_value().setZero();
    Matrix& w2 = w2_.mutable_value();
    w2.setZero();
    const double bound = kaiming_bound(hidden_);
    Index offset = 0;
    for (const auto& s : segments_) {
      if (!s.zero_init) {
        for (Index i = offset; i < offset + s.size(); ++i)
          for (Index j = 0; j < hidden_; ++j) w2(i, j) = rng.uniform(-bound, bound);
      }
      offset += s.size();
    }
    b2_.mutable_value().setZero();
  }

  Tensor flat() const { return add_bias(matmul(w2_, relu(add_bias(matmul(w1_, z_), b1_))), b2_); }

  /// One tensor per output segment, in declaration order.
  std::vector<Tensor> generate() const {
    const Tensor out = flat();
    std::vector<Tensor> parts;
    Index offset = 0;
    for (const auto& s : segments_) {
      parts.push_back(segment(out, offset, s.rows, s.cols));
      offset += s.size();
    }
    return parts;
  }

  std::vector<std::pair<std::string, Matrix>> generate_named() const {
    std::vector<std::pair<std::string, Matrix>> out;
    const auto parts = generate();
    for (std::size_t i = 0; i < parts.size(); ++i) out.emplace_back(segments_[i].name, parts[i].value());
    return out;
  }

  std::vector<Tensor> parameters() const { return {z_, w1_, b1_, w2_, b2_}; }
  std::int64_t parameter_count() const { return latent_ + hidden_ * latent_ + hidden_ + out_ * hidden_ + out_; }

  const std::vector<OutputSegment>& segments() const { return segments_; }
  Index latent() const { return latent_; }
  Index hidden() const { return hidden_; }
  Index output_size() const { return out_; }
  const Tensor& z() const { return z_; }
  const Tensor& w1() const { return w1_; }
  const Tensor& b1() const { return b1_; }
  const Tensor& w2() const { return w2_; }
  const Tensor& b2() const { return b2_; }

 private:
  std::vector<OutputSegment> segments_;
  Index latent_;
  Index hidden_;
  Index out_ = 0;
  Tensor z_, w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Matrix factorisation

struct Factors {
  Tensor a;  // r x n
  Tensor b;  // m x r
};

template <class M>
concept FactorModel = requires(const M& m) {
  { m.factors() } -> std::same_as<Factors>;
  { m.parameters() } -> std::same_as<std::vector<Tensor>>;
  { m.target() } -> std::convertible_to<const Matrix&>;
  { m.rank() } -> std::convertible_to<Index>;
};

/// B A with A (r x n) and B (m x r) free parameters; B starts at zero.
class MfModel {
 public:
  MfModel(Matrix target, Index rank)
      : target_(Tensor::constant(std::move(target))), rank_(rank) {
    check_rank(rank_, target_.value());
    a_ = Tensor::parameter(Matrix::Zero(rank, target_.cols()), "A");
    b_ = Tensor::parameter(Matrix::Zero(target_.rows(), rank), "B");
  }

  void init(Philox4x32& rng) {
    fill_kaiming_uniform(a_.mutable_value(), rng);
    b_.mutable_value().setZero();
  }

  Factors factors() const { return {a_, b_}; }
  std::vector<Tensor> parameters() const { return {a_, b_}; }
  const Matrix& target() const { return target_.value(); }
  const Tensor& target_tensor() const { return target_; }
  Index rank() const { return rank_; }
  std::int64_t parameter_count() const { return rank_ * (target_.rows() + target_.cols()); }

  static void check_rank(Index rank, const Matrix& target) {
    if (rank < 1 || rank > std::min(target.rows(), target.cols())) {
      throw ContractError("rank " + std::to_string(rank) + " invalid for target " + shape_str(target));
    }
  }

 private:
  Tensor target_;
  Index rank_;
  Tensor a_, b_;
};

/// A and B each generated by their own MLP; the B generator starts at zero output.
class OpMfModel {
 public:
  OpMfModel(Matrix target, Index rank, Index hidden = 32, Index latent = 128)
      : target_(Tensor::constant(std::move(target))),
        rank_(rank),
        gen_a_({{"A", rank, target_.cols(), false}}, latent, hidden),
        gen_b_({{"B", target_.rows(), rank, true}}, latent, hidden) {
    MfModel::check_rank(rank_, target_.value());
  }

  void init(Philox4x32& rng) {
    gen_a_.init(rng);
    gen_b_.init(rng);
  }

  Factors factors() const { return {gen_a_.generate().front(), gen_b_.generate().front()}; }
  std::vector<Tensor> parameters() const {
    auto p = gen_a_.parameters();
    for (auto& t : gen_b_.parameters()) p.push_back(t);
    return p;
  }
  const Matrix& target() const { return target_.value(); }
  const Tensor& target_tensor() const { return target_; }
  Index rank() const { return rank_; }
  const MlpGenerator& gen_a() const { return gen_a_; }
  const MlpGenerator& gen_b() const { return gen_b_; }
  std::int64_t parameter_count() const { return gen_a_.parameter_count() + gen_b_.parameter_count(); }

 private:
  Tensor target_;
  Index rank_;
  MlpGenerator gen_a_;
  MlpGenerator gen_b_;
};

/// Loss and the factors it was built from (so callers can reuse B A).
struct MfForward {
  Tensor loss;
  Factors factors;
  Tensor product;  // B A
};

/// |M - B A|_F^2 (no 1/2 factor).
template <FactorModel M>
MfForward mf_forward(const M& model) {
  MfForward f;
  f.factors = model.factors();
  f.product = matmul(f.factors.b, f.factors.a);
  f.loss = frobenius_sq(sub(model.target_tensor(), f.product));
  return f;
}

template <FactorModel M>
Tensor mf_loss(const M& model) {
  return mf_forward(model).loss;
}

template <class M>
void init_params(M& model, std::uint64_t seed) {
  Philox4x32 rng(seed);
  model.init(rng);
}

// ---------------------------------------------------------------------------
// Overparameterised linear regression

struct RegressionData {
  Matrix x;  // N x d
  Matrix y;  // N x 1
};

/// w = w1 * w2 with w1 a d-vector and w2 a scalar.
struct OpRegression {
  Tensor w1;  // d x 1
  Tensor w2;  // 1 x 1
  RegressionData data;

  static OpRegression make(Matrix w1, double w2, RegressionData data) {
    return {Tensor::parameter(std::move(w1), "w1"), Tensor::parameter(Matrix::Constant(1, 1, w2), "w2"),
            std::move(data)};
  }
  Matrix effective_weight() const { return w1.value() * w2.item(); }
  std::vector<Tensor> parameters() const { return {w1, w2}; }
};

namespace detail {
inline Tensor half_mse(const Tensor& pred, const RegressionData& data) {
  const Tensor residual = sub(pred, Tensor::constant(data.y));
  return scalar_mul(frobenius_sq(residual), 0.5 / static_cast<double>(data.x.rows()));
}
inline void check_regression(const Tensor& w, const RegressionData& data) {
  if (data.x.rows() == 0) throw ContractError("regression loss: empty dataset");
  if (data.y.rows() != data.x.rows() || data.y.cols() != 1) {
    throw DimensionError("regression loss: y " + shape_str(data.y) + " vs x " + shape_str(data.x));
  }
  if (w.rows() != data.x.cols() || w.cols() != 1) {
    throw DimensionError("regression loss: weight " + shape_str(w.value()) + " vs x " + shape_str(data.x));
  }
}
}  // namespace detail

/// mean of 1/2 (x^T w - y)^2
inline Tensor plain_reg_loss(const Tensor& w, const RegressionData& data) {
  detail::check_regression(w, data);
  return detail::half_mse(matmul(Tensor::constant(data.x), w), data);
}

/// mean of 1/2 (x^T w1 w2 - y)^2
inline Tensor reg_loss(const OpRegression& model) {
  detail::check_regression(model.w1, model.data);
  return detail::half_mse(scale(matmul(Tensor::constant(model.data.x), model.w1), model.w2), model.data);
}

struct CompositeUpdate {
  Matrix w_actual;     // (w1 - eta g1)(w2 - eta g2)
  Matrix w_predicted;  // w - eta w2^2 grad_w - eta w2^-1 g2 w
  double residual = 0.0;
};

/// Compares one exact gradient step on (w1, w2), seen through w = w1 w2,
/// against its first-order expansion. The model itself is not modified.
inline CompositeUpdate composite_update(const OpRegression& model, double eta) {
  const double w2 = model.w2.item();
  if (w2 == 0.0) throw ContractError("composite_update_check: w2 = 0 (expansion divides by w2)");
  if (eta < 0.0) throw ContractError("composite_update_check: eta must be non-negative");

  const OpRegression probe = OpRegression::make(model.w1.value(), w2, model.data);
  backward(reg_loss(probe));
  const Matrix g1 = *probe.w1.grad();
  const double g2 = (*probe.w2.grad())(0, 0);

  const Matrix w = probe.effective_weight();
  const Tensor w_plain = Tensor::parameter(w, "w");
  backward(plain_reg_loss(w_plain, model.data));
  const Matrix& grad_w = *w_plain.grad();

  CompositeUpdate out;
  out.w_actual = (model.w1.value() - eta * g1) * (w2 - eta * g2);
  out.w_predicted = w - eta * w2 * w2 * grad_w - eta * (g2 / w2) * w;
  out.residual = (out.w_actual - out.w_predicted).norm();
  return out;
}

inline double composite_update_check(const OpRegression& model, double eta) {
  return composite_update(model, eta).residual;
}

// ---------------------------------------------------------------------------
// Low-rank adapters

enum class AdapterVariant { op_lora, op_dora, plain_lora, plain_dora };

inline std::string_view to_string(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::op_lora: return "op_lora";
    case AdapterVariant::op_dora: return "op_dora";
    case AdapterVariant::plain_lora: return "plain_lora";
    case AdapterVariant::plain_dora: return "plain_dora";
  }
  return "?";
}

inline bool is_dora(AdapterVariant v) { return v == AdapterVariant::op_dora || v == AdapterVariant::plain_dora; }
inline bool is_generated(AdapterVariant v) { return v == AdapterVariant::op_lora || v == AdapterVariant::op_dora; }

/// Column norms of w as a (cols x 1) vector.
inline Matrix column_norms(const Matrix& w) { return w.colwise().norm().transpose(); }

/// Trained adapter state as plain arrays (the generator is not part of it).
struct AdapterExport {
  bool dora = false;
  Index rank = 0;
  double alpha = 0.0;
  Matrix a;  // r x d_in
  Matrix b;  // d_out x r
  Matrix m;  // d_in x 1, DoRA only
};

/// W = W0 + (alpha / r) B A, or for DoRA W = colnormalize(W0 + (alpha / r) B A) diag(m).
///
/// The DoRA magnitude m has one entry per input column. Generated DoRA
/// predicts an offset from the column norms of W0 (zero at init), so the
/// step-0 weight reproduces W0.
class AdapterLayer {
 public:
  AdapterLayer(Matrix w0, Index rank, double alpha, AdapterVariant variant, Index latent = 128,
               Index hidden = 32)
      : w0_(Tensor::constant(std::move(w0))), rank_(rank), alpha_(alpha), variant_(variant) {
    const Index d_out = w0_.rows(), d_in = w0_.cols();
    if (rank < 1 || rank > std::min(d_in, d_out)) {
      throw ContractError("AdapterLayer: rank " + std::to_string(rank) + " invalid for W0 " +
                          shape_str(w0_.value()));
    }
    m0_ = Tensor::constant(column_norms(w0_.value()));
    if (is_generated(variant)) {
      std::vector<OutputSegment> segs{{"A", rank, d_in, false}, {"B", d_out, rank, true}};
      if (is_dora(variant)) segs.push_back({"m", d_in, 1, true});
      generator_.emplace(std::move(segs), latent, hidden);
    } else {
      a_ = Tensor::parameter(Matrix::Zero(rank, d_in), "A");
      b_ = Tensor::parameter(Matrix::Zero(d_out, rank), "B");
      if (is_dora(variant)) m_ = Tensor::parameter(m0_.value(), "m");
    }
  }

  /// Generator init, or Kaiming-uniform A, B = 0 and m = column norms of W0.
  void init(Philox4x32& rng) {
    if (generator_) {
      generator_->init(rng);
      return;
    }
    fill_kaiming_uniform(a_.mutable_value(), rng);
    b_.mutable_value().setZero();
    if (m_.defined()) m_.mutable_value() = m0_.value();
  }

  struct Parts {
    Tensor a, b, m;  // m undefined for LoRA variants
  };

  Parts parts() const {
    if (!generator_) return {a_, b_, m_};
    auto gen = generator_->generate();
    Parts p{gen[0], gen[1], {}};
    if (is_dora(variant_)) p.m = add(m0_, gen[2]);
    return p;
  }

  /// (alpha / r) B A
  Tensor delta(const Parts& p) const { return scalar_mul(matmul(p.b, p.a), scaling()); }

  Tensor effective_weight(const Parts& p) const {
    Tensor v = add(w0_, delta(p));
    if (!is_dora(variant_)) return v;
    return scale_columns(column_normalize(v), p.m);
  }
  Tensor effective_weight() const { return effective_weight(parts()); }

  std::vector<Tensor> parameters() const {
    if (generator_) return generator_->parameters();
    std::vector<Tensor> p{a_, b_};
    if (m_.defined()) p.push_back(m_);
    return p;
  }
  std::int64_t parameter_count() const {
    if (generator_) return generator_->parameter_count();
    std::int64_t n = a_.size() + b_.size();
    if (m_.defined()) n += m_.size();
    return n;
  }

  /// Plain variant carrying the given arrays (used on re-import).
  static AdapterLayer from_export(Matrix w0, const AdapterExport& e) {
    AdapterLayer layer(std::move(w0), e.rank, e.alpha, e.dora ? AdapterVariant::plain_dora : AdapterVariant::plain_lora);
    if (e.a.rows() != layer.a_.rows() || e.a.cols() != layer.a_.cols() || e.b.rows() != layer.b_.rows() ||
        e.b.cols() != layer.b_.cols()) {
      throw DimensionError("adapter import: A " + shape_str(e.a) + " / B " + shape_str(e.b) +
                           " do not fit W0 " + shape_str(layer.w0_.value()) + " at rank " + std::to_string(e.rank));
    }
    layer.a_.mutable_value() = e.a;
    layer.b_.mutable_value() = e.b;
    if (e.dora) {
      if (e.m.rows() != layer.m_.rows() || e.m.cols() != 1) {
        throw DimensionError("adapter import: m " + shape_str(e.m) + " does not fit W0 " + shape_str(layer.w0_.value()));
      }
      layer.m_.mutable_value() = e.m;
    }
    return layer;
  }

  const Matrix& base_weight() const { return w0_.value(); }
  Index rank() const { return rank_; }
  double alpha() const { return alpha_; }
  double scaling() const { return alpha_ / static_cast<double>(rank_); }
  AdapterVariant variant() const { return variant_; }
  const std::optional<MlpGenerator>& generator() const { return generator_; }
  Index d_in() const { return w0_.cols(); }
  Index d_out() const { return w0_.rows(); }

 private:
  Tensor w0_;
  Tensor m0_;
  Index rank_;
  double alpha_;
  AdapterVariant variant_;
  std::optional<MlpGenerator> generator_;
  Tensor a_, b_, m_;
};

/// Applies the adapted weight to x (d_in x batch).
inline Tensor adapter_forward(const AdapterLayer& layer, const Tensor& x) {
  if (x.rows() != layer.d_in()) {
    throw DimensionError("adapter_forward: input " + shape_str(x.value()) + " vs d_in " + std::to_string(layer.d_in()));
  }
  return matmul(layer.effective_weight(), x);
}

/// The dense weight that replaces the adapter at inference.
inline Matrix merge(const AdapterLayer& layer) { return layer.effective_weight().value(); }

inline AdapterExport export_adapter(const AdapterLayer& layer) {
  const auto p = layer.parts();
  AdapterExport e;
  e.dora = is_dora(layer.variant());
  e.rank = layer.rank();
  e.alpha = layer.alpha();
  e.a = p.a.value();
  e.b = p.b.value();
  if (e.dora) e.m = p.m.value();
  return e;
}

}  // namespace oplora
