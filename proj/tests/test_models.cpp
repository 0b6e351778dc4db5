#include <sstream>

#include <gtest/gtest.h>

#include "fd.hpp"
#include "oplora/adapter_io.hpp"
#include "oplora/errors.hpp"
#include "oplora/models.hpp"

using namespace oplora;
using oplora::testing::fd_check;
using oplora::testing::seeded;

namespace {

const AdapterVariant kVariants[] = {AdapterVariant::op_lora, AdapterVariant::op_dora, AdapterVariant::plain_lora,
                                    AdapterVariant::plain_dora};

// Perturbs every trainable adapter parameter so B and the magnitude offset are non-zero.
void perturb(const AdapterLayer& layer, unsigned seed) {
  for (const auto& p : layer.parameters()) p.mutable_value() += 0.2 * seeded(p.rows(), p.cols(), seed++);
}

}  // namespace

TEST(MfLoss, ZeroBGivesTargetEnergy) {
  const Matrix m = seeded(7, 5, 1, 0.0, 1.0);
  MfModel model(m, 2);
  init_params(model, 3);
  EXPECT_EQ(model.factors().b.value(), Matrix::Zero(7, 2));
  EXPECT_NEAR(mf_loss(model).item(), m.squaredNorm(), 1e-12);
}

TEST(MfLoss, ExactFactorisationGivesZero) {
  const Matrix b = seeded(6, 2, 2), a = seeded(2, 5, 3);
  MfModel model(b * a, 2);
  model.parameters()[0].mutable_value() = a;
  model.parameters()[1].mutable_value() = b;
  EXPECT_NEAR(mf_loss(model).item(), 0.0, 1e-24);
}

TEST(MfLoss, FreshOpMfStartsAtTargetEnergy) {
  const Matrix m = seeded(100, 100, 4, 0.0, 1.0);
  OpMfModel model(m, 8);
  init_params(model, 5);
  EXPECT_EQ(model.factors().b.value(), Matrix::Zero(100, 8));
  EXPECT_EQ(mf_loss(model).item(), frobenius_sq(Tensor::constant(m)).item());
}

TEST(MfModel, RankOutOfRangeIsRejected) {
  EXPECT_THROW(MfModel(Matrix::Zero(3, 4), 0), ContractError);
  EXPECT_THROW(MfModel(Matrix::Zero(3, 4), 4), ContractError);
}

TEST(OpMf, ExpressivityEquivalence) {
  const Matrix m = seeded(9, 7, 6, 0.0, 1.0);
  OpMfModel op(m, 3, 8, 16);
  init_params(op, 7);
  for (const auto& p : op.parameters()) p.mutable_value() += 0.1 * seeded(p.rows(), p.cols(), 8);
  MfModel mf(m, 3);
  mf.parameters()[0].mutable_value() = op.factors().a.value();
  mf.parameters()[1].mutable_value() = op.factors().b.value();
  EXPECT_NEAR(mf_loss(op).item(), mf_loss(mf).item(), 1e-12);
}

TEST(OpMf, ParameterCountRatioAtWidth32) {
  const Matrix m = Matrix::Ones(100, 100);
  OpMfModel op(m, 8, 32, 128);
  MfModel mf(m, 8);
  const auto gen = [](std::int64_t out) { return 32 * (out + 128) + 128 + 32 + out; };
  EXPECT_EQ(op.parameter_count(), 2 * gen(800));
  EXPECT_GT(static_cast<double>(op.parameter_count()) / static_cast<double>(mf.parameter_count()), 30.0);
}

TEST(Generator, ZeroInitSegmentIsExactlyZero) {
  MlpGenerator g({{"A", 2, 3, false}, {"B", 3, 2, true}}, 16, 8);
  Philox4x32 rng(9);
  g.init(rng);
  const auto out = g.generate();
  EXPECT_EQ(out[1].value(), Matrix::Zero(3, 2));
  EXPECT_GT(out[0].value().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.output_size(), 12);
}

TEST(Generator, HandSetOneHiddenUnit) {
  MlpGenerator g({{"v", 2, 1, false}}, 1, 1);
  g.z().mutable_value() << 1;
  g.w1().mutable_value() << 2;
  g.b1().mutable_value() << -1;
  g.w2().mutable_value() << 3, -3;
  g.b2().mutable_value() << 0, 1;
  EXPECT_EQ(g.flat().value(), (Matrix(2, 1) << 3, -2).finished());
}

TEST(Generator, SegmentsAreRowMajor) {
  MlpGenerator g({{"M", 2, 3, false}}, 1, 1);
  g.z().mutable_value() << 1;
  g.w1().mutable_value() << 1;
  g.w2().mutable_value() = Matrix::Zero(6, 1);
  g.b2().mutable_value() << 0, 1, 2, 3, 4, 5;
  EXPECT_EQ(g.generate_named()[0].second, (Matrix(2, 3) << 0, 1, 2, 3, 4, 5).finished());
}

TEST(Generator, GradientWrtLatentMatchesFd) {
  MlpGenerator g({{"v", 4, 1, false}}, 6, 5);
  Philox4x32 rng(10);
  g.init(rng);
  const Tensor w = Tensor::constant(seeded(4, 1, 11));
  const auto f = [&] { return sum(hadamard(g.flat(), w)); };
  EXPECT_TRUE(fd_check(f, {g.z()}, 1e-6).ok());
  EXPECT_TRUE(fd_check(f, g.parameters(), 1e-5).ok());
}

TEST(Init, SameSeedIsBitwiseIdentical) {
  const Matrix m = seeded(10, 8, 12);
  OpMfModel a(m, 2), b(m, 2);
  init_params(a, 42);
  init_params(b, 42);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value(), b.parameters()[i].value());
  OpMfModel c(m, 2);
  init_params(c, 43);
  EXPECT_NE(a.parameters()[1].value(), c.parameters()[1].value());
}

TEST(Init, KaimingBoundAndVariance) {
  Matrix w(1000, 100);
  Philox4x32 rng(13);
  fill_kaiming_uniform(w, rng);
  const double b = kaiming_bound(100);
  EXPECT_DOUBLE_EQ(b, std::sqrt(2.0) * std::sqrt(3.0 / 100.0));
  EXPECT_LT(w.cwiseAbs().maxCoeff(), b);
  const double mean = w.mean();
  const double var = (w.array() - mean).square().mean();
  EXPECT_NEAR(var / (b * b / 3.0), 1.0, 0.05);
}

TEST(Init, MfStartsWithKaimingAAndZeroB) {
  MfModel model(seeded(20, 30, 14), 4);
  init_params(model, 15);
  EXPECT_EQ(model.factors().b.value(), Matrix::Zero(20, 4));
  EXPECT_LT(model.factors().a.value().cwiseAbs().maxCoeff(), kaiming_bound(30));
}

TEST(Regression, PerfectFitAndHandExample) {
  RegressionData perfect{seeded(5, 3, 16), Matrix()};
  const Matrix w1 = seeded(3, 1, 17);
  perfect.y = perfect.x * w1 * 1.5;
  EXPECT_NEAR(reg_loss(OpRegression::make(w1, 1.5, perfect)).item(), 0.0, 1e-28);

  const RegressionData one{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 0.0)};
  EXPECT_EQ(reg_loss(OpRegression::make(Matrix::Constant(1, 1, 2.0), 3.0, one)).item(), 18.0);
}

TEST(Regression, GradientsMatchClosedFormAndFd) {
  const RegressionData data{seeded(8, 3, 18), seeded(8, 1, 19)};
  const OpRegression model = OpRegression::make(seeded(3, 1, 20), 0.7, data);
  backward(reg_loss(model));
  const Matrix r = data.x * model.w1.value() * 0.7 - data.y;
  const double g2 = (r.array() * (data.x * model.w1.value()).array()).mean();
  EXPECT_NEAR((*model.w2.grad())(0, 0), g2, 1e-14);
  EXPECT_TRUE(fd_check([&] { return reg_loss(model); }, model.parameters(), 1e-5).ok());
}

TEST(Regression, EmptyDatasetIsContractError) {
  const RegressionData empty{Matrix(0, 2), Matrix(0, 1)};
  EXPECT_THROW(plain_reg_loss(Tensor::parameter(Matrix::Zero(2, 1)), empty), ContractError);
  EXPECT_THROW(reg_loss(OpRegression::make(Matrix::Zero(2, 1), 1.0, empty)), ContractError);
}

TEST(CompositeUpdate, ZeroEtaAndZeroW2) {
  const RegressionData data{seeded(6, 2, 21), seeded(6, 1, 22)};
  EXPECT_EQ(composite_update_check(OpRegression::make(seeded(2, 1, 23), 1.2, data), 0.0), 0.0);
  EXPECT_THROW(composite_update_check(OpRegression::make(seeded(2, 1, 23), 0.0, data), 0.01), ContractError);
}

TEST(CompositeUpdate, HandExampleResidualIsEtaSquaredG1G2) {
  const RegressionData data{Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 1.0)};
  // Off the optimum so both gradients are non-zero.
  const OpRegression model = OpRegression::make(Matrix::Constant(1, 1, 2.0), 1.5, data);
  const double eta = 0.01;
  const double r = 2.0 * 1.5 - 1.0;
  const double g1 = r * 1.5, g2 = r * 2.0;
  EXPECT_NEAR(composite_update_check(model, eta), eta * eta * g1 * g2, 1e-15);

  // At x = y = w1 = w2 = 1 the residual and both gradients vanish.
  EXPECT_EQ(composite_update_check(OpRegression::make(Matrix::Constant(1, 1, 1.0), 1.0, data), eta), 0.0);
}

TEST(CompositeUpdate, HalvingEtaQuartersResidual) {
  const RegressionData data{seeded(32, 4, 24), seeded(32, 1, 25)};
  const OpRegression model = OpRegression::make(seeded(4, 1, 26), 0.8, data);
  const double r1 = composite_update_check(model, 1e-3), r2 = composite_update_check(model, 5e-4);
  EXPECT_GE(r2 / r1, 0.2);
  EXPECT_LE(r2 / r1, 0.3);
  EXPECT_FALSE(model.w1.grad().has_value());
}

TEST(Adapter, StepZeroLoraIsBaseBitwise) {
  const Matrix w0 = seeded(6, 5, 27);
  for (auto v : {AdapterVariant::op_lora, AdapterVariant::plain_lora}) {
    AdapterLayer layer(w0, 2, 4.0, v, 16, 8);
    Philox4x32 rng(28);
    layer.init(rng);
    EXPECT_EQ(layer.delta(layer.parts()).value(), Matrix::Zero(6, 5)) << to_string(v);
    EXPECT_EQ(merge(layer), w0) << to_string(v);
  }
}

TEST(Adapter, StepZeroDoraReproducesBase) {
  const Matrix w0 = seeded(6, 5, 29);
  const Matrix x = seeded(5, 100, 30);
  for (auto v : {AdapterVariant::op_dora, AdapterVariant::plain_dora}) {
    AdapterLayer layer(w0, 2, 4.0, v, 16, 8);
    Philox4x32 rng(31);
    layer.init(rng);
    EXPECT_LT((adapter_forward(layer, Tensor::constant(x)).value() - w0 * x).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Adapter, ZeroColumnInDoraIsContractError) {
  Matrix w0 = seeded(4, 3, 32);
  w0.col(1).setZero();
  AdapterLayer layer(w0, 1, 1.0, AdapterVariant::plain_dora);
  Philox4x32 rng(33);
  layer.init(rng);
  EXPECT_THROW(merge(layer), ContractError);
}

TEST(Adapter, InputShapeIsChecked) {
  AdapterLayer layer(seeded(4, 3, 34), 1, 1.0, AdapterVariant::plain_lora);
  EXPECT_THROW(adapter_forward(layer, Tensor::constant(Matrix::Zero(4, 2))), DimensionError);
  EXPECT_THROW(AdapterLayer(seeded(4, 3, 34), 4, 1.0, AdapterVariant::plain_lora), ContractError);
}

TEST(Adapter, MergeEquivalenceAndRoundTripForAllVariants) {
  const Matrix w0 = seeded(8, 6, 35);
  const Matrix x = seeded(6, 100, 36);
  for (auto v : kVariants) {
    AdapterLayer layer(w0, 3, 6.0, v, 16, 8);
    Philox4x32 rng(37);
    layer.init(rng);
    perturb(layer, 38);
    const Matrix live = adapter_forward(layer, Tensor::constant(x)).value();
    EXPECT_LT((merge(layer) * x - live).cwiseAbs().maxCoeff(), 1e-10) << to_string(v);

    std::stringstream buf;
    write_adapter(buf, export_adapter(layer));
    const AdapterLayer back = AdapterLayer::from_export(w0, read_adapter(buf));
    EXPECT_EQ(is_dora(back.variant()), is_dora(v));
    EXPECT_LT((adapter_forward(back, Tensor::constant(x)).value() - live).cwiseAbs().maxCoeff(), 1e-12)
        << to_string(v);
  }
}

TEST(Adapter, GradThroughDoraNormalisationMatchesFd) {
  const Matrix w0 = seeded(3, 3, 39);
  AdapterLayer layer(w0, 2, 2.0, AdapterVariant::op_dora, 6, 5);
  Philox4x32 rng(40);
  layer.init(rng);
  perturb(layer, 41);
  const Tensor x = Tensor::constant(seeded(3, 4, 42));
  const Tensor w = Tensor::constant(seeded(3, 4, 43));
  EXPECT_TRUE(fd_check([&] { return sum(hadamard(adapter_forward(layer, x), w)); }, layer.parameters(), 1e-5).ok());
}

TEST(AdapterIo, RejectsCorruptRecords) {
  std::stringstream bad("NOTMAGIC");
  EXPECT_THROW(read_adapter(bad), ConfigError);
  AdapterLayer layer(seeded(4, 3, 44), 1, 1.0, AdapterVariant::plain_lora);
  std::stringstream buf;
  write_adapter(buf, export_adapter(layer));
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 5);
  std::stringstream truncated(bytes);
  EXPECT_ANY_THROW(read_adapter(truncated));
}

TEST(AdapterIo, LittleEndianHeaderLayout) {
  AdapterExport e;
  e.rank = 2;
  e.alpha = 4.0;
  e.a = Matrix::Ones(2, 3);
  e.b = Matrix::Zero(4, 2);
  std::stringstream buf;
  write_adapter(buf, e);
  const std::string s = buf.str();
  EXPECT_EQ(s.substr(0, 8), "OPLORA01");
  EXPECT_EQ(static_cast<unsigned char>(s[8]), 0u);   // kind: LoRA
  EXPECT_EQ(static_cast<unsigned char>(s[12]), 2u);  // rank, low byte first
  EXPECT_EQ(static_cast<unsigned char>(s[13]), 0u);
}
