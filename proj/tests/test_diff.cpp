#include "psvo/diff.hpp"
#include "psvo/random.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <functional>
#include <vector>

using namespace psvo;
using ad::Index;
using ad::Matrix;
using ad::Var;

namespace {

using Fn = std::function<Var(ad::Tape&, const std::vector<Var>&)>;

// Compares reverse-mode gradients of a scalar function of several matrix inputs with
// central differences. Returns the largest absolute discrepancy.
double gradcheck(const Fn& f, const std::vector<Matrix>& inputs, double h = 1e-6) {
  ad::Tape tape;
  std::vector<Var> leaves;
  for (const Matrix& m : inputs) leaves.push_back(tape.leaf(m));
  tape.backward(f(tape, leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix g = tape.grad(leaves[k]);
    for (Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Matrix> moved = inputs;
        moved[k].data()[i] += delta;
        ad::Tape t;
        std::vector<Var> l;
        for (const Matrix& m : moved) l.push_back(t.constant(m));
        return f(t, l).scalar();
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - g.data()[i]));
    }
  }
  return worst;
}

Matrix random(Index r, Index c, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_matrix(r, c);
}

Matrix spd(Index d, std::uint64_t seed) {
  const Matrix a = random(d, d, seed);
  return a * a.transpose() + Matrix::Identity(d, d);
}

// Covariance-type inputs are only read on one triangle, so perturb symmetrically.
Var sym(Var v) { return ad::scalar_mul(0.5, ad::add(v, ad::transpose(v))); }

}  // namespace

TEST(Diff, ElementwiseOps) {
  const Matrix a = random(3, 2, 1);
  const Matrix b = random(3, 2, 2).array().abs() + 0.5;
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]))); },
                      {a, b}),
            1e-8);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::div(v[0], v[1])); }, {a, b}), 1e-8);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::tanh(v[0])); }, {a}), 1e-8);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::exp(v[0])); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::log(v[0])); }, {b}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::scalar_mul(1.5, v[0]))); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::neg(ad::add_scalar(v[0], 2.0))); }, {a}), 1e-8);
}

TEST(Diff, LinearAlgebraOps) {
  const Matrix a = random(3, 4, 3);
  const Matrix b = random(4, 2, 4);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::tanh(ad::matmul(v[0], v[1]))); }, {a, b}), 1e-8);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::transpose(v[0]))); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::dot(v[0], v[0]); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::row_sum(v[0]))); }, {a}), 1e-7);
  const Matrix s = spd(3, 5);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::inverse(sym(v[0]))); }, {s}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::cholesky(sym(v[0]))); }, {s}), 1e-7);
}

TEST(Diff, ShapeOps) {
  const Matrix a = random(4, 3, 6);
  const Matrix r = random(1, 3, 7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::broadcast(v[0], 5, 3))); }, {r}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::gather_rows(v[0], {2, 0, 2, 3}))); }, {a}),
            1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::pick_cols(v[0], {1, 1, 0, 2}))); }, {a}),
            1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::slice_rows(v[0], 1, 2))); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::slice_cols(v[0], 1, 2))); }, {a}), 1e-7);
  EXPECT_LT(gradcheck(
                [](ad::Tape&, const auto& v) {
                  std::array<Var, 2> p{v[0], ad::tanh(v[0])};
                  return ad::sum(ad::square(ad::concat_cols(p))) + ad::sum(ad::exp(ad::concat_rows(p)));
                },
                {a}),
            1e-6);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::reshape(v[0], 2, 6))); }, {a}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::diag_embed(v[0]))); }, {r}), 1e-7);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::square(ad::symmetric_from_packed(v[0], 2))); }, {r}),
            1e-7);
}

TEST(Diff, LogSumExp) {
  const Matrix a = random(3, 5, 8);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::logsumexp_rows(v[0])); }, {a}), 1e-8);
  ad::Tape tape;
  Matrix big(1, 2);
  big << 1000.0, 1000.0;
  EXPECT_NEAR(ad::logsumexp(tape.constant(big)).scalar(), 1000.0 + std::log(2.0), 1e-12);
}

TEST(Diff, GaussianLogPdfs) {
  const Matrix x = random(4, 2, 9);
  const Matrix m = random(4, 2, 10);
  const Matrix ls = 0.3 * random(4, 2, 11);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::diag_gaussian_log_pdf_rows(v[0], v[1], v[2])); },
                      {x, m, ls}),
            1e-7);
  const Matrix means = random(3, 2, 12);
  const Matrix ls1 = 0.3 * random(1, 2, 13);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::sum(ad::pairwise_diag_gaussian_log_pdf(v[0], v[1], v[2])); },
                      {x, means, ls1}),
            1e-7);
  const Matrix xr = random(1, 3, 14);
  const Matrix mr = random(1, 3, 15);
  const Matrix cov = spd(3, 16);
  EXPECT_LT(gradcheck([](ad::Tape&, const auto& v) { return ad::full_gaussian_log_pdf(v[0], v[1], sym(v[2])); }, {xr, mr, cov}),
            1e-7);
}

TEST(Diff, DiagGaussianLogPdfValue) {
  ad::Tape tape;
  Matrix x(1, 2);
  x << 0.5, -1.0;
  Matrix m(1, 2);
  m << 0.0, 1.0;
  Matrix ls(1, 2);
  ls << std::log(2.0), 0.0;
  const double expect = -0.5 * (0.25 / 4.0) - std::log(2.0) - 0.5 * 4.0 - std::log(2.0 * M_PI);
  EXPECT_NEAR(ad::diag_gaussian_log_pdf_rows(tape.constant(x), tape.constant(m), tape.constant(ls)).scalar(), expect, 1e-14);
}

TEST(Diff, FullGaussianAgreesWithDiagonal) {
  ad::Tape tape;
  const Matrix x = random(1, 3, 17);
  const Matrix m = random(1, 3, 18);
  Matrix ls(1, 3);
  ls << 0.1, -0.2, 0.3;
  Matrix cov = Matrix::Zero(3, 3);
  for (Index i = 0; i < 3; ++i) cov(i, i) = std::exp(2.0 * ls(0, i));
  EXPECT_NEAR(ad::full_gaussian_log_pdf(tape.constant(x), tape.constant(m), tape.constant(cov)).scalar(),
              ad::diag_gaussian_log_pdf_rows(tape.constant(x), tape.constant(m), tape.constant(ls)).scalar(), 1e-12);
}

TEST(Diff, TanhMatchesStd) {
  Matrix a(1, 7);
  a << -30.0, -3.0, -0.5, 0.0, 1e-9, 2.0, 400.0;
  ad::Tape tape;
  const Matrix y = ad::tanh(tape.constant(a)).value();
  for (Index i = 0; i < a.cols(); ++i) EXPECT_NEAR(y(0, i), std::tanh(a(0, i)), 1e-15);
}

TEST(Diff, StopGradientBlocksFlow) {
  ad::Tape tape;
  Var a = tape.leaf(Matrix::Constant(1, 1, 3.0));
  Var y = ad::mul(a, ad::stop_gradient(a));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(a)(0, 0), 3.0);
}

TEST(Diff, FanOutAccumulates) {
  ad::Tape tape;
  Var a = tape.leaf(Matrix::Constant(1, 1, 2.0));
  Var y = ad::add(ad::mul(a, a), ad::scalar_mul(3.0, a));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(a)(0, 0), 7.0);
}

TEST(Diff, Errors) {
  ad::Tape tape;
  Var a = tape.leaf(Matrix::Ones(2, 2));
  Var b = tape.leaf(Matrix::Ones(3, 2));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::matmul(b, b), std::invalid_argument);
  EXPECT_THROW(tape.backward(a), std::invalid_argument);
  Matrix bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(ad::cholesky(tape.constant(bad)), NumericalError);
}
