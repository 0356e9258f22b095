/// @file networks.hpp Time-invariant function approximators: feed-forward nets, the
/// reverse-time context encoder, and the locally linear covariance.

#ifndef PSVO_NETWORKS_HPP
#define PSVO_NETWORKS_HPP

#include "psvo/diff.hpp"
#include "psvo/params.hpp"
#include "psvo/random.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace psvo {

/// Feed-forward network: affine layers with tanh between them and an identity output.
/// Inputs are batches with one sample per row. A residual net returns input + net(input).
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string name, std::vector<Index> dims, Group group, bool residual = false)
      : name_(std::move(name)), dims_(std::move(dims)), group_(group), residual_(residual) {
    if (dims_.size() < 2) throw std::invalid_argument("mlp '" + name_ + "': need at least input and output dims");
    for (Index d : dims_)
      if (d <= 0) throw std::invalid_argument("mlp '" + name_ + "': non-positive layer width");
    if (residual_ && dims_.front() != dims_.back()) {
      throw std::invalid_argument("mlp '" + name_ + "': residual net needs d_in == d_out");
    }
  }

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] Index in_dim() const { return dims_.front(); }
  [[nodiscard]] Index out_dim() const { return dims_.back(); }
  [[nodiscard]] std::size_t layers() const { return dims_.size() - 1; }
  [[nodiscard]] bool residual() const { return residual_; }
  [[nodiscard]] std::string weight_name(std::size_t l) const { return name_ + ".W" + std::to_string(l); }
  [[nodiscard]] std::string bias_name(std::size_t l) const { return name_ + ".b" + std::to_string(l); }

  [[nodiscard]] Index param_count() const {
    Index n = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) n += dims_[l] * dims_[l + 1] + dims_[l + 1];
    return n;
  }

  /// Glorot-uniform weights, zero biases. Weights are stored d_in×d_out.
  void initialize(ParameterStore& store, Rng& rng, double weight_scale = 1.0) const {
    for (std::size_t l = 0; l < layers(); ++l) {
      const Index fi = dims_[l];
      const Index fo = dims_[l + 1];
      const double limit = weight_scale * std::sqrt(6.0 / static_cast<double>(fi + fo));
      Matrix w(fi, fo);
      for (Index r = 0; r < fi; ++r)
        for (Index c = 0; c < fo; ++c) w(r, c) = rng.uniform(-limit, limit);
      store.add(weight_name(l), group_, std::move(w));
      store.add(bias_name(l), group_, Matrix::Zero(1, fo));
    }
  }

  [[nodiscard]] Var forward(const Binding& params, Var input) const {
    if (input.cols() != in_dim()) {
      throw std::invalid_argument("mlp '" + name_ + "': input has " + std::to_string(input.cols()) +
                                  " columns, expected " + std::to_string(in_dim()));
    }
    Var h = input;
    for (std::size_t l = 0; l < layers(); ++l) {
      Var w = params[weight_name(l)];
      Var b = params[bias_name(l)];
      h = ad::add(ad::matmul(h, w), ad::broadcast(b, h.rows(), w.cols()));
      if (l + 1 < layers()) h = ad::tanh(h);
    }
    return residual_ ? ad::add(input, h) : h;
  }

 private:
  std::string name_;
  std::vector<Index> dims_;
  Group group_ = Group::Theta;
  bool residual_ = false;
};

/// Reverse-time recurrent summary of an observation sequence:
///   c_T = cell(x_T, 0),  c_t = cell(x_t, c_{t+1}),  cell(x, c) = tanh(net([x, c])).
/// c_t depends only on x_{t:T}.
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(std::string name, Index d_x, Index d_c, const std::vector<Index>& hidden, Group group)
      : d_x_(d_x), d_c_(d_c) {
    std::vector<Index> dims{d_x + d_c};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(d_c);
    cell_ = Mlp(std::move(name), std::move(dims), group);
  }

  [[nodiscard]] const Mlp& cell() const { return cell_; }
  [[nodiscard]] Index context_dim() const { return d_c_; }

  void initialize(ParameterStore& store, Rng& rng) const { cell_.initialize(store, rng); }

  /// Returns T×d_c; row t is c_t.
  [[nodiscard]] Var encode(const Binding& params, Var observations) const {
    const Index T = observations.rows();
    if (T < 1) throw std::invalid_argument("context encoder: empty sequence");
    if (observations.cols() != d_x_) throw std::invalid_argument("context encoder: observation width mismatch");
    ad::Tape& tape = params.tape();
    std::vector<Var> contexts(static_cast<std::size_t>(T));
    Var c = tape.constant(Matrix::Zero(1, d_c_));
    for (Index t = T; t-- > 0;) {
      std::array<Var, 2> parts{ad::row(observations, t), c};
      c = ad::tanh(cell_.forward(params, ad::concat_cols(parts)));
      contexts[static_cast<std::size_t>(t)] = c;
    }
    return ad::concat_rows(contexts);
  }

 private:
  Mlp cell_;
  Index d_x_ = 0;
  Index d_c_ = 0;
};

/// Q(z) = σ²·I + α·Σ(z), Σ(z) symmetric with entries produced by a feed-forward net.
/// If Q(z) is not positive definite, jitter ε·I is added with ε doubling from 1e-6 up to 1e-2.
class LocallyLinearCov {
 public:
  static constexpr double kJitterStart = 1e-6;
  static constexpr double kJitterMax = 1e-2;

  LocallyLinearCov() = default;
  LocallyLinearCov(std::string name, Index d_z, double alpha, const std::vector<Index>& hidden, Group group)
      : name_(std::move(name)), d_z_(d_z), alpha_(alpha), group_(group) {
    std::vector<Index> dims{d_z};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(d_z * (d_z + 1) / 2);
    net_ = Mlp(name_ + ".sigma_net", std::move(dims), group);
  }

  [[nodiscard]] std::string log_var_name() const { return name_ + ".log_var"; }
  [[nodiscard]] double alpha() const { return alpha_; }
  [[nodiscard]] const Mlp& net() const { return net_; }

  void initialize(ParameterStore& store, Rng& rng, double base_variance) const {
    net_.initialize(store, rng);
    store.add(log_var_name(), group_, Matrix::Constant(1, 1, std::log(base_variance)));
  }

  /// One covariance per row of z (N×d_z).
  [[nodiscard]] std::vector<Var> covariances(const Binding& params, Var z) const {
    ad::Tape& tape = params.tape();
    Var packed = net_.forward(params, z);
    Var var = ad::exp(params[log_var_name()]);
    Var base = ad::mul(ad::broadcast(var, d_z_, d_z_), tape.constant(Matrix::Identity(d_z_, d_z_)));
    std::vector<Var> out;
    out.reserve(static_cast<std::size_t>(z.rows()));
    for (Index i = 0; i < z.rows(); ++i) {
      Var q = ad::add(base, ad::scalar_mul(alpha_, ad::symmetric_from_packed(ad::row(packed, i), d_z_)));
      out.push_back(repair(q));
    }
    return out;
  }

  /// Largest entrywise |Q(z) − σ²I| over the rows of `grid`.
  [[nodiscard]] double max_deviation(const ParameterStore& store, const Matrix& grid) const {
    ad::Tape tape;
    Binding params(store, tape, false);
    const double var = std::exp(store.value(log_var_name())(0, 0));
    double worst = 0.0;
    for (const Var& q : covariances(params, tape.constant(grid))) {
      Matrix dev = q.value() - var * Matrix::Identity(d_z_, d_z_);
      worst = std::max(worst, dev.cwiseAbs().maxCoeff());
    }
    return worst;
  }

 private:
  [[nodiscard]] Var repair(Var q) const {
    Eigen::LLT<Matrix> llt(q.value());
    if (llt.info() == Eigen::Success) return q;
    ad::Tape& tape = *q.tape();
    for (double eps = kJitterStart; eps <= kJitterMax; eps *= 2.0) {
      Matrix jittered = q.value() + eps * Matrix::Identity(d_z_, d_z_);
      if (Eigen::LLT<Matrix>(jittered).info() == Eigen::Success) {
        return ad::add(q, tape.constant(eps * Matrix::Identity(d_z_, d_z_)));
      }
    }
    throw NumericalError("locally linear covariance '" + name_ + "' is not positive definite after jitter " +
                         std::to_string(kJitterMax));
  }

  std::string name_;
  Index d_z_ = 0;
  double alpha_ = 0.1;
  Group group_ = Group::Varphi;
  Mlp net_;
};

}  // namespace psvo

#endif  // PSVO_NETWORKS_HPP
