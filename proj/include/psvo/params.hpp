/// @file params.hpp Named trainable parameters tagged by group, and their per-tape binding.

#ifndef PSVO_PARAMS_HPP
#define PSVO_PARAMS_HPP

#include "psvo/diff.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace psvo {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// Parameter groups: theta (emission), phi (encoder and backward proposal),
/// varphi (latent evolution).
enum class Group { Theta, Phi, Varphi };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::Theta: return "theta";
    case Group::Phi: return "phi";
    case Group::Varphi: return "varphi";
  }
  return "?";
}

inline Group parse_group(const std::string& s) {
  if (s == "theta") return Group::Theta;
  if (s == "phi") return Group::Phi;
  if (s == "varphi") return Group::Varphi;
  throw std::invalid_argument("unknown parameter group '" + s + "'");
}

inline constexpr Group kAllGroups[] = {Group::Theta, Group::Phi, Group::Varphi};

struct Parameter {
  Group group = Group::Theta;
  Matrix value;
};

/// Gradient (or any per-parameter matrix) keyed by parameter name.
using GradientSet = std::map<std::string, Matrix>;

class ParameterStore {
 public:
  void add(const std::string& name, Group group, Matrix value) {
    if (value.size() == 0) throw std::invalid_argument("parameter '" + name + "' is empty");
    auto [it, inserted] = params_.emplace(name, Parameter{group, std::move(value)});
    if (!inserted) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  }

  [[nodiscard]] bool contains(const std::string& name) const { return params_.count(name) != 0; }

  [[nodiscard]] const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  [[nodiscard]] const Matrix& value(const std::string& name) const { return at(name).value; }

  void set(const std::string& name, const Matrix& v) {
    Parameter& p = at(name);
    if (p.value.rows() != v.rows() || p.value.cols() != v.cols()) {
      throw std::invalid_argument("parameter '" + name + "': shape change on set");
    }
    p.value = v;
  }

  [[nodiscard]] const std::map<std::string, Parameter>& entries() const { return params_; }
  std::map<std::string, Parameter>& entries() { return params_; }

  [[nodiscard]] std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }

  [[nodiscard]] Index scalar_count() const {
    Index n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  [[nodiscard]] Index scalar_count(Group g) const {
    Index n = 0;
    for (const auto& [_, p] : params_)
      if (p.group == g) n += p.value.size();
    return n;
  }

  /// Concatenates the gradient entries of one group into a flat vector (name order,
  /// column-major within each matrix).
  [[nodiscard]] Eigen::VectorXd flatten(const GradientSet& grads, Group g) const {
    Eigen::VectorXd out(scalar_count(g));
    Index off = 0;
    for (const auto& [name, p] : params_) {
      if (p.group != g) continue;
      auto it = grads.find(name);
      const Index n = p.value.size();
      if (it == grads.end()) {
        out.segment(off, n).setZero();
      } else {
        out.segment(off, n) = Eigen::Map<const Eigen::VectorXd>(it->second.data(), n);
      }
      off += n;
    }
    return out;
  }

  [[nodiscard]] double norm() const {
    double s = 0.0;
    for (const auto& [_, p] : params_) s += p.value.squaredNorm();
    return std::sqrt(s);
  }

  bool operator==(const ParameterStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (const auto& [k, p] : params_) {
      auto it = o.params_.find(k);
      if (it == o.params_.end() || it->second.group != p.group) return false;
      if (it->second.value.rows() != p.value.rows() || it->second.value.cols() != p.value.cols()) return false;
      if (it->second.value != p.value) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Parameter> params_;
};

/// Parameters of a store placed on a tape, either as trainable leaves or as constants.
class Binding {
 public:
  Binding(const ParameterStore& store, ad::Tape& tape, bool trainable = true) : tape_(&tape) {
    for (const auto& [name, p] : store.entries()) {
      vars_.emplace(name, trainable ? tape.leaf(p.value) : tape.constant(p.value));
    }
  }

  [[nodiscard]] Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("parameter '" + name + "' is not bound");
    return it->second;
  }

  [[nodiscard]] ad::Tape& tape() const { return *tape_; }

  /// Reads gradients of every bound parameter from a backward() result.
  [[nodiscard]] GradientSet gradients(const ad::Gradients& g) const {
    GradientSet out;
    for (const auto& [name, v] : vars_) {
      auto it = g.find(v.id());
      out.emplace(name, it != g.end() ? it->second : Matrix::Zero(v.rows(), v.cols()));
    }
    return out;
  }

  [[nodiscard]] const std::map<std::string, Var>& vars() const { return vars_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, Var> vars_;
};

}  // namespace psvo

#endif  // PSVO_PARAMS_HPP
