#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sunet/tensor.hpp"

namespace sunet {

using TensorList = std::vector<Tensor<double>>;

/// An operator together with its vector-Jacobian product.
struct DifferentiableOp {
  std::string name;
  std::function<Tensor<double>(const TensorList&)> forward;
  /// Gradients w.r.t. every input, given the gradient of the output.
  std::function<TensorList(const TensorList&, const Tensor<double>&)> backward;
};

struct GradcheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::vector<double> per_input;
  Index elements_checked = 0;
  double tolerance = 0.0;
  bool passed = false;
  std::string worst;  // "input i, element j: analytic a vs numeric b"
};

/// Compares reverse-mode gradients of ⟨op(x), r⟩ (r a fixed random projection)
/// against central finite differences for every element of every input.
/// Relative error is |a − n| / max(|a|, |n|, 1e-3).
GradcheckReport gradcheck(const DifferentiableOp& op, const TensorList& inputs, double tolerance,
                          std::uint64_t seed = 0x5eed, double step = 1e-6);

}  // namespace sunet
