#include "sunet/gradcheck.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace sunet {

GradcheckReport gradcheck(const DifferentiableOp& op, const TensorList& inputs, double tolerance,
                          std::uint64_t seed, double step) {
  GradcheckReport report;
  report.op = op.name;
  report.tolerance = tolerance;

  const Tensor<double> y0 = op.forward(inputs);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<double> proj(y0.shape());
  for (Index i = 0; i < proj.size(); ++i) proj.data()[i] = normal(rng);

  const TensorList analytic = op.backward(inputs, proj);
  if (analytic.size() != inputs.size()) throw std::logic_error("gradcheck: backward returned wrong arity");

  TensorList probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!(analytic[k].shape() == inputs[k].shape())) {
      throw ShapeError("gradcheck: gradient " + std::to_string(k) + " has shape " + to_string(analytic[k].shape()));
    }
    double worst_here = 0.0;
    for (Index i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data()[i];
      probe[k].data()[i] = orig + step;
      const double plus = op.forward(probe).vec().dot(proj.vec());
      probe[k].data()[i] = orig - step;
      const double minus = op.forward(probe).vec().dot(proj.vec());
      probe[k].data()[i] = orig;

      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
      ++report.elements_checked;
      worst_here = std::max(worst_here, rel);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        std::ostringstream os;
        os << "input " << k << ", element " << i << ": analytic " << a << " vs numeric " << numeric;
        report.worst = os.str();
      }
    }
    report.per_input.push_back(worst_here);
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace sunet
