#include "riskkit/adversarial.hpp"

#include <algorithm>
#include <cmath>

#include "riskkit/epistemic.hpp"
#include "riskkit/errors.hpp"

namespace riskkit {
namespace {

void clear_parameter_grads(const RiskAwareModel& model) {
  for (auto p : model.shared_parameters()) p.zero_grad();
  if (const auto* e = model.ensemble()) {
    for (std::size_t i = 0; i < e->size(); ++i) clear_parameter_grads(e->member(i));
  }
}

}  // namespace

Tensor fgsm_perturb(const RiskAwareModel& model, const Tensor& x, const Tensor& y, double epsilon,
                    const ValueRange& range) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("fgsm: epsilon must be finite and >= 0");
  if (!(range.lo <= range.hi)) throw ConfigError("fgsm: empty clamp range");
  if (!x.defined()) throw ShapeError("fgsm: undefined input");
  if (epsilon == 0.0) return x.detach().copy();

  Tensor input = x.detach().copy();
  input.set_requires_grad(true);
  const Tensor loss = model.task_loss(input, y);
  loss.backward();
  const auto g = input.grad();
  const bool finite = all_finite(g);
  std::vector<double> grad(g.begin(), g.end());
  clear_parameter_grads(model);
  if (!finite) throw NumericError("fgsm: input gradient is not finite");

  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double step = grad[i] > 0.0 ? epsilon : (grad[i] < 0.0 ? -epsilon : 0.0);
    double v = xv[i] + step;
    if (v > range.hi) v = std::max(range.hi, xv[i]);
    if (v < range.lo) v = std::min(range.lo, xv[i]);
    out[i] = v;
  }
  return Tensor(x.shape(), std::move(out));
}

}  // namespace riskkit
