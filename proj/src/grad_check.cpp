#include "densemapnet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "densemapnet/ops.hpp"

namespace dmn {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradCheckEntry& e) {
    return e.finite && e.max_rel_error < tolerance;
  });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::string GradCheckReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  for (const auto& e : entries) {
    os << "input=" << e.name << " max_rel_error=" << e.max_rel_error
       << " max_abs_error=" << e.max_abs_error << " worst_index=" << e.worst_index
       << " finite=" << (e.finite ? 1 : 0) << " tolerance=" << tolerance
       << " status=" << ((e.finite && e.max_rel_error < tolerance) ? "pass" : "fail") << '\n';
  }
  return os.str();
}

GradCheckReport grad_check(const GradCheckForward& forward, const GradCheckBackward& backward,
                           const std::vector<Tensor<double>>& inputs,
                           const std::vector<std::string>& names,
                           const GradCheckOptions& options) {
  if (names.size() != inputs.size()) {
    throw ShapeError("grad_check: one name per input required");
  }
  const Tensor<double> out = forward(inputs);
  Tensor<double> weights(out.shape());
  for (std::int64_t i = 0; i < weights.size(); ++i) {
    weights.ptr()[i] = 0.5 + ops::counter_uniform(options.weight_seed, 0, static_cast<std::uint64_t>(i));
  }
  auto loss = [&](const std::vector<Tensor<double>>& in) {
    const Tensor<double> y = forward(in);
    double s = 0.0;
    for (std::int64_t i = 0; i < y.size(); ++i) s += weights.ptr()[i] * y.ptr()[i];
    return s;
  };

  const std::vector<Tensor<double>> analytic = backward(inputs, weights);
  if (analytic.size() != inputs.size()) {
    throw ShapeError("grad_check: backward returned the wrong number of gradients");
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    require_same_shape(analytic[k].shape(), inputs[k].shape(), "grad_check " + names[k]);
    GradCheckEntry entry;
    entry.name = names[k];
    for (std::int64_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = probe[k].ptr()[i];
      probe[k].ptr()[i] = saved + options.step;
      const double up = loss(probe);
      probe[k].ptr()[i] = saved - options.step;
      const double down = loss(probe);
      probe[k].ptr()[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[k].ptr()[i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        entry.finite = false;
        entry.worst_index = i;
        continue;
      }
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      if (rel > entry.max_rel_error || entry.worst_index < 0) {
        if (rel >= entry.max_rel_error) entry.worst_index = i;
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace dmn
