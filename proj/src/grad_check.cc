#include "mmbert/grad_check.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mmbert/error.h"
#include "mmbert/tape.h"

namespace mmbert {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double h) {
  require(point.dtype() == DType::kF64, ErrorKind::kContract, "grad_check requires an f64 point");
  Tensor x = point.detach();
  x.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = f(x);
    require(loss.numel() == 1, ErrorKind::kContract, "grad_check: f must be scalar-valued");
    tape.backward(loss);
    analytic = x.has_grad() ? x.grad_vector() : std::vector<double>(x.numel(), 0.0);
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  auto values = x.mutable_values<double>();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f(x).item();
    values[i] = saved - h;
    const double down = f(x).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& loss, std::span<Tensor> params, double h,
                         std::size_t coords_per_param, Rng& rng) {
  for (Tensor& p : params) {
    require(p.dtype() == DType::kF64, ErrorKind::kContract,
            "grad_check_params requires f64 parameters");
    p.clear_grad();
  }
  {
    Tape tape;
    Tensor value = loss();
    tape.backward(value);
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  for (Tensor& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? p.grad_vector() : std::vector<double>(p.numel(), 0.0);
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords_per_param != 0 && coords.size() > coords_per_param) {
      rng.shuffle(coords);
      coords.resize(coords_per_param);
    }
    auto values = p.mutable_values<double>();
    for (std::size_t i : coords) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst,
                       std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace mmbert
