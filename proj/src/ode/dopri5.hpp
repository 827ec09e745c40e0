#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "icenode/ode.hpp"

namespace icenode::ode::detail {

// Dormand-Prince 5(4) tableau.
inline constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
inline constexpr double a21 = 1.0 / 5.0;
inline constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
inline constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
inline constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0,
                        a53 = 64448.0 / 6561.0, a54 = -212.0 / 729.0;
inline constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                        a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
inline constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                        a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
// Fifth minus embedded fourth order weights.
inline constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                        e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
// Embedded fourth order weights.
inline constexpr double b41 = 5179.0 / 57600.0, b43 = 7571.0 / 16695.0, b44 = 393.0 / 640.0,
                        b45 = -92097.0 / 339200.0, b46 = 187.0 / 2100.0, b47 = 1.0 / 40.0;
// Dense output (Shampine).
inline constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                        d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                        d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

// Lower-triangular stage matrix, row i holds a_{i+1, j+1}; row 6 is the
// fifth-order solution weights.
inline constexpr double A[7][6] = {
    {0, 0, 0, 0, 0, 0},
    {a21, 0, 0, 0, 0, 0},
    {a31, a32, 0, 0, 0, 0},
    {a41, a42, a43, 0, 0, 0},
    {a51, a52, a53, a54, 0, 0},
    {a61, a62, a63, a64, a65, 0},
    {a71, 0, a73, a74, a75, a76},
};

// Gauss-Legendre nodes and weights on [0, 1].
inline const double kGaussNodes[3] = {0.5 - std::sqrt(15.0) / 10.0, 0.5,
                                      0.5 + std::sqrt(15.0) / 10.0};
inline constexpr double kGaussWeights[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};

// Fills the five dense-output vectors of a step.
inline void dense_coefficients(std::span<const double> y0, std::span<const double> y1,
                               const std::vector<std::vector<double>>& k, double dt,
                               std::span<double> out) {
  const std::size_t d = y0.size();
  for (std::size_t i = 0; i < d; ++i) {
    const double ydiff = y1[i] - y0[i];
    const double bspl = dt * k[0][i] - ydiff;
    out[i] = y0[i];
    out[d + i] = ydiff;
    out[2 * d + i] = bspl;
    out[3 * d + i] = ydiff - dt * k[6][i] - bspl;
    out[4 * d + i] = dt * (d1 * k[0][i] + d3 * k[2][i] + d4 * k[3][i] + d5 * k[4][i] +
                           d6 * k[5][i] + d7 * k[6][i]);
  }
}

inline void dense_eval(std::span<const double> coeffs, double theta, std::span<double> out) {
  const std::size_t d = out.size();
  const double theta1 = 1.0 - theta;
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = coeffs[i] +
             theta * (coeffs[d + i] +
                      theta1 * (coeffs[2 * d + i] +
                                theta * (coeffs[3 * d + i] + theta1 * coeffs[4 * d + i])));
  }
}

struct StepView {
  double t;
  double dt;
  double t_end;  // exact end of the step, span bounds included
  std::span<const double> y0;
  std::span<const double> y1;
  const std::vector<std::vector<double>>& k;  // 7 stage derivatives
};

// Weighted RMS norm used for both error control and step initialisation.
inline double rms_norm(std::span<const double> v, std::span<const double> y,
                       const SolverConfig& cfg) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double sc = cfg.atol + cfg.rtol * std::abs(y[i]);
    const double r = v[i] / sc;
    s += r * r;
  }
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

/// Adaptive integration of y' = rhs(y) from t0 to t1 (either direction);
/// on_step is called with every accepted step.
template <class Rhs, class OnStep>
void integrate(Rhs& rhs, std::vector<double>& y, double t0, double t1, const SolverConfig& cfg,
               OnStep&& on_step, SolverStats& stats) {
  const std::size_t n = y.size();
  if (t1 == t0) return;
  const double dir = t1 > t0 ? 1.0 : -1.0;

  // Long spans are cut into sub-spans that restart the controller.
  std::vector<double> bounds{t0};
  if (std::abs(t1 - t0) > kLongInterval) {
    double edge = t0;
    while (std::abs(t1 - edge) > kSubSpan) {
      edge += dir * kSubSpan;
      bounds.push_back(edge);
    }
  }
  bounds.push_back(t1);

  std::vector<std::vector<double>> k(7, std::vector<double>(n));
  std::vector<double> ytmp(n), ynew(n), err(n), scale_ref(n);

  for (std::size_t span = 0; span + 1 < bounds.size(); ++span) {
    const double a = bounds[span];
    const double b = bounds[span + 1];
    double t = a;
    rhs(y, k[0]);
    ++stats.rhs_evals;

    double h = 0.0;
    if (cfg.initial_step > 0.0) {
      h = cfg.initial_step;
    } else {
      // Hairer & Wanner's starting step heuristic.
      const double d0 = rms_norm(y, y, cfg);
      const double d1n = rms_norm(k[0], y, cfg);
      double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
      h0 = std::min(h0, std::abs(b - a));
      for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + dir * h0 * k[0][i];
      rhs(ytmp, k[1]);
      ++stats.rhs_evals;
      for (std::size_t i = 0; i < n; ++i) err[i] = (k[1][i] - k[0][i]) / h0;
      const double d2 = rms_norm(err, y, cfg);
      const double dm = std::max(d1n, d2);
      const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
      h = std::min(100.0 * h0, h1);
    }
    h = std::min(h, std::abs(b - a));

    std::size_t steps = 0;
    bool last_rejected = false;
    while (dir * (b - t) > 0.0) {
      if (++steps > cfg.max_steps) {
        throw SolverDivergence("ODE solve exceeded " + std::to_string(cfg.max_steps) +
                                   " steps at t=" + std::to_string(t),
                               t, y);
      }
      bool last = false;
      if (h >= std::abs(b - t) * (1.0 - 1e-12)) {
        h = std::abs(b - t);
        last = true;
      }
      if (h <= std::abs(t) * 1e-14 || h < 1e-300) {
        throw SolverDivergence("ODE step size underflow at t=" + std::to_string(t), t, y);
      }
      const double dt = dir * h;
      for (int s = 1; s < 7; ++s) {
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int j = 0; j < s; ++j) acc += A[s][j] * k[j][i];
          ytmp[i] = y[i] + dt * acc;
        }
        if (s == 6) {
          ynew = ytmp;
        }
        rhs(ytmp, k[s]);
      }
      stats.rhs_evals += 6;
      double e = 0.0;
      bool finite = true;
      for (std::size_t i = 0; i < n; ++i) {
        err[i] = dt * (e1 * k[0][i] + e3 * k[2][i] + e4 * k[3][i] + e5 * k[4][i] +
                       e6 * k[5][i] + e7 * k[6][i]);
        scale_ref[i] = std::max(std::abs(y[i]), std::abs(ynew[i]));
        finite = finite && std::isfinite(ynew[i]) && std::isfinite(k[6][i]);
      }
      if (finite) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double r = err[i] / (cfg.atol + cfg.rtol * scale_ref[i]);
          s += r * r;
        }
        e = n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
      }
      if (!finite || !std::isfinite(e)) {
        ++stats.rejected;
        h *= 0.2;
        last_rejected = true;
        continue;
      }
      if (e <= 1.0) {
        const double t_new = last ? b : t + dt;
        on_step(StepView{t, dt, t_new, y, ynew, k});
        ++stats.accepted;
        t = t_new;
        y.swap(ynew);
        std::swap(k[0], k[6]);  // first-same-as-last
        double fac = e == 0.0 ? 10.0 : std::clamp(0.9 * std::pow(e, -0.2), 0.2, 10.0);
        if (last_rejected) fac = std::min(fac, 1.0);
        h *= fac;
        last_rejected = false;
        if (last) break;
      } else {
        ++stats.rejected;
        h *= std::max(0.2, 0.9 * std::pow(e, -0.2));
        last_rejected = true;
      }
    }
  }
}

}  // namespace icenode::ode::detail
