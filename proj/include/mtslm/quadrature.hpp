#pragma once

#include <cmath>
#include <queue>
#include <stdexcept>
#include <vector>

namespace mtslm {

struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;
  std::size_t intervals = 0;
  bool converged = false;
};

namespace detail {

struct GkPiece {
  double a, b, value, error;
  bool operator<(const GkPiece& o) const { return error < o.error; }
};

// 15-point Kronrod / 7-point Gauss pair on [a, b].
template <class F>
GkPiece gauss_kronrod15(F& f, double a, double b) {
  static constexpr double xgk[8] = {
      0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
      0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
      0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
      0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
  static constexpr double wgk[8] = {
      0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
      0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
      0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
      0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
  static constexpr double wg[4] = {
      0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
      0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

  const double c = 0.5 * (a + b), h = 0.5 * (b - a);
  const double fc = f(c);
  double k = fc * wgk[7];
  double g = fc * wg[3];
  for (int j = 0; j < 7; ++j) {
    const double dx = h * xgk[j];
    const double s = f(c - dx) + f(c + dx);
    k += wgk[j] * s;
    if (j % 2 == 1) g += wg[j / 2] * s;
  }
  return {a, b, k * h, std::abs((k - g) * h)};
}

}  // namespace detail

/// Globally adaptive Gauss-Kronrod quadrature of f over [a, b]: the piece
/// with the largest error estimate is bisected until the summed estimate
/// drops below max(abs_tol, rel_tol * |value|).
template <class F>
QuadratureResult integrate(F f, double a, double b, double abs_tol = 1e-12,
                           double rel_tol = 1e-12, std::size_t max_intervals = 4000) {
  if (!(b > a)) throw std::invalid_argument("integrate: need a < b");
  std::priority_queue<detail::GkPiece> pieces;
  pieces.push(detail::gauss_kronrod15(f, a, b));
  double value = pieces.top().value, error = pieces.top().error;
  while (error > std::max(abs_tol, rel_tol * std::abs(value)) &&
         pieces.size() < max_intervals) {
    const detail::GkPiece worst = pieces.top();
    pieces.pop();
    const double mid = 0.5 * (worst.a + worst.b);
    const auto left = detail::gauss_kronrod15(f, worst.a, mid);
    const auto right = detail::gauss_kronrod15(f, mid, worst.b);
    value += left.value + right.value - worst.value;
    error += left.error + right.error - worst.error;
    pieces.push(left);
    pieces.push(right);
  }
  // re-sum to shed accumulated cancellation in the running totals
  QuadratureResult r;
  r.intervals = pieces.size();
  double v = 0.0, e = 0.0;
  while (!pieces.empty()) {
    v += pieces.top().value;
    e += pieces.top().error;
    pieces.pop();
  }
  r.value = v;
  r.error = e;
  r.converged = e <= std::max(abs_tol, rel_tol * std::abs(v));
  return r;
}

}  // namespace mtslm
