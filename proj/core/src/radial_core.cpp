#include "typeii/radial_core.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace typeii {

namespace {

// Three-point Gauss-Legendre nodes and weights on [-1, 1].
constexpr std::array<double, 3> kGLx = {-0.7745966692414834, 0.0, 0.7745966692414834};
constexpr std::array<double, 3> kGLw = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};

// First of the four interpolation nodes used on panel i.
int panel_start(int i, int n) { return std::clamp(i - 1, 0, n - 4); }

// Integrals over [y_i, c] of the four cubic Lagrange basis polynomials on
// nodes y_{j0..j0+3}, weighted by x. Degree 4 integrand, exact with 3 GL points.
std::array<double, 4> panel_moments(const Vec& y, int i, double c) {
  const int j0 = panel_start(i, static_cast<int>(y.size()));
  std::array<double, 4> m{};
  const double a = y[i];
  const double half = 0.5 * (c - a), mid = 0.5 * (c + a);
  for (int q = 0; q < 3; ++q) {
    const double x = mid + half * kGLx[q];
    const double w = kGLw[q] * half * x;
    for (int k = 0; k < 4; ++k) {
      double l = 1.0;
      for (int r = 0; r < 4; ++r) {
        if (r != k) l *= (x - y[j0 + r]) / (y[j0 + k] - y[j0 + r]);
      }
      m[k] += w * l;
    }
  }
  return m;
}

}  // namespace

RadialGrid::RadialGrid(Vec y) : y_(std::move(y)) {
  const int n = size();
  pc_.resize(n - 1, 4);
  w_ = Vec::Zero(n);
  for (int i = 0; i + 1 < n; ++i) {
    const auto m = panel_moments(y_, i, y_[i + 1]);
    const int j0 = panel_start(i, n);
    for (int k = 0; k < 4; ++k) {
      pc_(i, k) = m[k];
      w_[j0 + k] += m[k] * y_[j0 + k] * y_[j0 + k];
    }
  }
  w_[0] += std::pow(y_[0], 4) / 4.0;
  ghost_ = y_[n - 1] * (y_[n - 1] / y_[n - 2]);
}

std::shared_ptr<const RadialGrid> RadialGrid::make(double y_min, double y_max, int n,
                                                   std::optional<InnerPatch> patch) {
  if (!(y_min > 0.0) || !(y_max > y_min)) {
    throw PreconditionError("make_grid: empty or invalid domain [" + format_double(y_min) +
                            ", " + format_double(y_max) + "]");
  }
  if (n < 16) throw PreconditionError("make_grid: need at least 16 nodes");
  Vec y(n);
  if (patch) {
    const int m = patch->n_patch;
    if (m < 2 || m > n - 8 || !(patch->y_patch > 0.0) || !(patch->y_patch < y_max)) {
      throw PreconditionError("make_grid: inconsistent inner patch");
    }
    const double dy = patch->y_patch / m;
    for (int k = 0; k < m; ++k) y[k] = (k + 0.5) * dy;
    const int rest = n - m;
    const double ratio = std::log(y_max / patch->y_patch) / rest;
    for (int j = 1; j <= rest; ++j) y[m + j - 1] = patch->y_patch * std::exp(ratio * j);
    y[n - 1] = y_max;
  } else {
    const double span = std::log(y_max / y_min);
    for (int i = 0; i < n; ++i) y[i] = y_min * std::exp(span * i / (n - 1));
    y[n - 1] = y_max;
  }
  for (int i = 0; i + 1 < n; ++i) {
    if (!(y[i + 1] > y[i])) throw PreconditionError("make_grid: nodes not increasing");
  }
  return std::shared_ptr<const RadialGrid>(new RadialGrid(std::move(y)));
}

std::shared_ptr<const RadialGrid> RadialGrid::make_log(double y_min, double y_max,
                                                       double h_log) {
  if (!(h_log > 0.0)) throw PreconditionError("make_grid: spacing must be positive");
  if (!(y_min > 0.0) || !(y_max > y_min)) {
    throw PreconditionError("make_grid: empty or invalid domain");
  }
  const int n = std::max(16, static_cast<int>(std::ceil(std::log(y_max / y_min) / h_log)) + 1);
  return make(y_min, y_max, n);
}

std::shared_ptr<const RadialGrid> RadialGrid::make_patched(double y_max, double h_log) {
  if (!(h_log > 0.0) || h_log > 0.25) {
    throw PreconditionError("make_grid: log spacing must lie in (0, 0.25]");
  }
  if (!(y_max > 2.0)) throw PreconditionError("make_grid: outer radius must exceed 2");
  const int m = static_cast<int>(std::lround(1.0 / h_log));
  const double dy = 1.0 / m;
  // The geometric part starts one patch spacing after the last patch node,
  // so the spacing is continuous across the junction.
  const double y_last = (m - 0.5) * dy;
  const double span = std::log(y_max / y_last);
  const int rest = std::max(8, static_cast<int>(std::ceil(span / std::log1p(dy / y_last))));
  Vec y(m + rest);
  for (int k = 0; k < m; ++k) y[k] = (k + 0.5) * dy;
  for (int j = 1; j <= rest; ++j) y[m + j - 1] = y_last * std::exp(span * j / rest);
  y[m + rest - 1] = y_max;
  return std::shared_ptr<const RadialGrid>(new RadialGrid(std::move(y)));
}

int RadialGrid::last_below(double a) const {
  const auto* b = y_.data();
  const auto* e = b + y_.size();
  return static_cast<int>(std::upper_bound(b, e, a) - b) - 1;
}

double RadialGrid::spacing_near(double a) const {
  int i = std::clamp(last_below(a), 0, size() - 2);
  return y_[i + 1] - y_[i];
}

Vec RadialGrid::cumulative(const Vec& g, double origin_power) const {
  if (!(origin_power > -1.0)) throw PreconditionError("cumulative: non-integrable origin");
  const int n = size();
  const Vec G = g * y_ * y_;
  Vec c(n);
  c[0] = g[0] * std::pow(y_[0], 4) / (origin_power + 1.0);
  for (int i = 0; i + 1 < n; ++i) {
    const int j0 = panel_start(i, n);
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += pc_(i, k) * G[j0 + k];
    c[i + 1] = c[i] + s;
  }
  return c;
}

// ---------------------------------------------------------------------------

RadialFunction::RadialFunction(GridPtr g, Vec values, std::optional<TailLaw> t)
    : grid(std::move(g)), v(std::move(values)), tail(t) {
  if (v.size() != grid->size()) throw PreconditionError("RadialFunction: size mismatch");
}

RadialFunction RadialFunction::zeros(GridPtr g) {
  const int n = g->size();
  return RadialFunction(std::move(g), Vec::Zero(n));
}

double RadialFunction::tail_defect() const {
  if (!tail) return 0.0;
  const double ym = grid->y_max();
  const double model = tail->c * std::pow(ym, tail->p) * std::pow(std::log(ym), tail->q);
  return std::abs(v[size() - 1] - model) / std::max(std::abs(model), 1e-300);
}

double RadialFunction::outer_ghost_value() const {
  const int n = size();
  const Vec& y = grid->y();
  const double yg = grid->outer_ghost();
  if (tail) {
    double r = std::pow(yg / y[n - 1], tail->p);
    if (tail->q != 0.0) r *= std::pow(std::log(yg) / std::log(y[n - 1]), tail->q);
    return v[n - 1] * r;
  }
  // Quadratic through the last three nodes in the variable log y.
  const double s0 = std::log(y[n - 3]), s1 = std::log(y[n - 2]), s2 = std::log(y[n - 1]);
  const double s = std::log(yg);
  const double l0 = (s - s1) * (s - s2) / ((s0 - s1) * (s0 - s2));
  const double l1 = (s - s0) * (s - s2) / ((s1 - s0) * (s1 - s2));
  const double l2 = (s - s0) * (s - s1) / ((s2 - s0) * (s2 - s1));
  return l0 * v[n - 3] + l1 * v[n - 2] + l2 * v[n - 1];
}

void require_same_grid(const RadialFunction& a, const RadialFunction& b) {
  if (a.grid != b.grid) throw PreconditionError("grid mismatch between radial functions");
}

RadialFunction& RadialFunction::operator+=(const RadialFunction& o) {
  require_same_grid(*this, o);
  v += o.v;
  tail.reset();
  return *this;
}

RadialFunction& RadialFunction::operator-=(const RadialFunction& o) {
  require_same_grid(*this, o);
  v -= o.v;
  tail.reset();
  return *this;
}

RadialFunction& RadialFunction::operator*=(double a) {
  v *= a;
  if (tail) tail->c *= a;
  return *this;
}

RadialFunction operator+(RadialFunction a, const RadialFunction& b) { return a += b; }
RadialFunction operator-(RadialFunction a, const RadialFunction& b) { return a -= b; }
RadialFunction operator*(double a, RadialFunction f) { return f *= a; }
RadialFunction operator-(RadialFunction a) { return a *= -1.0; }
RadialFunction operator*(const RadialFunction& a, const RadialFunction& b) {
  require_same_grid(a, b);
  return RadialFunction(a.grid, a.v * b.v);
}

// ---------------------------------------------------------------------------

double eval_kernel(Kernel which, double y) {
  if (y < 0.0) throw PreconditionError("eval_kernel: negative radius");
  const double z = y * y / 8.0;
  const double q = 1.0 / (1.0 + z);
  switch (which) {
    case Kernel::Q:
      return q;
    case Kernel::LQ:
      return (1.0 - z) * q * q;
    case Kernel::L2Q:
      return (1.0 - 6.0 * z + z * z) * q * q * q;
    case Kernel::V:
      return 3.0 * q * q;
    case Kernel::LV:
      return 6.0 * q * (1.0 - z) * q * q - 3.0 * q * q;
    case Kernel::Gamma:
    case Kernel::LGamma: {
      if (!(y > 0.0)) throw PreconditionError("eval_kernel: Gamma is singular at the origin");
      const double y2 = y * y, p = y2 + 8.0;
      const double a = (y2 - 8.0) / (p * p);
      const double b = y2 / 16.0 + 6.0 * std::log(y) - 583.0 / 112.0 - 4.0 / y2;
      const double gamma = a * b - 64.0 / (p * p);
      if (which == Kernel::Gamma) return gamma;
      const double da = 2.0 * y * (24.0 - y2) / (p * p * p);
      const double db = y / 8.0 + 6.0 / y + 8.0 / (y2 * y);
      const double dgamma = da * b + a * db + 256.0 * y / (p * p * p);
      return gamma + y * dgamma;
    }
  }
  return 0.0;
}

RadialFunction sample_kernel(Kernel which, const GridPtr& g) {
  auto f = RadialFunction::sample(g, [which](double y) { return eval_kernel(which, y); });
  switch (which) {
    case Kernel::Q:
      f.tail = TailLaw{-2.0, 0.0, 8.0};
      break;
    case Kernel::LQ:
      f.tail = TailLaw{-2.0, 0.0, -8.0};
      break;
    case Kernel::Gamma:
      f.tail = TailLaw{0.0, 0.0, 1.0 / 16.0};
      break;
    default:
      break;
  }
  return f;
}

// ---------------------------------------------------------------------------

namespace {

// Truncated Taylor series up to order 4 for derivatives of the cutoff.
struct Jet {
  std::array<double, 5> c{};
};

Jet jmul(const Jet& a, const Jet& b) {
  Jet r;
  for (int k = 0; k < 5; ++k)
    for (int j = 0; j <= k; ++j) r.c[k] += a.c[j] * b.c[k - j];
  return r;
}

Jet jdiv(const Jet& a, const Jet& b) {
  Jet r;
  for (int k = 0; k < 5; ++k) {
    double s = a.c[k];
    for (int j = 1; j <= k; ++j) s -= b.c[j] * r.c[k - j];
    r.c[k] = s / b.c[0];
  }
  return r;
}

Jet jexp(const Jet& a) {
  Jet r;
  r.c[0] = std::exp(a.c[0]);
  for (int k = 1; k < 5; ++k) {
    double s = 0.0;
    for (int j = 1; j <= k; ++j) s += j * a.c[j] * r.c[k - j];
    r.c[k] = s / k;
  }
  return r;
}

// exp(-1/t) expanded around t with dt/dx = sign.
Jet flat(double t, double sign) {
  Jet r;
  if (t < 2e-3) return r;  // below this the function and its derivatives underflow
  Jet tj;
  tj.c[0] = t;
  tj.c[1] = sign;
  Jet one;
  one.c[0] = -1.0;
  return jexp(jdiv(one, tj));
}

constexpr double kFactorial[5] = {1, 1, 2, 6, 24};

}  // namespace

namespace cutoff {

double chi(double x, int k) {
  if (k < 0 || k > 4) throw PreconditionError("cutoff: derivative order must be 0..4");
  if (x <= 1.0) return k == 0 ? 1.0 : 0.0;
  if (x >= 2.0) return 0.0;
  const Jet a = flat(2.0 - x, -1.0);
  const Jet b = flat(x - 1.0, 1.0);
  Jet den;
  for (int j = 0; j < 5; ++j) den.c[j] = a.c[j] + b.c[j];
  return kFactorial[k] * jdiv(a, den).c[k];
}

double scaled_dy(double y, double B, int k) { return chi(y / B, k) / std::pow(B, k); }

double scaled_dB(double y, double B) { return -chi(y / B, 1) * y / (B * B); }

}  // namespace cutoff

double B0_of(double b1) { return 1.0 / std::sqrt(b1); }
double B1_of(double b1) { return std::abs(std::log(b1)) / std::sqrt(b1); }
double dB0_db1(double b1) { return -0.5 * std::pow(b1, -1.5); }
double dB1_db1(double b1) {
  return -std::pow(b1, -1.5) * (1.0 + 0.5 * std::abs(std::log(b1)));
}

// ---------------------------------------------------------------------------

Stencil stencil_at(const RadialGrid& g, int i) {
  const Vec& y = g.y();
  const int n = g.size();
  const double yl = i == 0 ? -y[0] : y[i - 1];
  const double yr = i == n - 1 ? g.outer_ghost() : y[i + 1];
  const double hl = y[i] - yl, hr = yr - y[i];
  Stencil s{};
  s.d1[0] = -hr / (hl * (hl + hr));
  s.d1[1] = (hr - hl) / (hl * hr);
  s.d1[2] = hl / (hr * (hl + hr));
  s.d2[0] = 2.0 / (hl * (hl + hr));
  s.d2[1] = -2.0 / (hl * hr);
  s.d2[2] = 2.0 / (hr * (hl + hr));
  return s;
}

namespace {

// Applies a * f' + b * f'' + c * f at every node, where the coefficients
// depend on y. The origin ghost mirrors f (even extension).
template <class Coef>
RadialFunction apply_stencil(const RadialFunction& f, OuterBC bc, Coef&& coef) {
  const auto& g = *f.grid;
  const int n = g.size();
  const Vec& y = g.y();
  const double ghost = bc == OuterBC::Dirichlet ? 0.0 : f.outer_ghost_value();
  Vec out(n);
  for (int i = 0; i < n; ++i) {
    const Stencil s = stencil_at(g, i);
    const double fl = i == 0 ? f.v[0] : f.v[i - 1];
    const double fr = i == n - 1 ? ghost : f.v[i + 1];
    const double d1 = s.d1[0] * fl + s.d1[1] * f.v[i] + s.d1[2] * fr;
    const double d2 = s.d2[0] * fl + s.d2[1] * f.v[i] + s.d2[2] * fr;
    double a, b, c;
    coef(y[i], a, b, c);
    out[i] = a * d1 + b * d2 + c * f.v[i];
  }
  return RadialFunction(f.grid, std::move(out));
}

}  // namespace

RadialFunction derivative(const RadialFunction& f, OuterBC bc) {
  return apply_stencil(f, bc, [](double, double& a, double& b, double& c) {
    a = 1.0;
    b = 0.0;
    c = 0.0;
  });
}

RadialFunction apply_Lambda(const RadialFunction& f, OuterBC bc) {
  return apply_stencil(f, bc, [](double y, double& a, double& b, double& c) {
    a = y;
    b = 0.0;
    c = 1.0;
  });
}

RadialFunction apply_Laplacian(const RadialFunction& f, OuterBC bc) {
  return apply_stencil(f, bc, [](double y, double& a, double& b, double& c) {
    a = 3.0 / y;
    b = 1.0;
    c = 0.0;
  });
}

RadialFunction apply_H(const RadialFunction& f, OuterBC bc) {
  return apply_stencil(f, bc, [](double y, double& a, double& b, double& c) {
    a = -3.0 / y;
    b = -1.0;
    c = -eval_kernel(Kernel::V, y);
  });
}

RadialFunction apply_H_power(const RadialFunction& f, int k, OuterBC bc) {
  RadialFunction r = f;
  for (int j = 0; j < k; ++j) r = apply_H(r, bc);
  return r;
}

double inner(const RadialFunction& f, const RadialFunction& g, std::optional<double> mask) {
  require_same_grid(f, g);
  const RadialGrid& gr = *f.grid;
  const Vec p = f.v * g.v;
  if (!mask || *mask >= gr.y_max()) return (p * gr.weights()).sum();
  const double a = *mask;
  const Vec& y = gr.y();
  if (a <= y[0]) return p[0] * std::pow(a, 4) / 4.0;
  const int last = gr.last_below(a);
  const Vec c = gr.cumulative(p);
  double s = c[last];
  if (y[last] < a) {
    const auto m = panel_moments(y, last, a);
    const int j0 = panel_start(last, gr.size());
    for (int k = 0; k < 4; ++k) s += m[k] * p[j0 + k] * y[j0 + k] * y[j0 + k];
  }
  return s;
}

double norm2(const RadialFunction& f, std::optional<double> mask) { return inner(f, f, mask); }

// ---------------------------------------------------------------------------

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

void write_csv(const RadialFunction& f, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os << "y,value\n";
  for (int i = 0; i < f.size(); ++i) {
    os << format_double(f.y()[i]) << ',' << format_double(f.v[i]) << '\n';
  }
}

RadialFunction read_csv(const GridPtr& g, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "y,value") throw std::runtime_error("unexpected CSV header in " + path.string());
  Vec v(g->size());
  int i = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || i >= g->size()) {
      throw std::runtime_error("malformed CSV row in " + path.string());
    }
    const double y = std::stod(line.substr(0, comma));
    if (std::abs(y - g->y()[i]) > 1e-12 * g->y()[i]) {
      throw PreconditionError("CSV abscissae do not match the grid");
    }
    v[i++] = std::stod(line.substr(comma + 1));
  }
  if (i != g->size()) throw std::runtime_error("short CSV in " + path.string());
  return RadialFunction(g, std::move(v));
}

}  // namespace typeii
