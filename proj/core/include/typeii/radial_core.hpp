#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace typeii {

/// Thrown when an operation is called outside its numerical preconditions.
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vec = Eigen::ArrayXd;

/// Uniform cell-centred patch glued in front of the logarithmic part.
struct InnerPatch {
  double y_patch = 1.0;  // outer edge of the uniform patch
  int n_patch = 32;      // number of uniform nodes inside it
};

/**
 * Strictly increasing radial nodes with the quadrature needed for the
 * y^3 dy measure. On every panel [y_i, y_{i+1}] the product g(y) y^2 is
 * replaced by its cubic interpolant on four neighbouring nodes and
 * integrated exactly against y dy. This keeps fourth order even when g
 * carries the 1/y^2 singularity of Gamma at the origin.
 */
class RadialGrid {
 public:
  static std::shared_ptr<const RadialGrid> make(double y_min, double y_max, int n,
                                                std::optional<InnerPatch> patch = {});
  /// Log grid with a prescribed spacing in log y instead of a node count.
  static std::shared_ptr<const RadialGrid> make_log(double y_min, double y_max, double h_log);
  /**
   * Uniform cell-centred patch on [0, 1] with spacing h_log, followed by
   * geometric nodes with ratio exp(h_log) up to y_max. The patch keeps
   * repeated finite differences well conditioned near the origin.
   */
  static std::shared_ptr<const RadialGrid> make_patched(double y_max, double h_log);

  int size() const { return static_cast<int>(y_.size()); }
  const Vec& y() const { return y_; }
  double y_min() const { return y_[0]; }
  double y_max() const { return y_[y_.size() - 1]; }
  /// Weights of the full-grid quadrature (origin piece folded into node 0).
  const Vec& weights() const { return w_; }
  /// Ghost abscissa beyond the last node (same ratio as the last panel).
  double outer_ghost() const { return ghost_; }
  /// Index of the last node with y <= a (or -1).
  int last_below(double a) const;
  /// Local spacing near a given radius.
  double spacing_near(double a) const;

  /**
   * Cumulative integral C_i = int_0^{y_i} g(x) x^3 dx. The piece [0, y_0]
   * assumes g(x) x^3 ~ x^origin_power there (3 for a regular g, 1 when g
   * carries the 1/x^2 singularity of Gamma).
   */
  Vec cumulative(const Vec& g, double origin_power = 3.0) const;

 private:
  explicit RadialGrid(Vec y);
  Vec y_, w_;
  Eigen::ArrayX4d pc_;  // panel moments of the cubic basis against y dy
  double ghost_ = 0.0;
};

using GridPtr = std::shared_ptr<const RadialGrid>;

/// Known behaviour f ~ c y^p (log y)^q beyond the last node.
struct TailLaw {
  double p = 0.0;
  double q = 0.0;
  double c = 1.0;
};

/// Sampled radial profile bound to a shared grid.
struct RadialFunction {
  GridPtr grid;
  Vec v;
  std::optional<TailLaw> tail;

  RadialFunction() = default;
  RadialFunction(GridPtr g, Vec values, std::optional<TailLaw> t = {});
  static RadialFunction zeros(GridPtr g);
  template <class F>
  static RadialFunction sample(GridPtr g, F&& f) {
    Vec v(g->size());
    for (int i = 0; i < g->size(); ++i) v[i] = f(g->y()[i]);
    return RadialFunction(std::move(g), std::move(v));
  }

  int size() const { return static_cast<int>(v.size()); }
  const Vec& y() const { return grid->y(); }
  bool all_finite() const { return v.allFinite(); }
  /// Relative mismatch between the last node and the declared tail law.
  double tail_defect() const;
  /// Ghost value past the outer node, from the tail law or a quadratic in log y.
  double outer_ghost_value() const;

  RadialFunction& operator+=(const RadialFunction& o);
  RadialFunction& operator-=(const RadialFunction& o);
  RadialFunction& operator*=(double a);
};

RadialFunction operator+(RadialFunction a, const RadialFunction& b);
RadialFunction operator-(RadialFunction a, const RadialFunction& b);
RadialFunction operator*(double a, RadialFunction f);
RadialFunction operator*(const RadialFunction& a, const RadialFunction& b);
RadialFunction operator-(RadialFunction a);

void require_same_grid(const RadialFunction& a, const RadialFunction& b);

// ---------------------------------------------------------------------------
// Closed-form kernels of the stationary problem.

enum class Kernel { Q, LQ, L2Q, Gamma, LGamma, V, LV };

double eval_kernel(Kernel which, double y);
RadialFunction sample_kernel(Kernel which, const GridPtr& g);

// ---------------------------------------------------------------------------
// Cutoff chi: 1 on [0,1], 0 on [2,inf), smooth and non-increasing.

namespace cutoff {
/// d^k chi / dx^k at x, for k = 0..4.
double chi(double x, int k = 0);
/// chi(y / B).
inline double scaled(double y, double B) { return chi(y / B); }
/// d/dy of chi(y / B), up to order 4.
double scaled_dy(double y, double B, int k);
/// d/dB of chi(y / B).
double scaled_dB(double y, double B);
}  // namespace cutoff

/// Scales attached to b1.
double B0_of(double b1);
double B1_of(double b1);
double dB0_db1(double b1);
double dB1_db1(double b1);

// ---------------------------------------------------------------------------
// Differential operators on sampled profiles.

/// Boundary treatment at the outer node.
enum class OuterBC { Extrapolate, Dirichlet };

RadialFunction derivative(const RadialFunction& f, OuterBC bc = OuterBC::Extrapolate);
RadialFunction apply_Lambda(const RadialFunction& f, OuterBC bc = OuterBC::Extrapolate);
RadialFunction apply_Laplacian(const RadialFunction& f, OuterBC bc = OuterBC::Extrapolate);
/// H f = -Delta f - 3 Q^2 f.
RadialFunction apply_H(const RadialFunction& f, OuterBC bc = OuterBC::Extrapolate);
RadialFunction apply_H_power(const RadialFunction& f, int k, OuterBC bc = OuterBC::Extrapolate);

/// Three-point coefficients (left, centre, right) of d/dy and d^2/dy^2 at node i.
struct Stencil {
  double d1[3];
  double d2[3];
};
Stencil stencil_at(const RadialGrid& g, int i);

/// int f g y^3 dy over y <= mask (whole grid by default).
double inner(const RadialFunction& f, const RadialFunction& g,
             std::optional<double> mask = {});
double norm2(const RadialFunction& f, std::optional<double> mask = {});

// ---------------------------------------------------------------------------
// CSV serialization with header "y,value".

std::string format_double(double x);
void write_csv(const RadialFunction& f, const std::filesystem::path& path);
RadialFunction read_csv(const GridPtr& g, const std::filesystem::path& path);

}  // namespace typeii
