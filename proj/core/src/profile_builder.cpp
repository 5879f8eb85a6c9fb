#include "typeii/profile_builder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include <Eigen/QR>

#include "json.hpp"

namespace typeii {

namespace {

RadialFunction scaled_copy(const RadialFunction& f, double a) {
  RadialFunction r(f.grid, f.v * a);
  return r;
}

double mono_weight(const MonoKey& k, const BVector& b) {
  return std::pow(b.b1, k.first) * std::pow(b.b2, k.second);
}

// Samples chi(y / B) and its first two y-derivatives.
struct CutoffSamples {
  Vec chi, d1, d2, dB;
};

CutoffSamples sample_cutoff(const GridPtr& g, double B) {
  const int n = g->size();
  CutoffSamples c{Vec(n), Vec(n), Vec(n), Vec(n)};
  for (int i = 0; i < n; ++i) {
    const double y = g->y()[i];
    c.chi[i] = cutoff::scaled(y, B);
    c.d1[i] = cutoff::scaled_dy(y, B, 1);
    c.d2[i] = cutoff::scaled_dy(y, B, 2);
    c.dB[i] = cutoff::scaled_dB(y, B);
  }
  return c;
}

// d/dy of Lambda Q.
double dLQ(double y) {
  const double z = y * y / 8.0;
  return 0.25 * y * (z - 3.0) / std::pow(1.0 + z, 3);
}

}  // namespace

// ---------------------------------------------------------------------------
// Monomial algebra.

void mono_add(MonomialMap& m, const MonoKey& k, const RadialFunction& f, double a) {
  auto it = m.find(k);
  if (it == m.end()) {
    m.emplace(k, scaled_copy(f, a));
  } else {
    require_same_grid(it->second, f);
    it->second.v += a * f.v;
  }
}

RadialFunction mono_eval(const MonomialMap& m, const BVector& b, const GridPtr& g) {
  RadialFunction r = RadialFunction::zeros(g);
  for (const auto& [k, f] : m) {
    const double w = mono_weight(k, b);
    if (w != 0.0) r.v += w * f.v;
  }
  return r;
}

MonomialMap mono_product(const MonomialMap& a, const MonomialMap& b, int min_order,
                         int max_order) {
  MonomialMap r;
  for (const auto& [ka, fa] : a) {
    for (const auto& [kb, fb] : b) {
      const MonoKey k{ka.first + kb.first, ka.second + kb.second};
      const int o = mono_order(k);
      if (o < min_order || o > max_order) continue;
      mono_add(r, k, fa * fb);
    }
  }
  return r;
}

BRates system_rates(const BVector& b, double c_b) {
  return {-b.b1 * b.b1 * (1.0 + c_b) + b.b2, -b.b1 * b.b2 * (3.0 + c_b)};
}

GridPtr grid_for_b1(double b1, double h_log) {
  if (!(b1 > 0.0 && b1 < 0.5)) throw PreconditionError("grid_for_b1: b1 must lie in (0, 0.5)");
  return RadialGrid::make_patched(std::max(4.0 * B1_of(b1), 8.0 * B0_of(b1)), h_log);
}

// ---------------------------------------------------------------------------

ProfileBuilder::ProfileBuilder(GridPtr grid) : grid_(std::move(grid)) {
  if (!grid_) throw PreconditionError("ProfileBuilder: null grid");
  basis_.grid = grid_;
  basis_.Q = sample_kernel(Kernel::Q, grid_);
  basis_.LQ = sample_kernel(Kernel::LQ, grid_);
  basis_.L2Q = sample_kernel(Kernel::L2Q, grid_);
  basis_.Gamma = sample_kernel(Kernel::Gamma, grid_);
  basis_.LGamma = sample_kernel(Kernel::LGamma, grid_);
  basis_.V = sample_kernel(Kernel::V, grid_);
  basis_.LV = sample_kernel(Kernel::LV, grid_);
  auto t1 = invert_H_full(-basis_.LQ);
  basis_.T1 = std::move(t1.u);
  basis_.LT1 = std::move(t1.Lu);
  auto t2 = invert_H_full(-basis_.T1);
  basis_.T2 = std::move(t2.u);
  basis_.LT2 = std::move(t2.Lu);
}

GreenSolution ProfileBuilder::invert_H_full(const RadialFunction& f) const {
  if (f.grid != grid_) throw PreconditionError("invert_H: source lives on another grid");
  if (!f.all_finite()) throw PreconditionError("invert_H: source is not finite");
  const Vec& y = grid_->y();
  // Local power of the source at the origin. A smooth source has a
  // non-negative power; y^-2 or worse makes the Gamma moment diverge.
  const double f0 = std::abs(f.v[0]), f1 = std::abs(f.v[1]);
  if (f0 > 0.0 && f1 > 0.0) {
    const double p = std::log(f1 / f0) / std::log(y[1] / y[0]);
    if (p < -1.5) {
      throw PreconditionError("invert_H: source is not integrable at the origin (local power " +
                              format_double(p) + ")");
    }
  }
  const Vec c1 = grid_->cumulative(f.v * basis_.LQ.v, 3.0);
  const Vec c2 = grid_->cumulative(f.v * basis_.Gamma.v, 1.0);
  GreenSolution s{RadialFunction(grid_, basis_.Gamma.v * c1 - basis_.LQ.v * c2),
                  RadialFunction(grid_, basis_.LGamma.v * c1 - basis_.L2Q.v * c2)};
  return s;
}

RadialFunction ProfileBuilder::invert_H(const RadialFunction& f) const {
  return invert_H_full(f).u;
}

const RadialFunction& ProfileBuilder::build_T(int k) const {
  if (k == 1) return basis_.T1;
  if (k == 2) return basis_.T2;
  throw PreconditionError("build_T: k must be 1 or 2");
}

double ProfileBuilder::effective_M(double M, double b1) {
  return std::min(M, B0_of(b1) / 10.0);
}

RadiationProfile ProfileBuilder::build_radiation(double b1) const {
  if (!(b1 > 0.0 && b1 < 0.5)) {
    throw PreconditionError("build_radiation: b1 must lie in (0, 0.5)");
  }
  RadiationProfile r;
  r.b1 = b1;
  r.B0 = B0_of(b1);
  r.B1 = B1_of(b1);
  if (grid_->y_max() < 6.0 * r.B0) {
    throw PreconditionError("build_radiation: grid must reach 6 B0 = " + format_double(6.0 * r.B0) +
                            " (y_max = " + format_double(grid_->y_max()) + ")");
  }
  const int n = grid_->size();
  const Vec& y = grid_->y();
  Vec chi4(n), chi3(n);
  for (int i = 0; i < n; ++i) {
    chi4[i] = cutoff::scaled(y[i], r.B0 / 4.0);
    chi3[i] = cutoff::scaled(y[i], 3.0 * r.B0);
  }
  const Vec& LQ = basis_.LQ.v;
  const Vec& G = basis_.Gamma.v;
  const RadialFunction chiLQ(grid_, chi4 * LQ);
  r.c_b = 64.0 / inner(chiLQ, basis_.LQ);
  r.d_b = r.c_b * inner(RadialFunction(grid_, chi4 * G), basis_.LQ);
  // Sigma + c T1 written with the complementary cutoff, so that it vanishes
  // exactly wherever chi_{B0/4} = 1.
  const Vec ca = grid_->cumulative((chi4 - 1.0) * LQ * LQ, 3.0);
  const Vec cb = grid_->cumulative((chi4 - 1.0) * G * LQ, 1.0);
  r.Sigma_tilde =
      RadialFunction(grid_, r.c_b * G * ca - r.c_b * LQ * cb + r.d_b * (1.0 - chi3) * LQ);
  r.Sigma = r.Sigma_tilde - r.c_b * basis_.T1;
  r.Hinv_Sigma_tilde = invert_H(r.Sigma_tilde);
  return r;
}

// ---------------------------------------------------------------------------
// Correction ladder.

namespace {

// Ladder data at one b1 value of the finite-difference stencil.
struct Stage {
  double b1 = 0.0;
  RadiationProfile rad;
  RadialFunction Theta2, Theta3;
  std::array<MonomialMap, 5> S, LS, DS;
};

// -(b1)_s d_{b1} S - (b2)_s d_{b2} S - b1 Lambda S for a homogeneous map S.
MonomialMap transport_source(const MonomialMap& S, const MonomialMap& LS, const MonomialMap& DS,
                             double c) {
  MonomialMap out;
  for (const auto& [k, P] : S) {
    const auto [i, j] = k;
    RadialFunction E = scaled_copy(P, i);
    E.v += DS.at(k).v;
    mono_add(out, {i + 1, j}, E, 1.0 + c);
    mono_add(out, {i - 1, j + 1}, E, -1.0);
    if (j > 0) mono_add(out, {i + 1, j}, P, (3.0 + c) * j);
    mono_add(out, {i + 1, j}, LS.at(k), -1.0);
  }
  return out;
}

// Order-n part of 3 Q alpha^2 + alpha^3.
MonomialMap remainder_part(const MonomialMap& alpha, const RadialFunction& Q, int n) {
  const MonomialMap a2 = mono_product(alpha, alpha, 0, n);
  const MonomialMap a3 = mono_product(a2, alpha, n, n);
  MonomialMap r;
  for (const auto& [k, f] : a2) {
    if (mono_order(k) == n) mono_add(r, k, Q * f, 3.0);
  }
  for (const auto& [k, f] : a3) mono_add(r, k, f);
  return r;
}

MonomialMap stage_alpha(const SolitonBasis& B, const Stage& s, int up_to) {
  MonomialMap a;
  a.emplace(MonoKey{1, 0}, B.T1);
  a.emplace(MonoKey{0, 1}, B.T2);
  for (int j = 2; j <= up_to; ++j)
    for (const auto& [k, f] : s.S[j]) mono_add(a, k, f);
  return a;
}

void fill_derivative(std::vector<Stage>& st, int level, int k, double delta) {
  Stage& c = st[k];
  const Stage& lo = st[k - 1];
  const Stage& hi = st[k + 1];
  c.DS[level].clear();
  for (const auto& [key, P] : c.S[level]) {
    RadialFunction d(P.grid, (hi.S[level].at(key).v - lo.S[level].at(key).v) *
                                 (c.b1 / (2.0 * delta)));
    c.DS[level].emplace(key, std::move(d));
  }
}

}  // namespace

CorrectionLadder ProfileBuilder::build_corrections(double b1) const {
  if (!(b1 > 0.0 && b1 < 0.5)) {
    throw PreconditionError("build_corrections: b1 must lie in (0, 0.5)");
  }
  // Centred differences with additive step b1/100 on seven stencil points,
  // nested once per level of the ladder.
  const double delta = b1 / 100.0;
  constexpr int kHalf = 3;
  std::vector<Stage> st(2 * kHalf + 1);
  const auto& B = basis_;

  for (int k = 0; k <= 2 * kHalf; ++k) {
    Stage& s = st[k];
    s.b1 = b1 + (k - kHalf) * delta;
    s.rad = build_radiation(s.b1);
    const double c = s.rad.c_b;
    s.Theta2 = B.LT1 - B.T1 + s.rad.Sigma;
    s.Theta3 = RadialFunction(grid_, B.LT2.v - (3.0 + c) * B.T2.v - s.rad.Hinv_Sigma_tilde.v);
    RadialFunction src = 3.0 * (B.Q * B.T1 * B.T1) - s.Theta2;
    auto g = invert_H_full(src);
    s.S[2].emplace(MonoKey{2, 0}, std::move(g.u));
    s.LS[2].emplace(MonoKey{2, 0}, std::move(g.Lu));
  }

  // Levels 3 and 4: source from the previous level, then one inversion per monomial.
  for (int level = 3; level <= 4; ++level) {
    const int reach = kHalf - (level - 2);
    for (int k = kHalf - reach; k <= kHalf + reach; ++k) fill_derivative(st, level - 1, k, delta);
    for (int k = kHalf - reach; k <= kHalf + reach; ++k) {
      Stage& s = st[k];
      MonomialMap src =
          transport_source(s.S[level - 1], s.LS[level - 1], s.DS[level - 1], s.rad.c_b);
      const MonomialMap R = remainder_part(stage_alpha(B, s, level - 1), B.Q, level);
      for (const auto& [key, f] : R) mono_add(src, key, f);
      if (level == 3) mono_add(src, {1, 1}, s.Theta3, -1.0);
      for (const auto& [key, f] : src) {
        if (mono_order(key) != level) {
          throw PreconditionError("build_corrections: inhomogeneous source at level " +
                                  std::to_string(level));
        }
        auto g = invert_H_full(f);
        s.S[level].emplace(key, std::move(g.u));
        s.LS[level].emplace(key, std::move(g.Lu));
      }
    }
  }
  fill_derivative(st, 4, kHalf, delta);

  Stage& s = st[kHalf];
  CorrectionLadder L;
  L.b1 = b1;
  L.radiation = std::move(s.rad);
  L.Theta2 = std::move(s.Theta2);
  L.Theta3 = std::move(s.Theta3);
  for (int j = 2; j <= 4; ++j) {
    L.S[j] = std::move(s.S[j]);
    L.LS[j] = std::move(s.LS[j]);
    L.DS[j] = std::move(s.DS[j]);
  }
  const RadialFunction zero = RadialFunction::zeros(grid_);
  L.alpha.emplace(MonoKey{1, 0}, B.T1);
  L.alpha.emplace(MonoKey{0, 1}, B.T2);
  L.L_alpha.emplace(MonoKey{1, 0}, B.LT1);
  L.L_alpha.emplace(MonoKey{0, 1}, B.LT2);
  L.D_alpha.emplace(MonoKey{1, 0}, zero);
  L.D_alpha.emplace(MonoKey{0, 1}, zero);
  for (int j = 2; j <= 4; ++j) {
    for (const auto& [k, f] : L.S[j]) mono_add(L.alpha, k, f);
    for (const auto& [k, f] : L.LS[j]) mono_add(L.L_alpha, k, f);
    for (const auto& [k, f] : L.DS[j]) mono_add(L.D_alpha, k, f);
  }
  return L;
}

// ---------------------------------------------------------------------------

namespace {

void check_b(const CorrectionLadder& L, const BVector& b, double Kb) {
  if (std::abs(b.b1 - L.b1) > 1e-12 * L.b1) {
    throw PreconditionError("ladder was built at b1 = " + format_double(L.b1) +
                            ", requested b1 = " + format_double(b.b1));
  }
  if (std::abs(b.b2) > Kb * b.b1 * b.b1) {
    throw PreconditionError("b2 = " + format_double(b.b2) +
                            " is outside the a priori region |b2| <= " + format_double(Kb) +
                            " b1^2");
  }
}

// d alpha / d b1 and d alpha / d b2 at b.
std::pair<RadialFunction, RadialFunction> alpha_derivatives(const CorrectionLadder& L,
                                                            const BVector& b,
                                                            const GridPtr& g) {
  RadialFunction d1 = RadialFunction::zeros(g), d2 = RadialFunction::zeros(g);
  for (const auto& [k, P] : L.alpha) {
    const auto [i, j] = k;
    const Vec E = i * P.v + L.D_alpha.at(k).v;
    d1.v += mono_weight({i - 1, j}, b) * E;
    if (j > 0) d2.v += (j * mono_weight({i, j - 1}, b)) * P.v;
  }
  return {d1, d2};
}

}  // namespace

AssembledProfile ProfileBuilder::assemble_Qb(const CorrectionLadder& L, const BVector& b,
                                             bool localized) const {
  check_b(L, b, Kb_);
  AssembledProfile a;
  a.alpha = mono_eval(L.alpha, b, grid_);
  if (localized) {
    const Vec& y = grid_->y();
    for (int i = 0; i < a.alpha.size(); ++i) a.alpha.v[i] *= cutoff::scaled(y[i], L.radiation.B1);
  }
  a.Qb = basis_.Q + a.alpha;
  return a;
}

AssembledProfile ProfileBuilder::assemble_Qb(const BVector& b, bool localized) const {
  if (b.b1 == 0.0 && b.b2 == 0.0) {
    return {basis_.Q, RadialFunction::zeros(grid_)};
  }
  return assemble_Qb(build_corrections(b.b1), b, localized);
}

Remainders ProfileBuilder::remainders(const CorrectionLadder& L, const BVector& b) const {
  check_b(L, b, Kb_);
  const MonomialMap a2 = mono_product(L.alpha, L.alpha);
  const MonomialMap a3 = mono_product(a2, L.alpha);
  Remainders r{RadialFunction::zeros(grid_), RadialFunction::zeros(grid_),
               RadialFunction::zeros(grid_), RadialFunction::zeros(grid_)};
  auto slot = [&r](int o) -> RadialFunction& {
    if (o == 2) return r.R2;
    if (o == 3) return r.R3;
    if (o == 4) return r.R4;
    return r.R;
  };
  for (const auto& [k, f] : a2) {
    slot(mono_order(k)).v += 3.0 * mono_weight(k, b) * basis_.Q.v * f.v;
  }
  for (const auto& [k, f] : a3) slot(mono_order(k)).v += mono_weight(k, b) * f.v;
  return r;
}

ErrorProfile ProfileBuilder::compute_error(const CorrectionLadder& L, const BVector& b,
                                           const ErrorOptions& opt) const {
  check_b(L, b, Kb_);
  const auto& rad = L.radiation;
  const double b1 = b.b1, b2 = b.b2;
  const BRates sys = system_rates(b, rad.c_b);
  ErrorProfile e;
  e.b = b;
  e.rates = opt.rates.value_or(sys);
  e.M = effective_M(opt.M, b1);

  // Psi_b term by term, each piece already of order five or carrying the radiation.
  RadialFunction psi(grid_, -b1 * b1 * rad.Sigma_tilde.v + b1 * b2 * rad.Hinv_Sigma_tilde.v);
  for (const auto& [k, P] : L.S[4]) {
    const auto [i, j] = k;
    const Vec E = i * P.v + L.DS[4].at(k).v;
    psi.v += sys.b1s * mono_weight({i - 1, j}, b) * E;
    if (j > 0) psi.v += sys.b2s * j * mono_weight({i, j - 1}, b) * P.v;
    psi.v += b1 * mono_weight(k, b) * L.LS[4].at(k).v;
  }
  psi.v -= remainders(L, b).R.v;
  const auto [da1, da2] = alpha_derivatives(L, b, grid_);
  psi.v += (e.rates.b1s - sys.b1s) * da1.v + (e.rates.b2s - sys.b2s) * da2.v;
  e.Psi = psi;

  // Localization at B1.
  const GridPtr& g = grid_;
  const Vec& y = g->y();
  const CutoffSamples c = sample_cutoff(g, rad.B1);
  const RadialFunction alpha = mono_eval(L.alpha, b, g);
  const RadialFunction L_alpha = mono_eval(L.L_alpha, b, g);
  const RadialFunction dalpha = derivative(alpha);
  const Vec& a = alpha.v;
  const Vec& Q = basis_.Q.v;
  const Vec& LQ = basis_.LQ.v;
  const Vec lap_chi = c.d2 + 3.0 * c.d1 / y;
  const Vec dchi_db1 = c.dB * dB1_db1(b1);
  const Vec ds_chi = e.rates.b1s * dchi_db1;
  const Vec local_terms = b1 * a * y * c.d1 + a * ds_chi - a * lap_chi - 2.0 * dalpha.v * c.d1 +
                          3.0 * (c.chi - c.chi * c.chi) * Q * a * a +
                          (c.chi - c.chi * c.chi * c.chi) * a * a * a;
  e.Psi_tilde_local = RadialFunction(g, c.chi * psi.v + local_terms);
  e.Psi_tilde = RadialFunction(g, c.chi * psi.v + b1 * (1.0 - c.chi) * LQ + local_terms);
  Vec dLQv(g->size());
  for (int i = 0; i < g->size(); ++i) dLQv[i] = dLQ(y[i]);
  e.H_Psi_tilde_far = RadialFunction(g, b1 * (LQ * lap_chi + 2.0 * c.d1 * dLQv));

  // Modulation directions of Qtilde_b = Q + chi alpha.
  e.Mod_basis[0] = RadialFunction(g, -(LQ + c.chi * L_alpha.v + a * y * c.d1));
  e.Mod_basis[1] = RadialFunction(g, c.chi * da1.v);
  e.Mod_basis[2] = RadialFunction(g, c.chi * da2.v);
  e.alpha_dchi = RadialFunction(g, a * dchi_db1);

  if (opt.norms) {
    const double R = 2.0 * rad.B1;
    const double R_M = 2.0 * e.M;
    auto& n = e.weighted_norms;
    RadialFunction h = psi;
    n["H0_2M"] = norm2(h, R_M);
    for (int k = 1; k <= 3; ++k) {
      h = apply_H(h);
      n["H" + std::to_string(k) + "_2B1"] = norm2(h, R);
      n["H" + std::to_string(k) + "_2M"] = norm2(h, R_M);
    }
    auto weighted = [&](const RadialFunction& f, std::optional<double> mask,
                        const std::string& prefix) {
      RadialFunction d = f;
      for (int i = 0; i <= 4; ++i) {
        if (i > 0) d = derivative(d);
        Vec w(g->size());
        for (int m = 0; m < g->size(); ++m) {
          const double ly = std::log(y[m]);
          w[m] = (1.0 + ly * ly) / (1.0 + std::pow(y[m], 12 - 2 * i));
        }
        n[prefix + "d" + std::to_string(i) + "_w"] = inner(RadialFunction(g, w * d.v), d, mask);
      }
    };
    weighted(psi, R, "");
    weighted(e.Psi_tilde, {}, "tilde_");
    // H^k Psi_tilde = H^k(local part) + H^{k-1}(H of the far part), both compactly supported.
    RadialFunction hl = e.Psi_tilde_local;
    RadialFunction hf = e.H_Psi_tilde_far;
    n["tilde_H0_2M"] = norm2(e.Psi_tilde, R_M);
    for (int k = 1; k <= 3; ++k) {
      hl = apply_H(hl, OuterBC::Dirichlet);
      if (k > 1) hf = apply_H(hf, OuterBC::Dirichlet);
      const RadialFunction hk = hl + hf;
      n["tilde_H" + std::to_string(k)] = norm2(hk);
      n["tilde_H" + std::to_string(k) + "_2M"] = norm2(hk, R_M);
    }
    n["H3_2B1_log2"] = n["H3_2B1"] * std::pow(std::log(b1), 2);
  }
  return e;
}

ErrorProfile ProfileBuilder::compute_error(const BVector& b, const ErrorOptions& opt) const {
  if (b.b1 == 0.0 && b.b2 == 0.0) {
    ErrorProfile e;
    e.M = opt.M;
    const RadialFunction z = RadialFunction::zeros(grid_);
    e.Psi = e.Psi_tilde = e.Psi_tilde_local = e.H_Psi_tilde_far = e.alpha_dchi = z;
    e.Mod_basis = {-basis_.LQ, z, z};
    return e;
  }
  return compute_error(build_corrections(b.b1), b, opt);
}

// ---------------------------------------------------------------------------
// Scaling report.

bool ScalingReport::all_pass() const {
  return std::all_of(fits.begin(), fits.end(), [](const ScalingFit& f) { return f.pass; });
}

const ScalingFit& ScalingReport::fit(const std::string& name) const {
  for (const auto& f : fits) {
    if (f.norm == name) return f;
  }
  throw std::out_of_range("no fitted norm named " + name);
}

namespace {

// Declared slope targets and tolerances of the error bounds.
std::pair<double, double> slope_target(const std::string& name) {
  std::string base = name.rfind("tilde_", 0) == 0 ? name.substr(6) : name;
  if (base == "H1_2B1" || base == "H1") return {4.0, 0.5};
  if (base == "H2_2B1" || base == "H2") return {6.0, 0.5};
  if (base == "H3_2B1" || base == "H3" || base == "H3_2B1_log2") return {8.0, 0.5};
  if (base.size() == 4 && base[0] == 'd') return {8.0, 0.5};
  if (base.rfind("H", 0) == 0 && base.find("_2M") != std::string::npos) return {10.0, 0.7};
  return {0.0, 0.0};
}

}  // namespace

ScalingReport verify_error_scaling(const std::vector<double>& b1_ladder,
                                   const std::function<double(double)>& b2_of,
                                   const ScalingOptions& opt,
                                   const std::optional<std::filesystem::path>& report_path) {
  if (b1_ladder.size() < 3) {
    throw PreconditionError("verify_error_scaling: need at least 3 ladder points");
  }
  const auto [lo, hi] = std::minmax_element(b1_ladder.begin(), b1_ladder.end());
  if (*hi / *lo < 99.999) {
    throw PreconditionError("verify_error_scaling: ladder must span at least two decades");
  }
  ScalingReport rep;
  rep.b1 = b1_ladder;
  rep.M = ProfileBuilder::effective_M(opt.M, *hi);
  const size_t n = b1_ladder.size();
  std::vector<std::map<std::string, double>> norms(n);
  std::vector<std::exception_ptr> errors(n);
  std::mutex mu;
  size_t next = 0;
  auto worker = [&]() {
    for (;;) {
      size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        const double b1 = b1_ladder[i];
        ProfileBuilder pb(grid_for_b1(b1, opt.h_log));
        const auto L = pb.build_corrections(b1);
        ErrorOptions eo;
        eo.M = rep.M;
        norms[i] = pb.compute_error(L, {b1, b2_of(b1)}, eo).weighted_norms;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (const auto& [name, unused] : norms[0]) {
    ScalingFit f;
    f.norm = name;
    std::tie(f.target, f.tolerance) = slope_target(name);
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd Y(n);
    for (size_t i = 0; i < n; ++i) {
      const double v = norms[i].at(name);
      f.values.push_back(v);
      X(i, 0) = 1.0;
      X(i, 1) = std::log(b1_ladder[i]);
      Y(i) = std::log(std::max(v, 1e-300));
    }
    const Eigen::VectorXd beta = X.colPivHouseholderQr().solve(Y);
    f.slope = beta(1);
    f.residual = std::sqrt((X * beta - Y).squaredNorm() / n);
    f.pass = f.tolerance > 0.0 && std::abs(f.slope - f.target) <= f.tolerance;
    rep.fits.push_back(std::move(f));
  }

  if (report_path) {
    nlohmann::json j;
    j["b1"] = rep.b1;
    j["M"] = rep.M;
    j["h_log"] = opt.h_log;
    for (const auto& f : rep.fits) {
      j["fits"][f.norm] = {{"slope", f.slope},         {"residual", f.residual},
                           {"target", f.target},       {"tolerance", f.tolerance},
                           {"pass", f.pass},           {"values", f.values}};
    }
    std::ofstream os(*report_path);
    if (!os) throw std::runtime_error("cannot write " + report_path->string());
    os << j.dump(2) << '\n';
  }
  return rep;
}

void write_ladder_fixture(const CorrectionLadder& L, const ErrorProfile& err,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["b1"] = L.b1;
  j["b2"] = err.b.b2;
  j["c_b"] = L.radiation.c_b;
  j["d_b"] = L.radiation.d_b;
  j["B0"] = L.radiation.B0;
  j["B1"] = L.radiation.B1;
  auto save = [&](const RadialFunction& f, const std::string& name) {
    write_csv(f, dir / (name + ".csv"));
    j["profiles"].push_back(name + ".csv");
  };
  save(L.radiation.Sigma, "Sigma");
  save(L.radiation.Sigma_tilde, "Sigma_tilde");
  save(L.Theta2, "Theta2");
  save(L.Theta3, "Theta3");
  for (int lvl = 2; lvl <= 4; ++lvl) {
    for (const auto& [k, f] : L.S[lvl]) {
      const std::string key = std::to_string(k.first) + "_" + std::to_string(k.second);
      save(f, "S" + std::to_string(lvl) + "_" + key);
      j["monomials"]["S" + std::to_string(lvl)].push_back({k.first, k.second});
    }
  }
  save(err.Psi, "Psi");
  save(err.Psi_tilde, "Psi_tilde");
  j["norms"] = err.weighted_norms;
  j["M"] = err.M;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  os << j.dump(2) << '\n';
}

}  // namespace typeii
