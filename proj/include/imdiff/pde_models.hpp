#pragma once

/// \file pde_models.hpp
/// Finite-volume right-hand sides on periodic 2D grids, the Crank-Nicolson
/// residual, and the 1D chemical vapor infiltration (CVI) model.
///
/// Cell (i, j) has index i + nx * j.  Advective fluxes are first-order
/// upwind in conservative form; diffusive fluxes are second-order central.

#include "imdiff/krylov.hpp"
#include "imdiff/ops.hpp"
#include "imdiff/params.hpp"
#include "imdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace imdiff {

class Grid2D {
 public:
  Grid2D(Index nx, Index ny, double lx = 2.0, double ly = 1.0);

  Index nx() const { return nx_; }
  Index ny() const { return ny_; }
  double lx() const { return lx_; }
  double ly() const { return ly_; }
  double dx() const { return lx_ / static_cast<double>(nx_); }
  double dy() const { return ly_ / static_cast<double>(ny_); }
  Index cells() const { return nx_ * ny_; }
  Index index(Index i, Index j) const { return i + nx_ * j; }
  /// Physical cell-centre coordinates.
  double x(Index i) const { return (static_cast<double>(i) + 0.5) * dx(); }
  double y(Index j) const { return (static_cast<double>(j) + 0.5) * dy(); }

  /// Periodic neighbour index tables, shared so gathers can hold them.
  std::shared_ptr<const std::vector<Index>> east() const { return east_; }
  std::shared_ptr<const std::vector<Index>> west() const { return west_; }
  std::shared_ptr<const std::vector<Index>> north() const { return north_; }
  std::shared_ptr<const std::vector<Index>> south() const { return south_; }
  /// 5-point periodic Laplacian.
  std::shared_ptr<const Stencil> laplacian() const { return laplacian_; }

 private:
  Index nx_, ny_;
  double lx_, ly_;
  std::shared_ptr<const std::vector<Index>> east_, west_, north_, south_;
  std::shared_ptr<const Stencil> laplacian_;
};

/// Advection velocities per cell and a diffusivity that is either a scalar
/// (size 1) or a per-cell field.
struct CoeffFields {
  Tensor ux;
  Tensor uy;
  Tensor k;
};

/// -div(u phi) + div(k grad phi).  Face velocities are arithmetic means of
/// the adjacent cells; the upwind flux is written as
/// 0.5 a (phi_L + phi_R) - 0.5 |a| (phi_R - phi_L).
Tensor advdiff_rhs(const Grid2D& grid, const Tensor& phi, const CoeffFields& coeffs);

/// Scalar Burgers u_t = -u u_x - u u_y + div(nu grad u) in conservative form
/// with the Roe flux for f(u) = u^2 / 2 and face viscosity by arithmetic mean.
Tensor burgers_rhs(const Grid2D& grid, const Tensor& u, const Tensor& nu);

/// div(k grad phi) with k scalar or per cell (face values by arithmetic mean).
Tensor diffusion_term(const Grid2D& grid, const Tensor& phi, const Tensor& k);

using RhsFn = std::function<Tensor(const Tensor&)>;

/// next - curr - dt/2 (rhs(next) + rhs(curr))
Tensor crank_nicolson_residual(const Tensor& next, const Tensor& curr, double dt, const RhsFn& rhs);

/// Dense matrix of a linear RHS, column c = rhs(e_c).
Matrix dense_operator(const RhsFn& rhs, Index n);

// ---------------------------------------------------------------------------
// CVI (1D slab, Dirichlet molarity at both ends)

struct CviConstants {
  double length = 1.0;
  double c_in = 1.0;      ///< boundary molarity
  double q = 1.0;         ///< stoichiometric factor
  double molar_mass = 1.0;
  double rho_s = 1.0;
  double eps_min = 1e-4;
};

/// Nodes x_i = i dx, i = 1..n, dx = L / (n + 1); the boundary nodes x_0 and
/// x_{n+1} hold c_in.
struct CviGrid {
  Index n = 32;
  CviConstants constants{};
  double dx() const { return constants.length / static_cast<double>(n + 1); }
};

/// D_eff(eps), K(eps), S_v(eps) per node.
struct CviCoefficients {
  Tensor d_eff;
  Tensor k;
  Tensor s_v;
};

/// Residual of -D_eff C'' + K S_v C = 0, one entry per interior node.
Tensor cvi_molarity_residual(const CviGrid& grid, const Tensor& c, const CviCoefficients& coeffs);

/// eps - dt q M_s K S_v C / rho_s, clamped below at eps_min.
Tensor cvi_porosity_step(const CviGrid& grid, const Tensor& eps, const Tensor& c, const CviCoefficients& coeffs,
                         double dt);

/// Jacobi solve of the molarity system for given coefficient values.
SolveResult<double> cvi_molarity_jacobi(const CviGrid& grid, const Vector& d_eff, const Vector& k_sv,
                                        const Vector& c0, double tol, int max_iter);

/// Dense (tridiagonal) direct solve of the same system.
Vector cvi_molarity_direct(const CviGrid& grid, const Vector& d_eff, const Vector& k_sv);

/// Synthetic ground truth: D0 eps^1.5, K0, S0 eps (1 - eps).
struct CviTruth {
  double d0 = 1.0;
  double k0 = 1.0;
  double s0 = 4.0;
  CviCoefficients evaluate(const Tensor& eps) const;
};

/// Three pointwise networks 1 -> hidden -> 1 with tanh hidden units and
/// softplus outputs, for D_eff, K and S_v.  Segments <p>.d_eff, <p>.k, <p>.s_v.
class CviNeuralOps {
 public:
  CviNeuralOps() = default;
  CviNeuralOps(ParamSet& params, std::string prefix, Index hidden = 16);

  void initialize(ParamSet& params, std::mt19937_64& rng) const;
  CviCoefficients evaluate(const ParamSet& params, const Tensor& flat, const Tensor& eps) const;

 private:
  Tensor net(const ParamSet& params, const Tensor& flat, const std::string& name, const Tensor& eps) const;

  std::string prefix_;
  Index hidden_ = 16;
};

}  // namespace imdiff
