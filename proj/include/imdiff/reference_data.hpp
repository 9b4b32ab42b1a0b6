#pragma once

/// \file reference_data.hpp
/// Ground-truth generation: sine-superposition latent fields, Gaussian
/// process initial conditions, RK4 reference rollouts and snapshot datasets.

#include "imdiff/pde_models.hpp"
#include "imdiff/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace imdiff {

struct Wave {
  double amplitude = 0.0;
  double kx = 0.0;
  double ky = 0.0;
  double omega = 0.0;
  double phase = 0.0;
};

/// f(x, t) = sum_i A_i sin(2 pi (k_i . x + omega_i t) + p_i)
struct CosineFieldSpec {
  std::vector<Wave> waves;
  std::uint64_t seed = 0;

  /// A ~ U(-2, 2), k ~ U(0, 2) per axis, omega ~ U(-1, 1), p ~ U(0, 2).
  /// \p steady forces omega = 0.
  static CosineFieldSpec sample(int nw, std::uint64_t seed, bool steady = false);

  double operator()(double x, double y, double t) const;
  /// Upper bound of |f|: sum of |A_i|.
  double bound() const;
};

/// Field on cell centres, row-major.
Vector sample_cosine_field(const CosineFieldSpec& spec, const Grid2D& grid, double t);

struct GpIcSpec {
  Index coarse_nx = 30;
  Index coarse_ny = 10;
  double length_scale = 0.3;  ///< physical units
  double variance = 1.0;
  double mean = 0.0;
  std::uint64_t seed = 0;
};

/// Periodic squared-exponential covariance between two points of the
/// lx x ly torus; equals variance exp(-d^2 / (2 l^2)) for short distances.
double gp_kernel(const GpIcSpec& spec, double lx, double ly, double dx, double dy);

/// Cholesky sample on the coarse grid, bilinear (periodic) interpolation onto
/// \p grid.  A non-PD kernel matrix gets 1e-8 jitter and one retry.
Vector sample_gp_ic(const GpIcSpec& spec, const Grid2D& grid);
/// The coarse-grid sample itself (row-major coarse_nx x coarse_ny).
Vector sample_gp_coarse(const GpIcSpec& spec, double lx, double ly);

struct SnapshotDataset {
  Index nx = 0;
  Index ny = 0;
  std::vector<double> times;
  std::vector<Vector> fields;

  /// Throws unless times start at 0, increase strictly and match fields.
  void validate() const;
};

using TimeRhsFn = std::function<Vector(double t, const Vector& u)>;

/// Classic RK4 from t = 0 with step dt_ref, recording at \p record_times
/// (each a multiple of dt_ref within 1e-12).  Non-finite states raise
/// NumericalError naming the step.
SnapshotDataset rk4_reference_rollout(const TimeRhsFn& rhs, const Vector& ic, double dt_ref,
                                      const std::vector<double>& record_times, Index nx, Index ny);

/// Cell averages of a field on an (f nx) x (f ny) grid onto nx x ny.
Vector restrict_average(const Vector& fine, Index factor, Index nx, Index ny);

}  // namespace imdiff
