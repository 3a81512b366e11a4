#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tracksync/assignment.hpp"
#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/parallel.hpp"

namespace tracksync {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Inputs of the fused matching objective: a cross-set feature cost M and
// the two intra-set structure matrices.
struct CostMatrices {
  MatrixXd feature_cost;  // N_a x N_b, cosine distance in [0, 2]
  MatrixXd struct_a;      // N_a x N_a, symmetric, zero diagonal
  MatrixXd struct_b;      // N_b x N_b
};

// Soft assignment between two track sets with prescribed marginals.
struct TransportPlan {
  MatrixXd gamma;
  VectorXd row_marginal;
  VectorXd col_marginal;
  double objective_value = 0.0;
  bool converged = false;
  int outer_iterations = 0;
  std::vector<double> objective_history;  // one entry per outer iterate, starting at init
  bool struct_degenerate = false;         // a structure matrix was all zeros
};

struct MatchPair {
  std::int64_t a = 0;
  std::int64_t b = 0;
  double score = 0.0;
};

// Discrete one-to-one correspondences extracted from a plan.
struct MatchSet {
  std::string source_video;
  std::string target_video;
  std::vector<MatchPair> pairs;
};

struct SolverConfig {
  double alpha = 0.5;          // weight of the feature term, as in the fused objective
  double epsilon = 5e-3;       // entropic regularization of the inner solver
  int outer_iterations = 50;   // conditional-gradient steps
  int inner_iterations = 200;  // Sinkhorn steps per linearization
  double marginal_tol = 1e-6;  // L1 marginal violation target
  double objective_tol = 1e-12;
  bool normalize = true;       // divide each cost matrix by its own max
  std::int64_t n_max = 512;    // farthest-point cap applied by match_track_sets
  int threads = 1;
};

// M_ij = 1 - cos(f_i, f_j); features are unit-normalized first, so the
// matrix is invariant to positive rescaling of the inputs.
inline MatrixXd feature_cost_matrix(const TrackSet& A, const TrackSet& B) {
  if (A.feature_dim() != B.feature_dim())
    throw InvalidInput("feature_cost_matrix: feature dimensions differ (" +
                       std::to_string(A.feature_dim()) + " vs " +
                       std::to_string(B.feature_dim()) + ")");
  const auto normalize_rows = [](const TrackSet& ts) {
    MatrixXd F(ts.tracks.size(), ts.feature_dim());
    for (std::size_t i = 0; i < ts.tracks.size(); ++i) {
      const double n = ts.tracks[i].feature.norm();
      if (!(n > 0.0))
        throw InvalidInput("feature_cost_matrix: zero-norm feature on track id " +
                           std::to_string(ts.tracks[i].id));
      F.row(i) = ts.tracks[i].feature.transpose() / n;
    }
    return F;
  };
  const MatrixXd Fa = normalize_rows(A);
  const MatrixXd Fb = normalize_rows(B);
  MatrixXd M = MatrixXd::Ones(Fa.rows(), Fb.rows()) - Fa * Fb.transpose();
  return M.cwiseMax(0.0).cwiseMin(2.0);
}

// Pairwise max-over-time distances within one set; symmetric, zero diagonal.
inline MatrixXd intra_distance_matrix(const TrackSet& ts, int threads = 1) {
  const auto n = static_cast<Eigen::Index>(ts.tracks.size());
  if (n < 2) throw InvalidInput("intra_distance_matrix: need at least 2 tracks");
  MatrixXd C = MatrixXd::Zero(n, n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    for (Eigen::Index j = static_cast<Eigen::Index>(i) + 1; j < n; ++j)
      C(i, j) = track_distance(ts.tracks[i], ts.tracks[j]);
  });
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < i; ++j) C(i, j) = C(j, i);
  return C;
}

struct SinkhornResult {
  MatrixXd plan;
  bool converged = false;
  int iterations = 0;
  double marginal_violation = 0.0;
};

// Scales a nonnegative matrix onto the transport polytope (row/column
// rescale capped at 1, remainder distributed as a rank-one correction).
// Output marginals match mu/nu to floating-point accuracy.
inline MatrixXd round_to_marginals(const MatrixXd& plan, const VectorXd& mu, const VectorXd& nu) {
  MatrixXd P = plan;
  VectorXd r = P.rowwise().sum();
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    if (r[i] > mu[i] && r[i] > 0.0) P.row(i) *= mu[i] / r[i];
  VectorXd c = P.colwise().sum().transpose();
  for (Eigen::Index j = 0; j < P.cols(); ++j)
    if (c[j] > nu[j] && c[j] > 0.0) P.col(j) *= nu[j] / c[j];
  VectorXd err_r = mu - P.rowwise().sum();
  VectorXd err_c = nu - P.colwise().sum().transpose();
  const double s = err_r.sum();
  if (s > 0.0) P.noalias() += err_r * (err_c.transpose() / s);
  // cancellation can leave entries a few ulps below zero
  return P.cwiseMax(0.0);
}

// Entropic-regularized linear OT by Sinkhorn scaling. Stabilized two ways:
// the potentials absorb the scalings whenever they grow large, and any
// kernel row or column that underflows to zero is rebased so its best
// entry comes back to exp(0). The iteration therefore never divides by
// zero or produces NaN, even when the cost range is thousands of epsilons.
// Converged means L1 marginal violation <= tol.
inline SinkhornResult sinkhorn_inner(const MatrixXd& linear_cost, const VectorXd& row_marginal,
                                     const VectorXd& col_marginal, double epsilon, int max_iter,
                                     double tol = 1e-6) {
  const Eigen::Index n = linear_cost.rows();
  const Eigen::Index m = linear_cost.cols();
  if (row_marginal.size() != n || col_marginal.size() != m)
    throw InvalidInput("sinkhorn_inner: marginal sizes do not match cost matrix");
  if (!(epsilon > 0.0)) throw InvalidInput("sinkhorn_inner: epsilon must be positive");
  if (!linear_cost.allFinite()) throw InvalidInput("sinkhorn_inner: non-finite cost entry");
  if ((row_marginal.array() <= 0.0).any() || (col_marginal.array() <= 0.0).any())
    throw InvalidInput("sinkhorn_inner: marginals must be strictly positive");

  const MatrixXd& C = linear_cost;
  constexpr double kTiny = 1e-300;  // below this a kernel sum counts as vanished

  // Start the potentials at the row minima, then the residual column
  // minima, so every exponent is <= 0 and every column attains 0.
  VectorXd f = C.rowwise().minCoeff();
  VectorXd g = -(((-C).colwise() + f).colwise().maxCoeff().transpose());
  VectorXd u = VectorXd::Ones(n), v = VectorXd::Ones(m);
  MatrixXd K(n, m);
  const auto exponents = [&]() -> MatrixXd {
    return (((-C).colwise() + f).rowwise() + g.transpose());
  };
  const auto rebuild_kernel = [&]() { K = (exponents() / epsilon).array().exp(); };
  const auto absorb = [&]() {
    f += epsilon * u.array().log().matrix();
    g += epsilon * v.array().log().matrix();
    u.setOnes();
    v.setOnes();
    rebuild_kernel();
  };
  // Raising f (or g) only enlarges kernel entries of that row (column), so
  // rebasing vanished rows cannot re-vanish a column and vice versa.
  const auto rebase_vanished = [&]() {
    for (int pass = 0; pass < 2; ++pass) {
      const VectorXd col_sums = K.colwise().sum().transpose();
      if ((col_sums.array() <= kTiny).any()) {
        const VectorXd col_max = exponents().colwise().maxCoeff().transpose();
        for (Eigen::Index j = 0; j < m; ++j)
          if (col_sums[j] <= kTiny) g[j] -= col_max[j];
        rebuild_kernel();
      }
      const VectorXd row_sums = K.rowwise().sum();
      if ((row_sums.array() <= kTiny).any()) {
        const VectorXd row_max = exponents().rowwise().maxCoeff();
        for (Eigen::Index i = 0; i < n; ++i)
          if (row_sums[i] <= kTiny) f[i] -= row_max[i];
        rebuild_kernel();
      }
    }
  };
  rebuild_kernel();

  const double absorb_limit = 1e100;
  SinkhornResult res;
  VectorXd Kv = K * v;
  for (int it = 0; it < max_iter; ++it) {
    if ((Kv.array() <= kTiny).any()) {
      absorb();
      rebase_vanished();
      Kv = K * v;
    }
    u = row_marginal.cwiseQuotient(Kv);
    VectorXd Ktu = K.transpose() * u;
    if ((Ktu.array() <= kTiny).any()) {
      absorb();
      rebase_vanished();
      Kv = K * v;
      u = row_marginal.cwiseQuotient(Kv);
      Ktu = K.transpose() * u;
    }
    v = col_marginal.cwiseQuotient(Ktu);
    Kv = K * v;
    res.iterations = it + 1;
    const double row_err = (u.cwiseProduct(Kv) - row_marginal).lpNorm<1>();
    if (row_err <= tol) {
      res.converged = true;
      break;
    }
    if (u.maxCoeff() > absorb_limit || v.maxCoeff() > absorb_limit ||
        u.minCoeff() < 1.0 / absorb_limit || v.minCoeff() < 1.0 / absorb_limit) {
      absorb();
      Kv = K * v;
    }
  }
  res.plan = u.asDiagonal() * K * v.asDiagonal();
  const double row_err = (res.plan.rowwise().sum() - row_marginal).lpNorm<1>();
  const double col_err = (res.plan.colwise().sum().transpose() - col_marginal).lpNorm<1>();
  res.marginal_violation = std::max(row_err, col_err);
  res.converged = res.marginal_violation <= tol;
  return res;
}

namespace detail {

// Quadratic structural distortion, exact for arbitrary gamma (no marginal
// assumption): sum_{ikjl} (Ca_ik - Cb_jl)^2 g_ij g_kl expanded so the cost
// stays O(N^2 * N).
inline double gw_distortion(const MatrixXd& Sa, const MatrixXd& Sb, const MatrixXd& Ca,
                            const MatrixXd& Cb, const MatrixXd& gamma) {
  const VectorXd r = gamma.rowwise().sum();
  const VectorXd c = gamma.colwise().sum().transpose();
  const double t1 = r.dot(Sa * r);
  const double t2 = c.dot(Sb * c);
  const MatrixXd Y = Ca * gamma * Cb.transpose();
  return t1 + t2 - 2.0 * Y.cwiseProduct(gamma).sum();
}

}  // namespace detail

// Exact evaluation of the fused objective at gamma: the structural
// distortion plus (alpha/2) <M, gamma>.
inline double fgw_objective(const CostMatrices& costs, const MatrixXd& gamma, double alpha) {
  const Eigen::Index na = costs.struct_a.rows();
  const Eigen::Index nb = costs.struct_b.rows();
  if (costs.struct_a.cols() != na || costs.struct_b.cols() != nb)
    throw InvalidInput("fgw_objective: structure matrices must be square");
  if (costs.feature_cost.rows() != na || costs.feature_cost.cols() != nb ||
      gamma.rows() != na || gamma.cols() != nb)
    throw InvalidInput("fgw_objective: shape mismatch between costs and gamma");
  const MatrixXd Sa = costs.struct_a.array().square();
  const MatrixXd Sb = costs.struct_b.array().square();
  const double quad = detail::gw_distortion(Sa, Sb, costs.struct_a, costs.struct_b, gamma);
  const double lin = 0.5 * alpha * costs.feature_cost.cwiseProduct(gamma).sum();
  return quad + lin;
}

// Conditional-gradient solver for the fused objective over the coupling
// polytope with uniform marginals. Each outer step linearizes the
// objective, solves the resulting OT problem with sinkhorn_inner, rounds
// the direction onto the polytope, and takes the exact quadratic
// line-search step, so the recorded objective never increases.
inline TransportPlan fgw_solve(const CostMatrices& costs, double alpha,
                               const SolverConfig& config = {}) {
  const Eigen::Index na = costs.struct_a.rows();
  const Eigen::Index nb = costs.struct_b.rows();
  if (na == 0 || nb == 0) throw InvalidInput("fgw_solve: empty cost matrices");
  if (costs.struct_a.cols() != na || costs.struct_b.cols() != nb ||
      costs.feature_cost.rows() != na || costs.feature_cost.cols() != nb)
    throw InvalidInput("fgw_solve: shape mismatch");
  if (!costs.feature_cost.allFinite() || !costs.struct_a.allFinite() ||
      !costs.struct_b.allFinite())
    throw InvalidInput("fgw_solve: non-finite cost entry");
  if (!(alpha >= 0.0)) throw InvalidInput("fgw_solve: alpha must be >= 0");

  MatrixXd Ca = costs.struct_a, Cb = costs.struct_b, M = costs.feature_cost;
  TransportPlan plan;
  const double max_a = Ca.maxCoeff(), max_b = Cb.maxCoeff(), max_m = M.maxCoeff();
  if (max_a <= 0.0 || max_b <= 0.0) plan.struct_degenerate = true;
  if (config.normalize) {
    if (max_a > 0.0) Ca /= max_a;
    if (max_b > 0.0) Cb /= max_b;
    if (max_m > 0.0) M /= max_m;
  }

  const VectorXd mu = VectorXd::Constant(na, 1.0 / static_cast<double>(na));
  const VectorXd nu = VectorXd::Constant(nb, 1.0 / static_cast<double>(nb));
  MatrixXd gamma = mu * nu.transpose();

  const MatrixXd Sa = Ca.array().square();
  const MatrixXd Sb = Cb.array().square();
  const MatrixXd cconst =
      (Sa * mu) * Eigen::RowVectorXd::Ones(nb) + VectorXd::Ones(na) * (Sb * nu).transpose();
  const CostMatrices scaled{M, Ca, Cb};

  double obj = fgw_objective(scaled, gamma, alpha);
  plan.objective_history.push_back(obj);

  for (int outer = 0; outer < config.outer_iterations; ++outer) {
    const MatrixXd Y = Ca * gamma * Cb.transpose();
    const MatrixXd grad = 2.0 * (cconst - 2.0 * Y) + 0.5 * alpha * M;

    SinkhornResult inner = sinkhorn_inner(grad, mu, nu, config.epsilon,
                                          config.inner_iterations, config.marginal_tol);
    const MatrixXd s = round_to_marginals(inner.plan, mu, nu);
    const MatrixXd d = s - gamma;

    // F(gamma + t d) = F(gamma) + B t + A t^2, exactly.
    const VectorXd rd = d.rowwise().sum();
    const VectorXd cd = d.colwise().sum().transpose();
    const VectorXd rg = gamma.rowwise().sum();
    const VectorXd cg = gamma.colwise().sum().transpose();
    const MatrixXd Yd = Ca * d * Cb.transpose();
    const double qdd = Yd.cwiseProduct(d).sum();
    const double qgd = Y.cwiseProduct(d).sum();
    const double A = rd.dot(Sa * rd) + cd.dot(Sb * cd) - 2.0 * qdd;
    const double B = 2.0 * rg.dot(Sa * rd) + 2.0 * cg.dot(Sb * cd) - 4.0 * qgd +
                     0.5 * alpha * M.cwiseProduct(d).sum();

    double theta;
    if (A > 0.0)
      theta = std::clamp(-B / (2.0 * A), 0.0, 1.0);
    else
      theta = (A + B < 0.0) ? 1.0 : 0.0;
    const double predicted = theta * B + theta * theta * A;
    plan.outer_iterations = outer + 1;
    if (theta <= 0.0 || predicted > -config.objective_tol) {
      plan.converged = true;
      break;
    }
    gamma.noalias() += theta * d;
    obj = fgw_objective(scaled, gamma, alpha);
    plan.objective_history.push_back(obj);
    if (-predicted < config.objective_tol) {
      plan.converged = true;
      break;
    }
  }

  plan.gamma = gamma.cwiseMax(0.0);
  plan.row_marginal = mu;
  plan.col_marginal = nu;
  plan.objective_value = plan.objective_history.back();
  return plan;
}

// Max-weight one-to-one extraction from a plan. Rectangular plans are
// padded with zero weight; pairs below min_score (or non-positive) are
// dropped; the remainder is sorted by score, ties by (row, col) index, and
// truncated to max_matches (0 means no cap). ids map plan indices to track
// ids; empty means identity.
inline MatchSet hungarian_extract(const TransportPlan& plan, double min_score = 0.0,
                                  std::size_t max_matches = 0,
                                  const std::vector<std::int64_t>& ids_a = {},
                                  const std::vector<std::int64_t>& ids_b = {},
                                  std::string source_video = {}, std::string target_video = {}) {
  const Eigen::Index na = plan.gamma.rows();
  const Eigen::Index nb = plan.gamma.cols();
  if (!ids_a.empty() && static_cast<Eigen::Index>(ids_a.size()) != na)
    throw InvalidInput("hungarian_extract: ids_a size mismatch");
  if (!ids_b.empty() && static_cast<Eigen::Index>(ids_b.size()) != nb)
    throw InvalidInput("hungarian_extract: ids_b size mismatch");

  const Eigen::Index n = std::max(na, nb);
  MatrixXd cost = MatrixXd::Zero(n, n);
  cost.topLeftCorner(na, nb) = -plan.gamma;
  const std::vector<int> rowsol = solve_assignment_min_cost(cost);

  struct Raw {
    Eigen::Index i, j;
    double score;
  };
  std::vector<Raw> kept;
  for (Eigen::Index i = 0; i < na; ++i) {
    const int j = rowsol[static_cast<std::size_t>(i)];
    if (j < 0 || j >= nb) continue;
    const double score = plan.gamma(i, j);
    if (score <= 0.0 || score < min_score) continue;
    kept.push_back({i, j, score});
  }
  std::sort(kept.begin(), kept.end(), [](const Raw& x, const Raw& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.i != y.i) return x.i < y.i;
    return x.j < y.j;
  });
  if (max_matches > 0 && kept.size() > max_matches) kept.resize(max_matches);

  MatchSet out;
  out.source_video = std::move(source_video);
  out.target_video = std::move(target_video);
  out.pairs.reserve(kept.size());
  for (const Raw& r : kept)
    out.pairs.push_back({ids_a.empty() ? static_cast<std::int64_t>(r.i) : ids_a[r.i],
                         ids_b.empty() ? static_cast<std::int64_t>(r.j) : ids_b[r.j], r.score});
  return out;
}

struct MatchConfig {
  SolverConfig solver;
  double min_score = 0.0;      // absolute plan-mass threshold; useful values scale like 1/N
  std::size_t max_matches = 0; // 0 keeps everything
};

struct MatchOutcome {
  MatchSet matches;
  TransportPlan plan;
  std::vector<std::int64_t> ids_a;  // plan row/col index -> track id
  std::vector<std::int64_t> ids_b;
};

namespace detail {

inline TrackSet subsample_for_matching(const TrackSet& ts, std::int64_t n_max) {
  if (n_max <= 0 || static_cast<std::int64_t>(ts.tracks.size()) <= n_max) return ts;
  TrackSet out;
  out.video_id = ts.video_id;
  out.fps = ts.fps;
  out.frame_count = ts.frame_count;
  for (std::size_t i : farthest_point_subsample(ts, static_cast<std::size_t>(n_max)))
    out.tracks.push_back(ts.tracks[i]);
  return out;
}

}  // namespace detail

// Full matching step for one ordered pair of videos: optional farthest-point
// cap, cost construction, fused solve, discrete extraction. Scores refer to
// the plan over the (possibly subsampled) sets.
inline MatchOutcome match_track_sets(const TrackSet& A, const TrackSet& B,
                                     const MatchConfig& config = {}) {
  A.validate();
  B.validate();
  if (A.tracks.empty() || B.tracks.empty())
    throw InvalidInput("match_track_sets: empty track set");

  const TrackSet as = detail::subsample_for_matching(A, config.solver.n_max);
  const TrackSet bs = detail::subsample_for_matching(B, config.solver.n_max);

  const auto structure = [&](const TrackSet& ts) {
    if (ts.tracks.size() == 1) return MatrixXd::Zero(1, 1).eval();
    return intra_distance_matrix(ts, config.solver.threads);
  };
  CostMatrices costs;
  costs.feature_cost = feature_cost_matrix(as, bs);
  costs.struct_a = structure(as);
  costs.struct_b = structure(bs);

  MatchOutcome out;
  out.plan = fgw_solve(costs, config.solver.alpha, config.solver);
  out.ids_a.reserve(as.tracks.size());
  for (const Track& t : as.tracks) out.ids_a.push_back(t.id);
  out.ids_b.reserve(bs.tracks.size());
  for (const Track& t : bs.tracks) out.ids_b.push_back(t.id);
  out.matches = hungarian_extract(out.plan, config.min_score, config.max_matches, out.ids_a,
                                  out.ids_b, A.video_id, B.video_id);
  return out;
}

}  // namespace tracksync
