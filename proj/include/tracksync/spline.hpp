#pragma once

#include <Eigen/Core>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/parallel.hpp"

namespace tracksync {

// Uniform-knot cubic Hermite trajectory. Tangents are in scene units per
// frame, so the time derivative at knot k is exactly control_tangents[k].
struct SplineTrajectory {
  double t_start = 0.0;
  double dt = 1.0;  // knot spacing in frames
  std::vector<Vec3> control_positions;
  std::vector<Vec3> control_tangents;

  int n_control() const { return static_cast<int>(control_positions.size()); }
  double t_end() const { return t_start + dt * (n_control() - 1); }
  double knot_time(int k) const { return t_start + dt * k; }

  void validate() const {
    if (control_positions.size() < 2)
      throw InvalidInput("spline: need at least 2 control points");
    if (control_tangents.size() != control_positions.size())
      throw InvalidInput("spline: control position/tangent count mismatch");
    if (!(dt > 0.0)) throw InvalidInput("spline: knot spacing must be positive");
    for (const Vec3& p : control_positions)
      if (!p.allFinite()) throw InvalidInput("spline: non-finite control position");
    for (const Vec3& m : control_tangents)
      if (!m.allFinite()) throw InvalidInput("spline: non-finite control tangent");
  }
};

// Weights of one evaluation on the four local control parameters, plus the
// weights of the time derivative. Shared by evaluation, fitting, and the
// refinement gradients so all three stay consistent.
struct SplineBasis {
  int segment = 0;  // left knot index
  // value = w_p0*p[k] + w_m0*m[k] + w_p1*p[k+1] + w_m1*m[k+1]
  double w_p0 = 0, w_m0 = 0, w_p1 = 0, w_m1 = 0;
  // d(value)/dt with the same layout
  double dw_p0 = 0, dw_m0 = 0, dw_p1 = 0, dw_m1 = 0;
  bool clamped = false;  // t fell outside the knot span and was clamped
};

inline SplineBasis basis_at(const SplineTrajectory& s, double t) {
  SplineBasis b;
  const int nseg = s.n_control() - 1;
  double x = (t - s.t_start) / s.dt;
  if (x < 0.0) {
    x = 0.0;
    b.clamped = true;
  } else if (x > static_cast<double>(nseg)) {
    x = static_cast<double>(nseg);
    b.clamped = true;
  }
  int k = static_cast<int>(std::floor(x));
  if (k > nseg - 1) k = nseg - 1;
  const double u = x - k;
  b.segment = k;

  const double u2 = u * u;
  const double u3 = u2 * u;
  b.w_p0 = 2.0 * u3 - 3.0 * u2 + 1.0;
  b.w_m0 = (u3 - 2.0 * u2 + u) * s.dt;
  b.w_p1 = -2.0 * u3 + 3.0 * u2;
  b.w_m1 = (u3 - u2) * s.dt;
  if (!b.clamped) {
    b.dw_p0 = (6.0 * u2 - 6.0 * u) / s.dt;
    b.dw_m0 = 3.0 * u2 - 4.0 * u + 1.0;
    b.dw_p1 = (-6.0 * u2 + 6.0 * u) / s.dt;
    b.dw_m1 = 3.0 * u2 - 2.0 * u;
  }
  return b;
}

struct SplineSample {
  Vec3 value;
  bool clamped = false;
};

inline SplineSample eval_spline(const SplineTrajectory& s, double t) {
  const SplineBasis b = basis_at(s, t);
  SplineSample out;
  out.clamped = b.clamped;
  out.value = b.w_p0 * s.control_positions[static_cast<std::size_t>(b.segment)] +
              b.w_m0 * s.control_tangents[static_cast<std::size_t>(b.segment)] +
              b.w_p1 * s.control_positions[static_cast<std::size_t>(b.segment) + 1] +
              b.w_m1 * s.control_tangents[static_cast<std::size_t>(b.segment) + 1];
  return out;
}

// Analytic d/dt of eval_spline. Zero outside the knot span, where the
// clamped value is constant.
inline Vec3 spline_time_derivative(const SplineTrajectory& s, double t) {
  const SplineBasis b = basis_at(s, t);
  return b.dw_p0 * s.control_positions[static_cast<std::size_t>(b.segment)] +
         b.dw_m0 * s.control_tangents[static_cast<std::size_t>(b.segment)] +
         b.dw_p1 * s.control_positions[static_cast<std::size_t>(b.segment) + 1] +
         b.dw_m1 * s.control_tangents[static_cast<std::size_t>(b.segment) + 1];
}

struct SplineFit {
  SplineTrajectory trajectory;
  double residual_rms = 0.0;
  bool rank_warning = false;  // normal equations were singular; ridge fallback used
};

// Control count policy: roughly one control per five frames, at least
// four, never more than the frame count.
inline int default_control_count(int frames) {
  const int by_span = (frames + 4) / 5;
  return std::clamp(std::max(4, by_span), 2, frames);
}

// Joint linear least-squares fit of control positions and tangents to the
// integer-frame samples of a track. A rank-revealing decomposition picks
// the minimum-norm solution (and raises the warning) when the system is
// rank-deficient, e.g. more free tangents than samples.
inline SplineFit fit_spline(const Track& track, int n_control) {
  const int frames = static_cast<int>(track.positions.size());
  if (frames < 2) throw InvalidInput("fit_spline: track needs at least 2 frames");
  if (n_control < 2 || n_control > frames)
    throw InvalidInput("fit_spline: n_control " + std::to_string(n_control) +
                       " outside [2, " + std::to_string(frames) + "]");

  SplineFit fit;
  SplineTrajectory& s = fit.trajectory;
  s.t_start = 0.0;
  s.dt = static_cast<double>(frames - 1) / static_cast<double>(n_control - 1);
  s.control_positions.assign(static_cast<std::size_t>(n_control), Vec3::Zero());
  s.control_tangents.assign(static_cast<std::size_t>(n_control), Vec3::Zero());

  // unknown layout: [p_0, m_0, p_1, m_1, ...] per coordinate
  const int n_vars = 2 * n_control;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(frames, n_vars);
  Eigen::MatrixXd rhs(frames, 3);
  for (int t = 0; t < frames; ++t) {
    const SplineBasis b = basis_at(s, static_cast<double>(t));
    A(t, 2 * b.segment) = b.w_p0;
    A(t, 2 * b.segment + 1) = b.w_m0;
    A(t, 2 * b.segment + 2) = b.w_p1;
    A(t, 2 * b.segment + 3) = b.w_m1;
    rhs.row(t) = track.positions[static_cast<std::size_t>(t)].transpose();
  }

  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  fit.rank_warning = cod.rank() < n_vars;
  const Eigen::MatrixXd sol = cod.solve(rhs);
  if (!sol.allFinite())
    throw NumericalError("fit_spline: solve failed for track id " + std::to_string(track.id));

  for (int k = 0; k < n_control; ++k) {
    s.control_positions[static_cast<std::size_t>(k)] = sol.row(2 * k).transpose();
    s.control_tangents[static_cast<std::size_t>(k)] = sol.row(2 * k + 1).transpose();
  }

  double sq = 0.0;
  for (int t = 0; t < frames; ++t)
    sq += (eval_spline(s, static_cast<double>(t)).value -
           track.positions[static_cast<std::size_t>(t)])
              .squaredNorm();
  fit.residual_rms = std::sqrt(sq / static_cast<double>(frames));
  return fit;
}

// Per-video bundle of fitted trajectories over the scaffold graph. All
// trajectories share one knot grid.
struct SplineScaffold {
  std::string video_id;
  std::map<std::int64_t, SplineTrajectory> trajectories;
  ScaffoldGraph graph;
  double residual_rms = 0.0;  // RMS over all fitted tracks
  bool rank_warning = false;  // any per-track fit warned

  void validate() const {
    for (const std::int64_t id : graph.node_ids)
      if (trajectories.find(id) == trajectories.end())
        throw InvalidInput("spline scaffold '" + video_id + "': node " + std::to_string(id) +
                           " has no trajectory");
    const SplineTrajectory* first = nullptr;
    for (const auto& [id, s] : trajectories) {
      s.validate();
      if (first == nullptr) {
        first = &s;
      } else if (s.t_start != first->t_start || s.dt != first->dt ||
                 s.n_control() != first->n_control()) {
        throw InvalidInput("spline scaffold '" + video_id + "': knot grids differ");
      }
    }
  }
};

// Fits a scaffold over the given track ids (all tracks when empty) with a
// shared knot grid and the k-nearest-neighbor rigidity graph.
inline SplineScaffold build_spline_scaffold(const TrackSet& ts,
                                            const std::vector<std::int64_t>& ids = {},
                                            int n_control = 0, int k_neighbors = 4,
                                            int threads = 1) {
  ts.validate();
  TrackSet subset;
  const TrackSet* source = &ts;
  if (!ids.empty()) {
    subset.video_id = ts.video_id;
    subset.fps = ts.fps;
    subset.frame_count = ts.frame_count;
    for (const std::int64_t id : ids) {
      const Track* t = ts.find(id);
      if (t == nullptr)
        throw InvalidInput("build_spline_scaffold: id " + std::to_string(id) +
                           " not in track set '" + ts.video_id + "'");
      subset.tracks.push_back(*t);
    }
    source = &subset;
  }
  if (source->tracks.empty())
    throw InvalidInput("build_spline_scaffold: no tracks in '" + ts.video_id + "'");

  SplineScaffold scaffold;
  scaffold.video_id = ts.video_id;
  const int nc = n_control > 0 ? n_control : default_control_count(source->frame_count);

  std::vector<SplineFit> fits(source->tracks.size());
  parallel_for(source->tracks.size(), threads,
               [&](std::size_t i) { fits[i] = fit_spline(source->tracks[i], nc); });

  double sq = 0.0;
  for (std::size_t i = 0; i < source->tracks.size(); ++i) {
    scaffold.trajectories[source->tracks[i].id] = std::move(fits[i].trajectory);
    sq += fits[i].residual_rms * fits[i].residual_rms;
    scaffold.rank_warning = scaffold.rank_warning || fits[i].rank_warning;
  }
  scaffold.residual_rms = std::sqrt(sq / static_cast<double>(source->tracks.size()));

  if (source->tracks.size() >= 2) {
    const int k = std::min<int>(k_neighbors, static_cast<int>(source->tracks.size()) - 1);
    scaffold.graph = build_scaffold_graph(*source, k);
  } else {
    scaffold.graph.node_ids = {source->tracks[0].id};
  }
  return scaffold;
}

}  // namespace tracksync
