#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/spline.hpp"
#include "tracksync/sync.hpp"

namespace tracksync {

struct RefineWeights {
  double align = 1.0;
  double arap = 0.1;
  double vel = 0.01;
  double acc = 0.01;
};

// Joint refinement state: per-video spline scaffolds, the cross-video
// matches that define the alignment residuals, and the current offsets.
// Sample grids are frozen at build time (in the reference clock for the
// alignment term, per-video local clocks for the regularizers) so the loss
// is smooth in the offsets throughout the trust region.
struct RefineProblem {
  std::string reference;
  std::vector<std::string> videos;  // sorted ids, reference included
  std::map<std::string, SplineScaffold> scaffolds;
  std::map<std::string, MatchSet> matches;  // query id -> pairs (reference id, query id)
  std::map<std::string, double> offsets;    // current estimate; reference pinned to 0
  std::map<std::string, double> coarse;     // offsets at build time (trust-region centers)
  std::map<std::string, std::vector<double>> sample_times;  // query id -> reference-clock grid
  std::map<std::string, std::vector<double>> local_times;   // video id -> regularizer grid
  RefineWeights weights;

  void validate() const {
    if (scaffolds.find(reference) == scaffolds.end())
      throw InvalidInput("refine problem: no scaffold for reference '" + reference + "'");
    if (offsets.at(reference) != 0.0)
      throw InvalidInput("refine problem: reference offset must be 0");
    for (const std::string& v : videos) {
      if (scaffolds.find(v) == scaffolds.end())
        throw InvalidInput("refine problem: no scaffold for video '" + v + "'");
      if (offsets.find(v) == offsets.end())
        throw InvalidInput("refine problem: no offset for video '" + v + "'");
      if (v == reference) continue;
      const auto ms = matches.find(v);
      if (ms == matches.end() || ms->second.pairs.empty())
        throw InvalidInput("refine problem: no matches for pair (" + reference + ", " + v + ")");
      for (const MatchPair& p : ms->second.pairs) {
        if (scaffolds.at(reference).trajectories.find(p.a) ==
            scaffolds.at(reference).trajectories.end())
          throw InvalidInput("refine problem: matched id " + std::to_string(p.a) +
                             " missing from reference scaffold");
        if (scaffolds.at(v).trajectories.find(p.b) == scaffolds.at(v).trajectories.end())
          throw InvalidInput("refine problem: matched id " + std::to_string(p.b) +
                             " missing from scaffold '" + v + "'");
      }
      if (sample_times.find(v) == sample_times.end() || sample_times.at(v).empty())
        throw InvalidInput("refine problem: empty sample grid for pair (" + reference + ", " +
                           v + ")");
    }
  }
};

// Flat packing of the optimization variables: first one offset per
// non-reference video (sorted), then per video and per track (sorted) the
// control parameters as [p0 m0 p1 m1 ...] xyz-interleaved.
struct VariableLayout {
  struct Block {
    std::string video;
    std::int64_t track = 0;
    int base = 0;
    int n_control = 0;
  };
  std::vector<std::string> offset_videos;  // sorted non-reference ids
  std::map<std::string, int> offset_of;
  std::vector<Block> blocks;
  std::map<std::string, std::map<std::int64_t, int>> block_of;  // video -> track -> block idx
  int total = 0;

  static VariableLayout build(const RefineProblem& p) {
    VariableLayout L;
    for (const std::string& v : p.videos)
      if (v != p.reference) L.offset_videos.push_back(v);
    int idx = 0;
    for (const std::string& v : L.offset_videos) L.offset_of[v] = idx++;
    for (const std::string& v : p.videos) {
      for (const auto& [track, traj] : p.scaffolds.at(v).trajectories) {
        Block b;
        b.video = v;
        b.track = track;
        b.base = idx;
        b.n_control = traj.n_control();
        idx += 6 * b.n_control;
        L.block_of[v][track] = static_cast<int>(L.blocks.size());
        L.blocks.push_back(std::move(b));
      }
    }
    L.total = idx;
    return L;
  }

  Eigen::VectorXd pack(const RefineProblem& p) const {
    Eigen::VectorXd x(total);
    for (const std::string& v : offset_videos) x[offset_of.at(v)] = p.offsets.at(v);
    for (const Block& b : blocks) {
      const SplineTrajectory& s = p.scaffolds.at(b.video).trajectories.at(b.track);
      for (int k = 0; k < b.n_control; ++k) {
        x.segment<3>(b.base + 6 * k) = s.control_positions[static_cast<std::size_t>(k)];
        x.segment<3>(b.base + 6 * k + 3) = s.control_tangents[static_cast<std::size_t>(k)];
      }
    }
    return x;
  }

  void unpack(const Eigen::VectorXd& x, RefineProblem& p) const {
    for (const std::string& v : offset_videos) p.offsets[v] = x[offset_of.at(v)];
    for (const Block& b : blocks) {
      SplineTrajectory& s = p.scaffolds.at(b.video).trajectories.at(b.track);
      for (int k = 0; k < b.n_control; ++k) {
        s.control_positions[static_cast<std::size_t>(k)] = x.segment<3>(b.base + 6 * k);
        s.control_tangents[static_cast<std::size_t>(k)] = x.segment<3>(b.base + 6 * k + 3);
      }
    }
  }
};

namespace detail {

// Scatter d(value)/d(local controls) * r into the flat gradient.
inline void add_basis_gradient(Eigen::VectorXd& grad, const VariableLayout::Block& block,
                               const SplineBasis& b, const Vec3& r) {
  const int base = block.base + 6 * b.segment;
  grad.segment<3>(base) += b.w_p0 * r;
  grad.segment<3>(base + 3) += b.w_m0 * r;
  grad.segment<3>(base + 6) += b.w_p1 * r;
  grad.segment<3>(base + 9) += b.w_m1 * r;
}

inline Vec3 eval_with(const SplineTrajectory& s, const SplineBasis& b) {
  return b.w_p0 * s.control_positions[static_cast<std::size_t>(b.segment)] +
         b.w_m0 * s.control_tangents[static_cast<std::size_t>(b.segment)] +
         b.w_p1 * s.control_positions[static_cast<std::size_t>(b.segment) + 1] +
         b.w_m1 * s.control_tangents[static_cast<std::size_t>(b.segment) + 1];
}

inline Vec3 derivative_with(const SplineTrajectory& s, const SplineBasis& b) {
  return b.dw_p0 * s.control_positions[static_cast<std::size_t>(b.segment)] +
         b.dw_m0 * s.control_tangents[static_cast<std::size_t>(b.segment)] +
         b.dw_p1 * s.control_positions[static_cast<std::size_t>(b.segment) + 1] +
         b.dw_m1 * s.control_tangents[static_cast<std::size_t>(b.segment) + 1];
}

}  // namespace detail

// Mean squared distance between reference trajectories and their matched
// counterparts evaluated at shifted times: mean over (pair, match, sample)
// of |S_ref(t) - S_v(t + dt_v)|^2. Adds scale * d(loss)/dx into grad when
// given. The mean's denominator is fixed at build time.
inline double alignment_loss(const RefineProblem& p, const VariableLayout& L,
                             Eigen::VectorXd* grad = nullptr, double scale = 1.0) {
  std::size_t terms = 0;
  for (const std::string& v : L.offset_videos)
    terms += p.matches.at(v).pairs.size() * p.sample_times.at(v).size();
  if (terms == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(terms);

  double loss = 0.0;
  for (const std::string& v : L.offset_videos) {
    const SplineScaffold& ref_sc = p.scaffolds.at(p.reference);
    const SplineScaffold& qry_sc = p.scaffolds.at(v);
    const double dt = p.offsets.at(v);
    const int offset_idx = L.offset_of.at(v);
    for (const MatchPair& m : p.matches.at(v).pairs) {
      const SplineTrajectory& sa = ref_sc.trajectories.at(m.a);
      const SplineTrajectory& sb = qry_sc.trajectories.at(m.b);
      const VariableLayout::Block& block_a =
          L.blocks[static_cast<std::size_t>(L.block_of.at(p.reference).at(m.a))];
      const VariableLayout::Block& block_b =
          L.blocks[static_cast<std::size_t>(L.block_of.at(v).at(m.b))];
      for (const double t : p.sample_times.at(v)) {
        const SplineBasis ba = basis_at(sa, t);
        const SplineBasis bb = basis_at(sb, t + dt);
        const Vec3 r = detail::eval_with(sa, ba) - detail::eval_with(sb, bb);
        loss += r.squaredNorm() * inv;
        if (grad != nullptr) {
          const double c = 2.0 * inv * scale;
          detail::add_basis_gradient(*grad, block_a, ba, c * r);
          detail::add_basis_gradient(*grad, block_b, bb, -c * r);
          (*grad)[offset_idx] -= c * r.dot(detail::derivative_with(sb, bb));
        }
      }
    }
  }
  return loss;
}

// Mean over (edge, time) of (|S_i(t) - S_j(t)| - rest)^2 for one video,
// sampled on its local grid. Offsets never enter: rigidity is a property
// of each video's own clock.
inline double arap_loss(const RefineProblem& p, const std::string& video,
                        const VariableLayout& L, Eigen::VectorXd* grad = nullptr,
                        double scale = 1.0) {
  const SplineScaffold& sc = p.scaffolds.at(video);
  const std::vector<double>& times = p.local_times.at(video);
  const std::size_t terms = sc.graph.edges.size() * times.size();
  if (terms == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(terms);

  double loss = 0.0;
  for (const ScaffoldEdge& e : sc.graph.edges) {
    const SplineTrajectory& si = sc.trajectories.at(e.a);
    const SplineTrajectory& sj = sc.trajectories.at(e.b);
    const VariableLayout::Block& bi =
        L.blocks[static_cast<std::size_t>(L.block_of.at(video).at(e.a))];
    const VariableLayout::Block& bj =
        L.blocks[static_cast<std::size_t>(L.block_of.at(video).at(e.b))];
    for (const double t : times) {
      const SplineBasis ba = basis_at(si, t);
      const SplineBasis bb = basis_at(sj, t);
      const Vec3 d = detail::eval_with(si, ba) - detail::eval_with(sj, bb);
      const double len = d.norm();
      const double r = len - e.rest_length;
      loss += r * r * inv;
      if (grad != nullptr && len > kMinRestLength) {
        const Vec3 g = (2.0 * inv * scale * r / len) * d;
        detail::add_basis_gradient(*grad, bi, ba, g);
        detail::add_basis_gradient(*grad, bj, bb, -g);
      }
    }
  }
  return loss;
}

// Velocity- and acceleration-smoothness terms for one video on its local
// grid: with the second difference a_i = x_{i+2} - 2 x_{i+1} + x_i, the
// velocity term is mean |a_i|^2 and the acceleration term is the mean
// squared third difference. Returns (vel, acc).
inline std::pair<double, double> vel_acc_losses(const RefineProblem& p, const std::string& video,
                                                const VariableLayout& L,
                                                Eigen::VectorXd* grad = nullptr,
                                                double scale_vel = 1.0, double scale_acc = 1.0) {
  const SplineScaffold& sc = p.scaffolds.at(video);
  const std::vector<double>& times = p.local_times.at(video);
  const std::size_t n = times.size();
  if (n < 3)
    throw InvalidInput("vel_acc_losses: need at least 3 sample times for video '" + video + "'");
  const std::size_t n_vel = n - 2;
  const std::size_t n_acc = n >= 4 ? n - 3 : 0;
  const std::size_t n_tracks = sc.trajectories.size();
  const double inv_vel = 1.0 / static_cast<double>(n_vel * n_tracks);
  const double inv_acc = n_acc > 0 ? 1.0 / static_cast<double>(n_acc * n_tracks) : 0.0;

  double vel = 0.0, acc = 0.0;
  std::vector<SplineBasis> bases(n);
  std::vector<Vec3> x(n), dx(n);
  for (const auto& [track, s] : sc.trajectories) {
    const VariableLayout::Block& block =
        L.blocks[static_cast<std::size_t>(L.block_of.at(video).at(track))];
    for (std::size_t i = 0; i < n; ++i) {
      bases[i] = basis_at(s, times[i]);
      x[i] = detail::eval_with(s, bases[i]);
      dx[i].setZero();
    }
    for (std::size_t i = 0; i + 2 < n; ++i) {
      const Vec3 a = x[i + 2] - 2.0 * x[i + 1] + x[i];
      vel += a.squaredNorm() * inv_vel;
      if (grad != nullptr) {
        const Vec3 g = (2.0 * inv_vel * scale_vel) * a;
        dx[i] += g;
        dx[i + 1] -= 2.0 * g;
        dx[i + 2] += g;
      }
    }
    for (std::size_t i = 0; i + 3 < n; ++i) {
      const Vec3 j = x[i + 3] - 3.0 * x[i + 2] + 3.0 * x[i + 1] - x[i];
      acc += j.squaredNorm() * inv_acc;
      if (grad != nullptr) {
        const Vec3 g = (2.0 * inv_acc * scale_acc) * j;
        dx[i] -= g;
        dx[i + 1] += 3.0 * g;
        dx[i + 2] -= 3.0 * g;
        dx[i + 3] += g;
      }
    }
    if (grad != nullptr)
      for (std::size_t i = 0; i < n; ++i) detail::add_basis_gradient(*grad, block, bases[i], dx[i]);
  }
  return {vel, acc};
}

struct LossBreakdown {
  double align = 0.0;
  double arap = 0.0;  // mean over videos
  double vel = 0.0;   // mean over videos
  double acc = 0.0;   // mean over videos
  double total = 0.0;
};

// Weighted total; per-video regularizers are averaged over videos so the
// balance does not drift with view count.
inline LossBreakdown total_loss(const RefineProblem& p, const VariableLayout& L,
                                Eigen::VectorXd* grad = nullptr) {
  if (grad != nullptr) grad->setZero(L.total);
  LossBreakdown out;
  const double nv = static_cast<double>(p.videos.size());
  out.align = alignment_loss(p, L, grad, p.weights.align);
  for (const std::string& v : p.videos) {
    out.arap += arap_loss(p, v, L, grad, p.weights.arap / nv) / nv;
    const auto [vel, acc] =
        vel_acc_losses(p, v, L, grad, p.weights.vel / nv, p.weights.acc / nv);
    out.vel += vel / nv;
    out.acc += acc / nv;
  }
  out.total = p.weights.align * out.align + p.weights.arap * out.arap + p.weights.vel * out.vel +
              p.weights.acc * out.acc;
  return out;
}

struct RefineBuildConfig {
  RefineWeights weights;
  double samples_per_frame = 4.0;  // alignment grid density
  double sample_margin = 2.0;      // frames kept clear of the overlap boundary
  double local_step = 1.0;         // regularizer grid spacing, frames
};

// Assembles the refinement problem from fitted scaffolds, matches, and the
// coarse sync result. Sample grids are fixed here, once.
inline RefineProblem build_refine_problem(std::map<std::string, SplineScaffold> scaffolds,
                                          std::map<std::string, MatchSet> matches,
                                          const SyncResult& coarse,
                                          const RefineBuildConfig& config = {}) {
  RefineProblem p;
  p.reference = coarse.reference_video;
  p.weights = config.weights;
  p.scaffolds = std::move(scaffolds);
  p.matches = std::move(matches);
  for (const auto& [v, sc] : p.scaffolds) {
    p.videos.push_back(v);
    const auto est = coarse.offsets.find(v);
    if (est == coarse.offsets.end())
      throw InvalidInput("build_refine_problem: no coarse offset for video '" + v + "'");
    p.offsets[v] = static_cast<double>(est->second.coarse);
    p.coarse[v] = p.offsets[v];
  }
  if (p.scaffolds.find(p.reference) == p.scaffolds.end())
    throw InvalidInput("build_refine_problem: reference scaffold '" + p.reference + "' missing");
  p.offsets[p.reference] = 0.0;
  p.coarse[p.reference] = 0.0;

  for (const auto& [v, sc] : p.scaffolds) {
    if (sc.trajectories.empty())
      throw InvalidInput("build_refine_problem: scaffold '" + v + "' has no trajectories");
    const SplineTrajectory& first = sc.trajectories.begin()->second;
    std::vector<double> grid;
    for (double t = first.t_start; t <= first.t_end() + 1e-9; t += config.local_step)
      grid.push_back(std::min(t, first.t_end()));
    p.local_times[v] = std::move(grid);
  }

  const SplineTrajectory& ref_traj = p.scaffolds.at(p.reference).trajectories.begin()->second;
  for (const std::string& v : p.videos) {
    if (v == p.reference) continue;
    const SplineTrajectory& qry_traj = p.scaffolds.at(v).trajectories.begin()->second;
    const double dt0 = p.offsets.at(v);
    const double lo =
        std::max(ref_traj.t_start, qry_traj.t_start - dt0) + config.sample_margin;
    const double hi = std::min(ref_traj.t_end(), qry_traj.t_end() - dt0) - config.sample_margin;
    if (hi - lo < 1.0)
      throw InvalidInput("build_refine_problem: empty overlap for pair (" + p.reference + ", " +
                         v + ") at coarse offset " + std::to_string(dt0));
    std::vector<double> grid;
    const double step = 1.0 / config.samples_per_frame;
    for (double t = lo; t <= hi + 1e-9; t += step) grid.push_back(std::min(t, hi));
    p.sample_times[v] = std::move(grid);
  }

  p.validate();
  return p;
}

struct OptimConfig {
  int max_iterations = 2000;
  double offset_step = 1e-2;       // frames per unit adaptive step
  double control_step = 1e-3;      // scene units per unit adaptive step
  double grad_tol = 1e-8;          // stop when the free-gradient norm falls below
  double loss_tol = 1e-10;        // stop when an accepted step improves less than this
  int loss_patience = 10;         // consecutive below-tolerance improvements before stopping
  double freeze_band = 1.5;       // frames; offsets may not leave coarse +- band
  // The loss has a near-gauge: shifting a video's control points in time
  // mimics an offset change, and the regularizers barely resist it. The
  // fitted controls already explain the data, so they get a tight box:
  // each coordinate may move at most control_band (in frames) times the
  // video's mean speed away from its fitted value.
  double control_band = 0.01;
  double unidentifiable_tol = 1e-10;  // alignment response to a quarter-frame probe below
                                      // this flags the offset as carrying no information
  int max_rejects = 40;
};

struct VideoRefineStatus {
  bool frozen = false;          // hit the freeze band and was pinned there
  bool unidentifiable = false;  // alignment carries no offset information
};

struct TraceRow {
  int iteration = 0;
  double total = 0, align = 0, arap = 0, vel = 0, acc = 0;
  std::map<std::string, double> offsets;  // non-reference videos
};

struct RefineTrace {
  std::vector<TraceRow> rows;
  std::string stop_reason;
  int iterations = 0;
};

struct RefineOutcome {
  std::map<std::string, double> refined;  // per video; reference included at 0
  std::map<std::string, VideoRefineStatus> status;
  RefineTrace trace;
  LossBreakdown final_loss;
  RefineProblem final_problem;  // converged scaffolds and offsets
};

// Adaptive first-order descent on the total loss with step-halving and the
// offset trust region. Accepted iterates never increase the loss.
inline RefineOutcome refine_offsets(RefineProblem p, const OptimConfig& config = {}) {
  p.validate();
  const VariableLayout L = VariableLayout::build(p);
  RefineOutcome out;
  for (const std::string& v : L.offset_videos) out.status[v] = VideoRefineStatus{};

  Eigen::VectorXd x = L.pack(p);
  Eigen::VectorXd grad(L.total);
  std::vector<char> frozen(static_cast<std::size_t>(L.total), 0);

  // per-variable base step sizes
  Eigen::VectorXd lr = Eigen::VectorXd::Constant(L.total, config.control_step);
  for (const std::string& v : L.offset_videos) lr[L.offset_of.at(v)] = config.offset_step;

  // trust region on the control parameters, see OptimConfig::control_band
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::VectorXd ctrl_lo = Eigen::VectorXd::Constant(L.total, -inf);
  Eigen::VectorXd ctrl_hi = Eigen::VectorXd::Constant(L.total, inf);
  for (const std::string& v : p.videos) {
    const SplineScaffold& sc = p.scaffolds.at(v);
    double speed = 0.0;
    std::size_t n_speed = 0;
    for (const auto& [track, s] : sc.trajectories)
      for (const double t : p.local_times.at(v)) {
        speed += spline_time_derivative(s, t).norm();
        ++n_speed;
      }
    const double rho =
        std::max(config.control_band * speed / static_cast<double>(std::max<std::size_t>(n_speed, 1)),
                 1e-9);
    for (const auto& [track, block_idx] : L.block_of.at(v)) {
      const VariableLayout::Block& b = L.blocks[static_cast<std::size_t>(block_idx)];
      ctrl_lo.segment(b.base, 6 * b.n_control) =
          x.segment(b.base, 6 * b.n_control).array() - rho;
      ctrl_hi.segment(b.base, 6 * b.n_control) =
          x.segment(b.base, 6 * b.n_control).array() + rho;
    }
  }

  // Flag videos whose alignment term does not respond to the offset. A
  // plain gradient test cannot tell "no information" apart from "already
  // at the optimum", so probe a quarter frame in both directions.
  {
    const double base = alignment_loss(p, L, nullptr);
    for (const std::string& v : L.offset_videos) {
      const double saved = p.offsets.at(v);
      p.offsets[v] = saved + 0.25;
      const double up = alignment_loss(p, L, nullptr);
      p.offsets[v] = saved - 0.25;
      const double down = alignment_loss(p, L, nullptr);
      p.offsets[v] = saved;
      if (std::abs(up - base) + std::abs(down - base) < config.unidentifiable_tol) {
        out.status[v].unidentifiable = true;
        frozen[static_cast<std::size_t>(L.offset_of.at(v))] = 1;
      }
    }
  }

  LossBreakdown cur = total_loss(p, L, &grad);
  const auto record = [&](int iteration, const LossBreakdown& lb) {
    TraceRow row;
    row.iteration = iteration;
    row.total = lb.total;
    row.align = lb.align;
    row.arap = lb.arap;
    row.vel = lb.vel;
    row.acc = lb.acc;
    for (const std::string& v : L.offset_videos) row.offsets[v] = x[L.offset_of.at(v)];
    out.trace.rows.push_back(std::move(row));
  };
  record(0, cur);

  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(L.total);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(L.total);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double multiplier = 1.0;
  int adam_t = 0;
  int stall_count = 0;
  bool just_reset = false;
  out.trace.stop_reason = "max_iterations";

  for (int it = 1; it <= config.max_iterations; ++it) {
    for (Eigen::Index i = 0; i < grad.size(); ++i)
      if (frozen[static_cast<std::size_t>(i)]) grad[i] = 0.0;
    const double gnorm = grad.norm();
    if (gnorm < config.grad_tol) {
      out.trace.stop_reason = "gradient_norm";
      break;
    }

    ++adam_t;
    m1 = beta1 * m1 + (1.0 - beta1) * grad;
    m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 / (1.0 - std::pow(beta1, adam_t));
    const double c2 = 1.0 / (1.0 - std::pow(beta2, adam_t));
    const Eigen::VectorXd direction =
        (m1 * c1).cwiseQuotient(((m2 * c2).cwiseSqrt().array() + eps).matrix());

    bool accepted = false;
    LossBreakdown next;
    Eigen::VectorXd x_new;
    for (int reject = 0; reject <= config.max_rejects; ++reject) {
      x_new = (x - multiplier * lr.cwiseProduct(direction)).cwiseMax(ctrl_lo).cwiseMin(ctrl_hi);
      for (Eigen::Index i = 0; i < x_new.size(); ++i)
        if (frozen[static_cast<std::size_t>(i)]) x_new[i] = x[i];
      L.unpack(x_new, p);
      next = total_loss(p, L, nullptr);
      if (next.total <= cur.total) {
        accepted = true;
        break;
      }
      multiplier *= 0.5;
    }
    if (!accepted) {
      L.unpack(x, p);  // restore the best iterate
      if (just_reset) {
        out.trace.stop_reason = "step_stalled";
        break;
      }
      // momentum may have turned into an ascent direction; retry from the
      // plain gradient before giving up
      m1.setZero();
      m2.setZero();
      adam_t = 0;
      multiplier = 1.0;
      just_reset = true;
      continue;
    }
    just_reset = false;

    x = x_new;
    multiplier = std::min(1.0, multiplier * 2.0);

    // trust region on the offsets
    for (const std::string& v : L.offset_videos) {
      const int oi = L.offset_of.at(v);
      if (frozen[static_cast<std::size_t>(oi)]) continue;
      const double lo = p.coarse.at(v) - config.freeze_band;
      const double hi = p.coarse.at(v) + config.freeze_band;
      if (x[oi] < lo || x[oi] > hi) {
        x[oi] = std::clamp(x[oi], lo, hi);
        frozen[static_cast<std::size_t>(oi)] = 1;
        out.status[v].frozen = true;
      }
    }
    L.unpack(x, p);

    const double improvement = cur.total - next.total;
    cur = total_loss(p, L, &grad);
    out.trace.iterations = it;
    record(it, cur);
    stall_count = improvement < config.loss_tol ? stall_count + 1 : 0;
    if (stall_count >= config.loss_patience) {
      out.trace.stop_reason = "loss_improvement";
      break;
    }
  }

  L.unpack(x, p);
  out.final_loss = cur;
  out.refined[p.reference] = 0.0;
  for (const std::string& v : L.offset_videos) out.refined[v] = x[L.offset_of.at(v)];
  out.final_problem = std::move(p);
  return out;
}

}  // namespace tracksync
