#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/matching.hpp"
#include "tracksync/rng.hpp"
#include "tracksync/sync.hpp"

namespace tracksync {

// Synthetic rigid-cluster scenes with known offsets and correspondences.
// These stand in for a real tracking front end, so every downstream stage
// can be scored against exact ground truth.
struct SceneConfig {
  int n_clusters = 3;
  int points_per_cluster = 64;
  int n_views = 5;
  int frames = 120;
  double fps = 30.0;
  double offset_min = -30.0;  // frames, inclusive
  double offset_max = 30.0;
  bool fractional_offsets = true;
  double position_noise_sigma = 0.0;  // scene units
  int feature_dim = 32;
  double feature_noise_sigma = 0.0;
  double motion_smoothness = 1.0;  // scales the waypoint spacing
  std::uint64_t seed = 0;

  void validate() const {
    if (n_clusters < 1) throw InvalidInput("scene config: n_clusters must be >= 1");
    if (points_per_cluster < 1)
      throw InvalidInput("scene config: points_per_cluster must be >= 1");
    if (n_views < 1) throw InvalidInput("scene config: n_views must be >= 1");
    if (frames < 8) throw InvalidInput("scene config: frames must be >= 8");
    if (!(fps > 0.0)) throw InvalidInput("scene config: fps must be positive");
    if (!(offset_min <= offset_max))
      throw InvalidInput("scene config: offset_min must not exceed offset_max");
    if (position_noise_sigma < 0.0)
      throw InvalidInput("scene config: position_noise_sigma must be >= 0");
    if (feature_dim < 1) throw InvalidInput("scene config: feature_dim must be >= 1");
    if (feature_noise_sigma < 0.0)
      throw InvalidInput("scene config: feature_noise_sigma must be >= 0");
    if (!(motion_smoothness > 0.0))
      throw InvalidInput("scene config: motion_smoothness must be positive");
  }
};

inline SceneConfig desk_preset() { return SceneConfig{}; }

namespace detail {

// Uniform Catmull-Rom value at parameter t over waypoints starting at t0
// with the given spacing. Needs one waypoint beyond each end of the usable
// range; the callers allocate accordingly.
template <typename T>
T catmull_rom(const std::vector<T>& w, double t0, double spacing, double t) {
  const double x = (t - t0) / spacing;
  const int last = static_cast<int>(w.size()) - 3;  // last usable segment start
  int k = static_cast<int>(std::floor(x));
  k = std::clamp(k, 1, last);
  const double u = x - k;
  const T& p0 = w[static_cast<std::size_t>(k - 1)];
  const T& p1 = w[static_cast<std::size_t>(k)];
  const T& p2 = w[static_cast<std::size_t>(k + 1)];
  const T& p3 = w[static_cast<std::size_t>(k + 2)];
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * (u * u) +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * (u * u * u));
}

}  // namespace detail

// One cluster's continuous-time rigid motion: splined translation waypoints
// plus a splined rotation angle about a fixed axis.
struct ClusterMotion {
  double t0 = 0.0;       // time of waypoint index 0
  double spacing = 16.0; // frames between waypoints
  std::vector<Vec3> translation;
  std::vector<double> angle;  // radians
  Vec3 axis = Vec3::UnitZ();

  Vec3 translation_at(double t) const {
    return detail::catmull_rom(translation, t0, spacing, t);
  }
  Eigen::Matrix3d rotation_at(double t) const {
    return Eigen::AngleAxisd(detail::catmull_rom(angle, t0, spacing, t), axis)
        .toRotationMatrix();
  }
  Vec3 apply(const Vec3& rest, double t) const {
    return rotation_at(t) * rest + translation_at(t);
  }
};

struct GroundTruth {
  SceneConfig config;
  std::map<std::string, double> true_offsets;  // view id -> frames; reference at 0
  std::vector<ClusterMotion> clusters;
  std::vector<Vec3> rest_positions;  // global point index -> cluster-local rest position
  std::vector<int> cluster_of;       // global point index -> cluster index
  // view id -> permutation: the track with id i in that view is global point
  // global_of[view][i]
  std::map<std::string, std::vector<std::int64_t>> global_of;

  // Continuous world motion of one point (the canonical trajectory).
  Vec3 world_at(std::size_t point, double t) const {
    return clusters[static_cast<std::size_t>(cluster_of[point])].apply(rest_positions[point], t);
  }

  // Exact id bijection between two views: pairs (id in view_a, id in view_b).
  std::vector<std::pair<std::int64_t, std::int64_t>> true_matches(
      const std::string& view_a, const std::string& view_b) const {
    const auto ita = global_of.find(view_a);
    const auto itb = global_of.find(view_b);
    if (ita == global_of.end() || itb == global_of.end())
      throw InvalidInput("true_matches: unknown view id");
    std::vector<std::int64_t> inv_b(itb->second.size());
    for (std::size_t i = 0; i < itb->second.size(); ++i)
      inv_b[static_cast<std::size_t>(itb->second[i])] = static_cast<std::int64_t>(i);
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    for (std::size_t i = 0; i < ita->second.size(); ++i)
      out.push_back({static_cast<std::int64_t>(i),
                     inv_b[static_cast<std::size_t>(ita->second[i])]});
    return out;
  }
};

namespace detail {

// Named PRNG substreams so views and noise sources stay independent and
// the scene is reproducible piecewise.
enum : std::uint64_t {
  kStreamLayout = 0,
  kStreamOffsets = 1,
  kStreamCluster = 100,      // + cluster index
  kStreamPermutation = 1000, // + view index
  kStreamPosNoise = 2000,    // + view index
  kStreamFeatNoise = 3000,   // + view index
};

inline Vec3 random_in_box(RandomStream& rng, double half) {
  return Vec3(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half));
}

// Splined random rigid motion with an excitation guard: the translation
// path must cover at least 5x the cluster radius or the draw is rejected.
inline ClusterMotion sample_cluster_motion(RandomStream& rng, const SceneConfig& cfg,
                                           const Vec3& center, double radius) {
  const double span = std::max(std::abs(cfg.offset_min), std::abs(cfg.offset_max)) + 2.0;
  const double spacing = 16.0 * cfg.motion_smoothness;
  const double t0 = -span - 2.0 * spacing;
  const double t1 = static_cast<double>(cfg.frames - 1) + span + 2.0 * spacing;
  const int n_way = static_cast<int>(std::ceil((t1 - t0) / spacing)) + 3;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    ClusterMotion m;
    m.t0 = t0;
    m.spacing = spacing;
    m.axis = Vec3(rng.normal(), rng.normal(), rng.normal());
    if (m.axis.norm() < 1e-6) m.axis = Vec3::UnitZ();
    m.axis.normalize();
    double a = rng.uniform(-0.5, 0.5);
    for (int k = 0; k < n_way; ++k) {
      m.translation.push_back(center + random_in_box(rng, 1.5));
      m.angle.push_back(a);
      a += rng.normal(0.35);
    }
    double path = 0.0;
    Vec3 prev = m.translation_at(0.0);
    for (int f = 1; f < cfg.frames; ++f) {
      const Vec3 cur = m.translation_at(static_cast<double>(f));
      path += (cur - prev).norm();
      prev = cur;
    }
    if (path >= 5.0 * radius) return m;
  }
  throw NumericalError("scene generation: could not excite cluster motion after 1000 draws");
}

}  // namespace detail

// Builds the scene: smooth random rigid motion per cluster, shared unit
// descriptors with per-view noise, per-view sampling at that view's clock
// (frame j shows world time j - true_offset), a per-view track permutation,
// then positional noise. Fully determined by config.seed.
inline std::pair<std::vector<TrackSet>, GroundTruth> generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  GroundTruth gt;
  gt.config = cfg;

  const std::size_t n_points =
      static_cast<std::size_t>(cfg.n_clusters) * static_cast<std::size_t>(cfg.points_per_cluster);

  RandomStream layout(cfg.seed, detail::kStreamLayout);
  const double center_half = 2.5 * std::cbrt(static_cast<double>(cfg.n_clusters));
  std::vector<Vec3> centers;
  std::vector<double> radii;
  for (int c = 0; c < cfg.n_clusters; ++c) {
    centers.push_back(detail::random_in_box(layout, center_half));
    double radius = 0.0;
    for (int k = 0; k < cfg.points_per_cluster; ++k) {
      const Vec3 rest = detail::random_in_box(layout, 1.0);
      gt.rest_positions.push_back(rest);
      gt.cluster_of.push_back(c);
      radius = std::max(radius, rest.norm());
    }
    radii.push_back(std::max(radius, 0.2));
  }

  std::vector<Eigen::VectorXd> descriptors;
  for (std::size_t g = 0; g < n_points; ++g) {
    Eigen::VectorXd f(cfg.feature_dim);
    for (int i = 0; i < cfg.feature_dim; ++i) f[i] = layout.normal();
    const double norm = f.norm();
    descriptors.push_back(norm > 1e-12 ? Eigen::VectorXd(f / norm) : Eigen::VectorXd(f));
  }

  for (int c = 0; c < cfg.n_clusters; ++c) {
    RandomStream rng(cfg.seed, detail::kStreamCluster + static_cast<std::uint64_t>(c));
    gt.clusters.push_back(detail::sample_cluster_motion(
        rng, cfg, centers[static_cast<std::size_t>(c)], radii[static_cast<std::size_t>(c)]));
  }

  RandomStream offset_rng(cfg.seed, detail::kStreamOffsets);
  std::vector<double> offsets(static_cast<std::size_t>(cfg.n_views), 0.0);
  for (int v = 1; v < cfg.n_views; ++v) {
    double dt = offset_rng.uniform(cfg.offset_min, cfg.offset_max);
    if (!cfg.fractional_offsets) dt = std::round(dt);
    offsets[static_cast<std::size_t>(v)] = dt;
  }

  std::vector<TrackSet> views;
  for (int v = 0; v < cfg.n_views; ++v) {
    const std::string id = "cam" + std::to_string(v);
    const double dt = offsets[static_cast<std::size_t>(v)];
    gt.true_offsets[id] = dt;

    std::vector<std::int64_t> order(n_points);
    for (std::size_t g = 0; g < n_points; ++g) order[g] = static_cast<std::int64_t>(g);
    RandomStream perm_rng(cfg.seed, detail::kStreamPermutation + static_cast<std::uint64_t>(v));
    for (std::size_t i = n_points; i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(perm_rng.uniform(0.0, static_cast<double>(i)));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    gt.global_of[id] = order;

    RandomStream pos_rng(cfg.seed, detail::kStreamPosNoise + static_cast<std::uint64_t>(v));
    RandomStream feat_rng(cfg.seed, detail::kStreamFeatNoise + static_cast<std::uint64_t>(v));
    TrackSet ts;
    ts.video_id = id;
    ts.fps = cfg.fps;
    ts.frame_count = cfg.frames;
    for (std::size_t i = 0; i < n_points; ++i) {
      const std::size_t g = static_cast<std::size_t>(order[i]);
      Track t;
      t.id = static_cast<std::int64_t>(i);
      t.positions.resize(static_cast<std::size_t>(cfg.frames));
      for (int f = 0; f < cfg.frames; ++f) {
        Vec3 p = gt.world_at(g, static_cast<double>(f) - dt);
        if (cfg.position_noise_sigma > 0.0)
          p += Vec3(pos_rng.normal(cfg.position_noise_sigma),
                    pos_rng.normal(cfg.position_noise_sigma),
                    pos_rng.normal(cfg.position_noise_sigma));
        t.positions[static_cast<std::size_t>(f)] = p;
      }
      Eigen::VectorXd f = descriptors[g];
      if (cfg.feature_noise_sigma > 0.0) {
        for (int d = 0; d < cfg.feature_dim; ++d) f[d] += feat_rng.normal(cfg.feature_noise_sigma);
        const double norm = f.norm();
        if (norm > 1e-12) f /= norm;
      }
      t.feature = f;
      ts.tracks.push_back(std::move(t));
    }
    ts.validate();
    views.push_back(std::move(ts));
  }
  return {std::move(views), std::move(gt)};
}

// Offset-accuracy metrics of a sync result against ground truth.
struct SyncScore {
  std::map<std::string, double> coarse_error;  // non-reference views, |est - true|
  std::map<std::string, std::optional<double>> refined_error;
  double mean_coarse = 0.0;
  std::optional<double> mean_refined;  // absent when no view was refined
};

inline SyncScore score_sync(const SyncResult& result, const GroundTruth& gt) {
  if (gt.true_offsets.find(result.reference_video) == gt.true_offsets.end())
    throw InvalidInput("score_sync: reference '" + result.reference_video +
                       "' not in ground truth");
  const double ref_true = gt.true_offsets.at(result.reference_video);

  SyncScore score;
  double refined_sum = 0.0;
  std::size_t refined_n = 0, n = 0;
  for (const auto& [view, est] : result.offsets) {
    if (gt.true_offsets.find(view) == gt.true_offsets.end())
      throw InvalidInput("score_sync: view '" + view + "' not in ground truth");
    if (view == result.reference_video) continue;
    // offsets are relative to the chosen reference clock
    const double truth = gt.true_offsets.at(view) - ref_true;
    const double coarse_err = std::abs(static_cast<double>(est.coarse) - truth);
    score.coarse_error[view] = coarse_err;
    score.mean_coarse += coarse_err;
    ++n;
    if (est.refined.has_value()) {
      const double refined_err = std::abs(*est.refined - truth);
      score.refined_error[view] = refined_err;
      refined_sum += refined_err;
      ++refined_n;
    } else {
      score.refined_error[view] = std::nullopt;
    }
  }
  if (n > 0) score.mean_coarse /= static_cast<double>(n);
  if (refined_n > 0) score.mean_refined = refined_sum / static_cast<double>(refined_n);
  return score;
}

struct MatchScore {
  double precision = 0.0;  // predicted pairs that are true
  double recall = 0.0;     // true pairs that were predicted
  std::size_t n_predicted = 0;
  std::size_t n_true = 0;
};

inline MatchScore score_matches(const MatchSet& matches, const GroundTruth& gt) {
  const auto truth = gt.true_matches(matches.source_video, matches.target_video);
  std::map<std::int64_t, std::int64_t> want;
  for (const auto& [a, b] : truth) want[a] = b;

  MatchScore score;
  score.n_true = truth.size();
  score.n_predicted = matches.pairs.size();
  std::size_t correct = 0;
  for (const MatchPair& p : matches.pairs) {
    const auto it = want.find(p.a);
    if (it != want.end() && it->second == p.b) ++correct;
  }
  if (score.n_predicted > 0)
    score.precision = static_cast<double>(correct) / static_cast<double>(score.n_predicted);
  if (score.n_true > 0)
    score.recall = static_cast<double>(correct) / static_cast<double>(score.n_true);
  return score;
}

}  // namespace tracksync
