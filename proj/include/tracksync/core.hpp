#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "tracksync/errors.hpp"

namespace tracksync {

using Vec3 = Eigen::Vector3d;

// Rest lengths below this are clamped so ARAP-style normalizations never
// divide by zero.
inline constexpr double kMinRestLength = 1e-9;

// One 3D point trajectory sampled at the owning set's frame grid, plus a
// time-invariant descriptor.
struct Track {
  std::int64_t id = 0;
  std::vector<Vec3> positions;
  Eigen::VectorXd feature;
};

// All tracks of one video. Frames are indexed 0..frame_count-1 at a fixed
// fps; every track has exactly frame_count positions and every feature
// shares one dimension.
struct TrackSet {
  std::string video_id;
  double fps = 30.0;
  std::int64_t frame_count = 0;
  std::vector<Track> tracks;

  std::int64_t feature_dim() const {
    return tracks.empty() ? 0 : tracks.front().feature.size();
  }

  const Track* find(std::int64_t id) const {
    for (const auto& t : tracks)
      if (t.id == id) return &t;
    return nullptr;
  }

  // Throws InvalidInput naming the offending track/field.
  void validate() const;
};

struct ScaffoldEdge {
  std::int64_t a = 0;
  std::int64_t b = 0;       // a < b
  double rest_length = 0.0; // track distance at build time, >= kMinRestLength
};

// k-nearest-neighbor graph over a track set under the track distance.
struct ScaffoldGraph {
  std::vector<std::int64_t> node_ids;
  std::vector<ScaffoldEdge> edges;
};

inline bool finite(const Vec3& p) {
  return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

inline void TrackSet::validate() const {
  if (frame_count < 2)
    throw InvalidInput("track set '" + video_id + "': frame_count must be >= 2, got " +
                       std::to_string(frame_count));
  if (!(fps > 0.0) || !std::isfinite(fps))
    throw InvalidInput("track set '" + video_id + "': fps must be positive and finite");
  const std::int64_t d = feature_dim();
  std::unordered_map<std::int64_t, std::size_t> seen;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const Track& t = tracks[i];
    const std::string where = "track set '" + video_id + "', tracks[" + std::to_string(i) + "]";
    if (static_cast<std::int64_t>(t.positions.size()) != frame_count)
      throw InvalidInput(where + ".positions: length " + std::to_string(t.positions.size()) +
                         " != frame_count " + std::to_string(frame_count));
    for (std::size_t f = 0; f < t.positions.size(); ++f)
      if (!finite(t.positions[f]))
        throw InvalidInput(where + ".positions[" + std::to_string(f) + "]: non-finite coordinate");
    if (t.feature.size() == 0)
      throw InvalidInput(where + ".feature: empty feature vector");
    if (t.feature.size() != d)
      throw InvalidInput(where + ".feature: dimension " + std::to_string(t.feature.size()) +
                         " != " + std::to_string(d));
    if (!t.feature.allFinite())
      throw InvalidInput(where + ".feature: non-finite entry");
    auto [it, inserted] = seen.emplace(t.id, i);
    if (!inserted)
      throw InvalidInput(where + ".id: duplicate id " + std::to_string(t.id) +
                         " (also at tracks[" + std::to_string(it->second) + "])");
  }
}

// Max-over-time Euclidean distance between two equal-length trajectories.
// Under sufficiently excited rigid motion this approximates the true
// spatial distance between points on the same body.
inline double track_distance(const Track& a, const Track& b) {
  if (a.positions.size() != b.positions.size())
    throw InvalidInput("track_distance: length mismatch (" + std::to_string(a.positions.size()) +
                       " vs " + std::to_string(b.positions.size()) + ")");
  double worst = 0.0;
  for (std::size_t t = 0; t < a.positions.size(); ++t)
    worst = std::max(worst, (a.positions[t] - b.positions[t]).norm());
  return worst;
}

// Piecewise-linear interpolation of a track at fractional frame times.
// Exact (bit-identical) at integer times.
inline std::vector<Vec3> resample_track(const Track& a, const std::vector<double>& query_times) {
  const double t_max = static_cast<double>(a.positions.size()) - 1.0;
  std::vector<Vec3> out;
  out.reserve(query_times.size());
  for (double t : query_times) {
    if (!(t >= 0.0 && t <= t_max))
      throw OutOfRange("resample_track: query time " + std::to_string(t) + " outside [0, " +
                       std::to_string(t_max) + "]");
    const double fl = std::floor(t);
    const auto k = static_cast<std::size_t>(fl);
    if (t == fl) {
      out.push_back(a.positions[k]);
    } else {
      const double u = t - fl;
      out.push_back((1.0 - u) * a.positions[k] + u * a.positions[k + 1]);
    }
  }
  return out;
}

// Connects every track to its k nearest neighbors under track_distance.
// Ties and the final edge set are independent of input order: neighbors
// sort by (distance, id) and edges are stored with a < b, sorted.
inline ScaffoldGraph build_scaffold_graph(const TrackSet& ts, int k) {
  const std::int64_t n = static_cast<std::int64_t>(ts.tracks.size());
  if (k < 1 || k >= n)
    throw InvalidInput("build_scaffold_graph: k=" + std::to_string(k) +
                       " out of range [1, " + std::to_string(n - 1) + "]");

  std::vector<std::size_t> order(ts.tracks.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return ts.tracks[i].id < ts.tracks[j].id; });

  Eigen::MatrixXd dist(n, n);
  dist.setZero();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = i + 1; j < n; ++j) {
      const double d = track_distance(ts.tracks[order[i]], ts.tracks[order[j]]);
      dist(i, j) = d;
      dist(j, i) = d;
    }

  ScaffoldGraph g;
  g.node_ids.reserve(ts.tracks.size());
  for (std::size_t i : order) g.node_ids.push_back(ts.tracks[i].id);

  struct Key {
    std::int64_t a, b;
    bool operator<(const Key& o) const { return a != o.a ? a < o.a : b < o.b; }
  };
  std::vector<std::pair<Key, double>> found;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<std::int64_t> neighbors(n - 1);
    std::iota(neighbors.begin(), neighbors.end(), 0);
    for (auto& j : neighbors)
      if (j >= i) ++j;
    std::sort(neighbors.begin(), neighbors.end(), [&](std::int64_t x, std::int64_t y) {
      if (dist(i, x) != dist(i, y)) return dist(i, x) < dist(i, y);
      return g.node_ids[x] < g.node_ids[y];
    });
    for (int m = 0; m < k; ++m) {
      const std::int64_t j = neighbors[m];
      Key key{std::min(g.node_ids[i], g.node_ids[j]), std::max(g.node_ids[i], g.node_ids[j])};
      found.emplace_back(key, dist(i, j));
    }
  }
  std::sort(found.begin(), found.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  for (std::size_t e = 0; e < found.size(); ++e) {
    if (e > 0 && !(found[e - 1].first < found[e].first)) continue;  // dedupe
    g.edges.push_back({found[e].first.a, found[e].first.b,
                       std::max(found[e].second, kMinRestLength)});
  }
  return g;
}

// Greedy farthest-point subsampling under track_distance. Deterministic:
// starts at the smallest id, ties resolved toward smaller id. Returns
// indices into ts.tracks.
inline std::vector<std::size_t> farthest_point_subsample(const TrackSet& ts, std::size_t n_keep) {
  const std::size_t n = ts.tracks.size();
  if (n_keep >= n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  if (n_keep == 0) throw InvalidInput("farthest_point_subsample: n_keep must be >= 1");

  std::size_t start = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (ts.tracks[i].id < ts.tracks[start].id) start = i;

  std::vector<std::size_t> picked{start};
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t last = start;
  while (picked.size() < n_keep) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], track_distance(ts.tracks[i], ts.tracks[last]));
      if (i == last || min_dist[i] == 0.0) continue;
      const bool better =
          best == n || min_dist[i] > min_dist[best] ||
          (min_dist[i] == min_dist[best] && ts.tracks[i].id < ts.tracks[best].id);
      if (better && std::find(picked.begin(), picked.end(), i) == picked.end()) best = i;
    }
    if (best == n) break;  // all remaining are duplicates of picked tracks
    picked.push_back(best);
    last = best;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace tracksync
