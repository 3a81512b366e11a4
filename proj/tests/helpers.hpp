#pragma once

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/rng.hpp"

namespace test_helpers {

using tracksync::Track;
using tracksync::TrackSet;
using tracksync::Vec3;

inline Track make_track(std::int64_t id, std::vector<Vec3> positions, int feature_dim = 2) {
  Track t;
  t.id = id;
  t.positions = std::move(positions);
  t.feature = Eigen::VectorXd::Zero(feature_dim);
  t.feature[0] = 1.0;
  return t;
}

inline Track constant_track(std::int64_t id, const Vec3& p, std::size_t frames,
                            int feature_dim = 2) {
  return make_track(id, std::vector<Vec3>(frames, p), feature_dim);
}

inline TrackSet make_set(std::string video_id, std::vector<Track> tracks) {
  TrackSet ts;
  ts.video_id = std::move(video_id);
  ts.frame_count = tracks.empty() ? 0 : static_cast<std::int64_t>(tracks.front().positions.size());
  ts.tracks = std::move(tracks);
  return ts;
}

// Random polyline track for property tests.
inline Track random_track(tracksync::RandomStream& rng, std::int64_t id, std::size_t frames,
                          int feature_dim = 4, double scale = 5.0) {
  std::vector<Vec3> pos(frames);
  Vec3 p{rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)};
  for (std::size_t f = 0; f < frames; ++f) {
    p += Vec3{rng.normal(0.3), rng.normal(0.3), rng.normal(0.3)};
    pos[f] = p;
  }
  Track t = make_track(id, std::move(pos), feature_dim);
  for (int i = 0; i < feature_dim; ++i) t.feature[i] = rng.normal();
  t.feature.normalize();
  return t;
}

}  // namespace test_helpers
