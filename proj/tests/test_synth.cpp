#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "tracksync/synth.hpp"

using namespace tracksync;

namespace {

SceneConfig small_config() {
  SceneConfig cfg;
  cfg.n_clusters = 2;
  cfg.points_per_cluster = 6;
  cfg.n_views = 3;
  cfg.frames = 48;
  cfg.offset_min = -8.0;
  cfg.offset_max = 8.0;
  cfg.feature_dim = 8;
  cfg.seed = 99;
  return cfg;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const SceneConfig cfg = small_config();
  const auto [views_a, gt_a] = generate_scene(cfg);
  const auto [views_b, gt_b] = generate_scene(cfg);

  REQUIRE(views_a.size() == views_b.size());
  for (std::size_t v = 0; v < views_a.size(); ++v) {
    REQUIRE(views_a[v].tracks.size() == views_b[v].tracks.size());
    for (std::size_t k = 0; k < views_a[v].tracks.size(); ++k) {
      const Track& ta = views_a[v].tracks[k];
      const Track& tb = views_b[v].tracks[k];
      CHECK(ta.id == tb.id);
      CHECK(ta.feature == tb.feature);
      for (std::size_t f = 0; f < ta.positions.size(); ++f)
        CHECK(ta.positions[f] == tb.positions[f]);
    }
  }
  CHECK(gt_a.true_offsets == gt_b.true_offsets);

  SceneConfig other = cfg;
  other.seed = 100;
  const auto [views_c, gt_c] = generate_scene(other);
  CHECK(views_c[0].tracks[0].positions[0] != views_a[0].tracks[0].positions[0]);
}

TEST_CASE("clusters are rigid at zero noise") {
  const SceneConfig cfg = small_config();
  const auto [views, gt] = generate_scene(cfg);

  for (const TrackSet& ts : views) {
    const auto& order = gt.global_of.at(ts.video_id);
    for (std::size_t i = 0; i < ts.tracks.size(); ++i)
      for (std::size_t j = i + 1; j < ts.tracks.size(); ++j) {
        const std::size_t gi = static_cast<std::size_t>(order[i]);
        const std::size_t gj = static_cast<std::size_t>(order[j]);
        if (gt.cluster_of[gi] != gt.cluster_of[gj]) continue;
        const double rest = (gt.rest_positions[gi] - gt.rest_positions[gj]).norm();
        for (std::size_t f = 0; f < ts.tracks[i].positions.size(); f += 7) {
          const double d = (ts.tracks[i].positions[f] - ts.tracks[j].positions[f]).norm();
          REQUIRE(std::abs(d - rest) < 1e-9);
        }
      }
  }
}

TEST_CASE("stored positions come from resampling the canonical motion") {
  const SceneConfig cfg = small_config();
  const auto [views, gt] = generate_scene(cfg);

  for (const TrackSet& ts : views) {
    const double dt = gt.true_offsets.at(ts.video_id);
    const auto& order = gt.global_of.at(ts.video_id);
    for (std::size_t i = 0; i < ts.tracks.size(); i += 3) {
      const std::size_t g = static_cast<std::size_t>(order[i]);
      for (std::size_t f = 0; f < ts.tracks[i].positions.size(); f += 11) {
        const Vec3 expect = gt.world_at(g, static_cast<double>(f) - dt);
        REQUIRE((ts.tracks[i].positions[f] - expect).norm() < 1e-12);
      }
    }
  }
}

TEST_CASE("integer offsets shift the frame axis exactly") {
  SceneConfig cfg = small_config();
  cfg.n_views = 2;
  cfg.fractional_offsets = false;
  cfg.offset_min = 5.0;
  cfg.offset_max = 5.0;
  const auto [views, gt] = generate_scene(cfg);
  REQUIRE(gt.true_offsets.at("cam1") == 5.0);

  // cam1 frame j shows world time j - 5, so cam1 at j+5 equals cam0 at j
  const auto& ga = gt.global_of.at("cam0");
  const auto& gb = gt.global_of.at("cam1");
  std::map<std::int64_t, std::size_t> index_b;
  for (std::size_t i = 0; i < gb.size(); ++i) index_b[gb[i]] = i;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    const std::size_t j = index_b.at(ga[i]);
    for (int f = 0; f + 5 < cfg.frames; f += 6) {
      const Vec3 pa = views[0].tracks[i].positions[static_cast<std::size_t>(f)];
      const Vec3 pb = views[1].tracks[j].positions[static_cast<std::size_t>(f + 5)];
      REQUIRE((pa - pb).norm() < 1e-12);
    }
  }
}

TEST_CASE("zero offsets and noise give permuted but identical track sets") {
  SceneConfig cfg = small_config();
  cfg.n_views = 2;
  cfg.offset_min = 0.0;
  cfg.offset_max = 0.0;
  const auto [views, gt] = generate_scene(cfg);

  const auto matches = gt.true_matches("cam0", "cam1");
  CHECK(matches.size() == views[0].tracks.size());
  for (const auto& [ia, ib] : matches) {
    const Track& ta = views[0].tracks[static_cast<std::size_t>(ia)];
    const Track& tb = views[1].tracks[static_cast<std::size_t>(ib)];
    CHECK(ta.feature == tb.feature);  // zero feature noise
    for (std::size_t f = 0; f < ta.positions.size(); ++f)
      REQUIRE((ta.positions[f] - tb.positions[f]).norm() == 0.0);
  }

  // and the permutation is not the identity for this seed
  bool permuted = false;
  for (const auto& [ia, ib] : matches) permuted = permuted || (ia != ib);
  CHECK(permuted);
}

TEST_CASE("cluster motion clears the excitation guard") {
  const SceneConfig cfg = small_config();
  const auto [views, gt] = generate_scene(cfg);

  for (int c = 0; c < cfg.n_clusters; ++c) {
    double radius = 0.2;
    for (std::size_t g = 0; g < gt.rest_positions.size(); ++g)
      if (gt.cluster_of[g] == c) radius = std::max(radius, gt.rest_positions[g].norm());
    const ClusterMotion& m = gt.clusters[static_cast<std::size_t>(c)];
    double path = 0.0;
    for (int f = 1; f < cfg.frames; ++f)
      path += (m.translation_at(f) - m.translation_at(f - 1.0)).norm();
    CHECK(path >= 5.0 * radius);
  }
}

TEST_CASE("features are unit vectors shared across views up to noise") {
  SceneConfig cfg = small_config();
  cfg.feature_noise_sigma = 0.05;
  const auto [views, gt] = generate_scene(cfg);

  for (const TrackSet& ts : views)
    for (const Track& t : ts.tracks) CHECK(t.feature.norm() == Catch::Approx(1.0).margin(1e-12));

  const auto matches = gt.true_matches("cam0", "cam1");
  double mean_dot = 0.0;
  for (const auto& [ia, ib] : matches)
    mean_dot += views[0].tracks[static_cast<std::size_t>(ia)].feature.dot(
                    views[1].tracks[static_cast<std::size_t>(ib)].feature) /
                static_cast<double>(matches.size());
  CHECK(mean_dot > 0.9);   // noisy copies of the same descriptor
  CHECK(mean_dot < 1.0);   // but not identical
}

TEST_CASE("fractional flag controls offset granularity") {
  SceneConfig cfg = small_config();
  cfg.fractional_offsets = false;
  const auto gt_int = generate_scene(cfg).second;
  for (const auto& [view, dt] : gt_int.true_offsets) CHECK(dt == std::round(dt));

  cfg.fractional_offsets = true;
  cfg.seed = 7;
  const auto gt_frac = generate_scene(cfg).second;
  bool any_fractional = false;
  for (const auto& [view, dt] : gt_frac.true_offsets)
    any_fractional = any_fractional || (dt != std::round(dt));
  CHECK(any_fractional);
}

TEST_CASE("config validation names the offending field") {
  SceneConfig cfg = small_config();
  cfg.n_clusters = 0;
  CHECK_THROWS_WITH(generate_scene(cfg), Catch::Matchers::ContainsSubstring("n_clusters"));
  cfg = small_config();
  cfg.frames = 4;
  CHECK_THROWS_WITH(generate_scene(cfg), Catch::Matchers::ContainsSubstring("frames"));
  cfg = small_config();
  cfg.position_noise_sigma = -1.0;
  CHECK_THROWS_WITH(generate_scene(cfg),
                    Catch::Matchers::ContainsSubstring("position_noise_sigma"));
  cfg = small_config();
  cfg.offset_min = 3.0;
  cfg.offset_max = -3.0;
  CHECK_THROWS_WITH(generate_scene(cfg), Catch::Matchers::ContainsSubstring("offset_min"));
}

TEST_CASE("sync scoring is plain offset arithmetic") {
  GroundTruth gt;
  gt.true_offsets = {{"cam0", 0.0}, {"cam1", 7.0}};

  SyncResult result;
  result.reference_video = "cam0";
  result.offsets["cam0"] = {0, std::nullopt};
  result.offsets["cam1"] = {7, 7.2};

  const SyncScore s = score_sync(result, gt);
  CHECK(s.coarse_error.at("cam1") == 0.0);
  REQUIRE(s.refined_error.at("cam1").has_value());
  CHECK(*s.refined_error.at("cam1") == Catch::Approx(0.2));
  CHECK(s.mean_coarse == 0.0);
  REQUIRE(s.mean_refined.has_value());
  CHECK(*s.mean_refined == Catch::Approx(0.2));

  SECTION("coarse-only results have absent refined metrics") {
    result.offsets["cam1"] = {7, std::nullopt};
    const SyncScore c = score_sync(result, gt);
    CHECK_FALSE(c.refined_error.at("cam1").has_value());
    CHECK_FALSE(c.mean_refined.has_value());
  }

  SECTION("unknown view ids are rejected") {
    result.offsets["cam9"] = {0, std::nullopt};
    CHECK_THROWS_AS(score_sync(result, gt), InvalidInput);
  }

  SECTION("a non-zero reference offset shifts the target values") {
    GroundTruth gt2;
    gt2.true_offsets = {{"cam0", 2.0}, {"cam1", 7.0}};
    SyncResult r2;
    r2.reference_video = "cam0";
    r2.offsets["cam0"] = {0, std::nullopt};
    r2.offsets["cam1"] = {5, std::nullopt};  // 7 - 2 relative to the reference
    CHECK(score_sync(r2, gt2).mean_coarse == 0.0);
  }
}

TEST_CASE("match scoring compares against the true bijection") {
  SceneConfig cfg = small_config();
  cfg.n_views = 2;
  const auto [views, gt] = generate_scene(cfg);
  const auto truth = gt.true_matches("cam0", "cam1");

  MatchSet ms;
  ms.source_video = "cam0";
  ms.target_video = "cam1";
  for (const auto& [a, b] : truth) ms.pairs.push_back({a, b, 1.0});
  MatchScore perfect = score_matches(ms, gt);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);

  // corrupt half of the predictions by pairing everything with partner 0
  MatchSet half = ms;
  for (std::size_t i = 0; i < half.pairs.size(); i += 2) half.pairs[i].b = truth[0].second;
  MatchScore hs = score_matches(half, gt);
  CHECK(hs.precision < 1.0);
  CHECK(hs.recall < 1.0);
  CHECK(hs.n_true == truth.size());
}
