#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/matching.hpp"
#include "tracksync/refine.hpp"
#include "tracksync/spline.hpp"
#include "tracksync/sync.hpp"
#include "tracksync/synth.hpp"

// JSON persistence for every stage artifact. Objects keep sorted keys and
// doubles serialize at full round-trip precision, so identical values give
// identical bytes; all writes go through a temp-file + rename.

namespace tracksync {

using json = nlohmann::json;

namespace io_detail {

// Field access with path-carrying schema errors ("tracks[3].id: ...").
inline const json& require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw SchemaError(path + "." + key + ": missing field");
  return *it;
}

inline double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw SchemaError(path + ": expected a number");
  return j.get<double>();
}

inline std::int64_t as_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw SchemaError(path + ": expected an integer");
  return j.get<std::int64_t>();
}

inline bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw SchemaError(path + ": expected a boolean");
  return j.get<bool>();
}

inline std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw SchemaError(path + ": expected a string");
  return j.get<std::string>();
}

inline const json& as_array(const json& j, const std::string& path) {
  if (!j.is_array()) throw SchemaError(path + ": expected an array");
  return j;
}

inline Vec3 as_vec3(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3) throw SchemaError(path + ": expected [x, y, z]");
  return Vec3(as_number(j[0], path + "[0]"), as_number(j[1], path + "[1]"),
              as_number(j[2], path + "[2]"));
}

inline json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace io_detail

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError("'" + path.string() + "': " + e.what());
  }
  return j;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw InvalidInput("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json_atomic(const std::filesystem::path& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// TrackSet

inline json track_set_to_json(const TrackSet& ts) {
  json tracks = json::array();
  for (const Track& t : ts.tracks) {
    json positions = json::array();
    for (const Vec3& p : t.positions) positions.push_back(io_detail::vec3_to_json(p));
    json feature = json::array();
    for (Eigen::Index i = 0; i < t.feature.size(); ++i) feature.push_back(t.feature[i]);
    tracks.push_back(
        {{"id", t.id}, {"positions", std::move(positions)}, {"feature", std::move(feature)}});
  }
  return {{"video_id", ts.video_id},
          {"fps", ts.fps},
          {"frame_count", ts.frame_count},
          {"tracks", std::move(tracks)}};
}

inline TrackSet track_set_from_json(const json& j, const std::string& path = "track set") {
  using namespace io_detail;
  TrackSet ts;
  ts.video_id = as_string(require(j, "video_id", path), path + ".video_id");
  ts.fps = as_number(require(j, "fps", path), path + ".fps");
  ts.frame_count = as_integer(require(j, "frame_count", path), path + ".frame_count");
  const json& tracks = as_array(require(j, "tracks", path), path + ".tracks");
  for (std::size_t k = 0; k < tracks.size(); ++k) {
    const std::string tp = path + ".tracks[" + std::to_string(k) + "]";
    const json& tj = tracks[k];
    Track t;
    t.id = as_integer(require(tj, "id", tp), tp + ".id");
    const json& pos = as_array(require(tj, "positions", tp), tp + ".positions");
    for (std::size_t f = 0; f < pos.size(); ++f)
      t.positions.push_back(as_vec3(pos[f], tp + ".positions[" + std::to_string(f) + "]"));
    const json& feat = as_array(require(tj, "feature", tp), tp + ".feature");
    t.feature.resize(static_cast<Eigen::Index>(feat.size()));
    for (std::size_t i = 0; i < feat.size(); ++i)
      t.feature[static_cast<Eigen::Index>(i)] =
          as_number(feat[i], tp + ".feature[" + std::to_string(i) + "]");
    ts.tracks.push_back(std::move(t));
  }
  ts.validate();
  return ts;
}

// ---------------------------------------------------------------------------
// MatchSet (+ solver diagnostics)

inline json match_set_to_json(const MatchSet& ms, const TransportPlan* plan = nullptr) {
  json pairs = json::array();
  for (const MatchPair& p : ms.pairs)
    pairs.push_back({{"a", p.a}, {"b", p.b}, {"score", p.score}});
  json out = {{"source_video", ms.source_video},
              {"target_video", ms.target_video},
              {"pairs", std::move(pairs)}};
  if (plan != nullptr) {
    double violation = 0.0;
    if (plan->row_marginal.size() > 0)
      violation += (plan->row_marginal.array() - 1.0 / plan->row_marginal.size()).abs().sum();
    if (plan->col_marginal.size() > 0)
      violation += (plan->col_marginal.array() - 1.0 / plan->col_marginal.size()).abs().sum();
    out["solver"] = {{"objective_value", plan->objective_value},
                     {"converged", plan->converged},
                     {"outer_iterations", plan->outer_iterations},
                     {"marginal_violation", violation},
                     {"objective_history", plan->objective_history},
                     {"struct_degenerate", plan->struct_degenerate}};
  }
  return out;
}

inline MatchSet match_set_from_json(const json& j, const std::string& path = "match set") {
  using namespace io_detail;
  MatchSet ms;
  ms.source_video = as_string(require(j, "source_video", path), path + ".source_video");
  ms.target_video = as_string(require(j, "target_video", path), path + ".target_video");
  const json& pairs = as_array(require(j, "pairs", path), path + ".pairs");
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::string pp = path + ".pairs[" + std::to_string(k) + "]";
    MatchPair p;
    p.a = as_integer(require(pairs[k], "a", pp), pp + ".a");
    p.b = as_integer(require(pairs[k], "b", pp), pp + ".b");
    p.score = as_number(require(pairs[k], "score", pp), pp + ".score");
    ms.pairs.push_back(p);
  }
  return ms;
}

// ---------------------------------------------------------------------------
// SyncResult

inline json sync_result_to_json(
    const SyncResult& r,
    const std::map<std::string, VideoRefineStatus>* refine_status = nullptr) {
  json offsets = json::object();
  for (const auto& [view, est] : r.offsets) {
    json e = {{"coarse", est.coarse}};
    if (est.refined.has_value())
      e["refined"] = *est.refined;
    else
      e["refined"] = nullptr;
    offsets[view] = std::move(e);
  }
  json diagnostics = json::object();
  for (const auto& [view, d] : r.diagnostics) {
    json histogram = json::object();
    for (const auto& [offset, count] : d.offset_histogram)
      histogram[std::to_string(offset)] = count;
    json dj = {{"path_cost", d.path_cost},
               {"overlap_frames", d.overlap_frames},
               {"unreliable", d.unreliable},
               {"offset_histogram", std::move(histogram)}};
    if (refine_status != nullptr) {
      const auto it = refine_status->find(view);
      if (it != refine_status->end()) {
        dj["refine_frozen"] = it->second.frozen;
        dj["refine_unidentifiable"] = it->second.unidentifiable;
      }
    }
    diagnostics[view] = std::move(dj);
  }
  return {{"reference", r.reference_video},
          {"offsets", std::move(offsets)},
          {"diagnostics", std::move(diagnostics)}};
}

inline SyncResult sync_result_from_json(const json& j, const std::string& path = "sync result") {
  using namespace io_detail;
  SyncResult r;
  r.reference_video = as_string(require(j, "reference", path), path + ".reference");
  const json& offsets = require(j, "offsets", path);
  if (!offsets.is_object()) throw SchemaError(path + ".offsets: expected an object");
  for (const auto& [view, e] : offsets.items()) {
    const std::string ep = path + ".offsets." + view;
    OffsetEstimate est;
    est.coarse = static_cast<int>(as_integer(require(e, "coarse", ep), ep + ".coarse"));
    const json& refined = require(e, "refined", ep);
    if (refined.is_null())
      est.refined = std::nullopt;
    else
      est.refined = as_number(refined, ep + ".refined");
    r.offsets[view] = est;
  }
  if (j.contains("diagnostics")) {
    const json& diags = j["diagnostics"];
    if (!diags.is_object()) throw SchemaError(path + ".diagnostics: expected an object");
    for (const auto& [view, dj] : diags.items()) {
      const std::string dp = path + ".diagnostics." + view;
      PairDiagnostics d;
      d.path_cost = as_number(require(dj, "path_cost", dp), dp + ".path_cost");
      d.overlap_frames =
          static_cast<int>(as_integer(require(dj, "overlap_frames", dp), dp + ".overlap_frames"));
      d.unreliable = as_bool(require(dj, "unreliable", dp), dp + ".unreliable");
      const json& hist = require(dj, "offset_histogram", dp);
      if (!hist.is_object()) throw SchemaError(dp + ".offset_histogram: expected an object");
      for (const auto& [key, count] : hist.items())
        d.offset_histogram[std::stoi(key)] =
            static_cast<int>(as_integer(count, dp + ".offset_histogram." + key));
      r.diagnostics[view] = std::move(d);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// SplineScaffold

inline json scaffold_to_json(const SplineScaffold& sc) {
  json trajectories = json::array();
  for (const auto& [track, s] : sc.trajectories) {
    json positions = json::array(), tangents = json::array();
    for (const Vec3& p : s.control_positions) positions.push_back(io_detail::vec3_to_json(p));
    for (const Vec3& m : s.control_tangents) tangents.push_back(io_detail::vec3_to_json(m));
    trajectories.push_back({{"track", track},
                            {"t_start", s.t_start},
                            {"dt", s.dt},
                            {"positions", std::move(positions)},
                            {"tangents", std::move(tangents)}});
  }
  json edges = json::array();
  for (const ScaffoldEdge& e : sc.graph.edges)
    edges.push_back({{"a", e.a}, {"b", e.b}, {"rest_length", e.rest_length}});
  return {{"video_id", sc.video_id},
          {"trajectories", std::move(trajectories)},
          {"graph", {{"nodes", sc.graph.node_ids}, {"edges", std::move(edges)}}},
          {"residual_rms", sc.residual_rms},
          {"rank_warning", sc.rank_warning}};
}

inline SplineScaffold scaffold_from_json(const json& j, const std::string& path = "scaffold") {
  using namespace io_detail;
  SplineScaffold sc;
  sc.video_id = as_string(require(j, "video_id", path), path + ".video_id");
  const json& trajectories =
      as_array(require(j, "trajectories", path), path + ".trajectories");
  for (std::size_t k = 0; k < trajectories.size(); ++k) {
    const std::string tp = path + ".trajectories[" + std::to_string(k) + "]";
    const json& tj = trajectories[k];
    SplineTrajectory s;
    const std::int64_t track = as_integer(require(tj, "track", tp), tp + ".track");
    s.t_start = as_number(require(tj, "t_start", tp), tp + ".t_start");
    s.dt = as_number(require(tj, "dt", tp), tp + ".dt");
    const json& pos = as_array(require(tj, "positions", tp), tp + ".positions");
    for (std::size_t i = 0; i < pos.size(); ++i)
      s.control_positions.push_back(as_vec3(pos[i], tp + ".positions[" + std::to_string(i) + "]"));
    const json& tan = as_array(require(tj, "tangents", tp), tp + ".tangents");
    for (std::size_t i = 0; i < tan.size(); ++i)
      s.control_tangents.push_back(as_vec3(tan[i], tp + ".tangents[" + std::to_string(i) + "]"));
    sc.trajectories[track] = std::move(s);
  }
  const json& graph = require(j, "graph", path);
  const json& nodes = as_array(require(graph, "nodes", path + ".graph"), path + ".graph.nodes");
  for (std::size_t i = 0; i < nodes.size(); ++i)
    sc.graph.node_ids.push_back(as_integer(nodes[i], path + ".graph.nodes[" + std::to_string(i) + "]"));
  const json& edges = as_array(require(graph, "edges", path + ".graph"), path + ".graph.edges");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string ep = path + ".graph.edges[" + std::to_string(i) + "]";
    ScaffoldEdge e;
    e.a = as_integer(require(edges[i], "a", ep), ep + ".a");
    e.b = as_integer(require(edges[i], "b", ep), ep + ".b");
    e.rest_length = as_number(require(edges[i], "rest_length", ep), ep + ".rest_length");
    sc.graph.edges.push_back(e);
  }
  sc.residual_rms = as_number(require(j, "residual_rms", path), path + ".residual_rms");
  sc.rank_warning = as_bool(require(j, "rank_warning", path), path + ".rank_warning");
  sc.validate();
  return sc;
}

// ---------------------------------------------------------------------------
// GroundTruth (offsets, correspondence permutations, motion, config echo)

inline json scene_config_to_json(const SceneConfig& c) {
  return {{"n_clusters", c.n_clusters},
          {"points_per_cluster", c.points_per_cluster},
          {"n_views", c.n_views},
          {"frames", c.frames},
          {"fps", c.fps},
          {"offset_min", c.offset_min},
          {"offset_max", c.offset_max},
          {"fractional_offsets", c.fractional_offsets},
          {"position_noise_sigma", c.position_noise_sigma},
          {"feature_dim", c.feature_dim},
          {"feature_noise_sigma", c.feature_noise_sigma},
          {"motion_smoothness", c.motion_smoothness},
          {"seed", c.seed}};
}

inline SceneConfig scene_config_from_json(const json& j, const std::string& path = "scene") {
  using namespace io_detail;
  SceneConfig c;
  const auto opt_int = [&](const char* key, int fallback) {
    return j.contains(key)
               ? static_cast<int>(as_integer(j.at(key), path + "." + key))
               : fallback;
  };
  const auto opt_num = [&](const char* key, double fallback) {
    return j.contains(key) ? as_number(j.at(key), path + "." + key) : fallback;
  };
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  c.n_clusters = opt_int("n_clusters", c.n_clusters);
  c.points_per_cluster = opt_int("points_per_cluster", c.points_per_cluster);
  c.n_views = opt_int("n_views", c.n_views);
  c.frames = opt_int("frames", c.frames);
  c.fps = opt_num("fps", c.fps);
  c.offset_min = opt_num("offset_min", c.offset_min);
  c.offset_max = opt_num("offset_max", c.offset_max);
  if (j.contains("fractional_offsets"))
    c.fractional_offsets = as_bool(j.at("fractional_offsets"), path + ".fractional_offsets");
  c.position_noise_sigma = opt_num("position_noise_sigma", c.position_noise_sigma);
  c.feature_dim = opt_int("feature_dim", c.feature_dim);
  c.feature_noise_sigma = opt_num("feature_noise_sigma", c.feature_noise_sigma);
  c.motion_smoothness = opt_num("motion_smoothness", c.motion_smoothness);
  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_integer() && !s.is_number_unsigned())
      throw SchemaError(path + ".seed: expected an integer");
    c.seed = s.get<std::uint64_t>();
  }
  c.validate();
  return c;
}

inline json ground_truth_to_json(const GroundTruth& gt) {
  json clusters = json::array();
  for (const ClusterMotion& m : gt.clusters) {
    json translation = json::array();
    for (const Vec3& w : m.translation) translation.push_back(io_detail::vec3_to_json(w));
    clusters.push_back({{"t0", m.t0},
                        {"spacing", m.spacing},
                        {"axis", io_detail::vec3_to_json(m.axis)},
                        {"translation", std::move(translation)},
                        {"angle", m.angle}});
  }
  json rest = json::array();
  for (const Vec3& p : gt.rest_positions) rest.push_back(io_detail::vec3_to_json(p));
  json global_of = json::object();
  for (const auto& [view, order] : gt.global_of) global_of[view] = order;
  return {{"config", scene_config_to_json(gt.config)},
          {"true_offsets", gt.true_offsets},
          {"clusters", std::move(clusters)},
          {"rest_positions", std::move(rest)},
          {"cluster_of", gt.cluster_of},
          {"global_of", std::move(global_of)}};
}

inline GroundTruth ground_truth_from_json(const json& j,
                                          const std::string& path = "ground truth") {
  using namespace io_detail;
  GroundTruth gt;
  gt.config = scene_config_from_json(require(j, "config", path), path + ".config");
  const json& offsets = require(j, "true_offsets", path);
  if (!offsets.is_object()) throw SchemaError(path + ".true_offsets: expected an object");
  for (const auto& [view, dt] : offsets.items())
    gt.true_offsets[view] = as_number(dt, path + ".true_offsets." + view);
  const json& clusters = as_array(require(j, "clusters", path), path + ".clusters");
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const std::string cp = path + ".clusters[" + std::to_string(c) + "]";
    const json& cj = clusters[c];
    ClusterMotion m;
    m.t0 = as_number(require(cj, "t0", cp), cp + ".t0");
    m.spacing = as_number(require(cj, "spacing", cp), cp + ".spacing");
    m.axis = as_vec3(require(cj, "axis", cp), cp + ".axis");
    const json& tr = as_array(require(cj, "translation", cp), cp + ".translation");
    for (std::size_t i = 0; i < tr.size(); ++i)
      m.translation.push_back(as_vec3(tr[i], cp + ".translation[" + std::to_string(i) + "]"));
    const json& an = as_array(require(cj, "angle", cp), cp + ".angle");
    for (std::size_t i = 0; i < an.size(); ++i)
      m.angle.push_back(as_number(an[i], cp + ".angle[" + std::to_string(i) + "]"));
    gt.clusters.push_back(std::move(m));
  }
  const json& rest = as_array(require(j, "rest_positions", path), path + ".rest_positions");
  for (std::size_t i = 0; i < rest.size(); ++i)
    gt.rest_positions.push_back(as_vec3(rest[i], path + ".rest_positions[" + std::to_string(i) + "]"));
  const json& cluster_of = as_array(require(j, "cluster_of", path), path + ".cluster_of");
  for (std::size_t i = 0; i < cluster_of.size(); ++i)
    gt.cluster_of.push_back(static_cast<int>(
        as_integer(cluster_of[i], path + ".cluster_of[" + std::to_string(i) + "]")));
  const json& global_of = require(j, "global_of", path);
  if (!global_of.is_object()) throw SchemaError(path + ".global_of: expected an object");
  for (const auto& [view, order] : global_of.items()) {
    const json& arr = as_array(order, path + ".global_of." + view);
    std::vector<std::int64_t> ids;
    for (std::size_t i = 0; i < arr.size(); ++i)
      ids.push_back(as_integer(arr[i], path + ".global_of." + view + "[" + std::to_string(i) + "]"));
    gt.global_of[view] = std::move(ids);
  }
  return gt;
}

// ---------------------------------------------------------------------------
// RefineTrace

inline json trace_to_json(const RefineTrace& trace) {
  json rows = json::array();
  for (const TraceRow& r : trace.rows)
    rows.push_back({{"iteration", r.iteration},
                    {"total", r.total},
                    {"align", r.align},
                    {"arap", r.arap},
                    {"vel", r.vel},
                    {"acc", r.acc},
                    {"offsets", r.offsets}});
  return {{"stop_reason", trace.stop_reason},
          {"iterations", trace.iterations},
          {"rows", std::move(rows)}};
}

inline std::string trace_to_csv(const RefineTrace& trace) {
  // Shortest round-trip double formatting, matching the JSON dumper.
  const auto fmt = [](double v) { return json(v).dump(); };
  std::ostringstream out;
  out << "iteration,total,align,arap,vel,acc";
  if (!trace.rows.empty())
    for (const auto& [view, dt] : trace.rows.front().offsets) out << "," << view;
  out << "\n";
  for (const TraceRow& r : trace.rows) {
    out << r.iteration << "," << fmt(r.total) << "," << fmt(r.align) << "," << fmt(r.arap)
        << "," << fmt(r.vel) << "," << fmt(r.acc);
    for (const auto& [view, dt] : r.offsets) out << "," << fmt(dt);
    out << "\n";
  }
  return out.str();
}

inline std::string histogram_to_csv(const PairDiagnostics& d) {
  std::ostringstream out;
  out << "offset,count\n";
  for (const auto& [offset, count] : d.offset_histogram) out << offset << "," << count << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// file-level helpers

inline void save_track_set(const std::filesystem::path& path, const TrackSet& ts) {
  write_json_atomic(path, track_set_to_json(ts));
}
inline TrackSet load_track_set(const std::filesystem::path& path) {
  return track_set_from_json(load_json(path), path.filename().string());
}
inline void save_match_set(const std::filesystem::path& path, const MatchSet& ms,
                           const TransportPlan* plan = nullptr) {
  write_json_atomic(path, match_set_to_json(ms, plan));
}
inline MatchSet load_match_set(const std::filesystem::path& path) {
  return match_set_from_json(load_json(path), path.filename().string());
}
inline void save_sync_result(const std::filesystem::path& path, const SyncResult& r,
                             const std::map<std::string, VideoRefineStatus>* status = nullptr) {
  write_json_atomic(path, sync_result_to_json(r, status));
}
inline SyncResult load_sync_result(const std::filesystem::path& path) {
  return sync_result_from_json(load_json(path), path.filename().string());
}
inline void save_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
  write_json_atomic(path, ground_truth_to_json(gt));
}
inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
  return ground_truth_from_json(load_json(path), path.filename().string());
}

}  // namespace tracksync
