#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/io.hpp"
#include "tracksync/matching.hpp"
#include "tracksync/parallel.hpp"
#include "tracksync/refine.hpp"
#include "tracksync/spline.hpp"
#include "tracksync/sync.hpp"
#include "tracksync/synth.hpp"

// Stage-file pipeline: every stage reads files, writes files, and can be
// re-run (or skipped, when its outputs already exist) independently. All
// artifacts live flat in one output directory:
//
//   <video_id>.tracks.json       generated or user-provided track sets
//   ground_truth.json            scene ground truth (gen only)
//   match_<ref>__<query>.json    cross-video matches + solver diagnostics
//   sync.json                    coarse offsets + per-pair diagnostics
//   offsets_<ref>__<query>.csv   DTW offset histogram per pair
//   sync_refined.json            offsets after sub-frame refinement
//   refine_trace.json / .csv     optimizer trace
//   eval_report.json / .csv      errors against ground truth

namespace tracksync {

namespace fs_ = std::filesystem;

struct SplineStageConfig {
  int n_control = 0;  // 0 picks the per-track default policy
  int k_neighbors = 4;
};

struct RefineStageConfig {
  RefineBuildConfig build;
  OptimConfig optim;
  std::size_t top_matches = 0;  // keep only the strongest N matches per pair (0 = all)
};

struct StageToggles {
  bool gen = true;
  bool match = true;
  bool sync = true;
  bool refine = true;
  bool eval = true;
};

struct PipelineConfig {
  SceneConfig scene;
  MatchConfig match;
  SyncConfig sync;
  SplineStageConfig spline;
  RefineStageConfig refine;
  StageToggles stages;
  std::string reference;      // empty = first video id in sorted order
  std::string report = "json";  // eval output format: json | csv (json always written)
  int threads = 1;
  bool verbose = false;
};

namespace pipe_detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known,
                           const std::string& path) {
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (known.find(key) == known.end())
      throw SchemaError(path + "." + key + ": unknown field");
}

inline double num_field(const json& j, const char* key, double fallback,
                        const std::string& path) {
  if (!j.contains(key)) return fallback;
  return io_detail::as_number(j.at(key), path + "." + key);
}

inline int int_field(const json& j, const char* key, int fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  return static_cast<int>(io_detail::as_integer(j.at(key), path + "." + key));
}

inline bool bool_field(const json& j, const char* key, bool fallback, const std::string& path) {
  if (!j.contains(key)) return fallback;
  return io_detail::as_bool(j.at(key), path + "." + key);
}

}  // namespace pipe_detail

inline PipelineConfig pipeline_config_from_json(const json& j,
                                                const std::string& path = "config") {
  using namespace pipe_detail;
  PipelineConfig c;
  reject_unknown(j, {"scene", "match", "sync", "spline", "refine", "stages", "reference",
                     "report", "threads", "verbose"},
                 path);
  if (j.contains("scene")) {
    const std::string sp = path + ".scene";
    reject_unknown(j.at("scene"),
                   {"n_clusters", "points_per_cluster", "n_views", "frames", "fps", "offset_min",
                    "offset_max", "fractional_offsets", "position_noise_sigma", "feature_dim",
                    "feature_noise_sigma", "motion_smoothness", "seed"},
                   sp);
    c.scene = scene_config_from_json(j.at("scene"), sp);
  }
  if (j.contains("match")) {
    const json& m = j.at("match");
    const std::string mp = path + ".match";
    reject_unknown(m,
                   {"alpha", "epsilon", "outer_iterations", "inner_iterations", "marginal_tol",
                    "objective_tol", "normalize", "n_max", "min_score", "max_matches"},
                   mp);
    SolverConfig& s = c.match.solver;
    s.alpha = num_field(m, "alpha", s.alpha, mp);
    s.epsilon = num_field(m, "epsilon", s.epsilon, mp);
    s.outer_iterations = int_field(m, "outer_iterations", s.outer_iterations, mp);
    s.inner_iterations = int_field(m, "inner_iterations", s.inner_iterations, mp);
    s.marginal_tol = num_field(m, "marginal_tol", s.marginal_tol, mp);
    s.objective_tol = num_field(m, "objective_tol", s.objective_tol, mp);
    s.normalize = bool_field(m, "normalize", s.normalize, mp);
    if (m.contains("n_max")) s.n_max = io_detail::as_integer(m.at("n_max"), mp + ".n_max");
    c.match.min_score = num_field(m, "min_score", c.match.min_score, mp);
    if (m.contains("max_matches"))
      c.match.max_matches = static_cast<std::size_t>(
          io_detail::as_integer(m.at("max_matches"), mp + ".max_matches"));
    if (!(s.alpha >= 0.0 && s.alpha <= 1.0))
      throw SchemaError(mp + ".alpha: must be in [0, 1]");
    if (!(s.epsilon > 0.0)) throw SchemaError(mp + ".epsilon: must be positive");
  }
  if (j.contains("sync")) {
    const std::string sp = path + ".sync";
    reject_unknown(j.at("sync"), {"min_overlap"}, sp);
    c.sync.min_overlap = int_field(j.at("sync"), "min_overlap", c.sync.min_overlap, sp);
  }
  if (j.contains("spline")) {
    const json& s = j.at("spline");
    const std::string sp = path + ".spline";
    reject_unknown(s, {"n_control", "k_neighbors"}, sp);
    c.spline.n_control = int_field(s, "n_control", c.spline.n_control, sp);
    c.spline.k_neighbors = int_field(s, "k_neighbors", c.spline.k_neighbors, sp);
    if (c.spline.n_control < 0) throw SchemaError(sp + ".n_control: must be >= 0");
    if (c.spline.k_neighbors < 1) throw SchemaError(sp + ".k_neighbors: must be >= 1");
  }
  if (j.contains("refine")) {
    const json& r = j.at("refine");
    const std::string rp = path + ".refine";
    reject_unknown(r,
                   {"weights", "samples_per_frame", "sample_margin", "local_step", "top_matches",
                    "max_iterations", "offset_step", "control_step", "grad_tol", "loss_tol",
                    "loss_patience", "freeze_band", "control_band", "unidentifiable_tol",
                    "max_rejects"},
                   rp);
    if (r.contains("weights")) {
      const json& w = r.at("weights");
      const std::string wp = rp + ".weights";
      reject_unknown(w, {"align", "arap", "vel", "acc"}, wp);
      RefineWeights& rw = c.refine.build.weights;
      rw.align = num_field(w, "align", rw.align, wp);
      rw.arap = num_field(w, "arap", rw.arap, wp);
      rw.vel = num_field(w, "vel", rw.vel, wp);
      rw.acc = num_field(w, "acc", rw.acc, wp);
    }
    RefineBuildConfig& b = c.refine.build;
    b.samples_per_frame = num_field(r, "samples_per_frame", b.samples_per_frame, rp);
    b.sample_margin = num_field(r, "sample_margin", b.sample_margin, rp);
    b.local_step = num_field(r, "local_step", b.local_step, rp);
    if (!(b.samples_per_frame > 0.0))
      throw SchemaError(rp + ".samples_per_frame: must be positive");
    if (r.contains("top_matches"))
      c.refine.top_matches = static_cast<std::size_t>(
          io_detail::as_integer(r.at("top_matches"), rp + ".top_matches"));
    OptimConfig& o = c.refine.optim;
    o.max_iterations = int_field(r, "max_iterations", o.max_iterations, rp);
    o.offset_step = num_field(r, "offset_step", o.offset_step, rp);
    o.control_step = num_field(r, "control_step", o.control_step, rp);
    o.grad_tol = num_field(r, "grad_tol", o.grad_tol, rp);
    o.loss_tol = num_field(r, "loss_tol", o.loss_tol, rp);
    o.loss_patience = int_field(r, "loss_patience", o.loss_patience, rp);
    o.freeze_band = num_field(r, "freeze_band", o.freeze_band, rp);
    o.control_band = num_field(r, "control_band", o.control_band, rp);
    o.unidentifiable_tol = num_field(r, "unidentifiable_tol", o.unidentifiable_tol, rp);
    o.max_rejects = int_field(r, "max_rejects", o.max_rejects, rp);
    if (o.max_iterations < 1) throw SchemaError(rp + ".max_iterations: must be >= 1");
  }
  if (j.contains("stages")) {
    const json& s = j.at("stages");
    const std::string sp = path + ".stages";
    reject_unknown(s, {"gen", "match", "sync", "refine", "eval"}, sp);
    c.stages.gen = pipe_detail::bool_field(s, "gen", c.stages.gen, sp);
    c.stages.match = pipe_detail::bool_field(s, "match", c.stages.match, sp);
    c.stages.sync = pipe_detail::bool_field(s, "sync", c.stages.sync, sp);
    c.stages.refine = pipe_detail::bool_field(s, "refine", c.stages.refine, sp);
    c.stages.eval = pipe_detail::bool_field(s, "eval", c.stages.eval, sp);
  }
  if (j.contains("reference"))
    c.reference = io_detail::as_string(j.at("reference"), path + ".reference");
  if (j.contains("report")) {
    c.report = io_detail::as_string(j.at("report"), path + ".report");
    if (c.report != "json" && c.report != "csv")
      throw SchemaError(path + ".report: must be \"json\" or \"csv\"");
  }
  c.threads = pipe_detail::int_field(j, "threads", c.threads, path);
  if (c.threads < 1) throw SchemaError(path + ".threads: must be >= 1");
  c.verbose = pipe_detail::bool_field(j, "verbose", c.verbose, path);
  return c;
}

inline PipelineConfig load_pipeline_config(const fs_::path& path) {
  return pipeline_config_from_json(load_json(path), path.filename().string());
}

// ---------------------------------------------------------------------------
// directory layout

inline fs_::path tracks_path(const fs_::path& dir, const std::string& video) {
  return dir / (video + ".tracks.json");
}
inline fs_::path match_path(const fs_::path& dir, const std::string& ref,
                            const std::string& query) {
  return dir / ("match_" + ref + "__" + query + ".json");
}
inline fs_::path histogram_path(const fs_::path& dir, const std::string& ref,
                                const std::string& query) {
  return dir / ("offsets_" + ref + "__" + query + ".csv");
}

inline std::vector<std::string> list_videos(const fs_::path& dir) {
  std::vector<std::string> ids;
  const std::string suffix = ".tracks.json";
  if (!fs_::exists(dir)) return ids;
  for (const auto& entry : fs_::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::string pick_reference(const PipelineConfig& cfg, const std::vector<std::string>& ids) {
  if (ids.empty()) throw SchemaError("no track files found; run gen or provide *.tracks.json");
  if (cfg.reference.empty()) return ids.front();
  if (std::find(ids.begin(), ids.end(), cfg.reference) == ids.end())
    throw SchemaError("reference video '" + cfg.reference + "' has no track file");
  return cfg.reference;
}

namespace pipe_detail {

// Prefix stage context onto schema/numerical errors so a corrupted
// intermediate names the stage that tripped over it.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const SchemaError& e) {
    throw SchemaError("stage " + name + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("stage " + name + ": " + e.what());
  } catch (const InvalidInput& e) {
    throw InvalidInput("stage " + name + ": " + e.what());
  }
}

}  // namespace pipe_detail

// ---------------------------------------------------------------------------
// stages

inline std::vector<std::string> run_gen(const PipelineConfig& cfg, const fs_::path& out) {
  return pipe_detail::stage("gen", [&] {
    fs_::create_directories(out);
    const auto [views, gt] = generate_scene(cfg.scene);
    for (const TrackSet& ts : views) save_track_set(tracks_path(out, ts.video_id), ts);
    save_ground_truth(out / "ground_truth.json", gt);
    std::vector<std::string> ids;
    for (const TrackSet& ts : views) ids.push_back(ts.video_id);
    return ids;
  });
}

inline std::vector<std::string> run_match(const PipelineConfig& cfg, const fs_::path& out) {
  return pipe_detail::stage("match", [&] {
    const std::vector<std::string> ids = list_videos(out);
    const std::string ref = pick_reference(cfg, ids);
    const TrackSet ref_set = load_track_set(tracks_path(out, ref));

    std::vector<std::string> queries;
    for (const std::string& id : ids)
      if (id != ref) queries.push_back(id);

    MatchConfig mc = cfg.match;
    mc.solver.threads = 1;  // parallelism is across pairs here
    std::vector<MatchOutcome> outcomes(queries.size());
    std::vector<TrackSet> query_sets(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i)
      query_sets[i] = load_track_set(tracks_path(out, queries[i]));
    parallel_for(queries.size(), cfg.threads,
                 [&](std::size_t i) { outcomes[i] = match_track_sets(ref_set, query_sets[i], mc); });

    std::vector<std::string> written;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const fs_::path p = match_path(out, ref, queries[i]);
      save_match_set(p, outcomes[i].matches, &outcomes[i].plan);
      written.push_back(p.filename().string());
    }
    return written;
  });
}

inline SyncResult run_sync(const PipelineConfig& cfg, const fs_::path& out) {
  return pipe_detail::stage("sync", [&] {
    const std::vector<std::string> ids = list_videos(out);
    const std::string ref = pick_reference(cfg, ids);

    std::vector<TrackSet> sets;
    for (const std::string& id : ids) sets.push_back(load_track_set(tracks_path(out, id)));

    std::map<std::pair<std::string, std::string>, MatchSet> matches;
    for (const std::string& id : ids) {
      if (id == ref) continue;
      const fs_::path p = match_path(out, ref, id);
      if (!fs_::exists(p)) throw SchemaError("missing match file '" + p.string() + "'");
      matches[{ref, id}] = load_match_set(p);
    }

    SyncConfig sc = cfg.sync;
    sc.threads = cfg.threads;
    const SyncResult result = sync_all(sets, matches, ref, sc);
    save_sync_result(out / "sync.json", result);
    for (const auto& [query, diag] : result.diagnostics)
      write_text_atomic(histogram_path(out, ref, query), histogram_to_csv(diag));
    return result;
  });
}

inline RefineOutcome run_refine(const PipelineConfig& cfg, const fs_::path& out) {
  return pipe_detail::stage("refine", [&] {
    const fs_::path sync_file = out / "sync.json";
    if (!fs_::exists(sync_file)) throw SchemaError("missing 'sync.json'; run sync first");
    const SyncResult coarse = load_sync_result(sync_file);
    const std::string ref = coarse.reference_video;

    std::map<std::string, MatchSet> matches;
    std::map<std::string, std::set<std::int64_t>> wanted;  // per video, tracks to fit
    for (const auto& [query, est] : coarse.offsets) {
      if (query == ref) continue;
      const fs_::path p = match_path(out, ref, query);
      if (!fs_::exists(p)) throw SchemaError("missing match file '" + p.string() + "'");
      MatchSet ms = load_match_set(p);
      if (cfg.refine.top_matches > 0 && ms.pairs.size() > cfg.refine.top_matches) {
        std::stable_sort(ms.pairs.begin(), ms.pairs.end(),
                         [](const MatchPair& a, const MatchPair& b) { return a.score > b.score; });
        ms.pairs.resize(cfg.refine.top_matches);
      }
      for (const MatchPair& mp : ms.pairs) {
        wanted[ref].insert(mp.a);
        wanted[query].insert(mp.b);
      }
      matches[query] = std::move(ms);
    }

    std::map<std::string, SplineScaffold> scaffolds;
    for (const auto& [video, track_ids] : wanted) {
      const TrackSet ts = load_track_set(tracks_path(out, video));
      const std::vector<std::int64_t> ids(track_ids.begin(), track_ids.end());
      scaffolds[video] = build_spline_scaffold(ts, ids, cfg.spline.n_control,
                                               cfg.spline.k_neighbors, cfg.threads);
    }

    RefineProblem problem =
        build_refine_problem(std::move(scaffolds), std::move(matches), coarse, cfg.refine.build);
    RefineOutcome outcome = refine_offsets(std::move(problem), cfg.refine.optim);

    SyncResult refined = coarse;
    refined.offsets[ref].refined = 0.0;
    for (const auto& [query, dt] : outcome.refined) refined.offsets[query].refined = dt;
    save_sync_result(out / "sync_refined.json", refined, &outcome.status);
    write_json_atomic(out / "refine_trace.json", trace_to_json(outcome.trace));
    write_text_atomic(out / "refine_trace.csv", trace_to_csv(outcome.trace));
    return outcome;
  });
}

inline json eval_report_json(const SyncScore& score) {
  json per_view = json::object();
  for (const auto& [view, err] : score.coarse_error) {
    json row = {{"coarse_error", err}};
    const auto it = score.refined_error.find(view);
    if (it != score.refined_error.end() && it->second.has_value())
      row["refined_error"] = *it->second;
    else
      row["refined_error"] = nullptr;
    per_view[view] = std::move(row);
  }
  json out = {{"per_view", std::move(per_view)}, {"mean_coarse_error", score.mean_coarse}};
  if (score.mean_refined.has_value())
    out["mean_refined_error"] = *score.mean_refined;
  else
    out["mean_refined_error"] = nullptr;
  return out;
}

inline std::string eval_report_csv(const SyncScore& score) {
  const auto fmt = [](double v) { return json(v).dump(); };
  std::ostringstream out;
  out << "view,coarse_error,refined_error\n";
  for (const auto& [view, err] : score.coarse_error) {
    out << view << "," << fmt(err) << ",";
    const auto it = score.refined_error.find(view);
    if (it != score.refined_error.end() && it->second.has_value()) out << fmt(*it->second);
    out << "\n";
  }
  out << "mean," << fmt(score.mean_coarse) << ",";
  if (score.mean_refined.has_value()) out << fmt(*score.mean_refined);
  out << "\n";
  return out.str();
}

inline SyncScore run_eval(const PipelineConfig& cfg, const fs_::path& out) {
  return pipe_detail::stage("eval", [&] {
    const fs_::path gt_file = out / "ground_truth.json";
    if (!fs_::exists(gt_file)) throw SchemaError("missing 'ground_truth.json'");
    const GroundTruth gt = load_ground_truth(gt_file);

    const fs_::path refined_file = out / "sync_refined.json";
    const fs_::path sync_file = fs_::exists(refined_file) ? refined_file : out / "sync.json";
    if (!fs_::exists(sync_file)) throw SchemaError("missing 'sync.json'; run sync first");
    const SyncResult result = load_sync_result(sync_file);

    const SyncScore score = score_sync(result, gt);
    write_json_atomic(out / "eval_report.json", eval_report_json(score));
    if (cfg.report == "csv")
      write_text_atomic(out / "eval_report.csv", eval_report_csv(score));
    return score;
  });
}

// Full pipeline with resume: a stage whose outputs already exist is skipped,
// so partial runs pick up where they stopped.
struct PipelineSummary {
  std::vector<std::string> stages_run;
  std::vector<std::string> stages_skipped;
  std::optional<SyncScore> score;
};

inline PipelineSummary run_pipeline(const PipelineConfig& cfg, const fs_::path& out) {
  PipelineSummary summary;
  const auto note = [&](const std::string& name, bool ran) {
    (ran ? summary.stages_run : summary.stages_skipped).push_back(name);
  };

  if (cfg.stages.gen) {
    const bool have_tracks = !list_videos(out).empty() && fs_::exists(out / "ground_truth.json");
    if (!have_tracks) run_gen(cfg, out);
    note("gen", !have_tracks);
  }

  const std::vector<std::string> ids = list_videos(out);
  const std::string ref = pick_reference(cfg, ids);

  if (cfg.stages.match) {
    bool have_matches = true;
    for (const std::string& id : ids)
      if (id != ref && !fs_::exists(match_path(out, ref, id))) have_matches = false;
    if (!have_matches) run_match(cfg, out);
    note("match", !have_matches);
  }
  if (cfg.stages.sync) {
    const bool have_sync = fs_::exists(out / "sync.json");
    if (!have_sync) run_sync(cfg, out);
    note("sync", !have_sync);
  }
  if (cfg.stages.refine) {
    const bool have_refined = fs_::exists(out / "sync_refined.json");
    if (!have_refined) run_refine(cfg, out);
    note("refine", !have_refined);
  }
  if (cfg.stages.eval && fs_::exists(out / "ground_truth.json")) {
    summary.score = run_eval(cfg, out);
    note("eval", true);
  }
  return summary;
}

}  // namespace tracksync
