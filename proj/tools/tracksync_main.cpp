#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tracksync/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tracksync;

namespace {

void print_eval_table(const SyncScore& score) {
  std::cout << std::left << std::setw(12) << "view" << std::setw(16) << "coarse_error"
            << "refined_error\n";
  std::cout.precision(6);
  for (const auto& [view, err] : score.coarse_error) {
    std::cout << std::left << std::setw(12) << view << std::setw(16) << err;
    const auto it = score.refined_error.find(view);
    if (it != score.refined_error.end() && it->second.has_value())
      std::cout << *it->second;
    else
      std::cout << "-";
    std::cout << "\n";
  }
  std::cout << std::left << std::setw(12) << "mean" << std::setw(16) << score.mean_coarse;
  if (score.mean_refined.has_value())
    std::cout << *score.mean_refined;
  else
    std::cout << "-";
  std::cout << "\n";
}

void chat(bool verbose, const std::string& line) {
  if (verbose) std::cerr << line << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tracksync: synchronize multi-view videos from dense point tracks"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_dir = "out";
  int threads = 0;
  std::int64_t seed = -1;
  bool verbose = false;
  app.add_option("--config", config_path, "pipeline config JSON");
  app.add_option("--out", out_dir, "output directory for stage files");
  app.add_option("--threads", threads, "worker threads (overrides config)");
  app.add_option("--seed", seed, "scene seed (overrides config)");
  app.add_flag("--verbose", verbose, "print stage progress to stderr");

  CLI::App* cmd_gen = app.add_subcommand("gen", "generate a synthetic multi-view scene");
  CLI::App* cmd_match = app.add_subcommand("match", "match tracks against the reference view");
  std::vector<std::string> match_files;
  cmd_match->add_option("files", match_files,
                        "explicit reference and query track files (default: all in --out)")
      ->expected(0, 2);
  CLI::App* cmd_sync = app.add_subcommand("sync", "estimate coarse frame offsets");
  CLI::App* cmd_refine = app.add_subcommand("refine", "refine offsets to sub-frame precision");
  CLI::App* cmd_eval = app.add_subcommand("eval", "score offsets against ground truth");
  CLI::App* cmd_pipeline = app.add_subcommand("pipeline", "run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    PipelineConfig cfg;
    if (!config_path.empty()) cfg = load_pipeline_config(config_path);
    if (threads > 0) cfg.threads = threads;
    if (seed >= 0) cfg.scene.seed = static_cast<std::uint64_t>(seed);
    cfg.verbose = cfg.verbose || verbose;

    const fs::path out = out_dir;

    if (*cmd_gen) {
      const auto ids = run_gen(cfg, out);
      chat(cfg.verbose, "[gen] wrote " + std::to_string(ids.size()) + " track sets to " +
                            out.string());
    } else if (*cmd_match) {
      fs::create_directories(out);
      if (match_files.size() == 2) {
        const TrackSet a = load_track_set(match_files[0]);
        const TrackSet b = load_track_set(match_files[1]);
        MatchConfig mc = cfg.match;
        mc.solver.threads = cfg.threads;
        const MatchOutcome o = match_track_sets(a, b, mc);
        const fs::path p = match_path(out, a.video_id, b.video_id);
        save_match_set(p, o.matches, &o.plan);
        chat(cfg.verbose, "[match] wrote " + p.filename().string() + " (" +
                              std::to_string(o.matches.pairs.size()) + " pairs)");
      } else if (match_files.empty()) {
        const auto written = run_match(cfg, out);
        chat(cfg.verbose, "[match] wrote " + std::to_string(written.size()) + " match files");
      } else {
        std::cerr << "error: match takes zero or two track files\n";
        return 2;
      }
    } else if (*cmd_sync) {
      const SyncResult r = run_sync(cfg, out);
      chat(cfg.verbose, "[sync] wrote sync.json (" +
                            std::to_string(r.offsets.size() - 1) + " query views)");
    } else if (*cmd_refine) {
      const RefineOutcome o = run_refine(cfg, out);
      chat(cfg.verbose, "[refine] " + o.trace.stop_reason + " after " +
                            std::to_string(o.trace.iterations) + " iterations");
    } else if (*cmd_eval) {
      const SyncScore score = run_eval(cfg, out);
      print_eval_table(score);
    } else if (*cmd_pipeline) {
      const PipelineSummary s = run_pipeline(cfg, out);
      for (const std::string& name : s.stages_run) chat(cfg.verbose, "[pipeline] ran " + name);
      for (const std::string& name : s.stages_skipped)
        chat(cfg.verbose, "[pipeline] skipped " + name + " (outputs exist)");
      if (s.score.has_value()) print_eval_table(*s.score);
    }
    return 0;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
