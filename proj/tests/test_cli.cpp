#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "tracksync/io.hpp"
#include "tracksync/pipeline.hpp"

using namespace tracksync;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tracksync_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path cap = fs::temp_directory_path() / "tracksync_cli_test" /
                       ("capture_" + std::to_string(counter++));
  fs::create_directories(cap);
  const std::string cmd = std::string(TRACKSYNC_CLI_PATH) + " " + args + " > " +
                          (cap / "out.txt").string() + " 2> " + (cap / "err.txt").string();
  const int status = std::system(cmd.c_str());
  CliResult r;
  if (status >= 0 && WIFEXITED(status)) r.code = WEXITSTATUS(status);
  r.out = slurp(cap / "out.txt");
  r.err = slurp(cap / "err.txt");
  return r;
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  write_json_atomic(p, j);
  return p;
}

json small_scene(std::uint64_t seed) {
  return {{"scene",
           {{"n_clusters", 2},
            {"points_per_cluster", 8},
            {"n_views", 3},
            {"frames", 48},
            {"offset_min", -8},
            {"offset_max", 8},
            {"feature_dim", 8},
            {"position_noise_sigma", 0.002},
            {"feature_noise_sigma", 0.05},
            {"seed", seed}}},
          {"refine", {{"max_iterations", 300}}}};
}

bool trees_equal(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  if (names_a != names_b) return false;
  for (const std::string& n : names_a)
    if (slurp(a / n) != slurp(b / n)) return false;
  return true;
}

TrackSet static_set(const std::string& id, int tracks, int frames, double jitter) {
  TrackSet ts;
  ts.video_id = id;
  ts.frame_count = frames;
  for (int i = 0; i < tracks; ++i) {
    Track t;
    t.id = i;
    const Vec3 base(1.7 * i, 0.3 * i * i, -0.9 * i + jitter);
    t.positions.assign(static_cast<std::size_t>(frames), base);
    t.feature = VectorXd::Zero(tracks);
    t.feature[i] = 1.0;
    t.positions[0] += Vec3(0, 0, 0);  // keep exactly constant
    ts.tracks.push_back(std::move(t));
  }
  return ts;
}

}  // namespace

TEST_CASE("cli requires a subcommand and supports --help") {
  REQUIRE(run_cli("").code == 2);
  const CliResult help = run_cli("--help");
  REQUIRE(help.code == 0);
  REQUIRE(help.out.find("pipeline") != std::string::npos);
  REQUIRE(run_cli("frobnicate").code == 2);
}

TEST_CASE("gen writes track files and is byte deterministic") {
  const fs::path dir = fresh_dir("gen_a");
  const fs::path cfg = write_config(dir, small_scene(5));
  const CliResult r =
      run_cli("--config " + cfg.string() + " --out " + (dir / "out").string() + " gen");
  INFO(r.err);
  REQUIRE(r.code == 0);
  REQUIRE(fs::exists(dir / "out" / "cam0.tracks.json"));
  REQUIRE(fs::exists(dir / "out" / "cam1.tracks.json"));
  REQUIRE(fs::exists(dir / "out" / "cam2.tracks.json"));
  REQUIRE(fs::exists(dir / "out" / "ground_truth.json"));

  const fs::path dir2 = fresh_dir("gen_b");
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + (dir2 / "out").string() + " gen")
              .code == 0);
  REQUIRE(trees_equal(dir / "out", dir2 / "out"));
}

TEST_CASE("config errors exit 2 and name the offending field") {
  const fs::path dir = fresh_dir("bad_config");

  json bad_seed = small_scene(1);
  bad_seed["scene"]["seed"] = "not-a-number";
  const fs::path cfg1 = dir / "bad_seed.json";
  write_json_atomic(cfg1, bad_seed);
  CliResult r = run_cli("--config " + cfg1.string() + " --out " + dir.string() + " gen");
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("seed") != std::string::npos);

  json unknown = small_scene(1);
  unknown["matcher"] = json::object();
  const fs::path cfg2 = dir / "unknown.json";
  write_json_atomic(cfg2, unknown);
  r = run_cli("--config " + cfg2.string() + " --out " + dir.string() + " gen");
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("matcher") != std::string::npos);

  const fs::path cfg3 = dir / "broken.json";
  write_text_atomic(cfg3, "{ nope");
  r = run_cli("--config " + cfg3.string() + " --out " + dir.string() + " gen");
  REQUIRE(r.code == 2);
}

TEST_CASE("two single-track files produce exactly one match") {
  const fs::path dir = fresh_dir("single_track");
  TrackSet a, b;
  a.video_id = "solo_a";
  b.video_id = "solo_b";
  a.frame_count = b.frame_count = 20;
  Track t;
  t.id = 0;
  for (int f = 0; f < 20; ++f)
    t.positions.push_back(Vec3(0.3 * f, std::sin(0.2 * f), 0.1 * f));
  t.feature = VectorXd::Ones(4);
  a.tracks.push_back(t);
  b.tracks.push_back(t);
  save_track_set(dir / "a.tracks.json", a);
  save_track_set(dir / "b.tracks.json", b);

  const CliResult r = run_cli("--out " + dir.string() + " match " +
                              (dir / "a.tracks.json").string() + " " +
                              (dir / "b.tracks.json").string());
  INFO(r.err);
  REQUIRE(r.code == 0);
  const MatchSet ms = load_match_set(match_path(dir, "solo_a", "solo_b"));
  REQUIRE(ms.pairs.size() == 1);
  REQUIRE(ms.pairs[0].a == 0);
  REQUIRE(ms.pairs[0].b == 0);
}

TEST_CASE("empty track file is rejected with a schema-class exit") {
  const fs::path dir = fresh_dir("empty_tracks");
  write_json_atomic(dir / "empty.tracks.json",
                    json{{"video_id", "empty"},
                         {"fps", 30.0},
                         {"frame_count", 10},
                         {"tracks", json::array()}});
  write_json_atomic(dir / "other.tracks.json",
                    track_set_to_json(static_set("other", 2, 10, 0.0)));
  const CliResult r = run_cli("--out " + dir.string() + " match " +
                              (dir / "empty.tracks.json").string() + " " +
                              (dir / "other.tracks.json").string());
  REQUIRE(r.code == 2);
  REQUIRE(!r.err.empty());
}

TEST_CASE("sync without match files names the problem") {
  const fs::path dir = fresh_dir("sync_missing");
  const fs::path cfg = write_config(fresh_dir("sync_missing_cfg"), small_scene(3));
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + dir.string() + " gen").code == 0);
  const CliResult r = run_cli("--config " + cfg.string() + " --out " + dir.string() + " sync");
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("match") != std::string::npos);
}

TEST_CASE("pipeline runs end to end and resumes without regenerating") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path cfg = write_config(fresh_dir("pipeline_cfg"), small_scene(7));
  const fs::path out = dir / "out";

  CliResult r = run_cli("--config " + cfg.string() + " --out " + out.string() + " pipeline");
  INFO(r.err);
  REQUIRE(r.code == 0);
  REQUIRE(r.out.find("mean") != std::string::npos);
  REQUIRE(fs::exists(out / "sync_refined.json"));
  REQUIRE(fs::exists(out / "eval_report.json"));

  // Resume with a different seed: generation must be skipped, so the track
  // bytes stay those of the first run.
  const std::string before = slurp(out / "cam0.tracks.json");
  const fs::path cfg2 = write_config(fresh_dir("pipeline_cfg2"), small_scene(999));
  r = run_cli("--config " + cfg2.string() + " --out " + out.string() + " --verbose pipeline");
  REQUIRE(r.code == 0);
  REQUIRE(r.err.find("skipped gen") != std::string::npos);
  REQUIRE(slurp(out / "cam0.tracks.json") == before);

  // Refined errors on this clean scene are well under a frame.
  const json report = load_json(out / "eval_report.json");
  REQUIRE(report.at("mean_refined_error").get<double>() < 0.3);
}

TEST_CASE("corrupted intermediate fails with the stage named") {
  const fs::path dir = fresh_dir("corrupt");
  const fs::path cfg = write_config(fresh_dir("corrupt_cfg"), small_scene(13));
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + dir.string() + " gen").code == 0);
  REQUIRE(run_cli("--config " + cfg.string() + " --out " + dir.string() + " match").code == 0);
  write_text_atomic(dir / "match_cam0__cam1.json", "{ \"garbage\": tru");
  const CliResult r = run_cli("--config " + cfg.string() + " --out " + dir.string() + " sync");
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("stage sync") != std::string::npos);
}

TEST_CASE("zero-offset scene refines to nearly zero") {
  const fs::path dir = fresh_dir("zero_offset");
  json cfg_json = small_scene(21);
  cfg_json["scene"]["offset_min"] = 0;
  cfg_json["scene"]["offset_max"] = 0;
  cfg_json["scene"]["n_views"] = 2;
  const fs::path cfg = write_config(fresh_dir("zero_offset_cfg"), cfg_json);
  const CliResult r = run_cli("--config " + cfg.string() + " --out " + dir.string() + " pipeline");
  INFO(r.err);
  REQUIRE(r.code == 0);
  const SyncResult refined = load_sync_result(dir / "sync_refined.json");
  REQUIRE(refined.offsets.at("cam1").refined.has_value());
  REQUIRE(std::abs(*refined.offsets.at("cam1").refined) < 1e-2);
}

TEST_CASE("static scene is flagged unidentifiable") {
  const fs::path dir = fresh_dir("static_scene");
  save_track_set(dir / "s0.tracks.json", static_set("s0", 4, 30, 0.0));
  save_track_set(dir / "s1.tracks.json", static_set("s1", 4, 30, 0.0));

  REQUIRE(run_cli("--out " + dir.string() + " match").code == 0);
  REQUIRE(run_cli("--out " + dir.string() + " sync").code == 0);
  const CliResult r = run_cli("--out " + dir.string() + " refine");
  INFO(r.err);
  REQUIRE(r.code == 0);

  const json refined = load_json(dir / "sync_refined.json");
  REQUIRE(refined.at("diagnostics").at("s1").at("refine_unidentifiable").get<bool>());
}

TEST_CASE("eval without ground truth exits with a schema error") {
  const fs::path dir = fresh_dir("eval_missing");
  const CliResult r = run_cli("--out " + dir.string() + " eval");
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("ground_truth") != std::string::npos);
}
