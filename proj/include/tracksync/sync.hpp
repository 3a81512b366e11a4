#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tracksync/core.hpp"
#include "tracksync/errors.hpp"
#include "tracksync/matching.hpp"
#include "tracksync/parallel.hpp"

namespace tracksync {

// Frame-to-frame geometric discrepancy between two videos, averaged over
// matched track pairs. Rows index frames of the first (reference) video.
struct GeoCostMatrix {
  Eigen::MatrixXd cost;  // T_a x T_b, scene units
  int n_matches = 0;

  void validate() const {
    if (cost.rows() == 0 || cost.cols() == 0)
      throw InvalidInput("geo cost matrix: empty");
    if (n_matches < 1) throw InvalidInput("geo cost matrix: n_matches must be >= 1");
    if (!cost.allFinite()) throw InvalidInput("geo cost matrix: non-finite entry");
    if (cost.minCoeff() < 0.0) throw InvalidInput("geo cost matrix: negative entry");
  }
};

// Monotone alignment path through a cost matrix.
struct DtwPath {
  std::vector<std::pair<int, int>> steps;  // (i, j), starts (0,0), ends (T_a-1, T_b-1)
  double total_cost = 0.0;
};

struct OffsetEstimate {
  int coarse = 0;                 // integer frames, query clock minus reference clock
  std::optional<double> refined;  // sub-frame estimate, when refinement ran
};

struct PairDiagnostics {
  double path_cost = 0.0;
  std::map<int, int> offset_histogram;  // offset value -> count along the path
  int overlap_frames = 0;               // frames both clocks cover at the chosen offset
  bool unreliable = false;              // overlap below the configured minimum
};

struct SyncResult {
  std::string reference_video;
  std::map<std::string, OffsetEstimate> offsets;      // keyed by video id, reference included at 0
  std::map<std::string, PairDiagnostics> diagnostics; // keyed by query video id
};

struct SyncConfig {
  int min_overlap = 10;  // below this the pair estimate is flagged unreliable
  int threads = 1;
};

// cost[i][j] = mean over matched pairs of the L1 distance between the
// reference track at frame i and the query track at frame j.
inline GeoCostMatrix geo_cost_matrix(const MatchSet& matches, const TrackSet& A,
                                     const TrackSet& B) {
  if (matches.pairs.empty())
    throw InvalidInput("geo_cost_matrix: empty match set for videos '" + A.video_id + "' and '" +
                       B.video_id + "'");
  struct Resolved {
    const Track* a;
    const Track* b;
  };
  std::vector<Resolved> resolved;
  resolved.reserve(matches.pairs.size());
  for (const MatchPair& p : matches.pairs) {
    const Track* ta = A.find(p.a);
    const Track* tb = B.find(p.b);
    if (ta == nullptr)
      throw InvalidInput("geo_cost_matrix: match id " + std::to_string(p.a) +
                         " not found in track set '" + A.video_id + "'");
    if (tb == nullptr)
      throw InvalidInput("geo_cost_matrix: match id " + std::to_string(p.b) +
                         " not found in track set '" + B.video_id + "'");
    resolved.push_back({ta, tb});
  }

  GeoCostMatrix out;
  out.n_matches = static_cast<int>(resolved.size());
  out.cost = Eigen::MatrixXd::Zero(A.frame_count, B.frame_count);
  const double inv = 1.0 / static_cast<double>(resolved.size());
  for (int i = 0; i < A.frame_count; ++i) {
    for (int j = 0; j < B.frame_count; ++j) {
      double s = 0.0;
      for (const Resolved& r : resolved)
        s += (r.a->positions[static_cast<std::size_t>(i)] -
              r.b->positions[static_cast<std::size_t>(j)])
                 .lpNorm<1>();
      out.cost(i, j) = s * inv;
    }
  }
  return out;
}

// Classic DTW with steps {(1,0),(0,1),(1,1)}; ties prefer the diagonal,
// then the row step (1,0). Returns the globally minimal accumulated cost
// and one deterministic optimal path.
inline DtwPath dtw_align(const GeoCostMatrix& d) {
  d.validate();
  const Eigen::Index ta = d.cost.rows();
  const Eigen::Index tb = d.cost.cols();

  Eigen::MatrixXd acc(ta, tb);
  // 0: from (i-1,j-1), 1: from (i-1,j), 2: from (i,j-1), 3: start
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> from(ta, tb);
  for (Eigen::Index i = 0; i < ta; ++i) {
    for (Eigen::Index j = 0; j < tb; ++j) {
      if (i == 0 && j == 0) {
        acc(i, j) = d.cost(0, 0);
        from(i, j) = 3;
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      std::uint8_t pick = 3;
      if (i > 0 && j > 0 && acc(i - 1, j - 1) < best) {
        best = acc(i - 1, j - 1);
        pick = 0;
      }
      if (i > 0 && acc(i - 1, j) < best) {
        best = acc(i - 1, j);
        pick = 1;
      }
      if (j > 0 && acc(i, j - 1) < best) {
        best = acc(i, j - 1);
        pick = 2;
      }
      acc(i, j) = best + d.cost(i, j);
      from(i, j) = pick;
    }
  }

  DtwPath path;
  path.total_cost = acc(ta - 1, tb - 1);
  Eigen::Index i = ta - 1, j = tb - 1;
  while (true) {
    path.steps.emplace_back(static_cast<int>(i), static_cast<int>(j));
    const std::uint8_t pick = from(i, j);
    if (pick == 3) break;
    if (pick == 0) {
      --i;
      --j;
    } else if (pick == 1) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(path.steps.begin(), path.steps.end());
  return path;
}

// Most frequent offset j - i along the path. Ties go to the smallest
// absolute offset, then to the negative one.
inline int offset_from_path(const DtwPath& path) {
  if (path.steps.empty()) throw InvalidInput("offset_from_path: empty path");
  std::map<int, int> counts;
  for (const auto& [i, j] : path.steps) ++counts[j - i];
  int best_offset = 0;
  int best_count = -1;
  for (const auto& [offset, count] : counts) {
    const bool better =
        count > best_count ||
        (count == best_count && (std::abs(offset) < std::abs(best_offset) ||
                                 (std::abs(offset) == std::abs(best_offset) &&
                                  offset < best_offset)));
    if (better) {
      best_offset = offset;
      best_count = count;
    }
  }
  return best_offset;
}

namespace detail {

// Frames of the reference clock that the query covers at integer offset k:
// reference frame t maps to query frame t + k, which must stay in range.
inline int overlap_frames_at(int frames_ref, int frames_query, int k) {
  const int lo = std::max(0, -k);
  const int hi = std::min(frames_ref - 1, frames_query - 1 - k);
  return std::max(0, hi - lo + 1);
}

}  // namespace detail

// Coarse offsets of every view against the chosen reference view. Each
// (reference, query) pair runs independently; pairs execute in parallel.
inline SyncResult sync_all(const std::vector<TrackSet>& sets,
                           const std::map<std::pair<std::string, std::string>, MatchSet>& matches,
                           const std::string& reference, const SyncConfig& config = {}) {
  const TrackSet* ref = nullptr;
  for (const TrackSet& ts : sets) {
    if (ts.video_id == reference) {
      if (ref != nullptr) throw InvalidInput("sync_all: duplicate video id '" + reference + "'");
      ref = &ts;
    }
  }
  if (ref == nullptr)
    throw InvalidInput("sync_all: reference video '" + reference + "' not among the inputs");

  std::vector<const TrackSet*> queries;
  for (const TrackSet& ts : sets) {
    if (ts.video_id == reference) continue;
    if (ts.fps != ref->fps)
      throw InvalidInput("sync_all: video '" + ts.video_id + "' fps " + std::to_string(ts.fps) +
                         " differs from reference fps " + std::to_string(ref->fps));
    queries.push_back(&ts);
  }
  for (const TrackSet* q : queries) {
    if (matches.find({reference, q->video_id}) == matches.end())
      throw InvalidInput("sync_all: no match set for pair (" + reference + ", " + q->video_id +
                         ")");
  }

  struct PairResult {
    int coarse = 0;
    PairDiagnostics diag;
  };
  std::vector<PairResult> results(queries.size());
  parallel_for(queries.size(), config.threads, [&](std::size_t qi) {
    const TrackSet& q = *queries[qi];
    const MatchSet& ms = matches.at({reference, q.video_id});
    const GeoCostMatrix d = geo_cost_matrix(ms, *ref, q);
    const DtwPath path = dtw_align(d);
    PairResult& r = results[qi];
    r.coarse = offset_from_path(path);
    r.diag.path_cost = path.total_cost;
    for (const auto& [i, j] : path.steps) ++r.diag.offset_histogram[j - i];
    r.diag.overlap_frames =
        detail::overlap_frames_at(ref->frame_count, q.frame_count, r.coarse);
    r.diag.unreliable = r.diag.overlap_frames < config.min_overlap;
  });

  SyncResult out;
  out.reference_video = reference;
  out.offsets[reference] = OffsetEstimate{0, std::nullopt};
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    out.offsets[queries[qi]->video_id] = OffsetEstimate{results[qi].coarse, std::nullopt};
    out.diagnostics[queries[qi]->video_id] = std::move(results[qi].diag);
  }
  return out;
}

}  // namespace tracksync
