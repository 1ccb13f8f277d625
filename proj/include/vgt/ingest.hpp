#pragma once

// Raw tracks -> normalized, slot-consistent, fixed-shape samples.
//
// Space is tiled into L x Wd rectangles and time into windows of
// (hist_len + pred_len) * stride raw frames. Each (tile, window) pair with
// data becomes one candidate sample. Windows needing more than maxS slots
// are dropped rather than truncated: truncating would silently delete
// interacting vehicles.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vgt/data.hpp"

namespace vgt {

// Box geometry in meters, absolute coordinates.
struct BoxGeometry {
  double x = 0, y = 0, len = 0, wid = 0;
};

struct TileOrigin {
  double x0 = 0, y0 = 0;
};

inline TileOrigin tile_origin(int tile_x, int tile_y, const DomainConfig& cfg) {
  return {tile_x * cfg.L, tile_y * cfg.Wd};
}

inline NormBox normalize(const TrackPoint& p, const DomainConfig& cfg, const TileOrigin& origin) {
  if (p.len <= 0 || p.len > cfg.len_cap)
    throw std::out_of_range("normalize: len=" + std::to_string(p.len) + " outside (0, " +
                            std::to_string(cfg.len_cap) + "]");
  if (p.wid <= 0 || p.wid > cfg.wid_cap)
    throw std::out_of_range("normalize: wid=" + std::to_string(p.wid) + " outside (0, " +
                            std::to_string(cfg.wid_cap) + "]");
  NormBox b;
  b.x = (p.x - origin.x0) / cfg.L;
  b.y = (p.y - origin.y0) / cfg.Wd;
  b.w = p.len / cfg.len_cap;
  b.h = p.wid / cfg.wid_cap;
  return b;
}

// Exact inverse of normalize on the geometric fields. Predicted boxes may
// lie outside [0,1]; no clamping happens here.
inline BoxGeometry denormalize(const NormBox& b, const DomainConfig& cfg, const TileOrigin& origin) {
  BoxGeometry g;
  g.x = b.x * cfg.L + origin.x0;
  g.y = b.y * cfg.Wd + origin.y0;
  g.len = b.w * cfg.len_cap;
  g.wid = b.h * cfg.wid_cap;
  return g;
}

// One vehicle's contiguous run of raw frames inside a (tile, window) pair.
struct SubTrack {
  std::string vehicle_id;
  std::int64_t first_frame = 0;     // absolute raw frame index of points[0]
  std::vector<TrackPoint> points;   // one per consecutive raw frame
};

struct RawWindow {
  int tile_x = 0;
  int tile_y = 0;
  std::int64_t window_index = 0;    // time window number
  std::int64_t frame0 = 0;          // first raw frame of the window
  std::int64_t last_data_frame = 0; // last raw frame with any data, corpus-wide
  std::vector<SubTrack> tracks;     // ordered by (first_frame, vehicle_id)
};

struct PartitionResult {
  std::vector<RawWindow> windows;
  std::vector<std::string> diagnostics;
};

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b, r = a % b;
  return (r != 0 && (r < 0) != (b < 0)) ? q - 1 : q;
}

inline int floor_tile(double v, double size) {
  return static_cast<int>(std::floor(v / size));
}

}  // namespace detail

inline PartitionResult partition(const std::vector<TrackPoint>& tracks, const DomainConfig& cfg) {
  cfg.validate();
  PartitionResult result;
  if (tracks.empty()) return result;

  const double dt_raw = cfg.dt_raw();
  const std::int64_t wlen = cfg.window_raw_frames();

  // Group by vehicle, preserving input order, and validate time monotonicity.
  std::map<std::string, std::vector<TrackPoint>> by_vehicle;
  for (const auto& p : tracks) by_vehicle[p.vehicle_id].push_back(p);

  struct FramePoint {
    std::int64_t frame;
    TrackPoint pt;
  };
  std::map<std::string, std::vector<FramePoint>> snapped;
  std::int64_t last_data_frame = 0;
  bool any = false;

  for (auto& [vid, pts] : by_vehicle) {
    bool monotone = true;
    for (std::size_t i = 1; i < pts.size(); ++i)
      if (pts[i].t <= pts[i - 1].t) {
        monotone = false;
        break;
      }
    if (!monotone) {
      result.diagnostics.push_back("vehicle " + vid + ": non-monotone timestamps, rejected");
      continue;
    }
    auto& fp = snapped[vid];
    for (const auto& p : pts) {
      const std::int64_t k = static_cast<std::int64_t>(std::llround(p.t / dt_raw));
      if (std::abs(p.t - k * dt_raw) > 0.25 * dt_raw) {
        result.diagnostics.push_back("vehicle " + vid + ": point at t=" + std::to_string(p.t) +
                                     " off the raw frame grid, dropped");
        continue;
      }
      if (!fp.empty() && fp.back().frame == k) {
        result.diagnostics.push_back("vehicle " + vid + ": duplicate raw frame " + std::to_string(k) +
                                     ", kept first");
        continue;
      }
      fp.push_back({k, p});
      last_data_frame = any ? std::max(last_data_frame, k) : k;
      any = true;
    }
  }
  if (!any) return result;

  // Bucket each point into its (tile, window) key.
  struct Key {
    int tx, ty;
    std::int64_t w;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::map<std::string, std::vector<FramePoint>>> buckets;
  for (const auto& [vid, fps] : snapped) {
    for (const auto& fp : fps) {
      Key key{detail::floor_tile(fp.pt.x, cfg.L), detail::floor_tile(fp.pt.y, cfg.Wd),
              detail::floor_div(fp.frame, wlen)};
      buckets[key][vid].push_back(fp);
    }
  }

  for (auto& [key, vehicles] : buckets) {
    RawWindow win;
    win.tile_x = key.tx;
    win.tile_y = key.ty;
    win.window_index = key.w;
    win.frame0 = key.w * wlen;
    win.last_data_frame = last_data_frame;

    for (auto& [vid, fps] : vehicles) {
      // Keep the longest consecutive run (earliest on ties); a vehicle that
      // leaves the tile and returns within one window contributes one slot.
      std::size_t best_start = 0, best_len = 1, run_start = 0;
      for (std::size_t i = 1; i <= fps.size(); ++i) {
        if (i == fps.size() || fps[i].frame != fps[i - 1].frame + 1) {
          const std::size_t run_len = i - run_start;
          if (run_len > best_len) {
            best_len = run_len;
            best_start = run_start;
          }
          run_start = i;
        }
      }
      if (best_len < fps.size())
        result.diagnostics.push_back("vehicle " + vid + ": discontinuous inside window, kept longest run");
      SubTrack st;
      st.vehicle_id = vid;
      st.first_frame = fps[best_start].frame;
      for (std::size_t i = best_start; i < best_start + best_len; ++i) st.points.push_back(fps[i].pt);
      win.tracks.push_back(std::move(st));
    }

    if (static_cast<int>(win.tracks.size()) > cfg.maxS) {
      result.diagnostics.push_back("window tile=(" + std::to_string(key.tx) + "," + std::to_string(key.ty) +
                                   ") w=" + std::to_string(key.w) + ": " + std::to_string(win.tracks.size()) +
                                   " vehicles exceed maxS=" + std::to_string(cfg.maxS) + ", dropped");
      continue;
    }

    // Slot order: first appearance, ties broken by vehicle id.
    std::sort(win.tracks.begin(), win.tracks.end(), [](const SubTrack& a, const SubTrack& b) {
      return a.first_frame != b.first_frame ? a.first_frame < b.first_frame : a.vehicle_id < b.vehicle_id;
    });
    result.windows.push_back(std::move(win));
  }
  return result;
}

// Builds the fixed-shape sample for one window. Returns nullopt (plus a
// diagnostic) when the window extends past the recorded data, i.e. fewer
// than hist_len + pred_len selectable frames exist.
inline std::optional<Sample> assemble(const RawWindow& win, const DomainConfig& cfg,
                                      const std::string& site = "",
                                      std::vector<std::string>* diagnostics = nullptr) {
  cfg.validate();
  const int n_frames = cfg.total_frames();
  const std::int64_t last_selected = win.frame0 + static_cast<std::int64_t>(n_frames - 1) * cfg.stride;
  if (last_selected > win.last_data_frame) {
    if (diagnostics)
      diagnostics->push_back("window tile=(" + std::to_string(win.tile_x) + "," + std::to_string(win.tile_y) +
                             ") w=" + std::to_string(win.window_index) +
                             ": fewer than " + std::to_string(n_frames) + " selectable frames, skipped");
    return std::nullopt;
  }
  if (static_cast<int>(win.tracks.size()) > cfg.maxS)
    throw std::invalid_argument("assemble: window has more vehicles than maxS");

  const TileOrigin origin = tile_origin(win.tile_x, win.tile_y, cfg);
  Sample s;
  s.meta.site = site;
  s.meta.tile_x = win.tile_x;
  s.meta.tile_y = win.tile_y;
  s.meta.t0 = static_cast<double>(win.frame0) * cfg.dt_raw();
  s.meta.cfg = cfg;
  s.frames.assign(n_frames, Frame(cfg.maxS));

  for (int j = 0; j < n_frames; ++j) {
    Frame& f = s.frames[j];
    f.mark = j;
    const std::int64_t raw = win.frame0 + static_cast<std::int64_t>(j) * cfg.stride;
    for (std::size_t slot = 0; slot < win.tracks.size(); ++slot) {
      const SubTrack& st = win.tracks[slot];
      const std::int64_t idx = raw - st.first_frame;
      if (idx < 0 || idx >= static_cast<std::int64_t>(st.points.size())) continue;
      f.slots[slot] = normalize(st.points[idx], cfg, origin);
      f.present[slot] = 1;
    }
  }
  return s;
}

// Full preprocessing pass: partition + assemble over a corpus.
struct IngestResult {
  std::vector<Sample> samples;
  std::vector<std::string> diagnostics;
};

inline IngestResult ingest_tracks(const std::vector<TrackPoint>& tracks, const DomainConfig& cfg,
                                  const std::string& site = "") {
  IngestResult out;
  PartitionResult part = partition(tracks, cfg);
  out.diagnostics = std::move(part.diagnostics);
  for (const auto& win : part.windows) {
    auto s = assemble(win, cfg, site, &out.diagnostics);
    if (s) out.samples.push_back(std::move(*s));
  }
  return out;
}

}  // namespace vgt
