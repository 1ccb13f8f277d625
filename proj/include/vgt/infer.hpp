#pragma once

// Inference: one-shot prediction, continuous sliding-window rollout,
// presence detection and trajectory/speed extraction.
//
// The model always sees window-relative marks 0..hist_len-1 (marks are
// relative time within a sequence); emitted prediction frames carry
// absolute marks that continue monotonically across rollout loops.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/ingest.hpp"
#include "vgt/net.hpp"

namespace vgt {

struct PresenceRule {
  double eps_w = 0.05;  // normalized; 1 m of length at the default caps
  double eps_h = 0.05;  // 0.2 m of width

  void validate() const {
    if (eps_w <= 0 || eps_w >= 1 || eps_h <= 0 || eps_h >= 1)
      throw std::invalid_argument("PresenceRule: thresholds must lie in (0,1)");
  }
};

// A slot counts as a vehicle iff both box extents clear their thresholds.
inline std::vector<std::uint8_t> presence_flags(const Frame& f, const PresenceRule& rule) {
  std::vector<std::uint8_t> flags(f.slots.size(), 0);
  for (std::size_t s = 0; s < f.slots.size(); ++s)
    flags[s] = (f.slots[s].w > rule.eps_w && f.slots[s].h > rule.eps_h) ? 1 : 0;
  return flags;
}

inline int presence_count(const Frame& f, const PresenceRule& rule) {
  int n = 0;
  for (auto v : presence_flags(f, rule)) n += v;
  return n;
}

struct Prediction {
  std::vector<Frame> frames;      // normalized coordinates, absolute marks
  std::vector<int> loop_of_frame; // rollout loop index per frame (0-based)
  std::string checkpoint_id;
};

namespace detail {

// Copies frames and rebases marks to 0..n-1 for the model input.
inline std::vector<Frame> rebase_marks(std::span<const Frame> frames) {
  std::vector<Frame> out(frames.begin(), frames.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i].mark = static_cast<int>(i);
  return out;
}

}  // namespace detail

// One-shot autoregressive prediction of pred_len frames. History must be
// clean (not noised) and exactly hist_len frames.
template <typename T>
Prediction predict(const Parameters<T>& params, const ModelConfig& cfg, std::span<const Frame> history,
                   const PresenceRule& rule, int first_loop = 0, int mark_base = -1) {
  rule.validate();
  if (static_cast<int>(history.size()) != cfg.hist_len)
    throw std::invalid_argument("predict: history length " + std::to_string(history.size()) +
                                " != hist_len " + std::to_string(cfg.hist_len));
  for (const Frame& f : history)
    if (f.masked) throw std::invalid_argument("predict: history must not be noised");

  const std::vector<Frame> model_in = detail::rebase_marks(history);
  const Mat<T> out = forward_autoreg<T>({model_in.data(), model_in.size()}, params, cfg);

  const int base = mark_base >= 0 ? mark_base : history.back().mark + 1;
  Prediction pred;
  for (int k = 0; k < cfg.pred_len; ++k) {
    Frame f = token_to_frame(out, k, cfg.maxS, base + k);
    f.present = presence_flags(f, rule);
    pred.frames.push_back(std::move(f));
    pred.loop_of_frame.push_back(first_loop);
  }
  return pred;
}

// Sliding rollout window: the state needed to continue a rollout, exposed
// so composition (a loops, then b loops) is exact.
struct RolloutWindow {
  std::vector<Frame> frames;  // hist_len frames, absolute marks
  int next_loop = 0;
};

template <typename T>
RolloutWindow rollout_window_init(const ModelConfig& cfg, std::span<const Frame> history) {
  if (static_cast<int>(history.size()) != cfg.hist_len)
    throw std::invalid_argument("rollout: history length != hist_len");
  return {std::vector<Frame>(history.begin(), history.end()), 0};
}

inline bool frame_finite(const Frame& f) {
  for (const auto& b : f.slots)
    if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) || !std::isfinite(b.h))
      return false;
  return true;
}

// Continuous prediction mode: each loop predicts pred_len frames, appends
// them and slides the window forward by pred_len.
template <typename T>
void rollout_continue(const Parameters<T>& params, const ModelConfig& cfg, RolloutWindow& window,
                      int loops, const PresenceRule& rule, Prediction& out) {
  for (int loop = 0; loop < loops; ++loop) {
    const int mark_base = window.frames.back().mark + 1;
    Prediction step = predict(params, cfg, {window.frames.data(), window.frames.size()}, rule,
                              window.next_loop, mark_base);
    for (const Frame& f : step.frames)
      if (!frame_finite(f))
        throw std::runtime_error("rollout: non-finite prediction in loop " +
                                 std::to_string(window.next_loop));
    window.frames.erase(window.frames.begin(), window.frames.begin() + cfg.pred_len);
    window.frames.insert(window.frames.end(), step.frames.begin(), step.frames.end());
    out.frames.insert(out.frames.end(), step.frames.begin(), step.frames.end());
    out.loop_of_frame.insert(out.loop_of_frame.end(), step.loop_of_frame.begin(), step.loop_of_frame.end());
    ++window.next_loop;
  }
}

template <typename T>
Prediction rollout(const Parameters<T>& params, const ModelConfig& cfg, std::span<const Frame> history,
                   int loops, const PresenceRule& rule) {
  if (loops < 1) throw std::invalid_argument("rollout: loops must be >= 1");
  if (cfg.pred_len > cfg.hist_len)
    throw std::invalid_argument("rollout: pred_len must not exceed hist_len for window sliding");
  RolloutWindow window = rollout_window_init<T>(cfg, history);
  Prediction out;
  rollout_continue(params, cfg, window, loops, rule, out);
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory extraction.

struct TrajPoint {
  int mark = 0;
  double x = 0, y = 0, len = 0, wid = 0;  // meters
  double speed = 0;                       // m/s from the previous point
  bool has_speed = false;
};

struct SlotTrajectory {
  int slot = 0;
  std::vector<std::vector<TrajPoint>> segments;  // split at absent frames
};

// Per-slot series of denormalized positions and speeds over a frame
// sequence (typically history + prediction). Absent frames or mark jumps
// break a series into segments.
inline std::vector<SlotTrajectory> extract_trajectories(std::span<const Frame> frames,
                                                        const DomainConfig& cfg, const TileOrigin& origin) {
  if (frames.empty()) return {};
  const int maxS = static_cast<int>(frames[0].slots.size());
  std::vector<SlotTrajectory> out;
  for (int s = 0; s < maxS; ++s) {
    SlotTrajectory traj;
    traj.slot = s;
    std::vector<TrajPoint> seg;
    int prev_mark = 0;
    for (const Frame& f : frames) {
      const bool here = s < static_cast<int>(f.present.size()) && f.present[s];
      if (!here || (!seg.empty() && f.mark != prev_mark + 1)) {
        if (!seg.empty()) traj.segments.push_back(std::move(seg));
        seg.clear();
        if (!here) {
          prev_mark = f.mark;
          continue;
        }
      }
      const BoxGeometry g = denormalize(f.slots[s], cfg, origin);
      TrajPoint p;
      p.mark = f.mark;
      p.x = g.x;
      p.y = g.y;
      p.len = g.len;
      p.wid = g.wid;
      if (!seg.empty()) {
        const TrajPoint& q = seg.back();
        p.speed = std::hypot(p.x - q.x, p.y - q.y) / cfg.dt;
        p.has_speed = true;
      }
      seg.push_back(p);
      prev_mark = f.mark;
    }
    if (!seg.empty()) traj.segments.push_back(std::move(seg));
    out.push_back(std::move(traj));
  }
  return out;
}

// Plot-ready export: `loop,frame_mark,slot,x_m,y_m,len_m,wid_m,present,speed_mps`.
// Ground-truth frames may be exported with loop = -1.
inline std::string prediction_to_csv(std::span<const Frame> frames, std::span<const int> loops,
                                     const DomainConfig& cfg, const TileOrigin& origin) {
  if (frames.size() != loops.size())
    throw std::invalid_argument("prediction_to_csv: frames/loops length mismatch");
  // Speeds come from the per-slot segment structure.
  std::vector<SlotTrajectory> trajs = extract_trajectories(frames, cfg, origin);
  const int maxS = frames.empty() ? 0 : static_cast<int>(frames[0].slots.size());
  std::vector<std::vector<std::pair<bool, double>>> speed(frames.size());
  for (auto& row : speed) row.assign(maxS, {false, 0.0});
  std::map<int, std::size_t> row_of_mark;
  for (std::size_t i = 0; i < frames.size(); ++i) row_of_mark[frames[i].mark] = i;
  for (const auto& traj : trajs)
    for (const auto& seg : traj.segments)
      for (const auto& p : seg)
        if (p.has_speed) speed[row_of_mark.at(p.mark)][traj.slot] = {true, p.speed};

  std::string out = "loop,frame_mark,slot,x_m,y_m,len_m,wid_m,present,speed_mps\n";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    for (std::size_t s = 0; s < f.slots.size(); ++s) {
      const BoxGeometry g = denormalize(f.slots[s], cfg, origin);
      out += std::to_string(loops[i]) + "," + std::to_string(f.mark) + "," + std::to_string(s) + "," +
             fmt_double(g.x) + "," + fmt_double(g.y) + "," + fmt_double(g.len) + "," + fmt_double(g.wid) +
             "," + (f.present[s] ? "1" : "0") + ",";
      if (speed[i][s].first) out += fmt_double(speed[i][s].second);
      out += "\n";
    }
  }
  return out;
}

}  // namespace vgt
