#pragma once

// Evaluation metrics: RMSE over box coordinates (both the as-printed
// 1/n-outside-the-root form and the conventional sqrt-of-mean form), box
// IoU, Overlap Rate, Delta Car Number and speed-deviation statistics,
// aggregated into a MetricsReport.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/infer.hpp"
#include "vgt/noise.hpp"

namespace vgt {

struct BoxPair {
  NormBox pd;
  NormBox gt;
};

struct RmseResult {
  double eq2 = 0;          // (1/n) * sqrt(sum of squared diffs)
  double conventional = 0; // sqrt(mean of squared diffs)
  std::int64_t n = 0;
};

// Component scale factors let the same pairs be scored in meters.
struct BoxScale {
  double x = 1, y = 1, w = 1, h = 1;

  static BoxScale meters(const DomainConfig& cfg) { return {cfg.L, cfg.Wd, cfg.len_cap, cfg.wid_cap}; }
};

inline RmseResult rmse_eq2(std::span<const BoxPair> pairs, const BoxScale& scale = {}) {
  if (pairs.empty()) throw std::invalid_argument("rmse_eq2: no scored pairs");
  double sum = 0;
  for (const auto& p : pairs) {
    const double dx = (p.pd.x - p.gt.x) * scale.x;
    const double dy = (p.pd.y - p.gt.y) * scale.y;
    const double dw = (p.pd.w - p.gt.w) * scale.w;
    const double dh = (p.pd.h - p.gt.h) * scale.h;
    sum += dx * dx + dy * dy + dw * dw + dh * dh;
  }
  RmseResult r;
  r.n = static_cast<std::int64_t>(pairs.size());
  r.eq2 = std::sqrt(sum) / static_cast<double>(r.n);
  r.conventional = std::sqrt(sum / static_cast<double>(r.n));
  return r;
}

// Intersection over union of two center-format axis-aligned boxes. A
// degenerate (zero-area) union scores 0 by convention.
inline double iou(const NormBox& a, const NormBox& b) {
  const double ix = std::min(a.x + a.w / 2, b.x + b.w / 2) - std::max(a.x - a.w / 2, b.x - b.w / 2);
  const double iy = std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2);
  const double inter = std::max(0.0, ix) * std::max(0.0, iy);
  const double uni = a.w * a.h + b.w * b.h - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

inline bool boxes_intersect(const NormBox& a, const NormBox& b) {
  const double ix = std::min(a.x + a.w / 2, b.x + b.w / 2) - std::max(a.x - a.w / 2, b.x - b.w / 2);
  const double iy = std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2);
  return ix > 0 && iy > 0;  // strictly positive area; edge contact is not overlap
}

struct OverlapCounts {
  std::int64_t overlapping = 0;
  std::int64_t total = 0;
};

// Counts, within one frame, present vehicles whose box intersects any other
// present box.
inline OverlapCounts overlap_counts(const Frame& f) {
  OverlapCounts c;
  std::vector<int> idx;
  for (std::size_t s = 0; s < f.slots.size(); ++s)
    if (f.present[s]) idx.push_back(static_cast<int>(s));
  c.total = static_cast<std::int64_t>(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    bool hit = false;
    for (std::size_t j = 0; j < idx.size() && !hit; ++j)
      if (i != j && boxes_intersect(f.slots[idx[i]], f.slots[idx[j]])) hit = true;
    if (hit) ++c.overlapping;
  }
  return c;
}

// Proportion of overlapping vehicles to all present vehicles across frames.
inline double overlap_rate(std::span<const Frame> frames) {
  OverlapCounts total;
  for (const Frame& f : frames) {
    const OverlapCounts c = overlap_counts(f);
    total.overlapping += c.overlapping;
    total.total += c.total;
  }
  if (total.total == 0) throw std::invalid_argument("overlap_rate: zero present vehicles");
  return static_cast<double>(total.overlapping) / static_cast<double>(total.total);
}

// Total absolute difference between predicted and true per-frame counts.
inline std::int64_t dcn(std::span<const int> pred_counts, std::span<const int> gt_counts) {
  if (pred_counts.size() != gt_counts.size())
    throw std::invalid_argument("dcn: count sequences differ in length");
  std::int64_t total = 0;
  for (std::size_t i = 0; i < pred_counts.size(); ++i)
    total += std::abs(static_cast<std::int64_t>(pred_counts[i]) - gt_counts[i]);
  return total;
}

struct SpeedDevStats {
  double mean = 0;
  double p95 = 0;  // nearest-rank percentile
  std::int64_t n = 0;
};

inline SpeedDevStats speed_dev_stats(std::vector<double> abs_devs) {
  if (abs_devs.empty()) throw std::invalid_argument("speed_dev_stats: no valid speed pairs");
  SpeedDevStats s;
  s.n = static_cast<std::int64_t>(abs_devs.size());
  double sum = 0;
  for (double d : abs_devs) sum += d;
  s.mean = sum / static_cast<double>(s.n);
  std::sort(abs_devs.begin(), abs_devs.end());
  const std::int64_t rank = (s.n * 95 + 99) / 100;  // ceil(0.95 n), nearest-rank
  s.p95 = abs_devs[static_cast<std::size_t>(std::max<std::int64_t>(rank, 1) - 1)];
  return s;
}

// ---------------------------------------------------------------------------
// Whole-test-set evaluation.

struct MetricsReport {
  std::string task = "prediction";
  std::int64_t n_samples = 0;
  std::int64_t n_frames = 0;       // scored frames
  std::int64_t n_pairs = 0;        // scored (sample, frame, slot) triples
  std::int64_t n_speed_pairs = 0;
  double rmse_eq2_norm = 0;        // as printed, normalized units
  double rmse_conv_norm = 0;       // sqrt-of-mean, normalized units
  double rmse_eq2_m = 0;           // as printed, meters
  double rmse_conv_m = 0;
  double overlap_rate = 0;
  double mean_iou = 0;
  std::int64_t dcn = 0;
  double speed_dev_mean = 0;
  double speed_dev_p95 = 0;
  PresenceRule rule;
  double dt = 0;
  DomainConfig domain;
  std::string checkpoint_id;
  std::string dataset_hash;
};

// What one test case contributes: predicted frames aligned with the sample's
// ground-truth frames starting at gt_begin.
struct CaseResult {
  std::vector<Frame> pred;
  int gt_begin = 0;
};

using CasePredictor = std::function<CaseResult(const Sample&, std::size_t index)>;

// Runs the predictor over every sample and aggregates all five metrics.
// Scored pairs are restricted to slots present in the ground truth; spurious
// predicted vehicles are penalized through DCN, not RMSE.
inline MetricsReport evaluate(std::span<const Sample> test_set, const CasePredictor& predictor,
                              const PresenceRule& rule) {
  if (test_set.empty()) throw std::invalid_argument("evaluate: empty test set");
  rule.validate();

  MetricsReport rep;
  rep.rule = rule;
  rep.domain = test_set[0].meta.cfg;
  rep.dt = rep.domain.dt;
  rep.n_samples = static_cast<std::int64_t>(test_set.size());

  std::vector<BoxPair> pairs;
  double iou_sum = 0;
  OverlapCounts overlap_total;
  std::int64_t dcn_total = 0;
  std::vector<double> speed_devs;

  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const Sample& s = test_set[i];
    CaseResult cr = predictor(s, i);
    const int n_pred = static_cast<int>(cr.pred.size());
    if (n_pred == 0) throw std::runtime_error("evaluate: predictor returned no frames");
    if (cr.gt_begin < 0 || cr.gt_begin + n_pred > static_cast<int>(s.frames.size()))
      throw std::runtime_error("evaluate: predicted range outside sample");

    for (int k = 0; k < n_pred; ++k) {
      Frame& pf = cr.pred[k];
      pf.present = presence_flags(pf, rule);
      const Frame& gf = s.frames[cr.gt_begin + k];
      for (std::size_t slot = 0; slot < gf.slots.size(); ++slot) {
        if (!gf.present[slot]) continue;
        pairs.push_back({pf.slots[slot], gf.slots[slot]});
        iou_sum += iou(pf.slots[slot], gf.slots[slot]);
      }
      const OverlapCounts oc = overlap_counts(pf);
      overlap_total.overlapping += oc.overlapping;
      overlap_total.total += oc.total;
      dcn_total += std::abs(static_cast<std::int64_t>(pf.count_present()) - gf.count_present());
      ++rep.n_frames;
    }

    // Speed deviations: replace the scored range in a copy of the sample,
    // then compare per-slot speeds wherever both series define them on a
    // transition that touches a predicted frame.
    std::vector<Frame> pred_seq(s.frames.begin(), s.frames.end());
    for (int k = 0; k < n_pred; ++k) {
      pred_seq[cr.gt_begin + k] = cr.pred[k];
      pred_seq[cr.gt_begin + k].mark = s.frames[cr.gt_begin + k].mark;
    }
    const TileOrigin origin = tile_origin(s.meta.tile_x, s.meta.tile_y, s.meta.cfg);
    const auto gt_traj = extract_trajectories({s.frames.data(), s.frames.size()}, s.meta.cfg, origin);
    const auto pd_traj = extract_trajectories({pred_seq.data(), pred_seq.size()}, s.meta.cfg, origin);
    const int lo_mark = s.frames[cr.gt_begin].mark;
    const int hi_mark = s.frames[cr.gt_begin + n_pred - 1].mark;
    for (std::size_t slot = 0; slot < gt_traj.size(); ++slot) {
      std::map<int, double> gt_speed, pd_speed;
      for (const auto& seg : gt_traj[slot].segments)
        for (const auto& p : seg)
          if (p.has_speed) gt_speed[p.mark] = p.speed;
      for (const auto& seg : pd_traj[slot].segments)
        for (const auto& p : seg)
          if (p.has_speed) pd_speed[p.mark] = p.speed;
      for (const auto& [mark, vp] : pd_speed) {
        if (mark < lo_mark || mark > hi_mark + 1) continue;  // transition must touch the scored range
        auto it = gt_speed.find(mark);
        if (it == gt_speed.end()) continue;
        speed_devs.push_back(std::abs(vp - it->second));
      }
    }
  }

  if (pairs.empty()) throw std::runtime_error("evaluate: no ground-truth-present slots to score");
  const RmseResult rn = rmse_eq2(pairs);
  const RmseResult rm = rmse_eq2(pairs, BoxScale::meters(rep.domain));
  rep.n_pairs = rn.n;
  rep.rmse_eq2_norm = rn.eq2;
  rep.rmse_conv_norm = rn.conventional;
  rep.rmse_eq2_m = rm.eq2;
  rep.rmse_conv_m = rm.conventional;
  rep.mean_iou = iou_sum / static_cast<double>(rn.n);
  if (overlap_total.total == 0) throw std::runtime_error("evaluate: zero present predicted vehicles");
  rep.overlap_rate = static_cast<double>(overlap_total.overlapping) / static_cast<double>(overlap_total.total);
  rep.dcn = dcn_total;
  if (!speed_devs.empty()) {
    const SpeedDevStats sd = speed_dev_stats(std::move(speed_devs));
    rep.speed_dev_mean = sd.mean;
    rep.speed_dev_p95 = sd.p95;
    rep.n_speed_pairs = sd.n;
  }
  return rep;
}

// The standard prediction task: history in, next pred_len frames out.
template <typename T>
CasePredictor prediction_task(const Parameters<T>& params, const ModelConfig& cfg,
                              const PresenceRule& rule) {
  return [&params, cfg, rule](const Sample& s, std::size_t) {
    const std::span<const Frame> hist{s.frames.data(), static_cast<std::size_t>(cfg.hist_len)};
    Prediction p = predict(params, cfg, hist, rule);
    return CaseResult{std::move(p.frames), cfg.hist_len};
  };
}

// The compensation task: a deterministic interior gap per sample index,
// reconstructed from both sides.
template <typename T>
CasePredictor compensation_task(const Parameters<T>& params, const ModelConfig& cfg,
                                const PresenceRule& rule, double mask_rate, std::uint64_t seed) {
  return [&params, cfg, rule, mask_rate, seed](const Sample& s, std::size_t index) {
    const int seq_len = static_cast<int>(s.frames.size());
    const int gap_len = compensation_gap_len(seq_len, mask_rate);
    if (gap_len == 0) throw std::runtime_error("compensation_task: empty gap");
    std::mt19937_64 rng = named_stream(seed, "eval-gap", index);
    const int gap_start = draw_gap_start(seq_len, gap_len, rng);
    std::vector<Frame> masked(s.frames.begin(), s.frames.end());
    for (int k = gap_start; k < gap_start + gap_len; ++k) masked[k].masked = true;
    const Mat<T> out =
        reconstruct_gap<T>({masked.data(), masked.size()}, gap_start, gap_len, params, cfg);
    CaseResult cr;
    cr.gt_begin = gap_start;
    for (int k = 0; k < gap_len; ++k) {
      Frame f = token_to_frame(out, k, cfg.maxS, s.frames[gap_start + k].mark);
      f.present = presence_flags(f, rule);
      cr.pred.push_back(std::move(f));
    }
    return cr;
  };
}

// ---------------------------------------------------------------------------
// Report serialization.

inline std::string report_to_json(const MetricsReport& r) {
  std::string out = "{";
  out += "\"task\":\"" + r.task + "\"";
  out += ",\"n_samples\":" + std::to_string(r.n_samples);
  out += ",\"n_frames\":" + std::to_string(r.n_frames);
  out += ",\"n_pairs\":" + std::to_string(r.n_pairs);
  out += ",\"n_speed_pairs\":" + std::to_string(r.n_speed_pairs);
  out += ",\"rmse_eq2_norm\":" + fmt_double(r.rmse_eq2_norm);
  out += ",\"rmse_conv_norm\":" + fmt_double(r.rmse_conv_norm);
  out += ",\"rmse_eq2_m\":" + fmt_double(r.rmse_eq2_m);
  out += ",\"rmse_conv_m\":" + fmt_double(r.rmse_conv_m);
  out += ",\"overlap_rate\":" + fmt_double(r.overlap_rate);
  out += ",\"mean_iou\":" + fmt_double(r.mean_iou);
  out += ",\"dcn\":" + std::to_string(r.dcn);
  out += ",\"speed_dev_mean\":" + fmt_double(r.speed_dev_mean);
  out += ",\"speed_dev_p95\":" + fmt_double(r.speed_dev_p95);
  out += ",\"presence_eps_w\":" + fmt_double(r.rule.eps_w);
  out += ",\"presence_eps_h\":" + fmt_double(r.rule.eps_h);
  out += ",\"dt\":" + fmt_double(r.dt);
  out += ",\"domain\":" + domain_cfg_to_json(r.domain);
  out += ",\"checkpoint_id\":\"" + r.checkpoint_id + "\"";
  out += ",\"dataset_hash\":\"" + r.dataset_hash + "\"";
  out += "}";
  return out;
}

inline std::string report_to_csv(const MetricsReport& r) {
  std::string out =
      "task,n_samples,n_frames,n_pairs,n_speed_pairs,rmse_eq2_norm,rmse_conv_norm,rmse_eq2_m,rmse_conv_m,"
      "overlap_rate,mean_iou,dcn,speed_dev_mean,speed_dev_p95,presence_eps_w,presence_eps_h,dt,"
      "checkpoint_id,dataset_hash\n";
  out += r.task + "," + std::to_string(r.n_samples) + "," + std::to_string(r.n_frames) + "," +
         std::to_string(r.n_pairs) + "," + std::to_string(r.n_speed_pairs) + "," +
         fmt_double(r.rmse_eq2_norm) + "," + fmt_double(r.rmse_conv_norm) + "," + fmt_double(r.rmse_eq2_m) +
         "," + fmt_double(r.rmse_conv_m) + "," + fmt_double(r.overlap_rate) + "," + fmt_double(r.mean_iou) +
         "," + std::to_string(r.dcn) + "," + fmt_double(r.speed_dev_mean) + "," +
         fmt_double(r.speed_dev_p95) + "," + fmt_double(r.rule.eps_w) + "," + fmt_double(r.rule.eps_h) +
         "," + fmt_double(r.dt) + "," + r.checkpoint_id + "," + r.dataset_hash + "\n";
  return out;
}

inline std::string report_summary(const MetricsReport& r) {
  char buf[256];
  std::string out;
  out += "task:            " + r.task + "\n";
  std::snprintf(buf, sizeof(buf), "samples/frames:  %lld / %lld\n", static_cast<long long>(r.n_samples),
                static_cast<long long>(r.n_frames));
  out += buf;
  std::snprintf(buf, sizeof(buf), "rmse (eq2):      %.6f normalized, %.6f m\n", r.rmse_eq2_norm,
                r.rmse_eq2_m);
  out += buf;
  std::snprintf(buf, sizeof(buf), "rmse (sqrt-mean):%.6f normalized, %.6f m\n", r.rmse_conv_norm,
                r.rmse_conv_m);
  out += buf;
  std::snprintf(buf, sizeof(buf), "overlap rate:    %.4f%%\n", 100.0 * r.overlap_rate);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mean IoU:        %.4f\n", r.mean_iou);
  out += buf;
  std::snprintf(buf, sizeof(buf), "DCN:             %lld\n", static_cast<long long>(r.dcn));
  out += buf;
  std::snprintf(buf, sizeof(buf), "speed dev:       mean %.4f m/s, p95 %.4f m/s (%lld pairs)\n",
                r.speed_dev_mean, r.speed_dev_p95, static_cast<long long>(r.n_speed_pairs));
  out += buf;
  std::snprintf(buf, sizeof(buf), "presence:        w>%.3f h>%.3f, dt=%.3fs\n", r.rule.eps_w, r.rule.eps_h,
                r.dt);
  out += buf;
  out += "checkpoint:      " + r.checkpoint_id + "\n";
  out += "dataset:         " + r.dataset_hash + "\n";
  return out;
}

}  // namespace vgt
