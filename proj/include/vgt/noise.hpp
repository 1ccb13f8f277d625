#pragma once

// The two pretraining corruptions and their random application policy:
//   - span masking over history frames (Poisson-distributed span lengths,
//     total length fixed by mask_rate), and
//   - swapping one pair of frames, mark and content travelling together.
//
// Only the first hist_len frames of a sample are ever corrupted; targets
// stay clean. Masked frames keep their slot data; the network substitutes a
// learned vector at embedding time, since a [MASK] code cannot be expressed
// in box coordinates without colliding with valid data.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "vgt/data.hpp"
#include "vgt/rng.hpp"

namespace vgt {

struct MaskSpan {
  int start = 0;
  int len = 0;
};

struct NoisePlan {
  std::vector<MaskSpan> mask_spans;            // chronological (pre-swap) indices
  std::optional<std::pair<int, int>> swap;     // i != j, both < hist_len

  int masked_frames() const {
    int n = 0;
    for (const auto& s : mask_spans) n += s.len;
    return n;
  }
};

struct NoiseConfig {
  double mask_rate = 0.15;  // fraction of history frames masked when masking fires
  double lambda = 3.0;      // Poisson mean span length
  double p_mask = 0.5;      // per-sample application probabilities
  double p_swap = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (mask_rate < 0 || mask_rate >= 1) throw std::invalid_argument("NoiseConfig: mask_rate must be in [0,1)");
    if (lambda <= 0) throw std::invalid_argument("NoiseConfig: lambda must be positive");
    if (p_mask < 0 || p_mask > 1 || p_swap < 0 || p_swap > 1)
      throw std::invalid_argument("NoiseConfig: probabilities must be in [0,1]");
  }
};

// Draws the mask spans for one history: span lengths come from
// Poisson(lambda) with zero draws rejected, the final draw truncated so the
// lengths sum to round(mask_rate * hist_len), and the spans are placed at
// uniformly random non-overlapping starts.
inline std::vector<MaskSpan> plan_mask(int hist_len, const NoiseConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (hist_len < 1) throw std::invalid_argument("plan_mask: hist_len must be >= 1");
  const int total = static_cast<int>(std::llround(cfg.mask_rate * hist_len));
  if (total == 0) return {};

  std::vector<int> lens;
  int remaining = total;
  while (remaining > 0) {
    int drawn = poisson(rng, cfg.lambda);
    if (drawn == 0) continue;
    drawn = std::min(drawn, remaining);
    lens.push_back(drawn);
    remaining -= drawn;
  }
  // Random span order, then uniformly random placement via the gap bijection:
  // a k-subset of [0, free + k) encodes the k inter-span gaps.
  for (std::size_t i = lens.size(); i > 1; --i)
    std::swap(lens[i - 1], lens[bounded(rng, i)]);

  const int k = static_cast<int>(lens.size());
  const int free_slots = hist_len - total;
  std::vector<int> picks;
  picks.reserve(k);
  // Floyd's algorithm for a uniform k-subset of [0, free_slots + k).
  for (int j = free_slots + k - k; j < free_slots + k; ++j) {
    int r = static_cast<int>(bounded(rng, static_cast<std::uint64_t>(j) + 1));
    if (std::find(picks.begin(), picks.end(), r) != picks.end()) r = j;
    picks.push_back(r);
  }
  std::sort(picks.begin(), picks.end());

  std::vector<MaskSpan> spans;
  spans.reserve(k);
  int prev_pick = -1;
  int cursor = 0;
  for (int i = 0; i < k; ++i) {
    const int gap = picks[i] - prev_pick - 1;
    prev_pick = picks[i];
    cursor += gap;
    spans.push_back({cursor, lens[i]});
    cursor += lens[i];
  }
  return spans;
}

inline void check_spans(const std::vector<MaskSpan>& spans, int hist_len) {
  for (const auto& s : spans)
    if (s.start < 0 || s.len < 1 || s.start + s.len > hist_len)
      throw std::out_of_range("mask span [" + std::to_string(s.start) + ", " +
                              std::to_string(s.start + s.len) + ") outside history of " +
                              std::to_string(hist_len) + " frames");
}

// Marks the covered frames; sequence length and slot contents are unchanged,
// one [MASK] per selected frame.
inline Sample apply_mask(Sample s, const std::vector<MaskSpan>& spans) {
  check_spans(spans, s.meta.cfg.hist_len);
  for (const auto& sp : spans)
    for (int f = sp.start; f < sp.start + sp.len; ++f) s.frames[f].masked = true;
  return s;
}

// Exchanges the whole (slots, present, masked, mark) bundles at sequence
// positions i and j: the token multiset is preserved, the order is not.
inline Sample apply_swap(Sample s, int i, int j) {
  const int hist = s.meta.cfg.hist_len;
  if (i == j) throw std::invalid_argument("apply_swap: i == j is disallowed");
  if (i < 0 || j < 0 || i >= hist || j >= hist)
    throw std::out_of_range("apply_swap: indices must lie in [0, hist_len)");
  std::swap(s.frames[i], s.frames[j]);
  return s;
}

// Random application policy. Masking fires with p_mask, one swap fires
// independently with p_swap; masking is applied before swapping, so plan
// spans are in chronological indices.
inline std::pair<Sample, NoisePlan> corrupt(const Sample& s, const NoiseConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int hist = s.meta.cfg.hist_len;
  if (static_cast<int>(s.frames.size()) < hist)
    throw std::invalid_argument("corrupt: sample has fewer than hist_len frames");

  NoisePlan plan;
  Sample out = s;
  const bool do_mask = uniform01(rng) < cfg.p_mask;
  if (do_mask) {
    plan.mask_spans = plan_mask(hist, cfg, rng);
    out = apply_mask(std::move(out), plan.mask_spans);
  }
  const bool do_swap = uniform01(rng) < cfg.p_swap;
  if (do_swap && hist >= 2) {
    int i = static_cast<int>(bounded(rng, hist));
    int j = static_cast<int>(bounded(rng, hist - 1));
    if (j >= i) ++j;
    out = apply_swap(std::move(out), i, j);
    plan.swap = std::make_pair(i, j);
  }
  return {std::move(out), std::move(plan)};
}

// Gap planning for the compensation task: the whole masked budget forms one
// contiguous interior gap, reconstructed from both sides.
inline int compensation_gap_len(int seq_len, double mask_rate) {
  const int g = static_cast<int>(std::llround(mask_rate * seq_len));
  return std::min(g, std::max(0, seq_len - 2));
}

// Uniform interior gap start; plans covering an endpoint are rejected and
// resampled so both sides of the gap stay known.
inline int draw_gap_start(int seq_len, int gap_len, std::mt19937_64& rng) {
  if (gap_len > seq_len - 2) throw std::invalid_argument("draw_gap_start: gap too long for sequence");
  while (true) {
    const int start = static_cast<int>(bounded(rng, static_cast<std::uint64_t>(seq_len - gap_len + 1)));
    if (start >= 1 && start + gap_len <= seq_len - 1) return start;
  }
}

// Reproducibility sidecar: one plan per line, same structured-text style as
// the dataset file.
inline std::string noise_plan_to_json(const NoisePlan& p) {
  std::string out = "{\"mask_spans\":[";
  for (std::size_t i = 0; i < p.mask_spans.size(); ++i) {
    if (i) out += ',';
    out += "[" + std::to_string(p.mask_spans[i].start) + "," + std::to_string(p.mask_spans[i].len) + "]";
  }
  out += "],\"swap\":";
  if (p.swap)
    out += "[" + std::to_string(p.swap->first) + "," + std::to_string(p.swap->second) + "]";
  else
    out += "null";
  out += "}";
  return out;
}

}  // namespace vgt
