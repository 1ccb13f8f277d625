#pragma once

// Deterministic multi-lane car-following corpus generator. The follower rule
// is Newell-style: a vehicle's next position is bounded by its leader's
// position one reaction time ago minus the minimum gap, which keeps the
// no-overlap and speed-bound invariants exact at every raw step.
//
// Unconstrained motion is computed from a (position, time) anchor instead of
// accumulating increments, so a vehicle that never meets a leader follows
// x(t) = x0 + vmax * t to the last bit.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/data.hpp"
#include "vgt/rng.hpp"

namespace vgt {

struct SynConfig {
  int lanes = 3;
  double lane_width = 3.5;         // m
  double road_len = 600.0;         // m
  double dt_raw = 0.2;             // s
  double v_free = 25.0;            // m/s
  double min_gap = 8.0;            // m, center-to-center spacing floor
  double reaction = 1.0;           // s
  double spawn_rate = 0.25;        // veh/s/lane
  double lane_change_prob = 0.002; // per vehicle per raw step
  std::uint64_t seed = 1;

  void validate() const {
    if (lanes < 1 || lane_width <= 0 || road_len <= 0 || dt_raw <= 0 || v_free <= 0 || min_gap <= 0 ||
        reaction <= 0 || spawn_rate < 0)
      throw std::invalid_argument("SynConfig: all physical fields must be positive");
    if (lane_change_prob < 0 || lane_change_prob > 1)
      throw std::invalid_argument("SynConfig: lane_change_prob must be in [0,1]");
    // A lane cannot carry more than v_free/min_gap vehicles per second.
    if (spawn_rate > v_free / min_gap)
      throw std::invalid_argument("SynConfig: infeasible, spawn_rate exceeds lane capacity v_free/min_gap");
  }

  double lane_center(int lane) const { return (lane + 0.5) * lane_width; }
};

class Simulation {
 public:
  explicit Simulation(const SynConfig& cfg)
      : cfg_(cfg),
        rng_(named_stream(cfg.seed, "syngen")),
        lag_steps_(std::max<int>(1, static_cast<int>(std::llround(cfg.reaction / cfg.dt_raw)))) {
    cfg_.validate();
  }

  // Manual vehicle placement, used with spawn_rate = 0 for scripted scenes.
  int add_vehicle(int lane, double x, double vmax, double len = 4.8, double wid = 1.9) {
    if (lane < 0 || lane >= cfg_.lanes) throw std::invalid_argument("add_vehicle: lane out of range");
    Vehicle v;
    v.id = next_id_++;
    v.lane = lane;
    v.x = x;
    v.anchor_x = x;
    v.anchor_t = time();
    v.vmax = vmax;
    v.len = len;
    v.wid = wid;
    v.y_from = v.y_to = cfg_.lane_center(lane);
    v.history.assign(1, x);
    vehicles_.push_back(v);
    return v.id;
  }

  double time() const { return step_ * cfg_.dt_raw; }
  std::int64_t step_count() const { return step_; }
  std::size_t active_vehicles() const { return vehicles_.size(); }

  void step() {
    spawn();
    lane_changes();
    advance();
    ++step_;
  }

  void emit(std::vector<TrackPoint>& out) const {
    std::vector<const Vehicle*> order;
    order.reserve(vehicles_.size());
    for (const auto& v : vehicles_) order.push_back(&v);
    std::sort(order.begin(), order.end(), [](const Vehicle* a, const Vehicle* b) { return a->id < b->id; });
    const double t = time();
    for (const Vehicle* v : order)
      out.push_back({"v" + std::to_string(v->id), t, v->x, v->y_at(t, lane_change_duration_), v->len, v->wid});
  }

 private:
  struct Vehicle {
    int id = 0;
    int lane = 0;
    double x = 0;
    double anchor_x = 0;  // free-flow reference point
    double anchor_t = 0;
    double y_from = 0, y_to = 0;
    double change_t0 = -1e9;
    double vmax = 0;
    double len = 4.8, wid = 1.9;
    std::deque<double> history;  // positions at past steps, newest last

    double y_at(double t, double duration) const {
      const double u = (t - change_t0) / duration;
      if (u >= 1.0) return y_to;
      if (u <= 0.0) return y_from;
      return y_from + u * (y_to - y_from);
    }

    double lagged_x(int lag) const {
      const int idx = static_cast<int>(history.size()) - 1 - lag;
      return history[static_cast<std::size_t>(std::max(idx, 0))];
    }
  };

  void spawn() {
    if (cfg_.spawn_rate <= 0) return;
    const double p = std::min(1.0, cfg_.spawn_rate * cfg_.dt_raw);
    for (int lane = 0; lane < cfg_.lanes; ++lane) {
      if (uniform01(rng_) >= p) continue;
      // Entry stays blocked while the rearmost vehicle is too close.
      const Vehicle* rear = nullptr;
      for (const auto& v : vehicles_)
        if (v.lane == lane && (!rear || v.x < rear->x)) rear = &v;
      if (rear && rear->lagged_x(lag_steps_) < cfg_.min_gap) continue;
      const double vmax = cfg_.v_free * uniform_range(rng_, 0.85, 1.0);
      const double len = uniform_range(rng_, 4.0, 5.6);
      const double wid = uniform_range(rng_, 1.7, 2.1);
      add_vehicle(lane, 0.0, vmax, len, wid);
    }
  }

  // Index of the nearest vehicle ahead of x in `lane`, or -1.
  int leader_of(double x, int lane, int skip_id) const {
    int best = -1;
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
      const auto& v = vehicles_[i];
      if (v.lane != lane || v.id == skip_id || v.x <= x) continue;
      if (best < 0 || v.x < vehicles_[best].x) best = static_cast<int>(i);
    }
    return best;
  }

  int follower_of(double x, int lane, int skip_id) const {
    int best = -1;
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
      const auto& v = vehicles_[i];
      if (v.lane != lane || v.id == skip_id || v.x > x) continue;
      if (best < 0 || v.x > vehicles_[best].x) best = static_cast<int>(i);
    }
    return best;
  }

  void lane_changes() {
    if (cfg_.lane_change_prob <= 0 || cfg_.lanes < 2) return;
    for (auto& v : vehicles_) {
      if (uniform01(rng_) >= cfg_.lane_change_prob) continue;
      if (time() - v.change_t0 < lane_change_duration_) continue;
      int dir = (bounded(rng_, 2) == 0) ? -1 : 1;
      int target = v.lane + dir;
      if (target < 0 || target >= cfg_.lanes) {
        target = v.lane - dir;
        if (target < 0 || target >= cfg_.lanes) continue;
      }
      const int lead = leader_of(v.x, target, v.id);
      const int foll = follower_of(v.x, target, v.id);
      // Both target-lane gaps must already satisfy the Newell bound on the
      // lagged positions, otherwise the spacing invariant could break.
      if (lead >= 0 && vehicles_[lead].lagged_x(lag_steps_) - v.x < cfg_.min_gap) continue;
      if (foll >= 0 && v.lagged_x(lag_steps_) - vehicles_[foll].x < cfg_.min_gap) continue;
      v.lane = target;
      v.y_from = v.y_at(time(), lane_change_duration_);
      v.y_to = cfg_.lane_center(target);
      v.change_t0 = time();
    }
  }

  void advance() {
    const double t_next = (step_ + 1) * cfg_.dt_raw;
    std::vector<double> new_x(vehicles_.size());
    std::vector<std::uint8_t> constrained(vehicles_.size(), 0);
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
      Vehicle& v = vehicles_[i];
      const double free_x = v.anchor_x + v.vmax * (t_next - v.anchor_t);
      double bound = std::numeric_limits<double>::infinity();
      const int lead = leader_of(v.x, v.lane, v.id);
      if (lead >= 0) bound = vehicles_[lead].lagged_x(lag_steps_) - cfg_.min_gap;
      if (free_x <= bound) {
        new_x[i] = free_x;
      } else {
        new_x[i] = std::max(bound, v.x);  // never reverse
        constrained[i] = 1;
      }
    }
    for (std::size_t i = 0; i < vehicles_.size(); ++i) {
      Vehicle& v = vehicles_[i];
      v.x = new_x[i];
      if (constrained[i]) {
        v.anchor_x = v.x;
        v.anchor_t = t_next;
      }
      v.history.push_back(v.x);
      if (static_cast<int>(v.history.size()) > lag_steps_ + 2) v.history.pop_front();
    }
    std::erase_if(vehicles_, [&](const Vehicle& v) { return v.x > cfg_.road_len; });
  }

  SynConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<Vehicle> vehicles_;
  int next_id_ = 0;
  std::int64_t step_ = 0;
  int lag_steps_;
  static constexpr double lane_change_duration_ = 1.5;  // s
};

inline std::vector<TrackPoint> gen_corpus(const SynConfig& cfg, double duration) {
  if (duration <= 0) throw std::invalid_argument("gen_corpus: duration must be positive");
  Simulation sim(cfg);
  std::vector<TrackPoint> out;
  const std::int64_t steps = static_cast<std::int64_t>(std::llround(duration / cfg.dt_raw));
  for (std::int64_t s = 0; s < steps; ++s) {
    sim.emit(out);
    sim.step();
  }
  return out;
}

}  // namespace vgt
