#pragma once

// Core data model: raw track points, the spatio-temporal domain config,
// normalized boxes, frames and samples, plus the text formats they travel in
// (raw tracks as CSV, samples as one JSON record per line).

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vgt/io.hpp"

namespace vgt {

struct TrackPoint {
  std::string vehicle_id;
  double t = 0;    // seconds
  double x = 0;    // along-road position, meters (box center)
  double y = 0;    // cross-road position, meters (box center)
  double len = 0;  // vehicle length, meters
  double wid = 0;  // vehicle width, meters
};

struct DomainConfig {
  double L = 300.0;     // domain length, m
  double Wd = 20.0;     // domain width, m
  int maxS = 10;        // vehicle slots per frame
  int hist_len = 20;    // input frames
  int pred_len = 10;    // target frames
  int stride = 1;       // raw-frame subsampling step
  double dt = 0.2;      // seconds between selected frames
  double len_cap = 20.0;
  double wid_cap = 4.0;

  void validate() const {
    if (L <= 0 || Wd <= 0 || dt <= 0) throw std::invalid_argument("DomainConfig: L, Wd, dt must be positive");
    if (maxS < 1) throw std::invalid_argument("DomainConfig: maxS must be >= 1");
    if (hist_len < 2) throw std::invalid_argument("DomainConfig: hist_len must be >= 2");
    if (pred_len < 1) throw std::invalid_argument("DomainConfig: pred_len must be >= 1");
    if (stride < 1) throw std::invalid_argument("DomainConfig: stride must be >= 1");
  }

  int total_frames() const { return hist_len + pred_len; }
  double dt_raw() const { return dt / stride; }
  // Raw frames spanned by one time window.
  std::int64_t window_raw_frames() const { return static_cast<std::int64_t>(total_frames()) * stride; }

  bool operator==(const DomainConfig&) const = default;
};

// Dimensionless box; (x, y) is the box center.
struct NormBox {
  double x = 0, y = 0, w = 0, h = 0;
  bool operator==(const NormBox&) const = default;
};

struct Frame {
  int mark = 0;  // relative time index within the sample
  bool masked = false;
  std::vector<NormBox> slots;          // exactly maxS entries
  std::vector<std::uint8_t> present;   // maxS flags

  Frame() = default;
  explicit Frame(int maxS) : slots(maxS), present(maxS, 0) {}

  int count_present() const {
    int n = 0;
    for (auto p : present) n += p ? 1 : 0;
    return n;
  }

  bool operator==(const Frame&) const = default;
};

struct SampleMeta {
  std::string site;
  int tile_x = 0;
  int tile_y = 0;
  double t0 = 0;  // window start time, seconds
  DomainConfig cfg;

  bool operator==(const SampleMeta&) const = default;
};

struct Sample {
  SampleMeta meta;
  std::vector<Frame> frames;  // hist_len + pred_len, chronological before noise

  bool operator==(const Sample&) const = default;
};

// ---------------------------------------------------------------------------
// Raw track CSV: header `vehicle_id,t,x,y,len,wid`.

inline std::string tracks_to_csv(const std::vector<TrackPoint>& pts) {
  std::string out = "vehicle_id,t,x,y,len,wid\n";
  for (const auto& p : pts) {
    out += p.vehicle_id;
    out += ',';
    out += fmt_double(p.t);
    out += ',';
    out += fmt_double(p.x);
    out += ',';
    out += fmt_double(p.y);
    out += ',';
    out += fmt_double(p.len);
    out += ',';
    out += fmt_double(p.wid);
    out += '\n';
  }
  return out;
}

inline std::vector<TrackPoint> tracks_from_csv(const std::string& text) {
  std::vector<TrackPoint> pts;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("track csv: empty file");
  if (trim(line) != "vehicle_id,t,x,y,len,wid")
    throw std::runtime_error("track csv: bad header '" + trim(line) + "'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 6)
      throw std::runtime_error("track csv: line " + std::to_string(lineno) + ": expected 6 fields");
    TrackPoint p;
    p.vehicle_id = trim(f[0]);
    try {
      p.t = std::stod(f[1]);
      p.x = std::stod(f[2]);
      p.y = std::stod(f[3]);
      p.len = std::stod(f[4]);
      p.wid = std::stod(f[5]);
    } catch (const std::exception&) {
      throw std::runtime_error("track csv: line " + std::to_string(lineno) + ": bad number");
    }
    pts.push_back(std::move(p));
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Dataset records. The writer is hand-rolled so float formatting and key
// order are byte-stable; parsing goes through nlohmann::json.

inline void append_json_escaped(std::string& out, const std::string& s) {
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
}

inline std::string domain_cfg_to_json(const DomainConfig& c) {
  std::string s = "{\"L\":" + fmt_double(c.L) + ",\"Wd\":" + fmt_double(c.Wd) +
                  ",\"maxS\":" + std::to_string(c.maxS) + ",\"hist_len\":" + std::to_string(c.hist_len) +
                  ",\"pred_len\":" + std::to_string(c.pred_len) + ",\"stride\":" + std::to_string(c.stride) +
                  ",\"dt\":" + fmt_double(c.dt) + ",\"len_cap\":" + fmt_double(c.len_cap) +
                  ",\"wid_cap\":" + fmt_double(c.wid_cap) + "}";
  return s;
}

inline std::string sample_to_json(const Sample& s) {
  std::string out = "{\"meta\":{\"site\":\"";
  append_json_escaped(out, s.meta.site);
  out += "\",\"tile_x\":" + std::to_string(s.meta.tile_x) + ",\"tile_y\":" + std::to_string(s.meta.tile_y) +
         ",\"t0\":" + fmt_double(s.meta.t0) + ",\"cfg\":" + domain_cfg_to_json(s.meta.cfg) + "},\"frames\":[";
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    const Frame& f = s.frames[i];
    if (i) out += ',';
    out += "{\"mark\":" + std::to_string(f.mark) + ",\"masked\":";
    out += f.masked ? "true" : "false";
    out += ",\"slots\":[";
    for (std::size_t j = 0; j < f.slots.size(); ++j) {
      const NormBox& b = f.slots[j];
      if (j) out += ',';
      out += '[' + fmt_double(b.x) + ',' + fmt_double(b.y) + ',' + fmt_double(b.w) + ',' + fmt_double(b.h) + ']';
    }
    out += "],\"present\":[";
    for (std::size_t j = 0; j < f.present.size(); ++j) {
      if (j) out += ',';
      out += f.present[j] ? "true" : "false";
    }
    out += "]}";
  }
  out += "]}";
  return out;
}

inline DomainConfig domain_cfg_from_json(const nlohmann::json& j) {
  DomainConfig c;
  c.L = j.at("L").get<double>();
  c.Wd = j.at("Wd").get<double>();
  c.maxS = j.at("maxS").get<int>();
  c.hist_len = j.at("hist_len").get<int>();
  c.pred_len = j.at("pred_len").get<int>();
  c.stride = j.at("stride").get<int>();
  c.dt = j.at("dt").get<double>();
  c.len_cap = j.at("len_cap").get<double>();
  c.wid_cap = j.at("wid_cap").get<double>();
  return c;
}

inline Sample sample_from_json(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  Sample s;
  const auto& m = j.at("meta");
  s.meta.site = m.at("site").get<std::string>();
  s.meta.tile_x = m.at("tile_x").get<int>();
  s.meta.tile_y = m.at("tile_y").get<int>();
  s.meta.t0 = m.at("t0").get<double>();
  s.meta.cfg = domain_cfg_from_json(m.at("cfg"));
  for (const auto& jf : j.at("frames")) {
    Frame f(s.meta.cfg.maxS);
    f.mark = jf.at("mark").get<int>();
    f.masked = jf.at("masked").get<bool>();
    const auto& slots = jf.at("slots");
    const auto& present = jf.at("present");
    if (static_cast<int>(slots.size()) != s.meta.cfg.maxS || static_cast<int>(present.size()) != s.meta.cfg.maxS)
      throw std::runtime_error("sample record: slot count does not match maxS");
    for (int k = 0; k < s.meta.cfg.maxS; ++k) {
      f.slots[k].x = slots[k][0].get<double>();
      f.slots[k].y = slots[k][1].get<double>();
      f.slots[k].w = slots[k][2].get<double>();
      f.slots[k].h = slots[k][3].get<double>();
      f.present[k] = present[k].get<bool>() ? 1 : 0;
    }
    s.frames.push_back(std::move(f));
  }
  return s;
}

inline std::string dataset_to_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_json(s);
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> dataset_from_jsonl(const std::string& text) {
  std::vector<Sample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(sample_from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vgt
