#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "vgt/ingest.hpp"
#include "vgt/syngen.hpp"

using namespace vgt;

namespace {

TrackPoint pt(const std::string& id, double t, double x, double y, double len = 5.0, double wid = 2.0) {
  return {id, t, x, y, len, wid};
}

// Straight-line corpus: one vehicle per entry, constant speed.
std::vector<TrackPoint> line_track(const std::string& id, double x0, double v, double y, int frames,
                                   double dt) {
  std::vector<TrackPoint> out;
  for (int k = 0; k < frames; ++k) out.push_back(pt(id, k * dt, x0 + v * (k * dt), y));
  return out;
}

}  // namespace

TEST_CASE("normalize divides by the domain extents") {
  DomainConfig cfg;
  TileOrigin origin{0, 0};
  NormBox b = normalize(pt("a", 0, 150.0, 10.0, 5.0, 2.0), cfg, origin);
  CHECK(b.x == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(b.y == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(b.w == Catch::Approx(0.25).epsilon(1e-12));
  CHECK(b.h == Catch::Approx(0.5).epsilon(1e-12));

  // Tile-local coordinates.
  NormBox b2 = normalize(pt("a", 0, 450.0, 10.0), cfg, tile_origin(1, 0, cfg));
  CHECK(b2.x == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("normalize rejects boxes over the caps, naming the field") {
  DomainConfig cfg;
  TileOrigin origin{0, 0};
  CHECK_THROWS_WITH(normalize(pt("a", 0, 10, 10, 21.0, 2.0), cfg, origin),
                    Catch::Matchers::ContainsSubstring("len"));
  CHECK_THROWS_WITH(normalize(pt("a", 0, 10, 10, 5.0, 4.5), cfg, origin),
                    Catch::Matchers::ContainsSubstring("wid"));
  CHECK_THROWS_AS(normalize(pt("a", 0, 10, 10, 0.0, 2.0), cfg, origin), std::out_of_range);
}

TEST_CASE("denormalize inverts normalize") {
  DomainConfig cfg;
  NormBox b{0.5, 0.25, 0.25, 0.5};
  BoxGeometry g = denormalize(b, cfg, tile_origin(0, 0, cfg));
  CHECK(g.x == Catch::Approx(150.0));
  CHECK(g.len == Catch::Approx(5.0));

  // Round trip over random in-range points, including negative tiles.
  auto rng = named_stream(11, "roundtrip");
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const int tx = static_cast<int>(bounded(rng, 7)) - 3;
    const int ty = static_cast<int>(bounded(rng, 5)) - 2;
    const TileOrigin origin = tile_origin(tx, ty, cfg);
    TrackPoint p = pt("r", 0, origin.x0 + uniform01(rng) * cfg.L, origin.y0 + uniform01(rng) * cfg.Wd,
                      uniform_range(rng, 0.5, 20.0), uniform_range(rng, 0.5, 4.0));
    const BoxGeometry g2 = denormalize(normalize(p, cfg, origin), cfg, origin);
    worst = std::max({worst, std::abs(g2.x - p.x), std::abs(g2.y - p.y), std::abs(g2.len - p.len),
                      std::abs(g2.wid - p.wid)});
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("every point lands in exactly one spatial tile") {
  DomainConfig cfg;
  auto rng = named_stream(12, "tiles");
  for (int i = 0; i < 500; ++i) {
    const double x = uniform_range(rng, -900.0, 900.0);
    const double y = uniform_range(rng, -60.0, 60.0);
    int hits = 0;
    for (int tx = -4; tx <= 4; ++tx)
      for (int ty = -4; ty <= 4; ++ty) {
        const TileOrigin o = tile_origin(tx, ty, cfg);
        if (x >= o.x0 && x < o.x0 + cfg.L && y >= o.y0 && y < o.y0 + cfg.Wd) ++hits;
      }
    CHECK(hits == 1);
  }
}

TEST_CASE("partition splits a crossing vehicle into two tile windows") {
  DomainConfig cfg;
  // 30 raw frames covering x in [0, 600): one time window, two spatial tiles.
  auto tracks = line_track("a", 0.0, 100.0, 5.0, 30, cfg.dt_raw());
  PartitionResult res = partition(tracks, cfg);
  REQUIRE(res.windows.size() == 2);
  CHECK(res.windows[0].tile_x == 0);
  CHECK(res.windows[1].tile_x == 1);
  CHECK(res.windows[0].tile_y == 0);
}

TEST_CASE("partition drops windows with more than maxS vehicles") {
  DomainConfig cfg;
  std::vector<TrackPoint> tracks;
  for (int v = 0; v < 11; ++v) {
    auto t = line_track("v" + std::to_string(v), 10.0 + 5 * v, 1.0, 0.5 + 1.7 * v, 30, cfg.dt_raw());
    tracks.insert(tracks.end(), t.begin(), t.end());
  }
  PartitionResult res = partition(tracks, cfg);
  CHECK(res.windows.empty());
  REQUIRE_FALSE(res.diagnostics.empty());
  CHECK(res.diagnostics.back().find("exceed") != std::string::npos);
}

TEST_CASE("partition rejects vehicles with non-monotone timestamps") {
  DomainConfig cfg;
  auto good = line_track("good", 0.0, 10.0, 5.0, 30, cfg.dt_raw());
  std::vector<TrackPoint> tracks = good;
  tracks.push_back(pt("bad", 1.0, 10, 5));
  tracks.push_back(pt("bad", 0.8, 12, 5));
  PartitionResult res = partition(tracks, cfg);
  REQUIRE(res.windows.size() == 1);
  REQUIRE(res.windows[0].tracks.size() == 1);
  CHECK(res.windows[0].tracks[0].vehicle_id == "good");
  bool noted = false;
  for (const auto& d : res.diagnostics) noted = noted || d.find("non-monotone") != std::string::npos;
  CHECK(noted);
}

TEST_CASE("partition window count matches a brute-force tiling oracle") {
  SynConfig syn;
  syn.seed = 77;
  syn.road_len = 620.0;
  syn.spawn_rate = 0.15;
  const auto tracks = gen_corpus(syn, 180.0);
  REQUIRE_FALSE(tracks.empty());

  DomainConfig cfg;
  PartitionResult res = partition(tracks, cfg);

  // Independent tiler: bucket every point, then count buckets with at most
  // maxS distinct vehicles.
  struct Key {
    int tx, ty;
    long long w;
    auto operator<=>(const Key&) const = default;
  };
  std::map<Key, std::set<std::string>> oracle;
  const double dt_raw = cfg.dt / cfg.stride;
  const long long wlen = static_cast<long long>(cfg.hist_len + cfg.pred_len) * cfg.stride;
  for (const auto& p : tracks) {
    const long long k = std::llround(p.t / dt_raw);
    Key key{static_cast<int>(std::floor(p.x / cfg.L)), static_cast<int>(std::floor(p.y / cfg.Wd)),
            static_cast<long long>(std::floor(static_cast<double>(k) / wlen))};
    oracle[key].insert(p.vehicle_id);
  }
  std::size_t expected = 0;
  for (const auto& [key, vehicles] : oracle)
    if (static_cast<int>(vehicles.size()) <= cfg.maxS) ++expected;
  CHECK(res.windows.size() == expected);
}

TEST_CASE("assemble assigns slots by first appearance and keeps them") {
  DomainConfig cfg;
  auto a = line_track("a", 0.0, 10.0, 5.0, 30, cfg.dt_raw());
  // b enters at raw frame 5.
  std::vector<TrackPoint> tracks = a;
  for (int k = 5; k < 30; ++k) tracks.push_back(pt("b", k * cfg.dt_raw(), 1.0 + 2.0 * (k - 5), 15.0));
  PartitionResult res = partition(tracks, cfg);
  REQUIRE(res.windows.size() == 1);
  auto s = assemble(res.windows[0], cfg, "t");
  REQUIRE(s.has_value());
  REQUIRE(static_cast<int>(s->frames.size()) == cfg.total_frames());
  // Slot 0 = a (first appearance at frame 0), slot 1 = b (frame 5).
  for (int f = 0; f < cfg.total_frames(); ++f) {
    CHECK(s->frames[f].mark == f);
    CHECK(s->frames[f].present[0]);
    CHECK(s->frames[f].present[1] == (f >= 5 ? 1 : 0));
    if (f < 5) {
      CHECK(s->frames[f].slots[1] == NormBox{});
    }
    for (int slot = 2; slot < cfg.maxS; ++slot) CHECK_FALSE(s->frames[f].present[slot]);
  }
}

TEST_CASE("a vehicle that leaves keeps a zeroed absent slot afterwards") {
  DomainConfig cfg;
  std::vector<TrackPoint> tracks = line_track("a", 0.0, 10.0, 5.0, 30, cfg.dt_raw());
  // b exists only for raw frames 0..11.
  for (int k = 0; k < 12; ++k) tracks.push_back(pt("b", k * cfg.dt_raw(), 5.0 + k, 15.0));
  PartitionResult res = partition(tracks, cfg);
  REQUIRE(res.windows.size() == 1);
  auto s = assemble(res.windows[0], cfg, "t");
  REQUIRE(s.has_value());
  for (int f = 0; f < cfg.total_frames(); ++f) {
    const bool expect_b = f < 12;
    CHECK(s->frames[f].present[1] == (expect_b ? 1 : 0));
    if (!expect_b) CHECK(s->frames[f].slots[1] == NormBox{});
  }
}

TEST_CASE("assemble skips windows that run past the recorded data") {
  DomainConfig cfg;
  // Only 17 raw frames of data: the single window cannot fill 30 marks.
  auto tracks = line_track("a", 0.0, 10.0, 5.0, 17, cfg.dt_raw());
  PartitionResult res = partition(tracks, cfg);
  REQUIRE(res.windows.size() == 1);
  std::vector<std::string> diags;
  auto s = assemble(res.windows[0], cfg, "t", &diags);
  CHECK_FALSE(s.has_value());
  REQUIRE(diags.size() == 1);
  CHECK(diags[0].find("selectable") != std::string::npos);
}

TEST_CASE("assembled slot series equal a regroup-by-vehicle oracle") {
  SynConfig syn;
  syn.seed = 99;
  syn.spawn_rate = 0.12;
  const auto tracks = gen_corpus(syn, 120.0);
  DomainConfig cfg;
  IngestResult res = ingest_tracks(tracks, cfg, "syn");
  REQUIRE_FALSE(res.samples.empty());

  // Oracle: vehicle -> raw frame -> point, straight from the corpus.
  std::map<std::string, std::map<long long, TrackPoint>> by_vehicle;
  const double dt_raw = cfg.dt / cfg.stride;
  for (const auto& p : tracks) by_vehicle[p.vehicle_id][std::llround(p.t / dt_raw)] = p;

  PartitionResult part = partition(tracks, cfg);
  std::size_t sample_idx = 0;
  for (const auto& win : part.windows) {
    auto s = assemble(win, cfg, "syn");
    if (!s) continue;
    REQUIRE(sample_idx < res.samples.size());
    const Sample& sample = res.samples[sample_idx++];
    const TileOrigin origin = tile_origin(win.tile_x, win.tile_y, cfg);
    for (std::size_t slot = 0; slot < win.tracks.size(); ++slot) {
      const auto& frames_of = by_vehicle.at(win.tracks[slot].vehicle_id);
      for (int f = 0; f < cfg.total_frames(); ++f) {
        const long long raw = win.frame0 + static_cast<long long>(f) * cfg.stride;
        const auto it = frames_of.find(raw);
        const bool in_tile = it != frames_of.end() &&
                             static_cast<int>(std::floor(it->second.x / cfg.L)) == win.tile_x &&
                             static_cast<int>(std::floor(it->second.y / cfg.Wd)) == win.tile_y;
        REQUIRE(sample.frames[f].present[slot] == (in_tile ? 1 : 0));
        if (in_tile) {
          const NormBox expect = normalize(it->second, cfg, origin);
          CHECK(sample.frames[f].slots[slot] == expect);
        }
      }
    }
    // Vehicle-count bound.
    for (const auto& f : sample.frames) CHECK(f.count_present() <= cfg.maxS);
  }
  CHECK(sample_idx == res.samples.size());
}

TEST_CASE("dataset jsonl round trip is exact") {
  SynConfig syn;
  syn.seed = 5;
  syn.spawn_rate = 0.1;
  DomainConfig cfg;
  IngestResult res = ingest_tracks(gen_corpus(syn, 60.0), cfg, "rt");
  REQUIRE_FALSE(res.samples.empty());
  const std::string text = dataset_to_jsonl(res.samples);
  const std::vector<Sample> back = dataset_from_jsonl(text);
  REQUIRE(back.size() == res.samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == res.samples[i]);
  // Serialization is byte-stable.
  CHECK(dataset_to_jsonl(back) == text);
}

TEST_CASE("track csv round trip and validation") {
  auto tracks = line_track("a", 1.0, 7.5, 3.25, 10, 0.2);
  const std::string csv = tracks_to_csv(tracks);
  const auto back = tracks_from_csv(csv);
  REQUIRE(back.size() == tracks.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].vehicle_id == tracks[i].vehicle_id);
    CHECK(back[i].x == tracks[i].x);
    CHECK(back[i].t == tracks[i].t);
  }
  CHECK_THROWS_WITH(tracks_from_csv("x,y\n"), Catch::Matchers::ContainsSubstring("header"));
  CHECK_THROWS_WITH(tracks_from_csv("vehicle_id,t,x,y,len,wid\na,1,2\n"),
                    Catch::Matchers::ContainsSubstring("6 fields"));
  CHECK_THROWS_WITH(tracks_from_csv("vehicle_id,t,x,y,len,wid\na,xx,2,3,4,5\n"),
                    Catch::Matchers::ContainsSubstring("bad number"));
}

TEST_CASE("empty input produces an empty partition") {
  DomainConfig cfg;
  PartitionResult res = partition({}, cfg);
  CHECK(res.windows.empty());
  CHECK(res.diagnostics.empty());
}
