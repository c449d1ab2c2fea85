#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "cn2/ingest.hpp"
#include "cn2/turbsim.hpp"

using namespace cn2;
using namespace cn2::ingest;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kMin = kMicrosPerMinute;
// 2022-10-05T14:03:00Z
constexpr std::int64_t kT0 = 1664978580LL * kMicrosPerSecond;

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::Io;
}

std::string error_text(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

ScintLog parse(const std::string& text) {
  std::istringstream in(text);
  return parse_scint_csv(in, "log.csv");
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cn2_ingest_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetManifest manifest_with(const std::vector<std::int64_t>& stamps) {
  DatasetManifest m;
  m.dataset_id = "t";
  m.scint_log = "scint.csv";
  for (std::size_t i = 0; i < stamps.size(); ++i) m.frames.push_back({"f" + std::to_string(i) + ".png", stamps[i], {}});
  return m;
}

std::vector<std::int64_t> minute_frames(std::int64_t minute, int n) {
  std::vector<std::int64_t> v;
  for (int i = 0; i < n; ++i) v.push_back(minute + i * 8333);
  return v;
}

ScintRecord rec(std::int64_t minute, double cn2 = 1e-14) { return {minute, cn2 / 2, cn2 * 2, cn2, cn2 / 10}; }

/// Writes `n` simulated 64x64 frames per listed minute plus a matching scint log.
DatasetManifest write_capture(const fs::path& dir, const std::vector<std::int64_t>& minutes, int n) {
  const auto scene = sim::make_scene(64, 64, 5, {.texture_scale = 8});
  DatasetManifest m;
  m.dataset_id = "capture";
  m.scint_log = "scint.csv";
  std::vector<ScintRecord> log;
  for (std::size_t k = 0; k < minutes.size(); ++k) {
    sim::SimConfig cfg;
    cfg.cn2_true = 1e-14 * (k + 1);
    cfg.n_frames = n;
    cfg.correlation_length = 8;
    cfg.seed = k;
    cfg.start_timestamp_us = minutes[k];
    const auto seq = sim::simulate_sequence(scene, cfg).sequence;
    for (int i = 0; i < n; ++i) {
      const std::string name = "m" + std::to_string(k) + "_" + std::to_string(i) + ".png";
      io::write_frame16(dir / name, seq[i]);
      m.frames.push_back({name, seq[i].timestamp_us(), 0.001});
    }
    log.push_back(rec(minutes[k], cfg.cn2_true));
  }
  write_scint_csv(dir / "scint.csv", log);
  write_manifest(dir / "manifest.json", m);
  return m;
}

}  // namespace

TEST(Timestamp, ParsesIsoForms) {
  EXPECT_EQ(parse_iso8601("2022-10-05T14:03:00Z"), kT0);
  EXPECT_EQ(parse_iso8601("2022-10-05 14:03:27"), kT0 + 27 * kMicrosPerSecond);
  EXPECT_EQ(parse_iso8601("2022-10-05T14:03:27.5Z"), kT0 + 27'500'000);
  EXPECT_EQ(parse_iso8601("2022-10-05T15:03:00+01:00"), kT0);
  EXPECT_EQ(parse_iso8601("2022-10-05T14:03"), kT0);
  EXPECT_EQ(kind_of([] { parse_iso8601("05/10/2022 14:03"); }), ErrorKind::Parse);
  EXPECT_EQ(kind_of([] { parse_iso8601("2022-13-05T14:03:00Z"); }), ErrorKind::Parse);
}

TEST(Timestamp, FormatRoundTrip) {
  for (std::int64_t t : {kT0, kT0 + 123456, std::int64_t{0}, std::int64_t{-1'500'000}})
    EXPECT_EQ(parse_iso8601(format_iso8601(t)), t) << format_iso8601(t);
  EXPECT_EQ(format_iso8601(kT0), "2022-10-05T14:03:00Z");
}

TEST(ScintCsv, OneRow) {
  const auto log = parse("timestamp,cn2_min,cn2_max,cn2,cn2_std\n2022-10-05T14:03:41Z,1e-15,4e-14,2e-14,5e-15\n");
  ASSERT_EQ(log.records.size(), 1u);
  EXPECT_EQ(log.records[0].minute_timestamp_us, kT0);
  EXPECT_EQ(log.records[0].cn2, 2e-14);
  EXPECT_EQ(log.records[0].cn2_std, 5e-15);
  EXPECT_TRUE(log.warnings.empty());
}

TEST(ScintCsv, MinAboveMaxIsValidationError) {
  EXPECT_EQ(kind_of([] { parse("timestamp,cn2_min,cn2_max,cn2,cn2_std\n2022-10-05T14:03:00Z,5e-14,1e-14,2e-14,0\n"); }),
            ErrorKind::Validation);
  EXPECT_EQ(kind_of([] { parse("timestamp,cn2_min,cn2_max,cn2,cn2_std\n2022-10-05T14:03:00Z,0,1e-14,2e-15,0\n"); }),
            ErrorKind::Validation);
}

TEST(ScintCsv, UnsortedInputSorted) {
  const auto log = parse(
      "timestamp,cn2_min,cn2_max,cn2,cn2_std\n"
      "2022-10-05T14:05:00Z,1e-15,1e-13,2e-14,0\n"
      "2022-10-05T14:03:00Z,1e-15,1e-13,3e-14,0\n"
      "2022-10-05T14:04:00Z,1e-15,1e-13,4e-14,0\n");
  ASSERT_EQ(log.records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(log.records[i].minute_timestamp_us, kT0 + static_cast<int>(i) * kMin);
  EXPECT_EQ(log.records[0].cn2, 3e-14);
}

TEST(ScintCsv, DuplicateMinuteLastWinsWithWarning) {
  const auto log = parse(
      "timestamp,cn2_min,cn2_max,cn2,cn2_std\n"
      "2022-10-05T14:03:00Z,1e-15,1e-13,2e-14,0\n"
      "2022-10-05T14:03:30Z,1e-15,1e-13,7e-14,0\n");
  ASSERT_EQ(log.records.size(), 1u);
  EXPECT_EQ(log.records[0].cn2, 7e-14);
  ASSERT_EQ(log.warnings.size(), 1u);
  EXPECT_NE(log.warnings[0].find("line 3"), std::string::npos);
}

TEST(ScintCsv, MalformedRowReportsLine) {
  const auto msg = error_text([] {
    parse("timestamp,cn2_min,cn2_max,cn2,cn2_std\n2022-10-05T14:03:00Z,1e-15,1e-13,2e-14,0\n2022-10-05T14:04:00Z,x,1,1,0\n");
  });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_EQ(kind_of([] { parse("time,cn2\n"); }), ErrorKind::Parse);
  EXPECT_EQ(kind_of([] { parse("timestamp,cn2_min,cn2_max,cn2,cn2_std\n2022-10-05T14:03:00Z,1,2\n"); }),
            ErrorKind::Parse);
}

TEST(ScintCsv, WriteReadRoundTrip) {
  const auto dir = fresh_dir("scint_rt");
  const std::vector<ScintRecord> recs{rec(kT0, 1.234567891e-14), rec(kT0 + kMin, 9.87654321e-15)};
  write_scint_csv(dir / "s.csv", recs);
  EXPECT_EQ(load_scint_csv(dir / "s.csv").records, recs);
}

TEST(Manifest, RoundTrip) {
  const auto dir = fresh_dir("manifest_rt");
  DatasetManifest m = manifest_with(minute_frames(kT0, 4));
  m.geometry.path_length_l = 1450;
  m.frames[1].exposure_s = 0.002;
  m.truth_source = TruthSource::Simulator;
  write_manifest(dir / "m.json", m);
  EXPECT_EQ(read_manifest(dir / "m.json"), m);
}

TEST(Manifest, RejectsUnsortedAndMalformed) {
  auto m = manifest_with({kT0 + 10, kT0});
  EXPECT_EQ(kind_of([&] { manifest_from_json(to_json(m)); }), ErrorKind::Validation);
  EXPECT_EQ(kind_of([] { manifest_from_json(nlohmann::json{{"format_version", 1}}); }), ErrorKind::Parse);
  auto j = to_json(manifest_with({kT0}));
  j["format_version"] = 9;
  EXPECT_EQ(kind_of([&] { manifest_from_json(j); }), ErrorKind::Parse);
}

TEST(Sync, FullMinuteOf120FramesGives40Groups) {
  const auto plan = plan_sync(manifest_with(minute_frames(kT0, 120)), {rec(kT0)}, 3);
  EXPECT_EQ(plan.groups.size(), 40u);
  EXPECT_EQ(plan.dropped_frames, 0u);
}

TEST(Sync, RemainderDropped) {
  const auto plan = plan_sync(manifest_with(minute_frames(kT0, 7)), {rec(kT0)}, 3);
  ASSERT_EQ(plan.groups.size(), 2u);
  EXPECT_EQ(plan.groups[1].frame_indices, (std::vector<std::size_t>{3, 4, 5}));
  EXPECT_EQ(plan.dropped_frames, 1u);
}

TEST(Sync, MinuteWithoutRecordExcludedAndCounted) {
  auto stamps = minute_frames(kT0, 6);
  const auto later = minute_frames(kT0 + kMin, 6);
  stamps.insert(stamps.end(), later.begin(), later.end());
  const auto plan = plan_sync(manifest_with(stamps), {rec(kT0 + kMin)}, 3);
  EXPECT_EQ(plan.groups.size(), 2u);
  EXPECT_EQ(plan.dropped_minutes, 1u);
  EXPECT_EQ(plan.dropped_frames, 6u);
}

TEST(Sync, Errors) {
  EXPECT_EQ(kind_of([] { plan_sync(manifest_with(minute_frames(kT0, 6)), {rec(kT0 + kMin)}, 3); }),
            ErrorKind::EmptyInput);
  EXPECT_EQ(kind_of([] { plan_sync(manifest_with(minute_frames(kT0, 6)), {rec(kT0)}, 1); }), ErrorKind::Config);
}

TEST(Sync, GroupsNeverCrossMinutesAndCountsFloor) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<std::int64_t> t(0, 5 * kMin - 1);
    std::vector<std::int64_t> stamps(60 + trial * 3);
    for (auto& s : stamps) s = kT0 + t(rng);
    std::sort(stamps.begin(), stamps.end());
    const auto m = manifest_with(stamps);
    std::vector<ScintRecord> log;
    for (int k = 0; k < 5; k += 1 + trial % 2) log.push_back(rec(kT0 + k * kMin));
    const int g = 2 + trial % 4;
    const auto plan = plan_sync(m, log, g);
    std::map<std::int64_t, std::size_t> per_minute, groups;
    for (auto s : stamps) ++per_minute[minute_floor(s)];
    for (const auto& pg : plan.groups) {
      EXPECT_EQ(pg.frame_indices.size(), static_cast<std::size_t>(g));
      for (auto i : pg.frame_indices) EXPECT_EQ(minute_floor(m.frames[i].timestamp_us), pg.record.minute_timestamp_us);
      ++groups[pg.record.minute_timestamp_us];
    }
    for (const auto& r : log) EXPECT_EQ(groups[r.minute_timestamp_us], per_minute[r.minute_timestamp_us] / g);
  }
}

TEST(Sync, LoadsFramesAndBuildsDataset) {
  const auto dir = fresh_dir("sync_load");
  write_capture(dir, {kT0, kT0 + kMin}, 7);
  const Dataset d = load_dataset(dir / "manifest.json", 3, Roi{8, 8, 48});
  ASSERT_EQ(d.minutes.size(), 2u);
  EXPECT_EQ(d.minutes[0].groups.size(), 2u);
  EXPECT_EQ(d.minutes[0].groups[0].width(), 48);
  EXPECT_EQ(d.minutes[1].truth, 2e-14);
  EXPECT_EQ(d.minutes[0].groups[0][0].exposure_s(), 0.001);
  EXPECT_EQ(d.id, "capture");
}

TEST(Cache, SecondRunWritesNothing) {
  const auto dir = fresh_dir("cache");
  const auto m = write_capture(dir, {kT0}, 6);
  const auto first = cache_crops(m, dir, Roi{4, 4, 32}, dir / "cache");
  EXPECT_EQ(first.written, 6u);
  const auto second = cache_crops(m, dir, Roi{4, 4, 32}, dir / "cache");
  EXPECT_EQ(second.written, 0u);
  EXPECT_EQ(second.reused, 6u);
  EXPECT_EQ(second.manifest, first.manifest);

  const Dataset d = load_dataset(first.manifest_path);
  EXPECT_EQ(d.minutes[0].groups[0].width(), 32);
}

TEST(Cache, ChangedRoiKeyedSeparately) {
  const auto dir = fresh_dir("cache_roi");
  const auto m = write_capture(dir, {kT0}, 4);
  const auto a = cache_crops(m, dir, Roi{4, 4, 32}, dir / "cache");
  const auto b = cache_crops(m, dir, Roi{0, 0, 40}, dir / "cache");
  EXPECT_EQ(b.written, 4u);
  EXPECT_NE(a.manifest_path.parent_path(), b.manifest_path.parent_path());
  EXPECT_NE(a.manifest.frames[0].path, b.manifest.frames[0].path);
}

TEST(Cache, UnreadableFrameSkippedAndListed) {
  const auto dir = fresh_dir("cache_bad");
  auto m = write_capture(dir, {kT0}, 4);
  std::ofstream(dir / "broken.png") << "not an image";
  m.frames.insert(m.frames.begin() + 1, {"broken.png", m.frames[0].timestamp_us + 1, {}});
  m.frames.push_back({"missing.png", m.frames.back().timestamp_us + 1, {}});
  const auto rep = cache_crops(m, dir, Roi{0, 0, 32}, dir / "cache");
  EXPECT_EQ(rep.written, 4u);
  ASSERT_EQ(rep.skipped.size(), 2u);
  EXPECT_NE(rep.skipped[0].find("broken.png"), std::string::npos);
  EXPECT_EQ(rep.manifest.frames.size(), 4u);
}

TEST(Convert, RawCaptureToManifest) {
  const auto dir = fresh_dir("convert");
  fs::create_directories(dir / "raw" / "minute1");
  const auto scene = sim::make_scene(32, 32, 1);
  for (int i = 0; i < 3; ++i) {
    io::write_frame16(dir / "raw" / ("cam_20221005_140300_" + std::to_string(i) + ".png"), scene);
    io::write_frame16(dir / "raw" / "minute1" / ("cam_20221005_140400_" + std::to_string(i) + ".png"), scene);
  }
  // Same second in the name: consecutive frames get 1/fps spacing.
  io::write_frame16(dir / "raw" / "cam_20221005_140300.png", scene);
  io::write_frame16(dir / "raw" / "cam_20221005_140300.tif", scene);
  std::ofstream(dir / "raw" / "notes.txt") << "x";
  std::ofstream(dir / "raw" / "snapshot.png") << "x";
  std::ofstream(dir / "log.csv") << "Time,Temp,Cn2\n2022-10-05 14:03:10,21.5,3.5e-14\n2022-10-05 14:04:10,21.7,4e-14\n";

  ConvertOptions opt;
  opt.dataset_id = "october";
  opt.time_column = "Time";
  opt.cn2_column = "Cn2";
  const auto rep = convert_raw(dir / "raw", dir / "log.csv", dir / "out", opt);
  EXPECT_EQ(rep.frames, 8u);
  EXPECT_EQ(rep.scint_records, 2u);
  EXPECT_EQ(rep.warnings.size(), 1u);  // snapshot.png has no timestamp

  const auto m = read_manifest(rep.manifest_path);
  EXPECT_EQ(m.dataset_id, "october");
  EXPECT_EQ(m.frames.front().timestamp_us, kT0);
  const auto log = load_scint_csv(dir / "out" / m.scint_log);
  EXPECT_EQ(log.records[0].cn2, 3.5e-14);
  EXPECT_EQ(log.records[0].cn2_min, 3.5e-14);
  EXPECT_EQ(log.records[0].cn2_std, 0.0);

  const auto plan = plan_sync(m, log.records, 3);
  EXPECT_EQ(plan.groups.size(), 2u);  // 5 frames in 14:03, 3 in 14:04
  EXPECT_EQ(plan.dropped_frames, 2u);
}

TEST(Convert, MissingColumnIsParseError) {
  const auto dir = fresh_dir("convert_bad");
  fs::create_directories(dir / "raw");
  io::write_frame16(dir / "raw" / "cam_20221005_140300_0.png", sim::make_scene(32, 32, 1));
  std::ofstream(dir / "log.csv") << "Time,Temp\n2022-10-05 14:03:10,21.5\n";
  ConvertOptions opt;
  opt.time_column = "Time";
  EXPECT_EQ(kind_of([&] { convert_raw(dir / "raw", dir / "log.csv", dir / "out", opt); }), ErrorKind::Parse);
}
