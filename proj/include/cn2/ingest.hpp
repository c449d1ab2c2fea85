#pragma once
// Dataset loading: scintillometer logs, frame manifests, minute pairing and
// ROI crop caching, plus the adapter from raw capture layouts.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cn2/dataset.hpp"
#include "cn2/error.hpp"
#include "cn2/gradient_estimator.hpp"
#include "cn2/image_io.hpp"
#include "cn2/imaging.hpp"
#include "cn2/stats.hpp"

namespace cn2::ingest {

namespace fs = std::filesystem;

// ---- timestamps ----------------------------------------------------------

/// Parses "YYYY-MM-DD[T ]hh:mm[:ss[.ffffff]][Z|+hh:mm|-hh:mm]" into UTC microseconds.
inline std::optional<std::int64_t> try_parse_iso8601(const std::string& text) {
  static const std::regex re(
      R"(^\s*(\d{4})-(\d{2})-(\d{2})[T ](\d{2}):(\d{2})(?::(\d{2})(?:\.(\d{1,9}))?)?\s*(Z|[+-]\d{2}:?\d{2})?\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) return std::nullopt;
  using namespace std::chrono;
  const year_month_day ymd{year{std::stoi(m[1])}, month{static_cast<unsigned>(std::stoi(m[2]))},
                           day{static_cast<unsigned>(std::stoi(m[3]))}};
  if (!ymd.ok()) return std::nullopt;
  const int hh = std::stoi(m[4]), mm = std::stoi(m[5]), ss = m[6].matched ? std::stoi(m[6]) : 0;
  if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
  std::int64_t frac_us = 0;
  if (m[7].matched) {
    std::string f = m[7].str();
    f.resize(6, '0');
    frac_us = std::stoll(f.substr(0, 6));
  }
  std::int64_t offset_s = 0;
  if (m[8].matched && m[8].str() != "Z") {
    const std::string z = m[8].str();
    const int oh = std::stoi(z.substr(1, 2)), om = std::stoi(z.substr(z.size() - 2));
    offset_s = (z[0] == '-' ? -1 : 1) * (oh * 3600 + om * 60);
  }
  const std::int64_t days = sys_days{ymd}.time_since_epoch().count();
  const std::int64_t secs = days * 86400 + hh * 3600 + mm * 60 + ss - offset_s;
  return secs * kMicrosPerSecond + frac_us;
}

inline std::int64_t parse_iso8601(const std::string& text) {
  auto t = try_parse_iso8601(text);
  if (!t) fail(ErrorKind::Parse, "invalid ISO-8601 timestamp '" + text + "'");
  return *t;
}

/// "YYYY-MM-DDThh:mm:ss[.ffffff]Z"; fractions only when non-zero.
inline std::string format_iso8601(std::int64_t t_us) {
  using namespace std::chrono;
  const std::int64_t secs = (t_us >= 0 ? t_us : t_us - (kMicrosPerSecond - 1)) / kMicrosPerSecond;
  const std::int64_t frac = t_us - secs * kMicrosPerSecond;
  const std::int64_t days = (secs >= 0 ? secs : secs - 86399) / 86400;
  const std::int64_t sod = secs - days * 86400;
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(sod / 3600),
                static_cast<int>(sod / 60 % 60), static_cast<int>(sod % 60));
  std::string out = buf;
  if (frac != 0) {
    std::snprintf(buf, sizeof buf, ".%06lld", static_cast<long long>(frac));
    out += buf;
  }
  return out + "Z";
}

// ---- CSV -----------------------------------------------------------------

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

/// Comma-separated fields; double quotes group commas, "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline double parse_number(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::Parse, where + ": '" + s + "' is not a number");
  }
  if (used != s.size()) fail(ErrorKind::Parse, where + ": '" + s + "' is not a number");
  return v;
}

// ---- scintillometer log --------------------------------------------------

struct ScintRecord {
  std::int64_t minute_timestamp_us = 0;
  double cn2_min = 0.0;
  double cn2_max = 0.0;
  double cn2 = 0.0;
  double cn2_std = 0.0;

  friend bool operator==(const ScintRecord&, const ScintRecord&) = default;
};

inline void validate(const ScintRecord& r, const std::string& where) {
  for (double v : {r.cn2_min, r.cn2_max, r.cn2})
    if (!(v > 0) || !std::isfinite(v)) fail(ErrorKind::Validation, where + ": Cn2 values must be finite and > 0");
  if (!(r.cn2_std >= 0) || !std::isfinite(r.cn2_std))
    fail(ErrorKind::Validation, where + ": cn2_std must be finite and >= 0");
  if (r.cn2_min > r.cn2_max) fail(ErrorKind::Validation, where + ": cn2_min exceeds cn2_max");
  if (r.cn2 < r.cn2_min || r.cn2 > r.cn2_max) fail(ErrorKind::Validation, where + ": cn2 outside [cn2_min, cn2_max]");
}

inline constexpr const char* kScintHeader = "timestamp,cn2_min,cn2_max,cn2,cn2_std";

struct ScintLog {
  std::vector<ScintRecord> records;  // sorted, one per minute
  std::vector<std::string> warnings;
};

inline ScintLog parse_scint_csv(std::istream& in, const std::string& name = "scint log") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) fail(ErrorKind::Parse, name + ": empty file");
  std::string header = trim(line);
  if (header.rfind("\xEF\xBB\xBF", 0) == 0) header = header.substr(3);
  if (header != kScintHeader)
    fail(ErrorKind::Parse, name + " line " + std::to_string(lineno) + ": expected header '" + kScintHeader + "'");

  std::map<std::int64_t, ScintRecord> by_minute;
  ScintLog log;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = name + " line " + std::to_string(lineno);
    const auto f = split_csv_line(line);
    if (f.size() != 5) fail(ErrorKind::Parse, where + ": expected 5 fields, found " + std::to_string(f.size()));
    const auto ts = try_parse_iso8601(f[0]);
    if (!ts) fail(ErrorKind::Parse, where + ": invalid ISO-8601 timestamp '" + f[0] + "'");
    ScintRecord r{minute_floor(*ts), parse_number(f[1], where), parse_number(f[2], where), parse_number(f[3], where),
                  parse_number(f[4], where)};
    validate(r, where);
    if (by_minute.count(r.minute_timestamp_us))
      log.warnings.push_back(where + ": duplicate minute " + format_iso8601(r.minute_timestamp_us) + ", last wins");
    by_minute[r.minute_timestamp_us] = r;
  }
  for (auto& [_, r] : by_minute) log.records.push_back(r);
  return log;
}

inline ScintLog load_scint_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open scintillometer log '" + path.string() + "'");
  return parse_scint_csv(in, path.filename().string());
}

inline void write_scint_csv(const fs::path& path, const std::vector<ScintRecord>& records) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << kScintHeader << '\n';
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g\n", r.cn2_min, r.cn2_max, r.cn2, r.cn2_std);
    out << format_iso8601(r.minute_timestamp_us) << buf;
  }
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

// ---- manifest ------------------------------------------------------------

enum class TruthSource { Scintillometer, Simulator };

inline std::string to_string(TruthSource s) { return s == TruthSource::Scintillometer ? "scintillometer" : "simulator"; }

inline TruthSource parse_truth_source(const std::string& s) {
  if (s == "scintillometer") return TruthSource::Scintillometer;
  if (s == "simulator") return TruthSource::Simulator;
  fail(ErrorKind::Parse, "unknown ground-truth source '" + s + "'");
}

struct FrameEntry {
  std::string path;  // relative to the manifest directory unless absolute
  std::int64_t timestamp_us = 0;
  std::optional<double> exposure_s;

  friend bool operator==(const FrameEntry&, const FrameEntry&) = default;
};

inline constexpr int kManifestVersion = 1;

struct DatasetManifest {
  std::string dataset_id;
  CameraGeometry geometry{};
  std::vector<FrameEntry> frames;  // sorted by timestamp
  std::string scint_log;           // relative like frame paths
  TruthSource truth_source = TruthSource::Scintillometer;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;

  void validate() const {
    geometry.validate();
    for (std::size_t i = 1; i < frames.size(); ++i)
      if (frames[i].timestamp_us < frames[i - 1].timestamp_us)
        fail(ErrorKind::Validation, "manifest frames must be sorted by timestamp (entry " + std::to_string(i) + ")");
  }
};

inline nlohmann::json geometry_json(const CameraGeometry& g) {
  return {{"pfov", g.pfov}, {"aperture_d", g.aperture_d}, {"path_length_l", g.path_length_l},
          {"turbulence_p", g.turbulence_p}};
}

inline CameraGeometry geometry_from_json(const nlohmann::json& j) {
  CameraGeometry g{j.at("pfov").get<double>(), j.at("aperture_d").get<double>(), j.at("path_length_l").get<double>(),
                   j.at("turbulence_p").get<double>()};
  g.validate();
  return g;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : m.frames) {
    nlohmann::json j{{"path", f.path}, {"timestamp_us", f.timestamp_us}};
    if (f.exposure_s) j["exposure_s"] = *f.exposure_s;
    frames.push_back(std::move(j));
  }
  return {{"format_version", kManifestVersion},
          {"dataset_id", m.dataset_id},
          {"geometry", geometry_json(m.geometry)},
          {"ground_truth_source", to_string(m.truth_source)},
          {"scint_log", m.scint_log},
          {"frames", std::move(frames)}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kManifestVersion)
      fail(ErrorKind::Parse, "unsupported manifest format_version " + j.at("format_version").dump());
    DatasetManifest m;
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.geometry = geometry_from_json(j.at("geometry"));
    m.truth_source = parse_truth_source(j.value("ground_truth_source", std::string("scintillometer")));
    m.scint_log = j.at("scint_log").get<std::string>();
    for (const auto& f : j.at("frames")) {
      FrameEntry e{f.at("path").get<std::string>(), f.at("timestamp_us").get<std::int64_t>(), std::nullopt};
      if (f.contains("exposure_s")) e.exposure_s = f.at("exposure_s").get<double>();
      m.frames.push_back(std::move(e));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("malformed manifest: ") + e.what());
  }
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write manifest '" + path.string() + "'");
  out << to_json(m).dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

inline DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, "manifest '" + path.string() + "' is not JSON: " + e.what());
  }
  return manifest_from_json(j);
}

inline fs::path resolve(const fs::path& base_dir, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base_dir / q;
}

// ---- synchronization -----------------------------------------------------

struct PlannedGroup {
  std::vector<std::size_t> frame_indices;  // into manifest.frames
  ScintRecord record;
};

struct SyncPlan {
  std::vector<PlannedGroup> groups;
  std::size_t dropped_minutes = 0;  // frame minutes without a scint record
  std::size_t dropped_frames = 0;   // remainders, sparse minutes and unmatched minutes
};

struct MinuteBucket {
  std::int64_t minute_timestamp_us = 0;
  std::vector<std::vector<std::size_t>> groups;  // indices into manifest.frames
  std::size_t remainder = 0;                     // trailing frames that fill no group
};

/// Buckets frames by minute (timestamp truncation) and cuts each minute into
/// consecutive groups of `group_size`.
inline std::vector<MinuteBucket> group_by_minute(const DatasetManifest& manifest, int group_size = 3) {
  if (group_size < 2) fail(ErrorKind::Config, "group_size must be >= 2");
  std::map<std::int64_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < manifest.frames.size(); ++i)
    buckets[minute_floor(manifest.frames[i].timestamp_us)].push_back(i);
  std::vector<MinuteBucket> out;
  const std::size_t g = static_cast<std::size_t>(group_size);
  for (const auto& [minute, idx] : buckets) {
    MinuteBucket b{minute, {}, idx.size() % g};
    for (std::size_t k = 0; k + g <= idx.size(); k += g) b.groups.emplace_back(idx.begin() + k, idx.begin() + k + g);
    out.push_back(std::move(b));
  }
  return out;
}

/// Pairs each minute's groups with that minute's record.
inline SyncPlan plan_sync(const DatasetManifest& manifest, const std::vector<ScintRecord>& scint, int group_size = 3) {
  std::map<std::int64_t, const ScintRecord*> truth;
  for (const auto& r : scint) truth[r.minute_timestamp_us] = &r;
  SyncPlan plan;
  for (auto& b : group_by_minute(manifest, group_size)) {
    const auto it = truth.find(b.minute_timestamp_us);
    if (it == truth.end()) {
      ++plan.dropped_minutes;
      plan.dropped_frames += b.groups.size() * static_cast<std::size_t>(group_size) + b.remainder;
      continue;
    }
    plan.dropped_frames += b.remainder;
    for (auto& g : b.groups) plan.groups.push_back({std::move(g), *it->second});
  }
  if (plan.groups.empty()) fail(ErrorKind::EmptyInput, "no minute has both frames and a scintillometer record");
  return plan;
}

/// Reads the listed manifest frames as one sequence, cropped to `roi` if given.
inline ImageSequence load_group(const DatasetManifest& manifest, const fs::path& manifest_dir,
                                std::span<const std::size_t> indices, const std::optional<Roi>& roi = std::nullopt) {
  std::vector<ImageFrame> frames;
  for (std::size_t i : indices) {
    const auto& fe = manifest.frames.at(i);
    ImageFrame f = io::read_frame(resolve(manifest_dir, fe.path), fe.timestamp_us);
    f.set_exposure_s(fe.exposure_s);
    frames.push_back(roi ? crop(f, *roi) : std::move(f));
  }
  return ImageSequence(std::move(frames), manifest.dataset_id);
}

struct SyncedGroup {
  ImageSequence group;
  ScintRecord record;
};

struct SyncResult {
  std::vector<SyncedGroup> groups;
  std::size_t dropped_minutes = 0;
  std::size_t dropped_frames = 0;
  std::vector<std::string> skipped;  // groups with unreadable frames
};

/// Loads the planned groups, optionally cropping each frame to `roi` on load.
inline SyncResult synchronize(const DatasetManifest& manifest, const fs::path& manifest_dir,
                              const std::vector<ScintRecord>& scint, int group_size = 3,
                              const std::optional<Roi>& roi = std::nullopt) {
  const SyncPlan plan = plan_sync(manifest, scint, group_size);
  SyncResult out{{}, plan.dropped_minutes, plan.dropped_frames, {}};
  for (const auto& pg : plan.groups) {
    try {
      out.groups.push_back({load_group(manifest, manifest_dir, pg.frame_indices, roi), pg.record});
    } catch (const Error& e) {
      out.skipped.push_back(e.what());
      out.dropped_frames += pg.frame_indices.size();
    }
  }
  if (out.groups.empty()) fail(ErrorKind::EmptyInput, "no readable frame group in '" + manifest.dataset_id + "'");
  return out;
}

/// Minute-level dataset from synchronized groups.
inline Dataset to_dataset(const SyncResult& sync, const std::string& id, const CameraGeometry& geom) {
  Dataset d{id, geom, {}};
  for (const auto& g : sync.groups) {
    if (d.minutes.empty() || d.minutes.back().minute_timestamp_us != g.record.minute_timestamp_us)
      d.minutes.push_back({g.record.minute_timestamp_us, g.record.cn2, {}});
    d.minutes.back().groups.push_back(g.group);
  }
  d.validate();
  return d;
}

/// Manifest + scint log on disk straight to a minute-level dataset.
inline Dataset load_dataset(const fs::path& manifest_path, int group_size = 3, const std::optional<Roi>& roi = std::nullopt) {
  const DatasetManifest m = read_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  const ScintLog log = load_scint_csv(resolve(dir, m.scint_log));
  return to_dataset(synchronize(m, dir, log.records, group_size, roi), m.dataset_id, m.geometry);
}

// ---- crop cache ----------------------------------------------------------

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t value() const { return h_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return buf;
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string file_hash(const fs::path& p, const Roi& roi) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read '" + p.string() + "'");
  Fnv1a h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
  const std::string key = "|roi=" + std::to_string(roi.x0) + "," + std::to_string(roi.y0) + "," + std::to_string(roi.size);
  h.update(key);
  return h.hex();
}

struct CacheReport {
  DatasetManifest manifest;  // frames point into the cache
  fs::path manifest_path;
  std::size_t written = 0;
  std::size_t reused = 0;
  std::vector<std::string> skipped;  // unreadable frames
};

/// Crops every frame to `roi` into cache_root/roi_<x>_<y>_<size>/, keyed by
/// a content hash of the source file and the ROI. Existing entries are reused.
inline CacheReport cache_crops(const DatasetManifest& manifest, const fs::path& manifest_dir, const Roi& roi,
                               const fs::path& cache_root) {
  const fs::path dir = cache_root / ("roi_" + std::to_string(roi.x0) + "_" + std::to_string(roi.y0) + "_" +
                                     std::to_string(roi.size));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create cache directory '" + dir.string() + "': " + ec.message());

  CacheReport rep;
  rep.manifest = manifest;
  rep.manifest.frames.clear();
  for (const auto& fe : manifest.frames) {
    const fs::path src = resolve(manifest_dir, fe.path);
    try {
      const std::string name = file_hash(src, roi) + ".png";
      if (fs::exists(dir / name)) {
        ++rep.reused;
      } else {
        const ImageFrame f = io::read_frame(src, fe.timestamp_us);
        const fs::path tmp = dir / (name + ".tmp.png");
        io::write_frame16(tmp, crop(f, roi));
        fs::rename(tmp, dir / name);
        ++rep.written;
      }
      rep.manifest.frames.push_back({name, fe.timestamp_us, fe.exposure_s});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Io && e.kind() != ErrorKind::Bounds) throw;
      rep.skipped.push_back(fe.path + ": " + e.what());
    }
  }
  const fs::path scint = resolve(manifest_dir, manifest.scint_log);
  rep.manifest.scint_log = fs::absolute(scint).lexically_normal().string();
  rep.manifest_path = dir / "manifest.json";
  write_manifest(rep.manifest_path, rep.manifest);
  return rep;
}

// ---- raw layout conversion -----------------------------------------------

struct ConvertOptions {
  std::string dataset_id = "dataset";
  CameraGeometry geometry{};
  /// Capture time from the file name: groups year, month, day, hour, minute,
  /// second and an optional sub-second fraction.
  std::string timestamp_regex =
      R"((\d{4})[-_]?(\d{2})[-_]?(\d{2})[T_ -]?(\d{2})[-_:.]?(\d{2})[-_:.]?(\d{2})(?:[._-](\d{1,6}))?)";
  double fps = 120.0;  // spacing for frames that share a file-name timestamp
  std::string time_column = "timestamp";
  std::string cn2_column = "cn2";
  std::string min_column = "cn2_min";  // optional in the source; missing -> cn2
  std::string max_column = "cn2_max";
  std::string std_column = "cn2_std";  // missing -> 0
};

struct ConvertReport {
  fs::path manifest_path;
  std::size_t frames = 0;
  std::size_t scint_records = 0;
  std::vector<std::string> warnings;
};

/// Timestamp from regex groups (Y, M, D, h, m, s[, fraction]).
inline std::optional<std::int64_t> timestamp_from_name(const std::string& name, const std::regex& re) {
  std::smatch m;
  if (!std::regex_search(name, m, re) || m.size() < 7) return std::nullopt;
  std::string iso = m[1].str() + "-" + m[2].str() + "-" + m[3].str() + "T" + m[4].str() + ":" + m[5].str() + ":" +
                    m[6].str();
  if (m.size() > 7 && m[7].matched) iso += "." + m[7].str();
  return try_parse_iso8601(iso + "Z");
}

/// Adapts a raw capture (an image directory and a scintillometer CSV with
/// arbitrary extra columns) into a manifest and a normalized scint log in out_dir.
inline ConvertReport convert_raw(const fs::path& image_dir, const fs::path& scint_source, const fs::path& out_dir,
                                 const ConvertOptions& opt) {
  opt.geometry.validate();
  if (!(opt.fps > 0)) fail(ErrorKind::Config, "fps must be positive");
  if (!fs::is_directory(image_dir)) fail(ErrorKind::Io, "image directory '" + image_dir.string() + "' not found");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + out_dir.string() + "': " + ec.message());

  ConvertReport rep;
  std::regex re;
  try {
    re = std::regex(opt.timestamp_regex);
  } catch (const std::regex_error& e) {
    fail(ErrorKind::Config, std::string("invalid timestamp regex: ") + e.what());
  }

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(image_dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  DatasetManifest m;
  m.dataset_id = opt.dataset_id;
  m.geometry = opt.geometry;
  m.scint_log = "scint.csv";
  std::map<std::int64_t, int> seen;
  const auto step = static_cast<std::int64_t>(std::llround(kMicrosPerSecond / opt.fps));
  for (const auto& f : files) {
    const auto ts = timestamp_from_name(f.filename().string(), re);
    if (!ts) {
      rep.warnings.push_back("no timestamp in file name '" + f.filename().string() + "', skipped");
      continue;
    }
    const int k = seen[*ts]++;
    m.frames.push_back({fs::absolute(f).lexically_normal().string(), *ts + k * step, std::nullopt});
  }
  std::stable_sort(m.frames.begin(), m.frames.end(),
                   [](const auto& a, const auto& b) { return a.timestamp_us < b.timestamp_us; });
  if (m.frames.empty()) fail(ErrorKind::EmptyInput, "no timestamped frames under '" + image_dir.string() + "'");

  std::ifstream in(scint_source);
  if (!in) fail(ErrorKind::Io, "cannot open '" + scint_source.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (header.empty() && std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) header = split_csv_line(line);
  }
  auto col = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    if (required) fail(ErrorKind::Parse, scint_source.filename().string() + ": missing column '" + name + "'");
    return std::nullopt;
  };
  const auto c_t = col(opt.time_column, true), c_v = col(opt.cn2_column, true);
  const auto c_lo = col(opt.min_column, false), c_hi = col(opt.max_column, false), c_sd = col(opt.std_column, false);
  std::map<std::int64_t, ScintRecord> recs;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = scint_source.filename().string() + " line " + std::to_string(lineno);
    const auto f = split_csv_line(line);
    auto field = [&](std::size_t i) -> const std::string& {
      if (i >= f.size()) fail(ErrorKind::Parse, where + ": too few fields");
      return f[i];
    };
    auto ts = try_parse_iso8601(field(*c_t));
    if (!ts) ts = timestamp_from_name(field(*c_t), re);
    if (!ts) fail(ErrorKind::Parse, where + ": cannot parse timestamp '" + field(*c_t) + "'");
    const double v = parse_number(field(*c_v), where);
    ScintRecord r{minute_floor(*ts), c_lo ? parse_number(field(*c_lo), where) : v,
                  c_hi ? parse_number(field(*c_hi), where) : v, v, c_sd ? parse_number(field(*c_sd), where) : 0.0};
    validate(r, where);
    if (recs.count(r.minute_timestamp_us)) rep.warnings.push_back(where + ": duplicate minute, last wins");
    recs[r.minute_timestamp_us] = r;
  }
  std::vector<ScintRecord> records;
  for (auto& [_, r] : recs) records.push_back(r);
  if (records.empty()) fail(ErrorKind::EmptyInput, "no scintillometer rows in '" + scint_source.string() + "'");

  write_scint_csv(out_dir / m.scint_log, records);
  rep.manifest_path = out_dir / "manifest.json";
  write_manifest(rep.manifest_path, m);
  rep.frames = m.frames.size();
  rep.scint_records = records.size();
  return rep;
}

}  // namespace cn2::ingest
