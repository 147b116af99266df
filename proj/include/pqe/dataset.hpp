#pragma once

// Balanced PQE corpora: generation, peak normalization, stratified splits and
// the binary signal store.
//
// Store layout (little-endian):
//   "PQE1" | version u32 | count u64 | seq_len u32 | label width u8 (=1)
//   count x ( label u8 | seq_len x f32 )
//   CRC32 (u32) of the record payload

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pqe/binary_io.hpp"
#include "pqe/error.hpp"
#include "pqe/key_value.hpp"
#include "pqe/rng.hpp"
#include "pqe/waveform.hpp"

namespace pqe {

inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::uint32_t kManifestVersion = 1;

class StoreError : public IoError {
 public:
  enum class Kind { corrupt_header, unsupported_version, truncated_payload, checksum_mismatch, unreadable };

  StoreError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Flat, label-aligned storage of fixed-length signals.
struct SignalStore {
  std::uint32_t seq_len = 0;
  std::vector<std::uint8_t> labels;
  std::vector<float> samples;  // labels.size() * seq_len

  std::size_t size() const { return labels.size(); }
  std::span<const float> signal(std::size_t i) const { return {samples.data() + i * seq_len, seq_len}; }
  std::span<float> signal(std::size_t i) { return {samples.data() + i * seq_len, seq_len}; }

  bool operator==(const SignalStore&) const = default;
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

struct PerturbationRanges {
  std::optional<Interval> snr_db;  // absent = noise-free
  Interval dc_offset{0.0, 0.0};
  Interval amplitude{1.0, 1.0};
  Interval frequency{50.0, 50.0};

  /// Clean records, 1 pu, 50 Hz.
  static PerturbationRanges clean() { return {}; }
  /// Noise, DC offset, amplitude and frequency variation on every record.
  static PerturbationRanges perturbed() {
    return {Interval{ranges::snr_db[0], ranges::snr_db[1]}, Interval{ranges::dc_offset[0], ranges::dc_offset[1]},
            Interval{ranges::amplitude[0], ranges::amplitude[1]}, Interval{ranges::frequency[0], ranges::frequency[1]}};
  }

  bool operator==(const PerturbationRanges&) const = default;
};

struct DatasetConfig {
  std::string dataset_id = "A";  // A | B | custom
  std::uint64_t count = 100000;
  std::uint64_t seed = 0;
  double sample_rate = 10000.0;
  double duration = 0.2;
  PerturbationRanges perturb = PerturbationRanges::clean();

  static DatasetConfig for_mode(const std::string& mode, std::uint64_t count, std::uint64_t seed) {
    DatasetConfig c;
    c.count = count;
    c.seed = seed;
    if (mode == "A") {
      c.dataset_id = "A";
    } else if (mode == "B") {
      c.dataset_id = "B";
      c.perturb = PerturbationRanges::perturbed();
    } else {
      throw ValidationError("dataset mode must be A or B, got '" + mode + "'");
    }
    return c;
  }
};

struct DatasetManifest {
  std::uint32_t format_version = kManifestVersion;
  std::string dataset_id = "A";
  std::uint64_t total_count = 0;
  std::uint64_t per_class_count = 0;
  std::uint32_t num_classes = kNumClasses;
  double sample_rate = 0.0;
  double duration = 0.0;
  std::uint32_t seq_len = 0;
  std::uint64_t seed = 0;
  PerturbationRanges perturb;
  std::string normalization = "peak";
  std::uint64_t split_train = 0;
  std::uint64_t split_val = 0;
  std::uint64_t split_test = 0;

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  SignalStore store;
  std::vector<SignalSpec> specs;  // provenance, index-aligned with the store
  DatasetManifest manifest;
};

/// Divides by the peak magnitude; an all-zero signal is returned unchanged.
template <class T>
std::vector<T> normalize(std::span<const T> signal) {
  require(!signal.empty(), "normalize: empty signal");
  T peak = 0;
  for (T v : signal) peak = std::max(peak, std::abs(v));
  std::vector<T> out(signal.begin(), signal.end());
  if (peak == T(0)) return out;
  for (T& v : out) v /= peak;
  return out;
}

template <class T>
std::vector<T> normalize(const std::vector<T>& signal) {
  return normalize(std::span<const T>(signal));
}

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

struct SplitCounts {
  std::uint64_t train = 0, val = 0, test = 0;
};

/// Per class: val and test each take floor(n / 10), train takes the rest.
inline SplitCounts split_counts_per_class(std::uint64_t per_class) {
  const std::uint64_t tenth = per_class / 10;
  return {per_class - 2 * tenth, tenth, tenth};
}

struct SplitAssignment {
  std::vector<Split> of;  // signal index -> split

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < of.size(); ++i) {
      if (of[i] == s) out.push_back(i);
    }
    return out;
  }
};

/// Seeded per-class shuffle followed by an 80/10/10 partition.
inline SplitAssignment stratified_split(std::span<const std::uint8_t> labels, std::uint64_t seed,
                                        int num_classes = kNumClasses) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < num_classes, "stratified_split: label out of range");
    by_class[labels[i]].push_back(i);
  }
  for (const auto& members : by_class) {
    require(members.size() == by_class.front().size(), "stratified_split: dataset is not balanced");
  }
  SplitAssignment out;
  out.of.assign(labels.size(), Split::train);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    Stream rng(seed, 0x73706c6974ULL + c);  // "split"
    shuffle(std::span<std::size_t>(members), rng);
    const auto counts = split_counts_per_class(members.size());
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k < counts.val) {
        out.of[members[k]] = Split::val;
      } else if (k < counts.val + counts.test) {
        out.of[members[k]] = Split::test;
      } else {
        out.of[members[k]] = Split::train;
      }
    }
  }
  return out;
}

/// Full recipe for signal `index` of a dataset.
inline SignalSpec draw_signal_spec(const DatasetConfig& cfg, std::uint64_t index) {
  const std::uint64_t key = derive_key(cfg.seed, index);
  Stream rng(key, 0x737065630ULL);  // "spec"
  SignalSpec s;
  s.event_class = class_from_label(static_cast<int>(index % kNumClasses));
  s.sample_rate = cfg.sample_rate;
  s.duration = cfg.duration;
  s.seed = key;
  const PerturbationRanges& pr = cfg.perturb;
  // Every draw is consumed regardless of mode so that streams stay aligned.
  const double a = rng.uniform(pr.amplitude.lo, pr.amplitude.hi);
  const double f = rng.uniform(pr.frequency.lo, pr.frequency.hi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double snr = pr.snr_db ? rng.uniform(pr.snr_db->lo, pr.snr_db->hi) : (rng.uniform(), 0.0);
  const double dc = rng.uniform(pr.dc_offset.lo, pr.dc_offset.hi);
  s.amplitude = a;
  s.frequency = f;
  s.phase = phase;
  s.perturb.amplitude_variation = pr.amplitude.lo != pr.amplitude.hi;
  s.perturb.frequency_variation = pr.frequency.lo != pr.frequency.hi;
  if (pr.snr_db) s.perturb.snr_db = snr;
  s.perturb.dc_offset = dc;
  s.params = sample_event_params(s.event_class, key, f, cfg.duration);
  return s;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  require(cfg.count > 0 && cfg.count % kNumClasses == 0, "dataset count must be a positive multiple of 10");
  require(cfg.sample_rate > 0.0 && cfg.duration > 0.0, "sample rate and duration must be positive");
  const auto seq_len = static_cast<std::uint32_t>(std::llround(cfg.sample_rate * cfg.duration));
  require(seq_len > 0, "record holds no samples");

  Dataset ds;
  ds.store.seq_len = seq_len;
  ds.store.labels.resize(cfg.count);
  ds.store.samples.resize(cfg.count * seq_len);
  ds.specs.reserve(cfg.count);
  for (std::uint64_t i = 0; i < cfg.count; ++i) {
    SignalSpec spec = draw_signal_spec(cfg, i);
    const auto x = normalize(render(spec));
    ds.store.labels[i] = static_cast<std::uint8_t>(label_of(spec.event_class));
    auto dst = ds.store.signal(i);
    for (std::size_t k = 0; k < seq_len; ++k) dst[k] = static_cast<float>(x[k]);
    ds.specs.push_back(spec);
  }

  DatasetManifest& m = ds.manifest;
  m.dataset_id = cfg.dataset_id;
  m.total_count = cfg.count;
  m.per_class_count = cfg.count / kNumClasses;
  m.sample_rate = cfg.sample_rate;
  m.duration = cfg.duration;
  m.seq_len = seq_len;
  m.seed = cfg.seed;
  m.perturb = cfg.perturb;
  const auto sc = split_counts_per_class(m.per_class_count);
  m.split_train = sc.train * kNumClasses;
  m.split_val = sc.val * kNumClasses;
  m.split_test = sc.test * kNumClasses;
  return ds;
}

// ---------------------------------------------------------------------------
// Binary store

inline void save_store(const std::string& path, const SignalStore& store) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  io::Writer w;
  w.put_bytes(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>("PQE1"), 4));
  w.put(kStoreVersion);
  w.put(static_cast<std::uint64_t>(store.size()));
  w.put(store.seq_len);
  w.put(static_cast<std::uint8_t>(1));
  io::write_all(out, w.bytes());

  io::Crc32 crc;
  for (std::size_t i = 0; i < store.size(); ++i) {
    w.clear();
    w.put(store.labels[i]);
    for (float v : store.signal(i)) w.put_f32(v);
    crc.update(w.bytes());
    io::write_all(out, w.bytes());
  }
  w.clear();
  w.put(crc.value());
  io::write_all(out, w.bytes());
  if (!out) throw IoError("write failed: " + path);
}

inline SignalStore load_store(const std::string& path) {
  using Kind = StoreError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError(Kind::unreadable, "cannot open " + path);

  std::array<unsigned char, 21> header{};
  if (io::read_some(in, header) != header.size()) throw StoreError(Kind::corrupt_header, "short header: " + path);
  io::Reader r(std::span<const unsigned char>(header),
               [] { throw StoreError(Kind::corrupt_header, "short header"); });
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "PQE1")) throw StoreError(Kind::corrupt_header, "bad magic: " + path);
  const auto version = r.get<std::uint32_t>();
  if (version != kStoreVersion) {
    throw StoreError(Kind::unsupported_version, "unsupported store version " + std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  const auto seq_len = r.get<std::uint32_t>();
  const auto label_width = r.get<std::uint8_t>();
  if (label_width != 1 || seq_len == 0) throw StoreError(Kind::corrupt_header, "bad record layout: " + path);

  SignalStore store;
  store.seq_len = seq_len;
  const std::size_t record = 1 + 4 * static_cast<std::size_t>(seq_len);
  // Guard the allocation against a corrupt count before trusting it.
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(static_cast<std::streamoff>(header.size()));
  if (count > (file_size - header.size()) / record) {
    throw StoreError(Kind::truncated_payload, "truncated payload: " + path);
  }
  store.labels.resize(count);
  store.samples.resize(count * seq_len);

  io::Crc32 crc;
  std::vector<unsigned char> buf(record);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (io::read_some(in, buf) != record) throw StoreError(Kind::truncated_payload, "truncated payload: " + path);
    crc.update(buf);
    io::Reader rec(std::span<const unsigned char>(buf),
                   [] { throw StoreError(Kind::truncated_payload, "truncated record"); });
    store.labels[i] = rec.get<std::uint8_t>();
    auto dst = store.signal(i);
    for (auto& v : dst) v = rec.get_f32();
  }
  std::array<unsigned char, 4> trailer{};
  if (io::read_some(in, trailer) != trailer.size()) {
    throw StoreError(Kind::truncated_payload, "missing checksum: " + path);
  }
  io::Reader tr(std::span<const unsigned char>(trailer), [] {});
  if (tr.get<std::uint32_t>() != crc.value()) throw StoreError(Kind::checksum_mismatch, "checksum mismatch: " + path);
  return store;
}

// ---------------------------------------------------------------------------
// Manifest (key = value text)

inline std::string manifest_to_text(const DatasetManifest& m) {
  std::ostringstream os;
  const auto line = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  line("format_version", std::to_string(m.format_version));
  line("dataset_id", m.dataset_id);
  line("total_count", std::to_string(m.total_count));
  line("per_class_count", std::to_string(m.per_class_count));
  line("num_classes", std::to_string(m.num_classes));
  line("sample_rate", kv::format(m.sample_rate));
  line("duration", kv::format(m.duration));
  line("seq_len", std::to_string(m.seq_len));
  line("seed", std::to_string(m.seed));
  line("snr_db_min", m.perturb.snr_db ? kv::format(m.perturb.snr_db->lo) : "none");
  line("snr_db_max", m.perturb.snr_db ? kv::format(m.perturb.snr_db->hi) : "none");
  line("dc_offset_min", kv::format(m.perturb.dc_offset.lo));
  line("dc_offset_max", kv::format(m.perturb.dc_offset.hi));
  line("amplitude_min", kv::format(m.perturb.amplitude.lo));
  line("amplitude_max", kv::format(m.perturb.amplitude.hi));
  line("frequency_min", kv::format(m.perturb.frequency.lo));
  line("frequency_max", kv::format(m.perturb.frequency.hi));
  line("normalization", m.normalization);
  line("split_train", std::to_string(m.split_train));
  line("split_val", std::to_string(m.split_val));
  line("split_test", std::to_string(m.split_test));
  return os.str();
}

inline DatasetManifest manifest_from_text(const std::string& text) {
  DatasetManifest m;
  std::optional<double> snr_lo, snr_hi;
  for (const auto& [k, v] : kv::parse(text)) {
    if (k == "format_version") m.format_version = kv::to_int<std::uint32_t>(k, v);
    else if (k == "dataset_id") m.dataset_id = v;
    else if (k == "total_count") m.total_count = kv::to_int<std::uint64_t>(k, v);
    else if (k == "per_class_count") m.per_class_count = kv::to_int<std::uint64_t>(k, v);
    else if (k == "num_classes") m.num_classes = kv::to_int<std::uint32_t>(k, v);
    else if (k == "sample_rate") m.sample_rate = kv::to_double(k, v);
    else if (k == "duration") m.duration = kv::to_double(k, v);
    else if (k == "seq_len") m.seq_len = kv::to_int<std::uint32_t>(k, v);
    else if (k == "seed") m.seed = kv::to_int<std::uint64_t>(k, v);
    else if (k == "snr_db_min") { if (v != "none") snr_lo = kv::to_double(k, v); }
    else if (k == "snr_db_max") { if (v != "none") snr_hi = kv::to_double(k, v); }
    else if (k == "dc_offset_min") m.perturb.dc_offset.lo = kv::to_double(k, v);
    else if (k == "dc_offset_max") m.perturb.dc_offset.hi = kv::to_double(k, v);
    else if (k == "amplitude_min") m.perturb.amplitude.lo = kv::to_double(k, v);
    else if (k == "amplitude_max") m.perturb.amplitude.hi = kv::to_double(k, v);
    else if (k == "frequency_min") m.perturb.frequency.lo = kv::to_double(k, v);
    else if (k == "frequency_max") m.perturb.frequency.hi = kv::to_double(k, v);
    else if (k == "normalization") m.normalization = v;
    else if (k == "split_train") m.split_train = kv::to_int<std::uint64_t>(k, v);
    else if (k == "split_val") m.split_val = kv::to_int<std::uint64_t>(k, v);
    else if (k == "split_test") m.split_test = kv::to_int<std::uint64_t>(k, v);
    else throw ValidationError("unknown manifest key '" + k + "'");
  }
  require(m.format_version == kManifestVersion, "unsupported manifest version");
  require(snr_lo.has_value() == snr_hi.has_value(), "manifest snr range is half-specified");
  if (snr_lo) m.perturb.snr_db = Interval{*snr_lo, *snr_hi};
  return m;
}

// ---------------------------------------------------------------------------
// Provenance (one CSV row per signal)

inline std::string provenance_to_csv(std::span<const SignalSpec> specs) {
  std::ostringstream os;
  os << "index,label,class,amplitude,frequency,phase,snr_db,dc_offset,alpha,t1,t2,h3,h5,h7,flicker_depth,"
        "flicker_freq,transient_gain,transient_freq,transient_decay,impulse_rise,impulse_fall\n";
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const SignalSpec& s = specs[i];
    const EventParams& p = s.params;
    os << i << ',' << label_of(s.event_class) << ',' << class_name(s.event_class) << ',' << kv::format(s.amplitude)
       << ',' << kv::format(s.frequency) << ',' << kv::format(s.phase) << ','
       << (s.perturb.snr_db ? kv::format(*s.perturb.snr_db) : std::string("none")) << ','
       << kv::format(s.perturb.dc_offset);
    for (double v : {p.alpha, p.t1, p.t2, p.h3, p.h5, p.h7, p.flicker_depth, p.flicker_freq, p.transient_gain,
                     p.transient_freq, p.transient_decay, p.impulse_rise, p.impulse_fall}) {
      os << ',' << kv::format(v);
    }
    os << '\n';
  }
  return os.str();
}

/// Provenance fields that the range scans need.
struct ProvenanceRow {
  int label = 0;
  double amplitude = 0.0, frequency = 0.0, phase = 0.0;
  std::optional<double> snr_db;
  double dc_offset = 0.0;
};

inline std::vector<ProvenanceRow> provenance_from_csv(const std::string& text) {
  std::vector<ProvenanceRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    require(cells.size() == 21, "provenance row has " + std::to_string(cells.size()) + " cells");
    ProvenanceRow r;
    r.label = kv::to_int<int>("label", cells[1]);
    r.amplitude = kv::to_double("amplitude", cells[3]);
    r.frequency = kv::to_double("frequency", cells[4]);
    r.phase = kv::to_double("phase", cells[5]);
    if (cells[6] != "none") r.snr_db = kv::to_double("snr_db", cells[6]);
    r.dc_offset = kv::to_double("dc_offset", cells[7]);
    rows.push_back(r);
  }
  return rows;
}

inline std::string manifest_path(const std::string& store_path) { return store_path + ".manifest"; }
inline std::string provenance_path(const std::string& store_path) { return store_path + ".provenance.csv"; }

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

/// Writes the store plus its manifest and provenance side files.
inline void save_dataset(const std::string& store_path, const Dataset& ds) {
  save_store(store_path, ds.store);
  write_text(manifest_path(store_path), manifest_to_text(ds.manifest));
  write_text(provenance_path(store_path), provenance_to_csv(ds.specs));
}

inline DatasetManifest load_manifest(const std::string& store_path) {
  return manifest_from_text(kv::read_file(manifest_path(store_path)));
}

}  // namespace pqe
