#pragma once

// Parametric synthesis of the ten power-quality-event classes and the
// measurement perturbations applied on top of them.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pqe/error.hpp"
#include "pqe/rng.hpp"

namespace pqe {

enum class EventClass : std::uint8_t {
  pure = 0,
  sag = 1,
  swell = 2,
  oscillatory_transient = 3,
  flicker = 4,
  interruption = 5,
  impulsive_transient = 6,
  harmonics = 7,
  sag_harmonics = 8,
  swell_harmonics = 9,
};

inline constexpr int kNumClasses = 10;

inline constexpr std::array<EventClass, kNumClasses> kAllClasses = {
    EventClass::pure,         EventClass::sag,
    EventClass::swell,        EventClass::oscillatory_transient,
    EventClass::flicker,      EventClass::interruption,
    EventClass::impulsive_transient, EventClass::harmonics,
    EventClass::sag_harmonics, EventClass::swell_harmonics,
};

inline constexpr int label_of(EventClass c) noexcept { return static_cast<int>(c); }

inline EventClass class_from_label(int label) {
  require(label >= 0 && label < kNumClasses, "class label out of range: " + std::to_string(label));
  return static_cast<EventClass>(label);
}

inline constexpr std::string_view class_name(EventClass c) noexcept {
  constexpr std::array<std::string_view, kNumClasses> names = {
      "pure",         "sag",         "swell",     "oscillatory_transient", "flicker",
      "interruption", "impulsive_transient", "harmonics", "sag_harmonics",  "swell_harmonics"};
  return names[static_cast<std::size_t>(c)];
}

/// Short table tag, C1..C10.
inline std::string class_tag(EventClass c) { return "C" + std::to_string(label_of(c) + 1); }

/// Event parameters. Fields a class does not use stay at zero.
struct EventParams {
  double alpha = 0.0;             // sag depth / swell rise
  double t1 = 0.0;                // event start [s]
  double t2 = 0.0;                // event end [s]
  double h3 = 0.0, h5 = 0.0, h7 = 0.0;  // odd-harmonic amplitudes
  double flicker_depth = 0.0;     // lambda
  double flicker_freq = 0.0;      // [Hz]
  double transient_gain = 0.0;    // beta, oscillatory and impulsive transients
  double transient_freq = 0.0;    // [Hz]
  double transient_decay = 0.0;   // tau [s]
  double impulse_rise = 0.0;      // tau1 [s]
  double impulse_fall = 0.0;      // tau2 [s]

  bool operator==(const EventParams&) const = default;
};

/// Per-class parameter ranges.
namespace ranges {
inline constexpr double sag_alpha[2] = {0.1, 0.9};
inline constexpr double swell_alpha[2] = {0.1, 0.8};
inline constexpr double interruption_alpha[2] = {0.9, 1.0};
inline constexpr double harmonic[2] = {0.05, 0.15};
inline constexpr double flicker_depth[2] = {0.05, 0.10};
inline constexpr double flicker_freq[2] = {5.0, 20.0};
inline constexpr double osc_gain[2] = {0.1, 0.8};
inline constexpr double osc_decay[2] = {0.008, 0.040};
inline constexpr double osc_freq[2] = {300.0, 900.0};
inline constexpr double impulse_gain[2] = {1.0, 3.0};
inline constexpr double impulse_rise[2] = {0.5e-3, 1.5e-3};
inline constexpr double impulse_fall_ratio = 0.1;
inline constexpr double window_periods[2] = {1.0, 9.0};
/// Transient onsets as fractions of the record (0.02 s .. 0.15 s of a 0.2 s record).
inline constexpr double onset_fraction[2] = {0.1, 0.75};
/// Oscillatory transient window length in decay constants.
inline constexpr double osc_support_decays = 5.0;

inline constexpr double snr_db[2] = {5.0, 60.0};
inline constexpr double dc_offset[2] = {-0.10, 0.10};
inline constexpr double amplitude[2] = {0.9, 1.1};
inline constexpr double frequency[2] = {47.5, 52.5};
}  // namespace ranges

struct PerturbationSpec {
  std::optional<double> snr_db;  // absent = no noise
  double dc_offset = 0.0;        // signed fraction of A
  bool amplitude_variation = false;
  bool frequency_variation = false;

  bool operator==(const PerturbationSpec&) const = default;
};

struct SignalSpec {
  EventClass event_class = EventClass::pure;
  EventParams params;
  double amplitude = 1.0;   // [pu]
  double frequency = 50.0;  // [Hz]
  double phase = 0.0;       // [rad]
  double sample_rate = 10000.0;
  double duration = 0.2;
  PerturbationSpec perturb;
  std::uint64_t seed = 0;

  std::size_t num_samples() const { return static_cast<std::size_t>(std::llround(sample_rate * duration)); }

  bool operator==(const SignalSpec&) const = default;
};

namespace detail {

inline bool in_range(double v, const double (&r)[2], double slack = 1e-12) {
  return v >= r[0] - slack && v <= r[1] + slack;
}

inline void check_range(double v, const double (&r)[2], std::string_view what) {
  if (!in_range(v, r)) {
    throw ValidationError(std::string(what) + " = " + std::to_string(v) + " outside [" + std::to_string(r[0]) +
                          ", " + std::to_string(r[1]) + "]");
  }
}

inline void check_window(const EventParams& p, double duration) {
  require(p.t1 >= 0.0 && p.t1 < p.t2 && p.t2 <= duration + 1e-12,
          "event window must satisfy 0 <= t1 < t2 <= duration");
}

inline void check_windowed(const EventParams& p, double frequency, double duration) {
  check_window(p, duration);
  const double period = 1.0 / frequency;
  const double len = (p.t2 - p.t1) / period;
  const double max_periods = std::min(ranges::window_periods[1], duration / period);
  if (len < ranges::window_periods[0] - 1e-9 || len > max_periods + 1e-9) {
    throw ValidationError("event window of " + std::to_string(len) + " periods outside [1, 9]");
  }
}

inline void check_harmonics(const EventParams& p) {
  check_range(p.h3, ranges::harmonic, "h3");
  check_range(p.h5, ranges::harmonic, "h5");
  check_range(p.h7, ranges::harmonic, "h7");
}

inline double step(double t, double at) { return t >= at ? 1.0 : 0.0; }

}  // namespace detail

/// Throws ValidationError when `s` cannot be synthesized.
inline void validate(const SignalSpec& s) {
  require(std::isfinite(s.sample_rate) && s.sample_rate > 0.0, "sample rate must be positive");
  require(std::isfinite(s.duration) && s.duration > 0.0, "duration must be positive");
  require(s.num_samples() >= 1, "record holds no samples");
  require(std::isfinite(s.amplitude) && s.amplitude > 0.0, "amplitude must be positive");
  require(std::isfinite(s.frequency) && s.frequency > 0.0, "frequency must be positive");
  if (s.perturb.amplitude_variation) detail::check_range(s.amplitude, ranges::amplitude, "amplitude");
  if (s.perturb.frequency_variation) detail::check_range(s.frequency, ranges::frequency, "frequency");
  if (s.perturb.snr_db && std::isfinite(*s.perturb.snr_db)) {
    detail::check_range(*s.perturb.snr_db, ranges::snr_db, "snr_db");
  }
  detail::check_range(s.perturb.dc_offset, ranges::dc_offset, "dc_offset");

  const EventParams& p = s.params;
  switch (s.event_class) {
    case EventClass::pure:
      break;
    case EventClass::sag:
      detail::check_range(p.alpha, ranges::sag_alpha, "sag alpha");
      detail::check_windowed(p, s.frequency, s.duration);
      break;
    case EventClass::swell:
      detail::check_range(p.alpha, ranges::swell_alpha, "swell alpha");
      detail::check_windowed(p, s.frequency, s.duration);
      break;
    case EventClass::interruption:
      detail::check_range(p.alpha, ranges::interruption_alpha, "interruption alpha");
      detail::check_windowed(p, s.frequency, s.duration);
      break;
    case EventClass::flicker:
      detail::check_range(p.flicker_depth, ranges::flicker_depth, "flicker depth");
      detail::check_range(p.flicker_freq, ranges::flicker_freq, "flicker frequency");
      break;
    case EventClass::oscillatory_transient:
      detail::check_range(p.transient_gain, ranges::osc_gain, "transient gain");
      detail::check_range(p.transient_decay, ranges::osc_decay, "transient decay");
      detail::check_range(p.transient_freq, ranges::osc_freq, "transient frequency");
      detail::check_window(p, s.duration);
      break;
    case EventClass::impulsive_transient:
      detail::check_range(p.transient_gain, ranges::impulse_gain, "impulse gain");
      detail::check_range(p.impulse_rise, ranges::impulse_rise, "impulse rise");
      require(p.impulse_fall > 0.0 && p.impulse_fall < p.impulse_rise, "impulse fall must be in (0, rise)");
      detail::check_window(p, s.duration);
      break;
    case EventClass::harmonics:
      detail::check_harmonics(p);
      break;
    case EventClass::sag_harmonics:
      detail::check_range(p.alpha, ranges::sag_alpha, "sag alpha");
      detail::check_windowed(p, s.frequency, s.duration);
      detail::check_harmonics(p);
      break;
    case EventClass::swell_harmonics:
      detail::check_range(p.alpha, ranges::swell_alpha, "swell alpha");
      detail::check_windowed(p, s.frequency, s.duration);
      detail::check_harmonics(p);
      break;
  }
}

/// Fundamental amplitude that keeps the total harmonic power equal to a pure sine.
inline double fundamental_weight(const EventParams& p) {
  return std::sqrt(1.0 - p.h3 * p.h3 - p.h5 * p.h5 - p.h7 * p.h7);
}

/// Clean waveform value of the class at time t (before amplitude scaling by A).
inline double shape_at(const SignalSpec& s, double t) {
  const EventParams& p = s.params;
  const double arg = 2.0 * std::numbers::pi * s.frequency * t - s.phase;
  const double fundamental = std::sin(arg);
  const double window = detail::step(t, p.t1) - detail::step(t, p.t2);
  const auto harmonic_sum = [&] {
    return fundamental_weight(p) * fundamental + p.h3 * std::sin(3.0 * arg) + p.h5 * std::sin(5.0 * arg) +
           p.h7 * std::sin(7.0 * arg);
  };

  switch (s.event_class) {
    case EventClass::pure:
      return fundamental;
    case EventClass::sag:
    case EventClass::interruption:
      return (1.0 - p.alpha * window) * fundamental;
    case EventClass::swell:
      return (1.0 + p.alpha * window) * fundamental;
    case EventClass::flicker:
      return (1.0 + p.flicker_depth * std::sin(2.0 * std::numbers::pi * p.flicker_freq * t)) * fundamental;
    case EventClass::oscillatory_transient: {
      if (window == 0.0) return fundamental;
      const double dt = t - p.t1;
      return fundamental + p.transient_gain * std::exp(-dt / p.transient_decay) *
                               std::sin(2.0 * std::numbers::pi * p.transient_freq * dt);
    }
    case EventClass::impulsive_transient: {
      if (t < p.t1) return fundamental;
      const double dt = t - p.t1;
      return fundamental + p.transient_gain * (std::exp(-dt / p.impulse_rise) - std::exp(-dt / p.impulse_fall));
    }
    case EventClass::harmonics:
      return harmonic_sum();
    case EventClass::sag_harmonics:
      return (1.0 - p.alpha * window) * harmonic_sum();
    case EventClass::swell_harmonics:
      return (1.0 + p.alpha * window) * harmonic_sum();
  }
  return fundamental;
}

/// Clean (unperturbed) waveform, round(fs * duration) samples at t = k / fs.
inline std::vector<double> synthesize(const SignalSpec& spec) {
  validate(spec);
  const std::size_t n = spec.num_samples();
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / spec.sample_rate;
    out[k] = spec.amplitude * shape_at(spec, t);
  }
  return out;
}

/// Draws per-class event parameters. Windows are sized in periods of `frequency`
/// and placed fully inside a record of `duration` seconds.
inline EventParams sample_event_params(EventClass c, std::uint64_t seed, double frequency = 50.0,
                                       double duration = 0.2) {
  Stream rng(seed, 0x6576656e74ULL);  // "event"
  EventParams p;
  const auto draw = [&](const double (&r)[2]) { return rng.uniform(r[0], r[1]); };
  const auto draw_window = [&] {
    const double period = 1.0 / frequency;
    const double max_periods = std::min(ranges::window_periods[1], duration / period);
    const double len = period * rng.uniform(ranges::window_periods[0], max_periods);
    p.t1 = rng.uniform(0.0, duration - len);
    p.t2 = p.t1 + len;
  };
  const auto draw_onset = [&] {
    return duration * rng.uniform(ranges::onset_fraction[0], ranges::onset_fraction[1]);
  };
  const auto draw_harmonics = [&] {
    p.h3 = draw(ranges::harmonic);
    p.h5 = draw(ranges::harmonic);
    p.h7 = draw(ranges::harmonic);
  };

  switch (c) {
    case EventClass::pure:
      break;
    case EventClass::sag:
      p.alpha = draw(ranges::sag_alpha);
      draw_window();
      break;
    case EventClass::swell:
      p.alpha = draw(ranges::swell_alpha);
      draw_window();
      break;
    case EventClass::interruption:
      p.alpha = draw(ranges::interruption_alpha);
      draw_window();
      break;
    case EventClass::flicker:
      p.flicker_depth = draw(ranges::flicker_depth);
      p.flicker_freq = draw(ranges::flicker_freq);
      p.t1 = 0.0;
      p.t2 = duration;
      break;
    case EventClass::oscillatory_transient:
      p.transient_gain = draw(ranges::osc_gain);
      p.transient_decay = draw(ranges::osc_decay);
      p.transient_freq = draw(ranges::osc_freq);
      p.t1 = draw_onset();
      p.t2 = std::min(duration, p.t1 + ranges::osc_support_decays * p.transient_decay);
      break;
    case EventClass::impulsive_transient:
      p.transient_gain = draw(ranges::impulse_gain);
      p.impulse_rise = draw(ranges::impulse_rise);
      p.impulse_fall = p.impulse_rise * ranges::impulse_fall_ratio;
      p.t1 = draw_onset();
      p.t2 = duration;
      break;
    case EventClass::harmonics:
      draw_harmonics();
      break;
    case EventClass::sag_harmonics:
      p.alpha = draw(ranges::sag_alpha);
      draw_window();
      draw_harmonics();
      break;
    case EventClass::swell_harmonics:
      p.alpha = draw(ranges::swell_alpha);
      draw_window();
      draw_harmonics();
      break;
  }
  return p;
}

inline double mean_square(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

/// Adds zero-mean Gaussian noise at the requested SNR relative to the signal's
/// mean-square power. An infinite SNR leaves the signal untouched.
inline std::vector<double> add_awgn(std::span<const double> signal, double snr_db, std::uint64_t seed) {
  require(!signal.empty(), "add_awgn: empty signal");
  require(!std::isnan(snr_db) && snr_db != -std::numeric_limits<double>::infinity(), "add_awgn: snr must be finite");
  std::vector<double> out(signal.begin(), signal.end());
  if (snr_db == std::numeric_limits<double>::infinity()) return out;
  const double power = mean_square(signal);
  require(power > 0.0, "add_awgn: SNR undefined for an all-zero signal");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  Stream rng(seed, 0x6e6f697365ULL);  // "noise"
  for (double& v : out) v += sigma * rng.gaussian();
  return out;
}

inline std::vector<double> add_dc_offset(std::span<const double> signal, double offset_fraction, double amplitude) {
  detail::check_range(offset_fraction, ranges::dc_offset, "dc_offset");
  std::vector<double> out(signal.begin(), signal.end());
  const double shift = offset_fraction * amplitude;
  for (double& v : out) v += shift;
  return out;
}

/// 10 log10(P_clean / P_residual); +inf when the residual is exactly zero.
inline double measure_snr(std::span<const double> clean, std::span<const double> noisy) {
  require(clean.size() == noisy.size(), "measure_snr: length mismatch");
  const double p_clean = mean_square(clean);
  require(p_clean > 0.0, "measure_snr: clean signal is all zero");
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double r = noisy[i] - clean[i];
    acc += r * r;
  }
  if (acc == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(p_clean / (acc / static_cast<double>(clean.size())));
}

/// synthesize -> AWGN -> DC offset.
inline std::vector<double> render(const SignalSpec& spec) {
  auto x = synthesize(spec);
  if (spec.perturb.snr_db) x = add_awgn(x, *spec.perturb.snr_db, spec.seed);
  if (spec.perturb.dc_offset != 0.0) x = add_dc_offset(x, spec.perturb.dc_offset, spec.amplitude);
  return x;
}

}  // namespace pqe
