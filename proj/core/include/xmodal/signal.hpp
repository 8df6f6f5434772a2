#pragma once

#include <cstdint>
#include <string>

#include "xmodal/tensor.hpp"

namespace xmodal {

// 12-lead ECG preprocessing and the augmentations used for contrastive
// pre-training and alignment. Lead row order is the diagnostic standard:
// I, II, III, aVR, aVL, aVF, V1..V6.

inline constexpr int kNumLeads = 12;

struct EcgRecord {
  Matrix samples;  // 12 x T
  double sample_rate = 0.0;
  std::int64_t subject_id = 0;
  int label = 0;

  Eigen::Index length() const { return samples.cols(); }
  void validate() const;
};

struct Vcg {
  Matrix samples;  // 3 x T
};

struct AugmentConfig {
  double rotation_max_degrees = 45.0;
  double scale_lo = 0.75;
  double scale_hi = 1.25;
  double mask_fraction_max = 0.1;
  double noise_sigma = 0.05;
  double wander_amplitude = 0.1;
  double wander_freq_hz = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
};

// Block-mean decimation to 100 Hz; the source rate must be an integer
// multiple of 100. Trailing samples that do not fill a block are dropped.
EcgRecord resample_to_100hz(const EcgRecord& rec);

// Subtracts a centered moving median (edge-replicated window) per lead.
// window_seconds * sample_rate must be >= 3 samples.
EcgRecord remove_baseline_wander(const EcgRecord& rec, double window_seconds);

// Per lead, affine map sending min -> -1 and max -> +1; constant leads map
// to all zeros.
EcgRecord normalize_leads(const EcgRecord& rec);

// Full preprocessing chain: resample -> detrend -> normalize.
EcgRecord preprocess(const EcgRecord& rec, double wander_window_seconds = 0.6);

// Fixed linear maps between 12-lead ECG space and 3-axis VCG space.
// The forward coefficients are the published Dower transform (Dower 1980;
// tabulated in Edenbrandt & Pahlm 1988); the inverse is its Moore-Penrose
// pseudo-inverse at full double precision so that dower(inverse_dower(.))
// is an exact projection. See core/include/xmodal/signal.hpp and README.
Vcg inverse_dower(const EcgRecord& rec);
EcgRecord dower(const Vcg& v, double sample_rate, std::int64_t subject_id = 0,
                int label = 0);

// Random rotation with axis uniform on the sphere and angle uniform in
// [0, max_degrees]; exposed for tests.
Matrix sample_rotation(double max_degrees, std::uint64_t seed);

// ecg -> D * S * R * D^-1 * ecg with random rotation R and diagonal scaling
// S ~ U[scale_lo, scale_hi]^3, followed by random time masking with a
// fraction drawn from U[0, mask_fraction_max]. Deterministic per cfg.seed.
EcgRecord vcg_augment(const EcgRecord& rec, const AugmentConfig& cfg);

// Zeroes one contiguous window of floor(fraction * T) samples across all
// leads at a seed-determined offset.
EcgRecord time_mask(const EcgRecord& rec, double fraction, std::uint64_t seed);

EcgRecord add_gaussian_noise(const EcgRecord& rec, double sigma, std::uint64_t seed);

// Adds a sinusoid of the given amplitude and frequency with a
// seed-determined phase, shared across leads.
EcgRecord add_wander(const EcgRecord& rec, double amplitude, double freq_hz,
                     std::uint64_t seed);

// The time-domain augmentation bundle used during cross-modal alignment:
// time masking, Gaussian noise, wander injection, in that order.
EcgRecord time_domain_augment(const EcgRecord& rec, const AugmentConfig& cfg);

}  // namespace xmodal
