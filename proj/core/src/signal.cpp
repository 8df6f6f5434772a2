#include "xmodal/signal.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

// Dower transform coefficients (Dower 1980, as tabulated in Edenbrandt &
// Pahlm 1988). Rows: I, II, V1..V6; columns: X, Y, Z.
constexpr double kDower[8][3] = {
    {0.632, -0.235, 0.059},   // I
    {0.235, 1.066, -0.132},   // II
    {-0.515, 0.157, -0.917},  // V1
    {0.044, 0.164, -1.387},   // V2
    {0.882, 0.098, -1.277},   // V3
    {1.213, 0.127, -0.601},   // V4
    {1.125, 0.127, -0.086},   // V5
    {0.831, 0.076, 0.230},    // V6
};

// Moore-Penrose pseudo-inverse of kDower, (D^T D)^-1 D^T, computed once in
// 40-digit arithmetic and frozen here. Rounded to three decimals this equals
// the inverse Dower matrix printed by Edenbrandt & Pahlm.
constexpr double kInverseDower[3][8] = {
    {0.156084316109211151, -0.00991518120853806882, -0.172448666746419188,
     -0.0737697673213229229, 0.122215012218205262, 0.231025942556299599,
     0.239310532244155002, 0.193582585221172656},
    {-0.22739122032087363, 0.886525216049342783, 0.0572235143696241001,
     -0.0189541897723389722, -0.106367080089442049, -0.0219858235393165721,
     0.0409466770585343103, 0.0482568912427962881},
    {0.0216542849576210982, 0.10207166278981241, -0.228910854782387506,
     -0.310011612024780026, -0.245875359608951327, -0.0633508309682853379,
     0.054781607901792865, 0.10849144177791399},
};

// Row indices of the eight independent leads within the 12-lead layout.
constexpr int kIndependentLeads[8] = {0, 1, 6, 7, 8, 9, 10, 11};

Matrix dower_matrix() {
  Matrix d(8, 3);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 3; ++c) d(r, c) = kDower[r][c];
  return d;
}

Matrix inverse_dower_matrix() {
  Matrix t(3, 8);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 8; ++c) t(r, c) = kInverseDower[r][c];
  return t;
}

// Exact order statistic of the centered, edge-replicated window around t.
double window_median(const Vector& lead, Eigen::Index t, Eigen::Index half,
                     std::vector<double>& scratch) {
  const Eigen::Index n = lead.size();
  scratch.clear();
  for (Eigen::Index k = t - half; k <= t + half; ++k) {
    const Eigen::Index idx = std::clamp<Eigen::Index>(k, 0, n - 1);
    scratch.push_back(lead[idx]);
  }
  const auto mid = scratch.begin() + static_cast<std::ptrdiff_t>(scratch.size() / 2);
  std::nth_element(scratch.begin(), mid, scratch.end());
  return *mid;
}

}  // namespace

void EcgRecord::validate() const {
  require(samples.rows() == kNumLeads, "EcgRecord: expected 12 leads");
  require(samples.cols() >= 1, "EcgRecord: empty record");
  require(all_finite(samples), "EcgRecord: non-finite samples");
  require(sample_rate > 0.0, "EcgRecord: sample_rate must be > 0");
  require(label == 0 || label == 1, "EcgRecord: label must be 0/1");
}

void AugmentConfig::validate() const {
  require(rotation_max_degrees >= 0.0, "AugmentConfig: negative rotation bound");
  require(scale_lo > 0.0 && scale_lo <= scale_hi, "AugmentConfig: bad scale range");
  require(mask_fraction_max >= 0.0 && mask_fraction_max < 1.0,
          "AugmentConfig: mask fraction must be in [0,1)");
  require(noise_sigma >= 0.0, "AugmentConfig: negative noise sigma");
  require(wander_amplitude >= 0.0, "AugmentConfig: negative wander amplitude");
}

EcgRecord resample_to_100hz(const EcgRecord& rec) {
  rec.validate();
  const double ratio = rec.sample_rate / 100.0;
  const auto r = static_cast<Eigen::Index>(std::llround(ratio));
  require(r >= 1 && std::abs(ratio - static_cast<double>(r)) < 1e-9,
          "resample_to_100hz: sample rate must be an integer multiple of 100");

  EcgRecord out;
  out.sample_rate = 100.0;
  out.subject_id = rec.subject_id;
  out.label = rec.label;
  const Eigen::Index blocks = rec.length() / r;
  require(blocks >= 1, "resample_to_100hz: record shorter than one block");
  out.samples = Matrix::Zero(kNumLeads, blocks);
  for (Eigen::Index b = 0; b < blocks; ++b)
    out.samples.col(b) =
        rec.samples.middleCols(b * r, r).rowwise().mean();
  return out;
}

EcgRecord remove_baseline_wander(const EcgRecord& rec, double window_seconds) {
  rec.validate();
  const double w = window_seconds * rec.sample_rate;
  require(w >= 3.0, "remove_baseline_wander: window shorter than 3 samples");
  Eigen::Index win = static_cast<Eigen::Index>(std::floor(w));
  if (win % 2 == 0) --win;  // centered window needs odd length
  const Eigen::Index half = win / 2;

  EcgRecord out = rec;
  std::vector<double> scratch;
  scratch.reserve(static_cast<std::size_t>(win));
  for (int lead = 0; lead < kNumLeads; ++lead) {
    const Vector row = rec.samples.row(lead);
    for (Eigen::Index t = 0; t < rec.length(); ++t)
      out.samples(lead, t) = row[t] - window_median(row, t, half, scratch);
  }
  return out;
}

EcgRecord normalize_leads(const EcgRecord& rec) {
  rec.validate();
  EcgRecord out = rec;
  for (int lead = 0; lead < kNumLeads; ++lead) {
    const double lo = rec.samples.row(lead).minCoeff();
    const double hi = rec.samples.row(lead).maxCoeff();
    if (hi == lo) {
      out.samples.row(lead).setZero();
    } else {
      out.samples.row(lead) =
          (rec.samples.row(lead).array() - lo) * (2.0 / (hi - lo)) - 1.0;
    }
  }
  return out;
}

EcgRecord preprocess(const EcgRecord& rec, double wander_window_seconds) {
  return normalize_leads(
      remove_baseline_wander(resample_to_100hz(rec), wander_window_seconds));
}

Vcg inverse_dower(const EcgRecord& rec) {
  rec.validate();
  Matrix leads8(8, rec.length());
  for (int r = 0; r < 8; ++r) leads8.row(r) = rec.samples.row(kIndependentLeads[r]);
  Vcg v;
  v.samples = inverse_dower_matrix() * leads8;
  return v;
}

EcgRecord dower(const Vcg& v, double sample_rate, std::int64_t subject_id, int label) {
  require(v.samples.rows() == 3, "dower: VCG must have 3 rows");
  const Matrix leads8 = dower_matrix() * v.samples;

  EcgRecord out;
  out.sample_rate = sample_rate;
  out.subject_id = subject_id;
  out.label = label;
  out.samples = Matrix::Zero(kNumLeads, v.samples.cols());
  out.samples.row(0) = leads8.row(0);                                   // I
  out.samples.row(1) = leads8.row(1);                                   // II
  out.samples.row(2) = leads8.row(1) - leads8.row(0);                   // III
  out.samples.row(3) = -0.5 * (leads8.row(0) + leads8.row(1));          // aVR
  out.samples.row(4) = leads8.row(0) - 0.5 * leads8.row(1);             // aVL
  out.samples.row(5) = leads8.row(1) - 0.5 * leads8.row(0);             // aVF
  for (int r = 0; r < 6; ++r) out.samples.row(6 + r) = leads8.row(2 + r);
  return out;
}

Matrix sample_rotation(double max_degrees, std::uint64_t seed) {
  Rng rng(seed);
  // Axis uniform on the sphere, angle uniform in [0, max_degrees].
  Vector axis(3);
  do {
    axis << rng.normal(), rng.normal(), rng.normal();
  } while (axis.norm() < 1e-12);
  axis /= axis.norm();
  const double angle = rng.uniform(0.0, max_degrees) * M_PI / 180.0;

  // Rodrigues' formula.
  Matrix k = Matrix::Zero(3, 3);
  k(0, 1) = -axis[2];
  k(0, 2) = axis[1];
  k(1, 0) = axis[2];
  k(1, 2) = -axis[0];
  k(2, 0) = -axis[1];
  k(2, 1) = axis[0];
  return Matrix::Identity(3, 3) + std::sin(angle) * k +
         (1.0 - std::cos(angle)) * (k * k);
}

EcgRecord vcg_augment(const EcgRecord& rec, const AugmentConfig& cfg) {
  rec.validate();
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "vcg_augment"));

  const Matrix rot = sample_rotation(cfg.rotation_max_degrees, rng.next_u64());
  Matrix scale = Matrix::Zero(3, 3);
  for (int i = 0; i < 3; ++i) scale(i, i) = rng.uniform(cfg.scale_lo, cfg.scale_hi);

  Vcg v = inverse_dower(rec);
  v.samples = scale * (rot * v.samples);
  EcgRecord out = dower(v, rec.sample_rate, rec.subject_id, rec.label);

  const double fraction = rng.uniform(0.0, cfg.mask_fraction_max);
  return time_mask(out, fraction, rng.next_u64());
}

EcgRecord time_mask(const EcgRecord& rec, double fraction, std::uint64_t seed) {
  rec.validate();
  require(fraction >= 0.0 && fraction < 1.0, "time_mask: fraction must be in [0,1)");
  EcgRecord out = rec;
  const auto width =
      static_cast<Eigen::Index>(std::floor(fraction * static_cast<double>(rec.length())));
  if (width == 0) return out;
  Rng rng(seed);
  const auto offset = static_cast<Eigen::Index>(
      rng.uniform_index(static_cast<std::uint64_t>(rec.length() - width + 1)));
  out.samples.middleCols(offset, width).setZero();
  return out;
}

EcgRecord add_gaussian_noise(const EcgRecord& rec, double sigma, std::uint64_t seed) {
  rec.validate();
  require(sigma >= 0.0, "add_gaussian_noise: negative sigma");
  EcgRecord out = rec;
  if (sigma == 0.0) return out;
  Rng rng(seed);
  for (int lead = 0; lead < kNumLeads; ++lead)
    for (Eigen::Index t = 0; t < rec.length(); ++t)
      out.samples(lead, t) += rng.normal(0.0, sigma);
  return out;
}

EcgRecord add_wander(const EcgRecord& rec, double amplitude, double freq_hz,
                     std::uint64_t seed) {
  rec.validate();
  require(amplitude >= 0.0, "add_wander: negative amplitude");
  EcgRecord out = rec;
  if (amplitude == 0.0) return out;
  Rng rng(seed);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  for (Eigen::Index t = 0; t < rec.length(); ++t) {
    const double drift = amplitude * std::sin(2.0 * M_PI * freq_hz *
                                                  static_cast<double>(t) / rec.sample_rate +
                                              phase);
    out.samples.col(t).array() += drift;
  }
  return out;
}

EcgRecord time_domain_augment(const EcgRecord& rec, const AugmentConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "time_domain_augment"));
  const double fraction = rng.uniform(0.0, cfg.mask_fraction_max);
  EcgRecord out = time_mask(rec, fraction, rng.next_u64());
  out = add_gaussian_noise(out, cfg.noise_sigma, rng.next_u64());
  return add_wander(out, cfg.wander_amplitude, cfg.wander_freq_hz, rng.next_u64());
}

}  // namespace xmodal
