#include "xmodal/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "xmodal/rng.hpp"
#include "xmodal/signal.hpp"

namespace xmodal {

namespace {

constexpr int kRawRate = 500;      // Hz of the synthesized waveform
constexpr double kDurationS = 10;  // seconds per record
constexpr int kHarmonics = 4;      // base template harmonics per lead
constexpr int kLabelHarmonics = 3; // extra harmonics carrying the label

// The lead templates and the modality-B mixing map are fixed properties of
// the generator family, independent of cfg.seed: reseeding redraws subjects,
// not the world.
constexpr std::uint64_t kWorldSeed = 0x5eeded12c0ffeeull;

struct World {
  // base[lead][harmonic], phase[lead][harmonic]
  double base[12][kHarmonics];
  double phase[12][kHarmonics];
  // High-frequency component present in every record. Positives place it at
  // exact beat harmonics (kHarmonics+1 ...); negatives at the inharmonic
  // ratios below. Energy and amplitude statistics match across classes, so
  // the label is carried by harmonicity, not by any fixed linear template.
  double extra_amp[12][kLabelHarmonics];
  double extra_phase[12][kLabelHarmonics];
  double inharmonic_ratio[kLabelHarmonics];
};

World make_world() {
  World w;
  Rng rng(derive_seed(kWorldSeed, "lead_templates"));
  for (int l = 0; l < 12; ++l) {
    for (int j = 0; j < kHarmonics; ++j) {
      w.base[l][j] = rng.uniform(0.4, 1.0) / (1.0 + j);
      w.phase[l][j] = rng.uniform(0.0, 2.0 * M_PI);
    }
    for (int j = 0; j < kLabelHarmonics; ++j) {
      w.extra_amp[l][j] = rng.uniform(0.5, 1.0);
      w.extra_phase[l][j] = rng.uniform(0.0, 2.0 * M_PI);
    }
  }
  for (int j = 0; j < kLabelHarmonics; ++j)
    w.inharmonic_ratio[j] =
        static_cast<double>(kHarmonics + 1 + j) + rng.uniform(0.31, 0.47);
  return w;
}

Matrix make_modality_b_map(int out_dim, int latent_dim) {
  // Columns 0..latent_dim-1 mix the latent, the last column carries the label.
  Matrix m(out_dim, latent_dim + 1);
  Rng rng(derive_seed(kWorldSeed, "modality_b_map"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(latent_dim + 1));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  m.col(latent_dim) *= 3.0;  // label column dominates: modality B is informative
  return m;
}

// Latent -> per-(lead, harmonic) relative weight perturbation. Uses fixed
// per-slot mixing vectors drawn from the world seed.
double nuisance_gain(const World&, Rng& mix_rng, const Vector& u) {
  double dot = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) dot += mix_rng.normal() * u[i];
  return 1.0 + 0.5 * std::tanh(dot / std::sqrt(static_cast<double>(u.size())));
}

void round_f32(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

void round_f32(Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = static_cast<double>(static_cast<float>(v[i]));
}

// --- little-endian primitives -------------------------------------------------

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size())
    throw DatasetIoException(DatasetIoError::kTruncated, "dataset file truncated");
  T value;
  std::memcpy(&value, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

void GeneratorConfig::validate() const {
  require(n_subjects >= 1 && records_per_subject >= 1, "GeneratorConfig: empty dataset");
  require(positive_rate > 0.0 && positive_rate < 1.0,
          "GeneratorConfig: positive_rate must be in (0,1)");
  require(latent_dim >= 2 && modality_b_dim >= 1, "GeneratorConfig: dims too small");
  require(ecg_noise_sigma >= modality_b_noise_sigma && modality_b_noise_sigma >= 0.0,
          "GeneratorConfig: need ecg_noise_sigma >= modality_b_noise_sigma >= 0");
  require(ecg_present_rate > 0.0 && ecg_present_rate <= 1.0,
          "GeneratorConfig: ecg_present_rate must be in (0,1]");
}

Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  static const World world = make_world();
  const Matrix bmap = make_modality_b_map(cfg.modality_b_dim, cfg.latent_dim);

  Dataset ds;
  ds.modality_b_dim = cfg.modality_b_dim;
  ds.records.reserve(static_cast<std::size_t>(cfg.n_subjects) *
                     static_cast<std::size_t>(cfg.records_per_subject));

  const int raw_len = static_cast<int>(kRawRate * kDurationS);
  for (int s = 0; s < cfg.n_subjects; ++s) {
    Rng subj_rng(derive_seed(cfg.seed, "subject", static_cast<std::uint64_t>(s)));
    const int label = subj_rng.uniform() < cfg.positive_rate ? 1 : 0;
    Vector u(cfg.latent_dim);
    for (int i = 0; i < cfg.latent_dim; ++i) u[i] = subj_rng.normal();
    // Label-shifted latent mean: the shift is what modality B sees cleanly
    // and what the ECG expresses only weakly.
    u[0] += label ? 0.30 : -0.30;

    // Per-(lead, harmonic) relative weights for this subject.
    Rng mix_rng(derive_seed(kWorldSeed, "nuisance_mixers"));
    double gains[12][kHarmonics];
    for (int l = 0; l < 12; ++l)
      for (int j = 0; j < kHarmonics; ++j) gains[l][j] = nuisance_gain(world, mix_rng, u);
    const double hr_hz = std::clamp(1.3 + 0.18 * u[1], 0.7, 2.2);  // beats per second
    const double extra_strength = 0.16 * (1.0 + 0.2 * std::tanh(u[2]));

    for (int r = 0; r < cfg.records_per_subject; ++r) {
      Rng rec_rng(derive_seed(cfg.seed, "record", static_cast<std::uint64_t>(s),
                              static_cast<std::uint64_t>(r)));
      PairedSample sample;
      sample.subject_id = s;
      sample.label = label;
      sample.ecg_present = rec_rng.uniform() < cfg.ecg_present_rate;

      // Second modality: tanh of the fixed map over the label-augmented latent.
      Vector aug(cfg.latent_dim + 1);
      aug.head(cfg.latent_dim) = u;
      aug[cfg.latent_dim] = label - 0.5;
      sample.modality_b = (bmap * aug).array().tanh();
      for (int i = 0; i < cfg.modality_b_dim; ++i)
        sample.modality_b[i] += rec_rng.normal(0.0, cfg.modality_b_noise_sigma);

      if (sample.ecg_present) {
        EcgRecord raw;
        raw.sample_rate = kRawRate;
        raw.subject_id = s;
        raw.label = label;
        raw.samples = Matrix::Zero(12, raw_len);
        const double phase0 = rec_rng.uniform(0.0, 2.0 * M_PI);
        const double drift_phase = rec_rng.uniform(0.0, 2.0 * M_PI);
        // Per-record phase offset for the high-frequency component so no
        // fixed sample-domain template betrays the label to a linear read-out.
        const double extra_phase0 = rec_rng.uniform(0.0, 2.0 * M_PI);
        for (int l = 0; l < 12; ++l) {
          for (int t = 0; t < raw_len; ++t) {
            const double beat =
                2.0 * M_PI * hr_hz * static_cast<double>(t) / kRawRate + phase0;
            double v = 0.0;
            for (int j = 0; j < kHarmonics; ++j)
              v += world.base[l][j] * gains[l][j] *
                   std::sin(static_cast<double>(j + 1) * beat + world.phase[l][j]);
            for (int j = 0; j < kLabelHarmonics; ++j) {
              const double ratio = label ? static_cast<double>(kHarmonics + 1 + j)
                                         : world.inharmonic_ratio[j];
              v += extra_strength * world.extra_amp[l][j] *
                   std::sin(ratio * (beat + extra_phase0) + world.extra_phase[l][j]);
            }
            // Baseline drift, removed again by preprocessing.
            v += 0.6 * std::sin(2.0 * M_PI * 0.22 * static_cast<double>(t) / kRawRate +
                                drift_phase);
            raw.samples(l, t) = v;
          }
        }
        for (int l = 0; l < 12; ++l)
          for (int t = 0; t < raw_len; ++t)
            raw.samples(l, t) += rec_rng.normal(0.0, cfg.ecg_noise_sigma);
        sample.ecg = preprocess(raw).samples;
      } else {
        sample.ecg = Matrix::Zero(12, 1000);
      }

      round_f32(sample.ecg);
      round_f32(sample.modality_b);
      ds.records.push_back(std::move(sample));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

Split SplitAssignment::of(std::int64_t subject_id) const {
  auto it = by_subject.find(subject_id);
  require(it != by_subject.end(),
          "SplitAssignment: unknown subject " + std::to_string(subject_id));
  return it->second;
}

std::vector<std::size_t> SplitAssignment::indices(const Dataset& ds, Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    if (of(ds.records[i].subject_id) == split) out.push_back(i);
  return out;
}

SplitAssignment split_by_subject(const std::vector<std::int64_t>& subject_ids,
                                 double train_fraction, double val_fraction,
                                 double test_fraction, std::uint64_t seed) {
  require(!subject_ids.empty(), "split_by_subject: empty subject list");
  require(train_fraction > 0.0 && val_fraction > 0.0 && test_fraction > 0.0,
          "split_by_subject: fractions must be positive");
  require(std::abs(train_fraction + val_fraction + test_fraction - 1.0) < 1e-9,
          "split_by_subject: fractions must sum to 1");

  std::vector<std::int64_t> unique = subject_ids;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());

  Rng rng(derive_seed(seed, "split_by_subject"));
  rng.shuffle(unique);

  const auto n = static_cast<double>(unique.size());
  const auto cut1 = static_cast<std::size_t>(std::llround(train_fraction * n));
  const auto cut2 =
      static_cast<std::size_t>(std::llround((train_fraction + val_fraction) * n));

  SplitAssignment a;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    Split s = i < cut1 ? Split::kTrain : (i < cut2 ? Split::kVal : Split::kTest);
    a.by_subject[unique[i]] = s;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Weighted batches
// ---------------------------------------------------------------------------

WeightedBatchSampler::WeightedBatchSampler(const std::vector<int>& labels, int batch_size,
                                           double minority_target, std::uint64_t seed)
    : batch_size_(batch_size), target_(minority_target), state_seed_(seed) {
  require(batch_size >= 1, "WeightedBatchSampler: batch_size must be >= 1");
  require(minority_target > 0.0 && minority_target < 1.0,
          "WeightedBatchSampler: minority_target must be in (0,1)");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, "WeightedBatchSampler: labels must be 0/1");
    (labels[i] == 1 ? minority_ : majority_).push_back(i);
  }
  require(!minority_.empty() && !majority_.empty(),
          "WeightedBatchSampler: both classes must be present");
}

std::vector<std::size_t> WeightedBatchSampler::next() {
  Rng rng(derive_seed(state_seed_, "batch", static_cast<std::uint64_t>(drawn_++)));
  std::vector<std::size_t> batch(static_cast<std::size_t>(batch_size_));
  for (auto& slot : batch) {
    if (rng.uniform() < target_) {
      slot = minority_[rng.uniform_index(minority_.size())];
    } else {
      slot = majority_[rng.uniform_index(majority_.size())];
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// CMTX file I/O
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'C', 'M', 'T', 'X'};
constexpr unsigned char kVersion = 1;
constexpr std::uint32_t kLeads = 12;
constexpr std::uint32_t kSamplesPerLead = 1000;
}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
  std::string buf;
  buf.append(kMagic, 4);
  buf.push_back(static_cast<char>(kVersion));
  put_le<std::uint64_t>(buf, ds.records.size());
  put_le<std::uint32_t>(buf, kLeads);
  put_le<std::uint32_t>(buf, kSamplesPerLead);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.modality_b_dim));

  for (const auto& rec : ds.records) {
    require_shape(rec.ecg, kLeads, kSamplesPerLead, "write_dataset ecg");
    require(rec.modality_b.size() == ds.modality_b_dim,
            "write_dataset: modality_b dim mismatch");
    std::string rbuf;
    put_le<std::int64_t>(rbuf, rec.subject_id);
    rbuf.push_back(static_cast<char>(rec.label));
    rbuf.push_back(static_cast<char>(rec.ecg_present ? 1 : 0));
    for (Eigen::Index l = 0; l < rec.ecg.rows(); ++l)
      for (Eigen::Index t = 0; t < rec.ecg.cols(); ++t)
        put_le<float>(rbuf, static_cast<float>(rec.ecg(l, t)));
    for (Eigen::Index i = 0; i < rec.modality_b.size(); ++i)
      put_le<float>(rbuf, static_cast<float>(rec.modality_b[i]));
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(rbuf.data()),
              static_cast<uInt>(rbuf.size())));
    buf += rbuf;
    put_le<std::uint32_t>(buf, crc);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw DatasetIoException(DatasetIoError::kBadMagic, "not a CMTX file: " + path);
  pos = 4;
  const auto version = static_cast<unsigned char>(get_le<std::uint8_t>(buf, pos));
  if (version != kVersion)
    throw DatasetIoException(DatasetIoError::kBadVersion,
                             "unsupported CMTX version " + std::to_string(version));
  const auto count = get_le<std::uint64_t>(buf, pos);
  const auto leads = get_le<std::uint32_t>(buf, pos);
  const auto samples = get_le<std::uint32_t>(buf, pos);
  const auto bdim = get_le<std::uint32_t>(buf, pos);
  if (leads != kLeads || samples != kSamplesPerLead)
    throw DatasetIoException(DatasetIoError::kBadVersion,
                             "unexpected CMTX dimension header");

  Dataset ds;
  ds.modality_b_dim = static_cast<int>(bdim);
  ds.records.resize(count);
  for (auto& rec : ds.records) {
    const std::size_t rec_start = pos;
    rec.subject_id = get_le<std::int64_t>(buf, pos);
    rec.label = get_le<std::uint8_t>(buf, pos);
    rec.ecg_present = get_le<std::uint8_t>(buf, pos) != 0;
    rec.ecg.resize(kLeads, kSamplesPerLead);
    for (std::uint32_t l = 0; l < kLeads; ++l)
      for (std::uint32_t t = 0; t < kSamplesPerLead; ++t)
        rec.ecg(l, t) = static_cast<double>(get_le<float>(buf, pos));
    rec.modality_b.resize(bdim);
    for (std::uint32_t i = 0; i < bdim; ++i)
      rec.modality_b[i] = static_cast<double>(get_le<float>(buf, pos));
    const std::size_t rec_end = pos;
    const auto stored_crc = get_le<std::uint32_t>(buf, pos);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data() + rec_start),
              static_cast<uInt>(rec_end - rec_start)));
    if (crc != stored_crc)
      throw DatasetIoException(DatasetIoError::kChecksum,
                               "CMTX record checksum mismatch in " + path);
  }
  return ds;
}

}  // namespace xmodal
