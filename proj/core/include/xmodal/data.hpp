#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

// ---------------------------------------------------------------------------
// Synthetic paired-multimodal dataset. Each record pairs a preprocessed
// 12x1000 ECG with a compact second-modality feature vector that is, by
// construction, the more informative view of the label. Records with
// ecg_present == false stand in for visits where only the second modality
// was captured; their ECG tensor is zero.
// ---------------------------------------------------------------------------

struct PairedSample {
  Matrix ecg;         // 12 x 1000, preprocessed ([-1,1] per lead); zero if absent
  Vector modality_b;  // feature vector
  int label = 0;
  std::int64_t subject_id = 0;
  bool ecg_present = true;
};

struct GeneratorConfig {
  int n_subjects = 4000;
  int records_per_subject = 1;
  double positive_rate = 0.25;
  int latent_dim = 6;
  int modality_b_dim = 16;
  double ecg_noise_sigma = 0.40;
  double modality_b_noise_sigma = 0.05;
  double ecg_present_rate = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  std::vector<PairedSample> records;
  int modality_b_dim = 0;

  std::size_t size() const { return records.size(); }
};

// Per subject: label ~ Bernoulli(positive_rate), latent ~ N(mu_label, I).
// The ECG is a sum of fixed periodic lead templates whose harmonic weights
// and heart rate are modulated by the latent, plus a label-dependent
// high-harmonic component, drift, and Gaussian noise, then run through the
// standard preprocessing chain. modality_b applies a fixed random linear map
// to the label-augmented latent, tanh, plus (smaller) Gaussian noise.
// All payloads are rounded to float32 so that file round trips are bitwise.
Dataset generate_dataset(const GeneratorConfig& cfg);

// ---------------------------------------------------------------------------
// Subject-level splitting
// ---------------------------------------------------------------------------

enum class Split { kTrain, kVal, kTest };

struct SplitAssignment {
  std::map<std::int64_t, Split> by_subject;

  Split of(std::int64_t subject_id) const;
  // Record indices of `ds` landing in `split`, in dataset order.
  std::vector<std::size_t> indices(const Dataset& ds, Split split) const;
};

// Deterministic seeded shuffle of the unique ids, contiguous assignment by
// fraction. Fractions must be positive and sum to 1.
SplitAssignment split_by_subject(const std::vector<std::int64_t>& subject_ids,
                                 double train_fraction, double val_fraction,
                                 double test_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Class-balanced batch stream: sampling with replacement, with per-sample
// weights chosen so the expected minority fraction of each batch equals
// minority_target.
// ---------------------------------------------------------------------------

class WeightedBatchSampler {
 public:
  WeightedBatchSampler(const std::vector<int>& labels, int batch_size,
                       double minority_target, std::uint64_t seed);

  std::vector<std::size_t> next();
  int batch_size() const { return batch_size_; }

 private:
  std::vector<std::size_t> minority_;
  std::vector<std::size_t> majority_;
  int batch_size_;
  double target_;
  std::uint64_t state_seed_;
  long drawn_ = 0;
};

// ---------------------------------------------------------------------------
// CMTX dataset file format:
//   magic "CMTX" | version u8 | record count u64 | leads u32 |
//   samples-per-lead u32 | modality_b dim u32 |
//   per record: subject_id i64, label u8, ecg_present u8,
//               ecg float32[leads*samples], modality_b float32[dim],
//               crc32 u32 over the record's preceding bytes
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

enum class DatasetIoError { kBadMagic, kBadVersion, kTruncated, kChecksum };

class DatasetIoException : public std::runtime_error {
 public:
  DatasetIoException(DatasetIoError code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  DatasetIoError code() const { return code_; }

 private:
  DatasetIoError code_;
};

void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

}  // namespace xmodal
