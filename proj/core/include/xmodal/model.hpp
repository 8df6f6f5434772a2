#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

// ---------------------------------------------------------------------------
// Parameter store: flat, deterministically-ordered named tensors. Vectors are
// stored as n x 1 matrices. Buffers (batch-norm running statistics) are not
// trainable; frozen tensors are trainable-shaped but locked.
// ---------------------------------------------------------------------------

enum class TensorKind { kTrainable, kFrozen, kBuffer };

struct NamedTensor {
  std::string name;
  Matrix value;
  TensorKind kind = TensorKind::kTrainable;
};

class ParamStore {
 public:
  void add(const std::string& name, Matrix value,
           TensorKind kind = TensorKind::kTrainable);
  bool has(const std::string& name) const;
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  TensorKind kind(const std::string& name) const;

  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  std::vector<NamedTensor>& tensors() { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  // Marks every tensor whose name starts with `prefix` as frozen.
  void freeze_prefix(const std::string& prefix);
  // Drops tensors by prefix (used to discard projection/SSL heads).
  void remove_prefix(const std::string& prefix);
  // Copy of the tensors whose names match any of the prefixes.
  ParamStore subset(const std::vector<std::string>& prefixes) const;
  // Adds all tensors from `other` (names must not collide).
  void merge(const ParamStore& other);

  long parameter_count(TensorKind kind_filter) const;
  std::vector<std::string> names() const;

 private:
  std::vector<NamedTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Gradients aligned with a ParamStore. Accumulating into a frozen or buffer
// tensor throws: those tensors must never receive updates.
class GradientStore {
 public:
  GradientStore() = default;
  explicit GradientStore(const ParamStore& params);

  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  bool has(const std::string& name) const;
  void add(const std::string& name, const Matrix& g);

  double global_norm() const;
  void scale(double factor);
  void set_zero();

  const std::map<std::string, Matrix>& entries() const { return grads_; }
  std::map<std::string, Matrix>& entries() { return grads_; }

 private:
  std::map<std::string, Matrix> grads_;
};

// ---------------------------------------------------------------------------
// Architecture configuration.
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int input_length = 1000;
  int kernel_size = 5;
  int stride1 = 5;
  int stride2 = 1;
  int intermediate_dim = 128;
  int embed_dim = 256;
  int num_heads = 8;
  int num_layers = 4;
  int classifier_dim = 256;
  int classifier_layers = 4;
  double classifier_dropout = 0.1;

  void validate() const;
  int conv1_out_len() const { return (input_length - kernel_size) / stride1 + 1; }
  int tokens() const { return (conv1_out_len() - kernel_size) / stride2 + 1; }
};

struct ModelConfig {
  EncoderConfig encoder;
  int modality_b_dim = 16;  // teacher input width
  int teacher_hidden = 128;
  bool normalize_projections = true;

  int projection_dim() const { return encoder.embed_dim; }
};

enum class Mode { kTrain, kEval };

// Number of trainable parameters implied by the config (all components:
// encoder, SSL head, both projection heads, classifier, teacher).
long parameter_count(const ModelConfig& cfg);

// Builds every component with fan-in-scaled uniform weights, zero biases,
// unit norm scales. Deterministic per seed.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Component-wise initializers (same layouts as init_params), used by the
// pipeline to assemble per-stage parameter sets.
void init_encoder_params(const EncoderConfig& cfg, std::uint64_t seed, ParamStore& out);
void init_linear_head_params(const std::string& prefix, int in_dim, int out_dim,
                             std::uint64_t seed, ParamStore& out);
void init_classifier_params(const EncoderConfig& cfg, std::uint64_t seed,
                            ParamStore& out);
void init_teacher_params(const ModelConfig& cfg, std::uint64_t seed, ParamStore& out);

// ---------------------------------------------------------------------------
// Forward / backward passes. Forward passes are pure: batch-norm running
// statistics computed in train mode are reported through the cache and only
// change the store when commit_bn_updates is called.
// ---------------------------------------------------------------------------

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

struct BatchNormCache {
  Matrix xhat;
  Vector inv_std;
  Vector new_running_mean;
  Vector new_running_var;
};

struct BlockCache {
  Matrix x_in;          // tokens entering the block
  LayerNormCache ln1;
  Matrix ln1_out;
  Matrix q, k, v;       // (B*L) x d
  std::vector<Matrix> attn;  // softmax matrices, one L x L per (sample, head)
  Matrix attn_concat;   // (B*L) x d, heads re-concatenated
  Matrix after_attn;    // residual sum
  LayerNormCache ln2;
  Matrix ln2_out;
  Matrix ffn_pre;       // (B*L) x 4d, pre-GELU
  Matrix ffn_act;       // post-GELU
};

struct EncoderCache {
  Mode mode = Mode::kEval;
  Eigen::Index batch = 0;
  Matrix p1;  // im2col of the input, (B*L1) x (12*K)
  Matrix y1;  // conv1 pre-activation
  BatchNormCache bn1;
  Matrix bn1_out;
  Matrix p2;
  Matrix y2;
  BatchNormCache bn2;
  Matrix tokens;  // after positional embedding
  std::vector<BlockCache> blocks;
  Matrix x_final;  // (B*L2) x d
};

struct MlpCache {
  Matrix input;
  std::vector<Matrix> pre;    // pre-activation per layer
  std::vector<Matrix> post;   // post-activation (after dropout where applied)
  std::vector<Matrix> masks;  // dropout masks (empty in eval mode)
};

struct ProjectionResult {
  Matrix z;                 // projected (optionally row-normalized)
  Matrix pre;               // affine output before normalization
  std::vector<bool> valid;  // false for rows that could not be normalized
};

// Conv patch embedding -> pre-norm transformer -> mean pool. Returns B x
// embed_dim embeddings. Throws on shape mismatch and identifies the first
// layer producing non-finite activations.
Matrix ecg_encoder_forward(const ParamStore& params, const EncoderConfig& cfg,
                           const std::vector<Matrix>& batch, Mode mode,
                           EncoderCache* cache = nullptr);

// Exact gradients for the encoder tensors; `d_pooled` is d(loss)/d(embeddings).
void ecg_encoder_backward(const ParamStore& params, const EncoderConfig& cfg,
                          const EncoderCache& cache, const Matrix& d_pooled,
                          GradientStore& grads);

// Writes the train-mode running statistics captured in the cache back into
// the store. No-op for eval-mode caches.
void commit_bn_updates(ParamStore& params, const EncoderCache& cache);

// Single affine map plus optional L2 row normalization. Rows with zero norm
// are returned as zeros and flagged invalid.
ProjectionResult projection_forward(const ParamStore& params, const std::string& prefix,
                                    const Matrix& embeddings, bool normalize);
Matrix projection_backward(const ParamStore& params, const std::string& prefix,
                           const Matrix& embeddings, const ProjectionResult& result,
                           const Matrix& d_z, bool normalize, GradientStore& grads);

// Classifier MLP: (classifier_layers - 1) hidden layers of width
// classifier_dim with ReLU + dropout, then a linear map to 2 logits.
Matrix classifier_forward(const ParamStore& params, const EncoderConfig& cfg,
                          const Matrix& embeddings, Mode mode, std::uint64_t seed,
                          MlpCache* cache = nullptr);
Matrix classifier_backward(const ParamStore& params, const EncoderConfig& cfg,
                           const MlpCache& cache, const Matrix& d_logits,
                           GradientStore& grads);

// Frozen-teacher embedding MLP (2 layers, ReLU in between).
Matrix teacher_forward(const ParamStore& params, const Matrix& features,
                       MlpCache* cache = nullptr);
Matrix teacher_backward(const ParamStore& params, const MlpCache& cache,
                        const Matrix& d_out, GradientStore& grads);

// Teacher classification head (used only while training the teacher).
Matrix teacher_classifier_forward(const ParamStore& params, const Matrix& embeddings,
                                  MlpCache* cache = nullptr);
Matrix teacher_classifier_backward(const ParamStore& params, const MlpCache& cache,
                                   const Matrix& d_logits, GradientStore& grads);

// Composed encoder -> classifier forward/backward, the fine-tuning path.
struct ClassifyCache {
  EncoderCache encoder;
  MlpCache classifier;
};
Matrix classify_forward(const ParamStore& params, const EncoderConfig& cfg,
                        const std::vector<Matrix>& batch, Mode mode,
                        std::uint64_t seed, ClassifyCache* cache = nullptr);
GradientStore model_backward(const ParamStore& params, const EncoderConfig& cfg,
                             const ClassifyCache& cache, const Matrix& d_logits);

}  // namespace xmodal
