#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freqhead/corpus.hpp"
#include "freqhead/head.hpp"
#include "freqhead/tensor.hpp"
#include "json.hpp"

namespace freqhead {

struct ModelConfig {
  Variant variant = Variant::causal;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 128;
  int vocab_size = 0;
  double ln_epsilon = 1e-5;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <typename Real>
struct LayerParams {
  Vector<Real> ln1_gamma, ln1_beta;
  Matrix<Real> w_qkv;  // d x 3d
  Vector<Real> b_qkv;
  Matrix<Real> w_attn_out;  // d x d
  Vector<Real> b_attn_out;
  Vector<Real> ln2_gamma, ln2_beta;
  Matrix<Real> w_fc;  // d x d_ff
  Vector<Real> b_fc;
  Matrix<Real> w_proj;  // d_ff x d
  Vector<Real> b_proj;
};

/// Named view of one parameter tensor, in a fixed order.
template <typename Real>
struct TensorView {
  std::string name;
  std::span<Real> data;
  std::vector<std::int64_t> shape;
};

/// All learnable tensors. `embedding` is the tied input/output matrix,
/// stored |V| x d so that row i is the output word embedding w_i.
template <typename Real>
struct ModelParams {
  ModelConfig config;
  Matrix<Real> embedding;
  Matrix<Real> positions;  // max_seq_len x d
  std::vector<LayerParams<Real>> layers;
  HeadParams<Real> head;

  /// Zero-filled tensors of the right shapes (LayerNorm gains included).
  static ModelParams zeros(const ModelConfig& config);
  /// GPT-2 style initialization: N(0, 0.02), residual projections scaled by
  /// 1/sqrt(2 n_layers), gains 1, biases 0.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  std::vector<TensorView<Real>> tensors();
  std::vector<TensorView<const Real>> tensors() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  void validate() const;
};

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& p);

/// Last-layer hidden states (before the head) for one sequence: T x d.
template <typename Real>
Matrix<Real> forward_hidden(const ModelParams<Real>& params, std::span<const TokenId> ids);

/// Batch form; sequences may differ in length.
template <typename Real>
std::vector<Matrix<Real>> forward_hidden(const ModelParams<Real>& params,
                                         std::span<const Sequence> batch);

/// One training example: inputs plus per-position targets (-1 = ignored).
struct Example {
  Sequence inputs;
  std::vector<TokenId> targets;
};

template <typename Real>
struct LossAndGrad {
  double loss = 0.0;  // mean cross-entropy over non-ignored targets
  std::size_t target_count = 0;
  ModelParams<Real> grad;
};

/// Mean cross-entropy and its gradient over a batch of equal-length examples.
template <typename Real>
LossAndGrad<Real> loss_and_grad(const ModelParams<Real>& params, std::span<const Example> batch);

/// Loss only; same value as loss_and_grad().loss.
template <typename Real>
double batch_loss(const ModelParams<Real>& params, std::span<const Example> batch);

/// Prediction positions for evaluation. Causal models predict every token
/// after the first; masked models predict the corrupted positions.
struct EvalPositions {
  Sequence inputs;
  std::vector<std::size_t> positions;  // rows of the hidden-state matrix
  std::vector<TokenId> targets;        // token predicted at each position
};

/// Truncates to max_seq_len, and for masked models corrupts with an rng
/// derived from (seed, index). `mask_only` keeps only positions replaced by
/// MASK; otherwise every selected position is kept.
EvalPositions eval_positions(const ModelConfig& config, const Vocab& vocab,
                             std::span<const TokenId> seq, std::uint64_t seed,
                             std::size_t index, bool mask_only);

struct NllSummary {
  double total_nll = 0.0;
  std::size_t positions = 0;
  double mean() const;
};

/// Sum of -ln p(target) over evaluation positions, computed with a
/// log-sum-exp in double. Returns +inf totals when a target has zero mass.
template <typename Real>
NllSummary evaluate_nll(const ModelParams<Real>& params, const Vocab& vocab,
                        std::span<const Sequence> docs, const InterventionSpec& iv,
                        std::uint64_t mask_seed = 0);

/// Incremental causal decoding with a key/value cache.
template <typename Real>
class DecodeState {
 public:
  explicit DecodeState(const ModelParams<Real>& params);
  /// Feeds one token and returns its last-layer hidden state.
  Vector<Real> step(TokenId id);
  std::size_t length() const { return length_; }

 private:
  const ModelParams<Real>* params_;
  std::vector<Matrix<Real>> keys_;    // per layer, max_seq_len x d
  std::vector<Matrix<Real>> values_;  // per layer
  std::size_t length_ = 0;
};

struct TrainConfig {
  long steps = 2000;
  int batch_size = 16;
  int seq_len = 64;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  long warmup_steps = 0;
  bool cosine_decay = false;
  std::uint64_t seed = 1;
  long eval_every = 100;
  std::uint64_t eval_mask_seed = 7;
  MaskingRates masking;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainData {
  std::vector<Sequence> train_docs;    // each ends with EOS
  std::vector<Sequence> heldout_docs;
};

struct LossRecord {
  long step = 0;
  double train_loss = 0.0;              // NaN at step 0
  std::optional<double> heldout_loss;
};

template <typename Real>
struct TrainResult {
  ModelParams<Real> params;
  std::vector<LossRecord> curve;
  double initial_heldout = 0.0;
  double final_heldout = 0.0;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Trains from scratch.
template <typename Real>
TrainResult<Real> train(const ModelConfig& config, const TrainConfig& tcfg,
                        const Vocab& vocab, const TrainData& data,
                        const StepCallback& on_eval = {});

/// Continues training existing parameters (fine-tuning); fresh optimizer state.
template <typename Real>
TrainResult<Real> train_from(ModelParams<Real> params, const TrainConfig& tcfg,
                             const Vocab& vocab, const TrainData& data,
                             const StepCallback& on_eval = {});

void write_loss_csv(const std::filesystem::path& path, std::span<const LossRecord> curve);

/// Checkpoint: magic, manifest length, JSON manifest, then little-endian
/// float32 tensors in manifest order.
void save_checkpoint(const ModelParams<float>& params, std::uint64_t tokenizer_hash,
                     const std::filesystem::path& path);

struct CheckpointExpectations {
  std::optional<Variant> variant;
  std::optional<std::uint64_t> tokenizer_hash;
};

struct Checkpoint {
  ModelParams<float> params;
  std::uint64_t tokenizer_hash = 0;
};

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const CheckpointExpectations& expect = {});

}  // namespace freqhead
