#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motion_r1/data.hpp"
#include "motion_r1/nn.hpp"

namespace mr1::vq {

using data::MotionSequence;
using nn::Tensor;

struct TokError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Codebook {
  Tensor codes;       // N x d
  Tensor ema_counts;  // N
  Tensor ema_sums;    // N x d
  double decay = 0.99;
  std::vector<int64_t> usage;  // hits since the window started
  int64_t usage_total = 0;

  int64_t size() const { return codes.shape[0]; }
  int64_t dim() const { return codes.shape[1]; }
  static Codebook init(Rng& rng, int64_t n, int64_t d, double decay);
};

struct VqLossBreakdown {
  double reconstruct = 0;
  double commit = 0;
  double embed = 0;
  double total = 0;
};

struct TokenizerConfig {
  int64_t codebook_size = 64;  // N
  int64_t latent_dim = 8;      // d
  int64_t downsample = 4;      // l: two stride-2 conv blocks
  int64_t hidden = 32;
  int64_t channels = data::kChannels;  // D
  double fps = 20.0;
  double commit_weight = 0.25;
  double velocity_weight = 0.5;
  double ema_decay = 0.99;
  double eps_count = 1e-5;
  bool reset_enabled = true;
  int64_t reset_interval = 50;  // batches per usage window
  double reset_threshold_scale = 0.25;  // threshold = scale / N
  int64_t epochs = 40;
  int64_t batch_size = 8;
  double lr = 1e-3;
  double lr_min = 1e-5;
  uint64_t seed = 0;
};

struct Tokenizer {
  TokenizerConfig cfg;
  nn::ParameterSet params;  // enc.* / dec.* weights
  Codebook codebook;
};

Tokenizer make_tokenizer(const TokenizerConfig& cfg);

// Pads by repeating the final frame up to the next multiple of l.
Tensor pad_frames(const Tensor& frames, int64_t l);

// Encoder as tape nodes (training path). `padded` rows must be a multiple
// of the downsample rate.
nn::NodeId encode_on_tape(nn::Tape& t, const TokenizerConfig& cfg,
                          const Tensor& padded);
nn::NodeId decode_on_tape(nn::Tape& t, const TokenizerConfig& cfg,
                          nn::NodeId zq);

// Inference helpers (no gradients).
Tensor encode(const Tokenizer& tok, const MotionSequence& m);

// Nearest-code assignment per latent row; ties resolve to the lowest index.
std::pair<std::vector<int64_t>, Tensor> quantize(const Tensor& latents,
                                                 const Codebook& cb);

// trim_to >= 0 cuts decoder output back to the pre-padding frame count.
MotionSequence decode(const Tokenizer& tok, const std::vector<int64_t>& tokens,
                      int64_t trim_to = -1);

VqLossBreakdown vq_loss(const Tensor& m, const Tensor& m_hat, const Tensor& z,
                        const Tensor& z_q, double commit_weight,
                        double velocity_weight);

void ema_update(Codebook& cb, const Tensor& z_batch,
                const std::vector<int64_t>& assignments, double eps_count);

// Reinitializes under-used codes to random rows of z_batch and clears the
// usage window. Returns how many codes were reset.
int64_t reset_dead_codes(Codebook& cb, const Tensor& z_batch,
                         double usage_threshold, Rng& rng);

struct TrainHistory {
  std::vector<VqLossBreakdown> epochs;   // training means
  std::vector<double> val_reconstruct;   // per epoch, epoch 0 first
  double val_codebook_usage = 0;         // fraction of codes hit on val
};

TrainHistory train_tokenizer(Tokenizer& tok,
                             const std::vector<data::MotionSample>& train,
                             const std::vector<data::MotionSample>& val);

void save_tokenizer(const std::string& path, const Tokenizer& tok);
Tokenizer load_tokenizer(const std::string& path);

}  // namespace mr1::vq
