#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motion_r1/data.hpp"
#include "motion_r1/nn.hpp"

namespace mr1::enc {

using data::MotionSequence;
using nn::Tensor;

struct EncError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-channel mean, std, and mean |velocity|.
inline constexpr int64_t kMotionFeatureDim = 3 * data::kChannels;
inline constexpr int64_t kTextBuckets = 512;

// Lowercased alphanumeric runs, in order.
std::vector<std::string> tokenize_words(const std::string& text);

Tensor motion_features(const MotionSequence& m);
Tensor text_features(const std::string& text);  // hashed bag of words

struct EncoderConfig {
  int64_t embed_dim = 32;
  int64_t hidden = 64;
  double tau = 0.07;  // InfoNCE temperature
  int64_t epochs = 60;
  int64_t batch_size = 32;
  double lr = 3e-3;
  double lr_min = 1e-5;
  uint64_t seed = 0;
};

struct Encoders {
  EncoderConfig cfg;
  nn::ParameterSet params;  // mot.* / txt.* MLP weights
};

Encoders make_encoders(const EncoderConfig& cfg);

// Embeddings are layer-normalized, so every vector has squared norm
// embed_dim and cosine similarity reduces to dot / embed_dim.
Tensor embed_motion(const Encoders& enc, const MotionSequence& m);
Tensor embed_text(const Encoders& enc, const std::string& text);

// Cosine similarity clamped to [-1, 1]; zero vectors give 0.
double cosine(const Tensor& a, const Tensor& b);

struct ContrastiveHistory {
  std::vector<double> train_loss;  // per-epoch mean symmetric InfoNCE
  double val_top1 = 0;             // 32-way text->motion retrieval
};

ContrastiveHistory train_contrastive(Encoders& enc,
                                     const std::vector<data::MotionSample>& train,
                                     const std::vector<data::MotionSample>& val);

// Top-1 accuracy retrieving each text's own motion from pools of `pool`
// candidates drawn without replacement.
double retrieval_top1(const Encoders& enc,
                      const std::vector<data::MotionSample>& samples,
                      int64_t pool, uint64_t seed);

void save_encoders(const std::string& path, const Encoders& enc);
Encoders load_encoders(const std::string& path);

}  // namespace mr1::enc
