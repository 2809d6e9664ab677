#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motion_r1/nn.hpp"
#include "motion_r1/rng.hpp"

namespace mr1::data {

using nn::Tensor;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// T x D frames of a 6-joint 2-D stick figure:
// pelvis, head, left hand, right hand, left foot, right foot -> D = 12.
// Channel 2j is the joint's horizontal position, 2j+1 its height.
inline constexpr int64_t kJointCount = 6;
inline constexpr int64_t kChannels = 2 * kJointCount;

struct MotionSequence {
  Tensor frames;  // T x D
  double fps = 20.0;

  int64_t frame_count() const { return frames.shape.empty() ? 0 : frames.shape[0]; }
  int64_t channels() const { return frames.shape.size() == 2 ? frames.shape[1] : 0; }
};

struct MotionSample {
  std::string id;
  std::string text;
  std::string family;
  MotionSequence motion;
  uint64_t seed = 0;
};

struct CorpusSpec {
  std::vector<std::pair<std::string, int>> families;  // tag -> count
  int min_frames = 48;
  int max_frames = 96;
  double fps = 20.0;
  double noise = 0.01;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  uint64_t master_seed = 0;
};

struct CorpusSplits {
  std::vector<MotionSample> train;
  std::vector<MotionSample> val;
  std::vector<MotionSample> test;
};

// Family tags accepted by the generator, including two-step compositions.
const std::vector<std::string>& known_families();

// Frames blended away when concatenating composition parts.
inline constexpr int64_t kBlendOverlap = 8;

// Deterministic: the same spec always yields bit-identical samples.
std::vector<MotionSample> generate_corpus(const CorpusSpec& spec);

// Regenerates one sample from (family, seed); used for determinism checks.
// Frame count, motion attributes and description are all drawn from `seed`.
MotionSample generate_sample(const std::string& family, const std::string& id,
                             uint64_t seed, int min_frames, int max_frames,
                             double fps, double noise);

// Seeded shuffle then contiguous cuts by ratio; ids partition the corpus.
CorpusSplits split_corpus(std::vector<MotionSample> corpus,
                          const CorpusSpec& spec);

// First differences along time, (T-1) x D.
Tensor velocity(const MotionSequence& m);

void save_jsonl(const std::string& path,
                const std::vector<MotionSample>& samples);
std::vector<MotionSample> load_jsonl(const std::string& path);

}  // namespace mr1::data
