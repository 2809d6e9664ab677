#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "motion_r1/encoders.hpp"
#include "motion_r1/policy.hpp"
#include "motion_r1/tokenizer.hpp"

namespace mr1::eval {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Row-major M x d matrix of motion-feature embeddings.
struct FeatureSet {
  int64_t rows = 0;
  int64_t dim = 0;
  std::vector<double> data;

  static FeatureSet zeros(int64_t rows, int64_t dim);
  double* row(int64_t i) { return data.data() + i * dim; }
  const double* row(int64_t i) const { return data.data() + i * dim; }
};

using EmbeddingPair = std::pair<std::vector<double>, std::vector<double>>;

// Per query motion, rank its paired text among pool-1 seeded negatives by
// Euclidean distance; returns the fraction with rank <= k.
double r_precision(const std::vector<EmbeddingPair>& pairs, int k,
                   int64_t pool, uint64_t seed);

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the trace term
// evaluated through the symmetric product S_r^{1/2} S_g S_r^{1/2}.
double fid(const FeatureSet& real, const FeatureSet& gen);

// Mean l2 distance over s_dis seeded pairs of distinct rows; the exhaustive
// flag averages every ordered pair instead.
double diversity(const FeatureSet& feats, int64_t s_dis, uint64_t seed,
                 bool exhaustive = false);

enum class MMDistMode { euclidean, cosine };

// euclidean: mean ||f_text - f_motion||; cosine: mean (1 - cos).
double mm_dist(const std::vector<EmbeddingPair>& pairs,
               MMDistMode mode = MMDistMode::euclidean);

// Produces the feature embedding of one generated motion for `text`;
// nullopt marks a generation failure and is scored as a zero vector.
using MotionEmbedder = std::function<std::optional<std::vector<double>>(
    const std::string& text, uint64_t seed)>;

double mmodality(const MotionEmbedder& gen,
                 const std::vector<std::string>& texts, int64_t reps,
                 int64_t pairs_per_text, int64_t embed_dim, uint64_t seed);

struct MetricEstimate {
  double estimate = 0;
  double ci95 = 0;  // 1.96 * std / sqrt(repeats)
  int64_t repeats = 0;
};

struct EvalReport {
  MetricEstimate top1, top2, top3;
  MetricEstimate fid;
  MetricEstimate diversity;
  MetricEstimate mm_dist;
  MetricEstimate mmodality;
};

struct EvalConfig {
  int64_t repeats = 20;
  int64_t mm_repeats = 5;  // MModality is averaged over fewer rounds
  int64_t pool = 32;
  int64_t s_dis = 300;
  int64_t mm_reps = 30;
  int64_t mm_pairs = 10;
  int64_t mm_texts = 8;  // descriptions sampled per MModality round
  MMDistMode mode = MMDistMode::euclidean;
  policy::SamplingConfig sampling;
  bool no_cot = false;  // parse generations with the think-free grammar
  uint64_t seed = 0;
};

EvalReport evaluate(const policy::Policy& p, const vq::Tokenizer& tok,
                    const enc::Encoders& encs,
                    const std::vector<data::MotionSample>& test,
                    const EvalConfig& cfg);

// metric,estimate,ci95,repeats
void write_report_csv(const std::string& path, const EvalReport& report);

}  // namespace mr1::eval
