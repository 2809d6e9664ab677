#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motion_r1/encoders.hpp"
#include "motion_r1/policy.hpp"
#include "motion_r1/tokenizer.hpp"

namespace mr1::grpo {

struct GrpoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GRPOConfig {
  int64_t group_size = 8;   // G
  double epsilon = 0.2;     // clip range
  double beta = 0.001;      // KL coefficient
  double w_format = 1.0;
  double w_motion = 1.0;
  double w_semantic = 1.0;
  int64_t old_refresh_interval = 1;  // steps between pi_old refreshes
  double lr = 1e-4;
  double lr_min = 1e-6;
  int64_t total_steps = 200;
  policy::SamplingConfig sampling;
  bool no_cot = false;  // score rollouts against the think-free grammar
  uint64_t seed = 0;
};

struct RewardBreakdown {
  double r_format = 0;
  double r_motion = 0;
  double r_semantic = 0;
  double scalar = 0;
};

double format_reward(const policy::GenerationSample& sample);
// cosine(embed(decode(gen)), embed(gt motion)); empty tokens -> 0
double motion_reward(const std::vector<int64_t>& gen_tokens,
                     const data::MotionSequence& gt,
                     const vq::Tokenizer& tok, const enc::Encoders& encs);
// cosine(embed(decode(gen)), embed_text(text)); empty tokens -> 0
double semantic_reward(const std::vector<int64_t>& gen_tokens,
                       const std::string& text, const vq::Tokenizer& tok,
                       const enc::Encoders& encs);
// Parse failure gates motion and semantic rewards to 0.
RewardBreakdown composite_reward(const policy::GenerationSample& sample,
                                 const data::MotionSequence& gt,
                                 const std::string& text,
                                 const vq::Tokenizer& tok,
                                 const enc::Encoders& encs,
                                 const GRPOConfig& cfg);

// (r - mean) / population std; all zeros when std <= 1e-8.
std::vector<double> compute_advantages(const std::vector<double>& rewards);

// Mean over tokens of exp(ref - theta) - (ref - theta) - 1.
double token_kl(const std::vector<double>& theta_lp,
                const std::vector<double>& ref_lp);

// Negated clipped objective with per-token ratios sharing the sequence
// advantage: loss = -(mean_t min(rho A, clip(rho) A) - beta * mean_t kl_t).
// new_lp is a flat per-token log-prob node; old/ref/adv align with it.
nn::NodeId grpo_loss_on_tape(nn::Tape& t, nn::NodeId new_lp,
                             const nn::Tensor& old_lp,
                             const nn::Tensor& ref_lp,
                             const nn::Tensor& adv_per_token, double epsilon,
                             double beta);

// Numeric form matching the spec signature (kl supplied externally).
double grpo_loss(const std::vector<std::vector<double>>& old_lp,
                 const std::vector<std::vector<double>>& new_lp,
                 const std::vector<double>& advantages, double kl,
                 const GRPOConfig& cfg);

struct StepLog {
  int64_t step = 0;
  double mean_reward = 0;
  double format_rate = 0;
  double mean_motion = 0;
  double mean_semantic = 0;
  double kl = 0;
  double lr = 0;
};

struct GrpoHistory {
  std::vector<StepLog> steps;
};

// RL loop: pi_ref frozen at entry, pi_old refreshed per interval. Writes a
// CSV step log when log_csv is non-empty.
GrpoHistory grpo_train(policy::Policy& p, const vq::Tokenizer& tok,
                       const enc::Encoders& encs,
                       const std::vector<data::MotionSample>& dataset,
                       const GRPOConfig& cfg,
                       const std::string& log_csv = "");

}  // namespace mr1::grpo
