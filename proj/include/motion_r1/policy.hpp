#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "motion_r1/cot.hpp"
#include "motion_r1/nn.hpp"

namespace mr1::policy {

struct PolicyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Word ids first, then the specials, then a contiguous motion-token range.
struct Vocabulary {
  std::vector<std::string> tokens;  // id -> printable form
  std::map<std::string, int64_t> word_ids;
  int64_t bos = -1, eos = -1, pad = -1, unk = -1;
  int64_t think_open = -1, think_close = -1;
  int64_t motion_open = -1, motion_close = -1;
  int64_t motion_base = -1;   // id of M_0
  int64_t motion_count = 0;   // codebook size N

  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
  bool is_motion(int64_t id) const {
    return id >= motion_base && id < motion_base + motion_count;
  }
  int64_t motion_id(int64_t code) const;   // codebook index -> vocab id
  int64_t motion_code(int64_t id) const;   // vocab id -> codebook index
  int64_t word_or_unk(const std::string& w) const;
};

Vocabulary build_vocabulary(const std::vector<cot::Triplet>& triplets,
                            int64_t codebook_size);
void save_vocabulary(const std::string& path, const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::string& path);

struct PolicyConfig {
  int64_t blocks = 2;
  int64_t heads = 4;
  int64_t dim = 128;
  int64_t context = 256;
  uint64_t seed = 0;
};

struct Policy {
  PolicyConfig cfg;
  Vocabulary vocab;
  nn::ParameterSet params;
};

Policy make_policy(const PolicyConfig& cfg, Vocabulary vocab);

// BOS + description words (the conditioning prompt).
std::vector<int64_t> prompt_tokens(const Vocabulary& vocab,
                                   const std::string& text);
// BOS + prompt words + <think> CoT words </think> <Motion> ids </Motion> + EOS
std::vector<int64_t> serialize_triplet(const cot::Triplet& t,
                                       const Vocabulary& vocab);
// Ablation format: BOS + prompt words + <Motion> ids </Motion> + EOS.
std::vector<int64_t> serialize_no_cot(const cot::Triplet& t,
                                      const Vocabulary& vocab);

// Next-token logits for every position; tokens.size() <= context.
nn::NodeId forward_on_tape(nn::Tape& t, const PolicyConfig& cfg,
                           const std::vector<int64_t>& tokens);

// One teacher-forced Adam step over the batch; loss spans response tokens
// only (targets at positions >= prompt_len). Returns mean nats/token.
double sft_step(Policy& p,
                const std::vector<std::vector<int64_t>>& sequences,
                const std::vector<int64_t>& prompt_lens, double lr);

// log pi(o_t | prompt, o_<t) for each output token.
std::vector<double> sequence_log_prob(const Policy& p,
                                      const std::vector<int64_t>& prompt,
                                      const std::vector<int64_t>& output);

struct SamplingConfig {
  double temperature = 1.0;
  int64_t top_k = 50;
  int64_t max_new_tokens = 96;
  bool greedy = false;
};

struct GenerationSample {
  std::vector<int64_t> prompt;
  std::vector<int64_t> output;        // excludes prompt, includes EOS if hit
  std::vector<double> logprobs;       // under the untruncated distribution
  std::string think_text;
  std::vector<int64_t> motion_tokens; // codebook indices
  bool parse_ok = false;
};

GenerationSample sample(const Policy& p, const std::vector<int64_t>& prompt,
                        const SamplingConfig& cfg, uint64_t seed);
std::vector<GenerationSample> sample_group(const Policy& p,
                                           const std::vector<int64_t>& prompt,
                                           int64_t G,
                                           const SamplingConfig& cfg,
                                           uint64_t seed);

struct ParseResult {
  std::string think_text;
  std::vector<int64_t> motion_tokens;  // codebook indices
  bool ok = false;
};

// Canonical grammar: <think> words </think> <Motion> >=1 motion tokens
// </Motion>, optional trailing EOS, nothing else. require_think=false drops
// the think block entirely (the no-CoT ablation format).
ParseResult parse_output(const std::vector<int64_t>& output,
                         const Vocabulary& vocab, bool require_think = true);

void save_policy(const std::string& path, const Policy& p);
Policy load_policy(const std::string& path);

}  // namespace mr1::policy
