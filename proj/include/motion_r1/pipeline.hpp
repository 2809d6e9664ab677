#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motion_r1/cot.hpp"
#include "motion_r1/encoders.hpp"
#include "motion_r1/eval.hpp"
#include "motion_r1/grpo.hpp"
#include "motion_r1/policy.hpp"
#include "motion_r1/tokenizer.hpp"

namespace mr1::pipe {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SftConfig {
  int64_t epochs = 40;
  int64_t batch_size = 8;
  double lr = 3e-3;
  double lr_min = 1e-4;
  policy::PolicyConfig policy;
};

// One config file drives every stage; the master seed fans out to derived
// per-stage seeds at run time.
struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "out";
  bool no_cot = false;
  bool deterministic = false;

  std::vector<std::string> families;  // empty = every known family
  int64_t samples_per_family = 8;
  int min_frames = 48;
  int max_frames = 96;
  double fps = 20.0;
  double noise = 0.01;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;

  vq::TokenizerConfig tokenizer;
  enc::EncoderConfig encoders;

  cot::CotBackendConfig cot_backend;
  cot::CotLimits cot_limits;
  int cot_max_attempts = 3;

  SftConfig sft;
  grpo::GRPOConfig grpo;
  eval::EvalConfig eval;
};

// key=value sections: [pipeline] [data] [tokenizer] [encoders] [cot] [sft]
// [grpo] [eval]. Unknown sections or keys are rejected.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

// Hex SHA-256 digests used by manifests and the resume check.
std::string sha256_bytes(const std::string& bytes);
std::string sha256_file(const std::string& path);

// Deterministic serialization of every effective setting; its digest is the
// manifest config hash.
std::string canonical_config(const RunConfig& cfg);

enum class Stage {
  datagen,
  tokenizer_train,
  encoders_train,
  cot_build,
  sft,
  grpo,
  eval,
};

const std::vector<std::string>& stage_names();
Stage stage_from_name(const std::string& name);

struct StageResult {
  std::string stage;
  bool skipped = false;  // resume hit: manifest + hashes already valid
  double wall_time_s = 0;
  std::vector<std::string> outputs;
};

// Runs one stage, writing out_dir/manifests/<stage>.json atomically on
// success. With resume=true a stage whose manifest still matches its config
// hash, input hashes and outputs is skipped.
StageResult run_stage(const RunConfig& cfg, Stage stage, bool resume = false);
std::vector<StageResult> run_all(const RunConfig& cfg, bool resume = false);

struct GenerationResult {
  std::string think_text;
  std::vector<int64_t> motion_tokens;
  bool parse_ok = false;
  std::vector<int64_t> output_tokens;
  std::string raw_text;  // detokenized output for inspection
  int64_t frames = 0;    // decoded motion length (parse_ok only)
};

// Loads policy + tokenizer from out_dir and generates for one description.
GenerationResult generate(const std::string& out_dir, const std::string& text,
                          const policy::SamplingConfig& sampling,
                          uint64_t seed, bool no_cot = false,
                          const std::string& motion_jsonl_out = "");

}  // namespace mr1::pipe
