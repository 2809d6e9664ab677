#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "motion_r1/data.hpp"
#include "motion_r1/tokenizer.hpp"

namespace mr1::cot {

struct CotError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CoTTrace {
  std::string think;               // raw reasoning text, tags stripped
  std::vector<std::string> steps;  // parsed from numbered lines
};

struct Triplet {
  std::string description;
  CoTTrace cot;
  std::vector<int64_t> motion_tokens;
  std::string source_sample_id;
};

struct QualityReport {
  bool format_ok = false;
  bool length_ok = false;
  bool redundancy_ok = false;
  bool step_count_ok = false;
  int step_count = 0;
  int attempt = 0;

  bool accepted() const {
    return format_ok && length_ok && redundancy_ok && step_count_ok;
  }
};

struct CotLimits {
  int max_words = 256;  // whole trace
  int max_steps = 8;
  double jaccard_threshold = 0.9;
};

enum class BackendKind { kTemplate, kRemote };

struct CotBackendConfig {
  BackendKind kind = BackendKind::kTemplate;
  std::string endpoint;  // e.g. http://127.0.0.1:8089/v1/chat/completions
  std::string model = "deepseek-r1";
  int timeout_ms = 10000;
  int max_retries = 3;
  std::string api_key_env = "MR1_API_KEY";
  double temperature = 0.6;
  uint64_t seed = 0;  // template paraphrase choice
};

// System prompt sent to remote chat-completion backends.
extern const char* kCotSystemPrompt;

// Raw `<think>...</think>` text for a description; template backend is
// deterministic in (description, cfg.seed).
std::string request_cot(const std::string& description,
                        const CotBackendConfig& cfg);

std::pair<std::optional<CoTTrace>, QualityReport> validate_cot(
    const std::string& raw, const CotLimits& limits);

// Thrown when generate_with_retry exhausts its attempts.
struct CotRejected : CotError {
  QualityReport report;
  explicit CotRejected(QualityReport r)
      : CotError("cot rejected after " + std::to_string(r.attempt) +
                 " attempt(s)"),
        report(r) {}
};

using CotBackendFn = std::function<std::string(const std::string& description,
                                               int attempt)>;

CoTTrace generate_with_retry(const std::string& description,
                             const CotBackendConfig& cfg,
                             const CotLimits& limits, int max_attempts);
// Same loop with an injected backend (for scripted tests).
CoTTrace generate_with_retry(const std::string& description,
                             const CotBackendFn& backend,
                             const CotLimits& limits, int max_attempts);

std::vector<Triplet> build_dataset(const std::vector<data::MotionSample>& corpus,
                                   const vq::Tokenizer& tokenizer,
                                   const CotBackendConfig& cfg,
                                   const CotLimits& limits,
                                   const std::string& out_path);

void save_triplets(const std::string& path,
                   const std::vector<Triplet>& triplets);
std::vector<Triplet> load_triplets(const std::string& path);

}  // namespace mr1::cot
