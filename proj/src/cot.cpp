#include "motion_r1/cot.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "httplib.h"
#include "json.hpp"
#include "motion_r1/encoders.hpp"
#include "motion_r1/rng.hpp"

namespace mr1::cot {

const char* kCotSystemPrompt =
    "You are a helpful assistant. The user gives a motion description; break "
    "that description down into a few simple descriptions, one numbered line "
    "per atomic action, wrapped in <think> and </think> tags.";

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

// Atomic actions for one clause of a known synthetic description.
std::vector<std::string> clause_steps(const std::string& clause) {
  std::vector<std::string> steps;
  if (contains(clause, "wave")) {
    steps.push_back("wave hand");
  } else if (contains(clause, "circle")) {
    steps.push_back("walk in a circle");
  } else if (contains(clause, "walk")) {
    steps.push_back("walk forward");
  } else if (contains(clause, "squat")) {
    steps.push_back("bend the knees");
    steps.push_back("stand back up");
  } else if (contains(clause, "turn")) {
    steps.push_back("turn in place");
  } else if (contains(clause, "jump") || contains(clause, "hop")) {
    steps.push_back("jump in place");
  } else {
    // unknown motion: keep the clause itself as a single step
    steps.push_back(clause);
  }
  return steps;
}

std::string template_cot(const std::string& description, uint64_t seed) {
  static const char* kOpeners[] = {
      "The task is to perform the motion described. Break it into simple "
      "actions.",
      "Let me break that description down into a few simple descriptions.",
      "Decompose the described motion into atomic actions in order.",
  };
  Rng rng(Rng::derive(seed, fnv1a(description)));
  std::vector<std::string> steps;
  size_t pos = 0;
  while (pos != std::string::npos) {
    size_t next = description.find(" and then ", pos);
    std::string clause = next == std::string::npos
                             ? description.substr(pos)
                             : description.substr(pos, next - pos);
    for (auto& s : clause_steps(clause)) steps.push_back(std::move(s));
    pos = next == std::string::npos ? next : next + 10;
  }
  std::ostringstream os;
  os << "<think>" << kOpeners[rng.uniform_int(3)] << "\n";
  for (size_t i = 0; i < steps.size(); ++i)
    os << (i + 1) << ". " << steps[i] << ".\n";
  os << "</think>";
  return os.str();
}

std::string remote_cot(const std::string& description,
                       const CotBackendConfig& cfg) {
  if (cfg.endpoint.empty())
    throw CotError("remote backend requires an endpoint");
  const char* key = std::getenv(cfg.api_key_env.c_str());
  if (!key)
    throw CotError("api key environment variable not set: " + cfg.api_key_env);
  // split http://host:port/path
  std::string url = cfg.endpoint;
  size_t scheme = url.find("://");
  size_t path_at = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  std::string host = path_at == std::string::npos ? url : url.substr(0, path_at);
  std::string path = path_at == std::string::npos ? "/" : url.substr(path_at);

  nlohmann::json body;
  body["model"] = cfg.model;
  body["temperature"] = cfg.temperature;
  body["messages"] = nlohmann::json::array(
      {{{"role", "system"}, {"content", kCotSystemPrompt}},
       {{"role", "user"}, {"content", description}}});
  std::string last_error;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    httplib::Client cli(host);
    cli.set_connection_timeout(0, cfg.timeout_ms * 1000);
    cli.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
    httplib::Headers headers{
        {"Authorization", std::string("Bearer ") + key}};
    auto res = cli.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "http status " + std::to_string(res->status);
      continue;
    }
    nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.contains("choices") || j["choices"].empty()) {
      last_error = "malformed completion body";
      continue;
    }
    return j["choices"][0]["message"]["content"].get<std::string>();
  }
  throw CotError("remote cot failed after " +
                 std::to_string(cfg.max_retries + 1) + " tries: " + last_error);
}

}  // namespace

std::string request_cot(const std::string& description,
                        const CotBackendConfig& cfg) {
  if (description.empty()) throw CotError("empty description");
  if (cfg.kind == BackendKind::kTemplate)
    return template_cot(description, cfg.seed);
  return remote_cot(description, cfg);
}

namespace {

double jaccard(const std::vector<std::string>& a,
               const std::vector<std::string>& b) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  int64_t inter = 0;
  for (const auto& w : sa) inter += sb.count(w);
  int64_t uni = static_cast<int64_t>(sa.size() + sb.size()) - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

std::pair<std::optional<CoTTrace>, QualityReport> validate_cot(
    const std::string& raw, const CotLimits& limits) {
  QualityReport rep;
  size_t open = raw.find("<think>");
  size_t close = raw.find("</think>");
  rep.format_ok = open != std::string::npos && close != std::string::npos &&
                  open < close && raw.find("<think>", open + 1) == std::string::npos &&
                  raw.find("</think>", close + 1) == std::string::npos;
  CoTTrace trace;
  if (rep.format_ok)
    trace.think = raw.substr(open + 7, close - (open + 7));

  int words = static_cast<int>(enc::tokenize_words(raw).size());
  rep.length_ok = words <= limits.max_words;

  if (rep.format_ok) {
    std::istringstream is(trace.think);
    std::string line;
    while (std::getline(is, line)) {
      size_t i = line.find_first_not_of(" \t");
      if (i == std::string::npos || !std::isdigit(
              static_cast<unsigned char>(line[i])))
        continue;
      size_t j = i;
      while (j < line.size() &&
             std::isdigit(static_cast<unsigned char>(line[j])))
        ++j;
      if (j >= line.size() || line[j] != '.') continue;
      std::string step = line.substr(j + 1);
      while (!step.empty() && (step.front() == ' ' || step.front() == '\t'))
        step.erase(step.begin());
      while (!step.empty() && (step.back() == '.' || step.back() == ' '))
        step.pop_back();
      if (!step.empty()) trace.steps.push_back(std::move(step));
    }
  }
  rep.step_count = static_cast<int>(trace.steps.size());
  rep.step_count_ok = rep.step_count >= 1 && rep.step_count <= limits.max_steps;

  rep.redundancy_ok = true;
  std::vector<std::vector<std::string>> norm;
  for (const auto& s : trace.steps) norm.push_back(enc::tokenize_words(s));
  for (size_t i = 0; i < norm.size() && rep.redundancy_ok; ++i)
    for (size_t j = i + 1; j < norm.size(); ++j)
      if (norm[i] == norm[j] ||
          jaccard(norm[i], norm[j]) > limits.jaccard_threshold) {
        rep.redundancy_ok = false;
        break;
      }

  if (!rep.accepted()) return {std::nullopt, rep};
  return {std::move(trace), rep};
}

CoTTrace generate_with_retry(const std::string& description,
                             const CotBackendFn& backend,
                             const CotLimits& limits, int max_attempts) {
  if (max_attempts < 1) throw CotError("max_attempts must be >= 1");
  QualityReport last;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    auto [trace, rep] = validate_cot(backend(description, attempt), limits);
    rep.attempt = attempt;
    if (trace) return std::move(*trace);
    last = rep;
  }
  throw CotRejected(last);
}

CoTTrace generate_with_retry(const std::string& description,
                             const CotBackendConfig& cfg,
                             const CotLimits& limits, int max_attempts) {
  return generate_with_retry(
      description,
      [&cfg](const std::string& d, int) { return request_cot(d, cfg); },
      limits, max_attempts);
}

std::vector<Triplet> build_dataset(const std::vector<data::MotionSample>& corpus,
                                   const vq::Tokenizer& tokenizer,
                                   const CotBackendConfig& cfg,
                                   const CotLimits& limits,
                                   const std::string& out_path) {
  std::vector<Triplet> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    Triplet t;
    t.description = s.text;
    t.source_sample_id = s.id;
    t.cot = generate_with_retry(s.text, cfg, limits, cfg.max_retries + 1);
    auto latents = vq::encode(tokenizer, s.motion);
    t.motion_tokens = vq::quantize(latents, tokenizer.codebook).first;
    out.push_back(std::move(t));
  }
  save_triplets(out_path, out);
  return out;
}

void save_triplets(const std::string& path,
                   const std::vector<Triplet>& triplets) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw CotError("cannot open for write: " + path);
  for (const Triplet& t : triplets) {
    nlohmann::json j;
    j["id"] = t.source_sample_id;
    j["text"] = t.description;
    j["cot_think"] = t.cot.think;
    j["cot_steps"] = t.cot.steps;
    j["motion_tokens"] = t.motion_tokens;
    os << j.dump() << "\n";
  }
  if (!os) throw CotError("write failed: " + path);
}

std::vector<Triplet> load_triplets(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CotError("cannot open: " + path);
  std::vector<Triplet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("motion_tokens"))
      throw CotError("malformed triplet JSONL at " + path + ":" +
                     std::to_string(lineno));
    Triplet t;
    t.source_sample_id = j.at("id").get<std::string>();
    t.description = j.at("text").get<std::string>();
    t.cot.think = j.at("cot_think").get<std::string>();
    t.cot.steps = j.at("cot_steps").get<std::vector<std::string>>();
    t.motion_tokens = j.at("motion_tokens").get<std::vector<int64_t>>();
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace mr1::cot
