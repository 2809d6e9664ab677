#include "motion_r1.h"

#include <cstring>
#include <string>

#include "json.hpp"
#include "motion_r1/pipeline.hpp"

namespace {

std::string g_last_error;

struct Handle {
  mr1::pipe::RunConfig cfg;
  bool resume = false;
};

mr1_status fail(mr1_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

mr1_status classify(const std::exception& e) {
  const std::string what = e.what();
  if (what.find("cannot open") != std::string::npos ||
      what.find("cannot write") != std::string::npos ||
      what.find("cannot hash") != std::string::npos)
    return fail(MR1_ERR_IO, what);
  return fail(MR1_ERR_RUNTIME, what);
}

}  // namespace

extern "C" {

mr1_status mr1_pipeline_open(const char* config_path, mr1_pipeline** out) {
  if (!config_path || !out)
    return fail(MR1_ERR_INVALID_ARG, "null argument to mr1_pipeline_open");
  *out = nullptr;
  try {
    auto* h = new Handle{mr1::pipe::parse_config(config_path)};
    *out = reinterpret_cast<mr1_pipeline*>(h);
    g_last_error.clear();
    return MR1_OK;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

mr1_status mr1_pipeline_set_option(mr1_pipeline* p, const char* key,
                                   const char* value) {
  if (!p || !key || !value)
    return fail(MR1_ERR_INVALID_ARG, "null argument to set_option");
  auto* h = reinterpret_cast<Handle*>(p);
  const std::string k = key, v = value;
  try {
    if (k == "seed") {
      h->cfg.seed = std::stoull(v);
    } else if (k == "out_dir") {
      h->cfg.out_dir = v;
    } else if (k == "no_cot") {
      h->cfg.no_cot = (v == "true" || v == "1");
    } else if (k == "deterministic") {
      h->cfg.deterministic = (v == "true" || v == "1");
    } else if (k == "resume") {
      h->resume = (v == "true" || v == "1");
    } else {
      return fail(MR1_ERR_INVALID_ARG, "unknown option " + k);
    }
  } catch (const std::exception&) {
    return fail(MR1_ERR_INVALID_ARG, "bad value for option " + k);
  }
  g_last_error.clear();
  return MR1_OK;
}

mr1_status mr1_pipeline_run_stage(mr1_pipeline* p, const char* stage,
                                  int* skipped_out) {
  if (!p || !stage)
    return fail(MR1_ERR_INVALID_ARG, "null argument to run_stage");
  auto* h = reinterpret_cast<Handle*>(p);
  try {
    mr1::pipe::Stage s = mr1::pipe::stage_from_name(stage);
    mr1::pipe::StageResult r = mr1::pipe::run_stage(h->cfg, s, h->resume);
    if (skipped_out) *skipped_out = r.skipped ? 1 : 0;
    g_last_error.clear();
    return MR1_OK;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

mr1_status mr1_pipeline_run_all(mr1_pipeline* p) {
  if (!p) return fail(MR1_ERR_INVALID_ARG, "null pipeline handle");
  auto* h = reinterpret_cast<Handle*>(p);
  try {
    mr1::pipe::run_all(h->cfg, h->resume);
    g_last_error.clear();
    return MR1_OK;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

void mr1_pipeline_close(mr1_pipeline* p) {
  delete reinterpret_cast<Handle*>(p);
}

mr1_status mr1_generate(const char* out_dir, const char* text, int greedy,
                        uint64_t seed, int no_cot, char** json_out) {
  if (!out_dir || !text || !json_out)
    return fail(MR1_ERR_INVALID_ARG, "null argument to mr1_generate");
  *json_out = nullptr;
  try {
    mr1::policy::SamplingConfig sampling;
    sampling.greedy = greedy != 0;
    mr1::pipe::GenerationResult r =
        mr1::pipe::generate(out_dir, text, sampling, seed, no_cot != 0);
    nlohmann::json j;
    j["parse_ok"] = r.parse_ok;
    j["think"] = r.think_text;
    j["motion_tokens"] = r.motion_tokens;
    j["raw"] = r.raw_text;
    j["frames"] = r.frames;
    std::string s = j.dump();
    char* buf = new char[s.size() + 1];
    std::memcpy(buf, s.c_str(), s.size() + 1);
    *json_out = buf;
    g_last_error.clear();
    return MR1_OK;
  } catch (const std::exception& e) {
    return classify(e);
  }
}

const char* mr1_last_error(void) { return g_last_error.c_str(); }

const char* mr1_version(void) { return "0.1.0"; }

void mr1_string_free(char* s) { delete[] s; }

}  // extern "C"
