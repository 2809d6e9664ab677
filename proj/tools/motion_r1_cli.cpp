// Operator CLI for the motion_r1 pipeline. Talks to the core exclusively
// through the C API in motion_r1.h.
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "motion_r1.h"

namespace {

int report(mr1_status st) {
  if (st == MR1_OK) return 0;
  std::fprintf(stderr, "error: %s\n", mr1_last_error());
  return static_cast<int>(st);
}

struct CommonOpts {
  std::string config;
  std::string out;
  std::string seed;
  bool no_cot = false;
  bool deterministic = false;
  bool resume = false;
};

int apply_options(mr1_pipeline* p, const CommonOpts& o) {
  if (!o.out.empty() && mr1_pipeline_set_option(p, "out_dir", o.out.c_str()))
    return report(MR1_ERR_INVALID_ARG);
  if (!o.seed.empty() && mr1_pipeline_set_option(p, "seed", o.seed.c_str()))
    return report(MR1_ERR_INVALID_ARG);
  if (o.no_cot) mr1_pipeline_set_option(p, "no_cot", "true");
  if (o.deterministic) mr1_pipeline_set_option(p, "deterministic", "true");
  if (o.resume) mr1_pipeline_set_option(p, "resume", "true");
  return 0;
}

int run_stage_cmd(const CommonOpts& o, const char* stage) {
  mr1_pipeline* p = nullptr;
  if (mr1_status st = mr1_pipeline_open(o.config.c_str(), &p)) return report(st);
  int rc = apply_options(p, o);
  if (rc == 0) {
    int skipped = 0;
    mr1_status st = stage ? mr1_pipeline_run_stage(p, stage, &skipped)
                          : mr1_pipeline_run_all(p);
    rc = report(st);
    if (rc == 0 && stage)
      std::printf("%s: %s\n", stage, skipped ? "skipped (up to date)" : "done");
    if (rc == 0 && !stage) std::printf("pipeline: done\n");
  }
  mr1_pipeline_close(p);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"motion-r1: text-to-motion training and evaluation pipeline"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string gen_text, gen_out = "out";
  std::string gen_seed = "0";
  bool gen_greedy = false;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* copt = cmd->add_option("--config", o.config, "run config file");
    if (needs_config) copt->required();
    cmd->add_option("--out", o.out, "output directory override");
    cmd->add_option("--seed", o.seed, "master seed override");
    cmd->add_flag("--no-cot", o.no_cot, "no-CoT ablation format");
    cmd->add_flag("--deterministic", o.deterministic,
                  "force single-threaded execution");
    cmd->add_flag("--resume", o.resume, "skip stages with valid manifests");
  };

  static const char* kStages[] = {"datagen",   "tokenizer-train",
                                  "encoders-train", "cot-build",
                                  "sft",       "grpo",
                                  "eval"};
  for (const char* s : kStages)
    add_common(app.add_subcommand(s, std::string("run the ") + s + " stage"),
               true);
  add_common(app.add_subcommand("pipeline", "run every stage in order"), true);

  auto* gen = app.add_subcommand("generate", "generate motion for a text");
  gen->add_option("--out", gen_out, "pipeline output directory");
  gen->add_option("--text", gen_text, "motion description")->required();
  gen->add_option("--seed", gen_seed, "sampling seed");
  gen->add_flag("--greedy", gen_greedy, "greedy decoding");
  gen->add_flag("--no-cot", o.no_cot, "parse with the no-CoT grammar");

  CLI11_PARSE(app, argc, argv);

  for (const char* s : kStages)
    if (app.got_subcommand(s)) return run_stage_cmd(o, s);
  if (app.got_subcommand("pipeline")) return run_stage_cmd(o, nullptr);

  // generate
  char* json = nullptr;
  uint64_t seed = std::stoull(gen_seed);
  mr1_status st = mr1_generate(gen_out.c_str(), gen_text.c_str(),
                               gen_greedy ? 1 : 0, seed, o.no_cot ? 1 : 0,
                               &json);
  if (st != MR1_OK) return report(st);
  std::printf("%s\n", json);
  bool ok = std::string(json).find("\"parse_ok\":true") != std::string::npos;
  mr1_string_free(json);
  return ok ? 0 : 4;
}
