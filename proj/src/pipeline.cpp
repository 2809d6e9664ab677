#include "motion_r1/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "motion_r1/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mr1::pipe {

namespace {

// ---------------------------------------------------------------- config

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw PipelineError("config: bad integer for " + key + ": " + v);
  }
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw PipelineError("config: bad unsigned integer for " + key + ": " + v);
  }
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw PipelineError("config: bad number for " + key + ": " + v);
  }
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw PipelineError("config: bad bool for " + key + ": " + v);
}

void apply_key(RunConfig& c, const std::string& sec, const std::string& key,
               const std::string& val) {
  const std::string q = sec + "." + key;
  auto I = [&] { return parse_int(val, q); };
  auto U = [&] { return parse_u64(val, q); };
  auto D = [&] { return parse_double(val, q); };
  auto B = [&] { return parse_bool(val, q); };
  if (sec == "pipeline") {
    if (key == "seed") c.seed = U();
    else if (key == "out_dir") c.out_dir = val;
    else if (key == "no_cot") c.no_cot = B();
    else if (key == "deterministic") c.deterministic = B();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "data") {
    if (key == "families") {
      c.families.clear();
      std::istringstream fs_in(val);
      for (std::string f; std::getline(fs_in, f, ',');) {
        f = trim(f);
        if (!f.empty()) c.families.push_back(f);
      }
    } else if (key == "samples_per_family") c.samples_per_family = I();
    else if (key == "min_frames") c.min_frames = static_cast<int>(I());
    else if (key == "max_frames") c.max_frames = static_cast<int>(I());
    else if (key == "fps") c.fps = D();
    else if (key == "noise") c.noise = D();
    else if (key == "train_ratio") c.train_ratio = D();
    else if (key == "val_ratio") c.val_ratio = D();
    else if (key == "test_ratio") c.test_ratio = D();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "tokenizer") {
    auto& t = c.tokenizer;
    if (key == "codebook_size") t.codebook_size = I();
    else if (key == "latent_dim") t.latent_dim = I();
    else if (key == "hidden") t.hidden = I();
    else if (key == "commit_weight") t.commit_weight = D();
    else if (key == "velocity_weight") t.velocity_weight = D();
    else if (key == "ema_decay") t.ema_decay = D();
    else if (key == "reset_enabled") t.reset_enabled = B();
    else if (key == "reset_interval") t.reset_interval = I();
    else if (key == "epochs") t.epochs = I();
    else if (key == "batch_size") t.batch_size = I();
    else if (key == "lr") t.lr = D();
    else if (key == "lr_min") t.lr_min = D();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "encoders") {
    auto& e = c.encoders;
    if (key == "embed_dim") e.embed_dim = I();
    else if (key == "hidden") e.hidden = I();
    else if (key == "tau") e.tau = D();
    else if (key == "epochs") e.epochs = I();
    else if (key == "batch_size") e.batch_size = I();
    else if (key == "lr") e.lr = D();
    else if (key == "lr_min") e.lr_min = D();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "cot") {
    auto& b = c.cot_backend;
    if (key == "backend") {
      if (val == "template") b.kind = cot::BackendKind::kTemplate;
      else if (val == "remote") b.kind = cot::BackendKind::kRemote;
      else throw PipelineError("config: unknown cot backend " + val);
    } else if (key == "endpoint") b.endpoint = val;
    else if (key == "model") b.model = val;
    else if (key == "timeout_ms") b.timeout_ms = static_cast<int>(I());
    else if (key == "max_retries") b.max_retries = static_cast<int>(I());
    else if (key == "api_key_env") b.api_key_env = val;
    else if (key == "temperature") b.temperature = D();
    else if (key == "max_attempts") c.cot_max_attempts = static_cast<int>(I());
    else if (key == "max_words") c.cot_limits.max_words = static_cast<int>(I());
    else if (key == "max_steps") c.cot_limits.max_steps = static_cast<int>(I());
    else if (key == "jaccard_threshold") c.cot_limits.jaccard_threshold = D();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "sft") {
    auto& s = c.sft;
    if (key == "epochs") s.epochs = I();
    else if (key == "batch_size") s.batch_size = I();
    else if (key == "lr") s.lr = D();
    else if (key == "lr_min") s.lr_min = D();
    else if (key == "blocks") s.policy.blocks = I();
    else if (key == "heads") s.policy.heads = I();
    else if (key == "dim") s.policy.dim = I();
    else if (key == "context") s.policy.context = I();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "grpo") {
    auto& g = c.grpo;
    if (key == "group_size") g.group_size = I();
    else if (key == "epsilon") g.epsilon = D();
    else if (key == "beta") g.beta = D();
    else if (key == "w_format") g.w_format = D();
    else if (key == "w_motion") g.w_motion = D();
    else if (key == "w_semantic") g.w_semantic = D();
    else if (key == "old_refresh_interval") g.old_refresh_interval = I();
    else if (key == "lr") g.lr = D();
    else if (key == "lr_min") g.lr_min = D();
    else if (key == "total_steps") g.total_steps = I();
    else if (key == "temperature") g.sampling.temperature = D();
    else if (key == "top_k") g.sampling.top_k = I();
    else if (key == "max_new_tokens") g.sampling.max_new_tokens = I();
    else throw PipelineError("config: unknown key " + q);
  } else if (sec == "eval") {
    auto& e = c.eval;
    if (key == "repeats") e.repeats = I();
    else if (key == "mm_repeats") e.mm_repeats = I();
    else if (key == "pool") e.pool = I();
    else if (key == "s_dis") e.s_dis = I();
    else if (key == "mm_reps") e.mm_reps = I();
    else if (key == "mm_pairs") e.mm_pairs = I();
    else if (key == "mm_texts") e.mm_texts = I();
    else if (key == "mm_dist_mode") {
      if (val == "euclidean") e.mode = eval::MMDistMode::euclidean;
      else if (val == "cosine") e.mode = eval::MMDistMode::cosine;
      else throw PipelineError("config: unknown mm_dist_mode " + val);
    } else if (key == "greedy") e.sampling.greedy = B();
    else if (key == "temperature") e.sampling.temperature = D();
    else if (key == "top_k") e.sampling.top_k = I();
    else if (key == "max_new_tokens") e.sampling.max_new_tokens = I();
    else throw PipelineError("config: unknown key " + q);
  } else {
    throw PipelineError("config: unknown section [" + sec + "]");
  }
}

// ---------------------------------------------------------------- paths

struct Paths {
  fs::path out, manifests;
  fs::path train, val, test;
  fs::path tokenizer, encoders, cot, sft, rl, grpo_log, report;
  explicit Paths(const RunConfig& cfg) : out(cfg.out_dir) {
    manifests = out / "manifests";
    train = out / "corpus_train.jsonl";
    val = out / "corpus_val.jsonl";
    test = out / "corpus_test.jsonl";
    tokenizer = out / "tokenizer.ckpt";
    encoders = out / "encoders.ckpt";
    cot = out / "cot.jsonl";
    sft = out / "policy_sft.ckpt";
    rl = out / "policy_rl.ckpt";
    grpo_log = out / "grpo_log.csv";
    report = out / "eval_report.csv";
  }
};

data::CorpusSpec corpus_spec(const RunConfig& cfg) {
  data::CorpusSpec spec;
  const auto& known = data::known_families();
  std::vector<std::string> fams = cfg.families.empty() ? known : cfg.families;
  for (const auto& fam : fams) {
    if (std::find(known.begin(), known.end(), fam) == known.end())
      throw PipelineError("datagen: unknown family " + fam);
    spec.families.push_back({fam, static_cast<int>(cfg.samples_per_family)});
  }
  spec.min_frames = cfg.min_frames;
  spec.max_frames = cfg.max_frames;
  spec.fps = cfg.fps;
  spec.noise = cfg.noise;
  spec.train_ratio = cfg.train_ratio;
  spec.val_ratio = cfg.val_ratio;
  spec.test_ratio = cfg.test_ratio;
  spec.master_seed = Rng::derive(cfg.seed, 1);
  return spec;
}

void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw PipelineError("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

// Inputs each stage hashes into its manifest for the resume check.
std::vector<fs::path> stage_inputs(const Paths& p, Stage s) {
  switch (s) {
    case Stage::datagen: return {};
    case Stage::tokenizer_train: return {p.train, p.val};
    case Stage::encoders_train: return {p.train, p.val};
    case Stage::cot_build: return {p.train, p.tokenizer};
    case Stage::sft: return {p.cot};
    case Stage::grpo: return {p.sft, p.tokenizer, p.encoders, p.train};
    case Stage::eval: return {p.rl, p.tokenizer, p.encoders, p.test};
  }
  throw PipelineError("unreachable stage");
}

std::vector<fs::path> stage_outputs(const Paths& p, Stage s) {
  switch (s) {
    case Stage::datagen: return {p.train, p.val, p.test};
    case Stage::tokenizer_train: return {p.tokenizer};
    case Stage::encoders_train: return {p.encoders};
    case Stage::cot_build: return {p.cot};
    case Stage::sft: return {p.sft};
    case Stage::grpo: return {p.rl, p.grpo_log};
    case Stage::eval: return {p.report};
  }
  throw PipelineError("unreachable stage");
}

bool manifest_valid(const RunConfig& cfg, const Paths& p, Stage s) {
  fs::path mpath = p.manifests / (stage_names()[static_cast<int>(s)] + ".json");
  std::ifstream in(mpath);
  if (!in) return false;
  json m;
  try {
    in >> m;
  } catch (const json::exception&) {
    return false;
  }
  if (m.value("config_hash", "") != sha256_bytes(canonical_config(cfg)))
    return false;
  for (const fs::path& f : stage_inputs(p, s)) {
    if (!fs::exists(f)) return false;
    auto it = m["inputs"].find(f.string());
    if (it == m["inputs"].end() || *it != sha256_file(f.string())) return false;
  }
  for (const fs::path& f : stage_outputs(p, s))
    if (!fs::exists(f)) return false;
  return true;
}

void write_manifest(const RunConfig& cfg, const Paths& p, Stage s,
                    double wall_time_s) {
  json m;
  m["stage"] = stage_names()[static_cast<int>(s)];
  m["config_hash"] = sha256_bytes(canonical_config(cfg));
  m["inputs"] = json::object();
  for (const fs::path& f : stage_inputs(p, s))
    m["inputs"][f.string()] = sha256_file(f.string());
  m["outputs"] = json::array();
  for (const fs::path& f : stage_outputs(p, s))
    m["outputs"].push_back(f.string());
  m["wall_time_s"] = wall_time_s;
  fs::create_directories(p.manifests);
  atomic_write(p.manifests / (stage_names()[static_cast<int>(s)] + ".json"),
               m.dump(2) + "\n");
}

// ---------------------------------------------------------------- stages

void stage_datagen(const RunConfig& cfg, const Paths& p) {
  data::CorpusSpec spec = corpus_spec(cfg);
  auto corpus = data::generate_corpus(spec);
  data::CorpusSplits splits = data::split_corpus(std::move(corpus), spec);
  data::save_jsonl(p.train.string(), splits.train);
  data::save_jsonl(p.val.string(), splits.val);
  data::save_jsonl(p.test.string(), splits.test);
}

void stage_tokenizer(const RunConfig& cfg, const Paths& p) {
  auto train = data::load_jsonl(p.train.string());
  auto val = data::load_jsonl(p.val.string());
  vq::TokenizerConfig tcfg = cfg.tokenizer;
  tcfg.fps = cfg.fps;
  tcfg.seed = Rng::derive(cfg.seed, 2);
  vq::Tokenizer tok = vq::make_tokenizer(tcfg);
  vq::train_tokenizer(tok, train, val);
  vq::save_tokenizer(p.tokenizer.string(), tok);
}

void stage_encoders(const RunConfig& cfg, const Paths& p) {
  auto train = data::load_jsonl(p.train.string());
  auto val = data::load_jsonl(p.val.string());
  enc::EncoderConfig ecfg = cfg.encoders;
  ecfg.seed = Rng::derive(cfg.seed, 3);
  enc::Encoders encs = enc::make_encoders(ecfg);
  enc::train_contrastive(encs, train, val);
  enc::save_encoders(p.encoders.string(), encs);
}

void stage_cot(const RunConfig& cfg, const Paths& p) {
  auto train = data::load_jsonl(p.train.string());
  vq::Tokenizer tok = vq::load_tokenizer(p.tokenizer.string());
  cot::CotBackendConfig bcfg = cfg.cot_backend;
  bcfg.seed = Rng::derive(cfg.seed, 4);
  cot::build_dataset(train, tok, bcfg, cfg.cot_limits, p.cot.string());
}

std::vector<int64_t> serialize(const cot::Triplet& t,
                               const policy::Vocabulary& vocab, bool no_cot) {
  return no_cot ? policy::serialize_no_cot(t, vocab)
                : policy::serialize_triplet(t, vocab);
}

void stage_sft(const RunConfig& cfg, const Paths& p) {
  auto triplets = cot::load_triplets(p.cot.string());
  if (triplets.empty()) throw PipelineError("sft: empty CoT dataset");
  policy::Vocabulary vocab =
      policy::build_vocabulary(triplets, cfg.tokenizer.codebook_size);
  policy::PolicyConfig pcfg = cfg.sft.policy;
  pcfg.seed = Rng::derive(cfg.seed, 5);
  policy::Policy pol = policy::make_policy(pcfg, vocab);

  std::vector<std::vector<int64_t>> seqs;
  std::vector<int64_t> plens;
  for (const auto& t : triplets) {
    seqs.push_back(serialize(t, vocab, cfg.no_cot));
    plens.push_back(static_cast<int64_t>(
        policy::prompt_tokens(vocab, t.description).size()));
  }
  int64_t n = static_cast<int64_t>(seqs.size());
  int64_t bs = std::min(cfg.sft.batch_size, n);
  int64_t batches_per_epoch = (n + bs - 1) / bs;
  int64_t total = cfg.sft.epochs * batches_per_epoch;
  Rng shuffle_rng(Rng::derive(cfg.seed, 6));
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.sft.epochs; ++epoch) {
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
    for (int64_t b = 0; b < n; b += bs) {
      std::vector<std::vector<int64_t>> bseq;
      std::vector<int64_t> bpl;
      for (int64_t i = b; i < std::min(b + bs, n); ++i) {
        bseq.push_back(seqs[order[i]]);
        bpl.push_back(plens[order[i]]);
      }
      double lr = nn::cosine_lr(step++, total, cfg.sft.lr, cfg.sft.lr_min);
      policy::sft_step(pol, bseq, bpl, lr);
    }
  }
  policy::save_policy(p.sft.string(), pol);
}

void stage_grpo(const RunConfig& cfg, const Paths& p) {
  policy::Policy pol = policy::load_policy(p.sft.string());
  vq::Tokenizer tok = vq::load_tokenizer(p.tokenizer.string());
  enc::Encoders encs = enc::load_encoders(p.encoders.string());
  auto train = data::load_jsonl(p.train.string());
  grpo::GRPOConfig gcfg = cfg.grpo;
  gcfg.no_cot = cfg.no_cot;
  gcfg.seed = Rng::derive(cfg.seed, 7);
  grpo::grpo_train(pol, tok, encs, train, gcfg, p.grpo_log.string());
  policy::save_policy(p.rl.string(), pol);
}

void stage_eval(const RunConfig& cfg, const Paths& p) {
  policy::Policy pol = policy::load_policy(p.rl.string());
  vq::Tokenizer tok = vq::load_tokenizer(p.tokenizer.string());
  enc::Encoders encs = enc::load_encoders(p.encoders.string());
  auto test = data::load_jsonl(p.test.string());
  eval::EvalConfig ecfg = cfg.eval;
  ecfg.no_cot = cfg.no_cot;
  ecfg.seed = Rng::derive(cfg.seed, 8);
  eval::EvalReport report = eval::evaluate(pol, tok, encs, test, ecfg);
  eval::write_report_csv(p.report.string(), report);
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, sec;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw PipelineError("config line " + std::to_string(lineno) +
                            ": malformed section header");
      sec = trim(s.substr(1, s.size() - 2));
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw PipelineError("config line " + std::to_string(lineno) +
                          ": expected key=value");
    if (sec.empty())
      throw PipelineError("config line " + std::to_string(lineno) +
                          ": key outside any section");
    apply_key(cfg, sec, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PipelineError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string sha256_bytes(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(),
                  nullptr))
    throw PipelineError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PipelineError("cannot hash missing file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_bytes(ss.str());
}

std::string canonical_config(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "seed=" << c.seed << "\nno_cot=" << c.no_cot
    << "\ndeterministic=" << c.deterministic
    << "\nfamilies=";
  for (const auto& f : c.families) o << f << ',';
  o << "\ndata=" << c.samples_per_family << ',' << c.min_frames << ','
    << c.max_frames << ',' << c.fps << ',' << c.noise << ',' << c.train_ratio
    << ',' << c.val_ratio << ',' << c.test_ratio;
  const auto& t = c.tokenizer;
  o << "\ntokenizer=" << t.codebook_size << ',' << t.latent_dim << ','
    << t.hidden << ',' << t.commit_weight << ',' << t.velocity_weight << ','
    << t.ema_decay << ',' << t.reset_enabled << ',' << t.reset_interval << ','
    << t.epochs << ',' << t.batch_size << ',' << t.lr << ',' << t.lr_min;
  const auto& e = c.encoders;
  o << "\nencoders=" << e.embed_dim << ',' << e.hidden << ',' << e.tau << ','
    << e.epochs << ',' << e.batch_size << ',' << e.lr << ',' << e.lr_min;
  const auto& b = c.cot_backend;
  o << "\ncot=" << static_cast<int>(b.kind) << ',' << b.endpoint << ','
    << b.model << ',' << b.timeout_ms << ',' << b.max_retries << ','
    << b.api_key_env << ',' << b.temperature << ',' << c.cot_max_attempts
    << ',' << c.cot_limits.max_words << ',' << c.cot_limits.max_steps << ','
    << c.cot_limits.jaccard_threshold;
  const auto& s = c.sft;
  o << "\nsft=" << s.epochs << ',' << s.batch_size << ',' << s.lr << ','
    << s.lr_min << ',' << s.policy.blocks << ',' << s.policy.heads << ','
    << s.policy.dim << ',' << s.policy.context;
  const auto& g = c.grpo;
  o << "\ngrpo=" << g.group_size << ',' << g.epsilon << ',' << g.beta << ','
    << g.w_format << ',' << g.w_motion << ',' << g.w_semantic << ','
    << g.old_refresh_interval << ',' << g.lr << ',' << g.lr_min << ','
    << g.total_steps << ',' << g.sampling.temperature << ','
    << g.sampling.top_k << ',' << g.sampling.max_new_tokens;
  const auto& v = c.eval;
  o << "\neval=" << v.repeats << ',' << v.mm_repeats << ',' << v.pool << ','
    << v.s_dis << ',' << v.mm_reps << ',' << v.mm_pairs << ',' << v.mm_texts
    << ',' << static_cast<int>(v.mode) << ',' << v.sampling.greedy << ','
    << v.sampling.temperature << ',' << v.sampling.top_k << ','
    << v.sampling.max_new_tokens << '\n';
  return o.str();
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{
      "datagen", "tokenizer-train", "encoders-train", "cot-build",
      "sft",     "grpo",            "eval"};
  return names;
}

Stage stage_from_name(const std::string& name) {
  const auto& names = stage_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Stage>(i);
  throw PipelineError("unknown stage " + name);
}

StageResult run_stage(const RunConfig& cfg, Stage stage, bool resume) {
  Paths p(cfg);
  fs::create_directories(p.out);
  StageResult result;
  result.stage = stage_names()[static_cast<int>(stage)];
  for (const fs::path& f : stage_outputs(p, stage))
    result.outputs.push_back(f.string());
  if (resume && manifest_valid(cfg, p, stage)) {
    result.skipped = true;
    return result;
  }
  auto start = std::chrono::steady_clock::now();
  switch (stage) {
    case Stage::datagen: stage_datagen(cfg, p); break;
    case Stage::tokenizer_train: stage_tokenizer(cfg, p); break;
    case Stage::encoders_train: stage_encoders(cfg, p); break;
    case Stage::cot_build: stage_cot(cfg, p); break;
    case Stage::sft: stage_sft(cfg, p); break;
    case Stage::grpo: stage_grpo(cfg, p); break;
    case Stage::eval: stage_eval(cfg, p); break;
  }
  result.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  write_manifest(cfg, p, stage, result.wall_time_s);
  return result;
}

std::vector<StageResult> run_all(const RunConfig& cfg, bool resume) {
  std::vector<StageResult> results;
  for (size_t i = 0; i < stage_names().size(); ++i)
    results.push_back(run_stage(cfg, static_cast<Stage>(i), resume));
  return results;
}

GenerationResult generate(const std::string& out_dir, const std::string& text,
                          const policy::SamplingConfig& sampling,
                          uint64_t seed, bool no_cot,
                          const std::string& motion_jsonl_out) {
  fs::path out(out_dir);
  fs::path ckpt = out / "policy_rl.ckpt";
  if (!fs::exists(ckpt)) ckpt = out / "policy_sft.ckpt";
  policy::Policy pol = policy::load_policy(ckpt.string());
  vq::Tokenizer tok = vq::load_tokenizer((out / "tokenizer.ckpt").string());

  auto prompt = policy::prompt_tokens(pol.vocab, text);
  policy::GenerationSample g = policy::sample(pol, prompt, sampling, seed);
  GenerationResult res;
  res.output_tokens = g.output;
  for (int64_t id : g.output) {
    if (!res.raw_text.empty()) res.raw_text.push_back(' ');
    res.raw_text += pol.vocab.tokens[static_cast<size_t>(id)];
  }
  policy::ParseResult pr = policy::parse_output(g.output, pol.vocab, !no_cot);
  res.parse_ok = pr.ok;
  res.think_text = pr.think_text;
  res.motion_tokens = pr.motion_tokens;
  if (pr.ok) {
    data::MotionSequence m = vq::decode(tok, pr.motion_tokens);
    res.frames = m.frame_count();
    if (!motion_jsonl_out.empty()) {
      data::MotionSample sample;
      sample.id = "generated";
      sample.text = text;
      sample.family = "generated";
      sample.motion = m;
      data::save_jsonl(motion_jsonl_out, {sample});
    }
  }
  return res;
}

}  // namespace mr1::pipe
