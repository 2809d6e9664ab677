#include "motion_r1/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "motion_r1/checkpoint.hpp"
#include "motion_r1/encoders.hpp"
#include "motion_r1/rng.hpp"

namespace mr1::policy {

using nn::NodeId;
using nn::Tape;
using nn::Tensor;

int64_t Vocabulary::motion_id(int64_t code) const {
  if (code < 0 || code >= motion_count)
    throw PolicyError("motion code out of range: " + std::to_string(code));
  return motion_base + code;
}

int64_t Vocabulary::motion_code(int64_t id) const {
  if (!is_motion(id))
    throw PolicyError("not a motion token id: " + std::to_string(id));
  return id - motion_base;
}

int64_t Vocabulary::word_or_unk(const std::string& w) const {
  auto it = word_ids.find(w);
  return it == word_ids.end() ? unk : it->second;
}

Vocabulary build_vocabulary(const std::vector<cot::Triplet>& triplets,
                            int64_t codebook_size) {
  if (codebook_size < 1) throw PolicyError("codebook_size must be >= 1");
  std::set<std::string> words;
  for (const auto& t : triplets) {
    for (auto& w : enc::tokenize_words(t.description)) words.insert(w);
    for (auto& w : enc::tokenize_words(t.cot.think)) words.insert(w);
    for (const auto& s : t.cot.steps)
      for (auto& w : enc::tokenize_words(s)) words.insert(w);
  }
  Vocabulary v;
  for (const auto& w : words) {
    v.word_ids[w] = static_cast<int64_t>(v.tokens.size());
    v.tokens.push_back(w);
  }
  auto special = [&](const char* name) {
    v.tokens.push_back(name);
    return static_cast<int64_t>(v.tokens.size()) - 1;
  };
  v.bos = special("<BOS>");
  v.eos = special("<EOS>");
  v.pad = special("<PAD>");
  v.unk = special("<UNK>");
  v.think_open = special("<think>");
  v.think_close = special("</think>");
  v.motion_open = special("<Motion>");
  v.motion_close = special("</Motion>");
  v.motion_base = static_cast<int64_t>(v.tokens.size());
  v.motion_count = codebook_size;
  for (int64_t i = 0; i < codebook_size; ++i)
    v.tokens.push_back("M_" + std::to_string(i));
  return v;
}

namespace {

nlohmann::json vocab_to_json(const Vocabulary& v) {
  nlohmann::json j;
  j["tokens"] = v.tokens;
  j["bos"] = v.bos;
  j["eos"] = v.eos;
  j["pad"] = v.pad;
  j["unk"] = v.unk;
  j["think_open"] = v.think_open;
  j["think_close"] = v.think_close;
  j["motion_open"] = v.motion_open;
  j["motion_close"] = v.motion_close;
  j["motion_base"] = v.motion_base;
  j["motion_count"] = v.motion_count;
  return j;
}

Vocabulary vocab_from_json(const nlohmann::json& j) {
  Vocabulary v;
  v.tokens = j.at("tokens").get<std::vector<std::string>>();
  v.bos = j.at("bos").get<int64_t>();
  v.eos = j.at("eos").get<int64_t>();
  v.pad = j.at("pad").get<int64_t>();
  v.unk = j.at("unk").get<int64_t>();
  v.think_open = j.at("think_open").get<int64_t>();
  v.think_close = j.at("think_close").get<int64_t>();
  v.motion_open = j.at("motion_open").get<int64_t>();
  v.motion_close = j.at("motion_close").get<int64_t>();
  v.motion_base = j.at("motion_base").get<int64_t>();
  v.motion_count = j.at("motion_count").get<int64_t>();
  for (int64_t i = 0; i < v.bos; ++i) v.word_ids[v.tokens[i]] = i;
  return v;
}

}  // namespace

void save_vocabulary(const std::string& path, const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw PolicyError("cannot open for write: " + path);
  os << vocab_to_json(vocab).dump(2) << "\n";
  if (!os) throw PolicyError("write failed: " + path);
}

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw PolicyError("cannot open: " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw PolicyError("malformed vocabulary: " + path);
  return vocab_from_json(j);
}

Policy make_policy(const PolicyConfig& cfg, Vocabulary vocab) {
  if (cfg.dim % cfg.heads != 0)
    throw PolicyError("model dim must be divisible by head count");
  Policy p;
  p.cfg = cfg;
  p.vocab = std::move(vocab);
  Rng rng(Rng::derive(cfg.seed, 0x90));
  int64_t V = p.vocab.size(), d = cfg.dim;
  auto& ps = p.params;
  ps.add("embed", Tensor::randn(rng, {V, d}, 0.02));
  ps.add("pos", Tensor::randn(rng, {cfg.context, d}, 0.02));
  for (int64_t b = 0; b < cfg.blocks; ++b) {
    std::string pre = "b" + std::to_string(b) + ".";
    ps.add(pre + "ln1.g", Tensor::full({d}, 1.0));
    ps.add(pre + "ln1.b", Tensor({d}));
    ps.add(pre + "wq", Tensor::randn(rng, {d, d}, 0.02));
    ps.add(pre + "wk", Tensor::randn(rng, {d, d}, 0.02));
    ps.add(pre + "wv", Tensor::randn(rng, {d, d}, 0.02));
    ps.add(pre + "wo", Tensor::randn(rng, {d, d}, 0.02));
    ps.add(pre + "ln2.g", Tensor::full({d}, 1.0));
    ps.add(pre + "ln2.b", Tensor({d}));
    ps.add(pre + "ff.w1", Tensor::randn(rng, {d, 4 * d}, 0.02));
    ps.add(pre + "ff.b1", Tensor({4 * d}));
    ps.add(pre + "ff.w2", Tensor::randn(rng, {4 * d, d}, 0.02));
    ps.add(pre + "ff.b2", Tensor({d}));
  }
  ps.add("lnf.g", Tensor::full({d}, 1.0));
  ps.add("lnf.b", Tensor({d}));
  ps.add("wout", Tensor::randn(rng, {d, V}, 0.02));
  return p;
}

std::vector<int64_t> prompt_tokens(const Vocabulary& vocab,
                                   const std::string& text) {
  std::vector<int64_t> out{vocab.bos};
  for (const auto& w : enc::tokenize_words(text))
    out.push_back(vocab.word_or_unk(w));
  return out;
}

std::vector<int64_t> serialize_triplet(const cot::Triplet& t,
                                       const Vocabulary& vocab) {
  auto think_words = enc::tokenize_words(t.cot.think);
  if (think_words.empty())
    throw PolicyError("serialize_triplet: empty think span");
  if (t.motion_tokens.empty())
    throw PolicyError("serialize_triplet: empty motion tokens");
  std::vector<int64_t> out = prompt_tokens(vocab, t.description);
  out.push_back(vocab.think_open);
  for (const auto& w : think_words) out.push_back(vocab.word_or_unk(w));
  out.push_back(vocab.think_close);
  out.push_back(vocab.motion_open);
  for (int64_t m : t.motion_tokens) out.push_back(vocab.motion_id(m));
  out.push_back(vocab.motion_close);
  out.push_back(vocab.eos);
  return out;
}

std::vector<int64_t> serialize_no_cot(const cot::Triplet& t,
                                      const Vocabulary& vocab) {
  if (t.motion_tokens.empty())
    throw PolicyError("serialize_no_cot: empty motion tokens");
  std::vector<int64_t> out = prompt_tokens(vocab, t.description);
  out.push_back(vocab.motion_open);
  for (int64_t m : t.motion_tokens) out.push_back(vocab.motion_id(m));
  out.push_back(vocab.motion_close);
  out.push_back(vocab.eos);
  return out;
}

NodeId forward_on_tape(Tape& t, const PolicyConfig& cfg,
                       const std::vector<int64_t>& tokens) {
  int64_t T = static_cast<int64_t>(tokens.size());
  if (T < 1) throw PolicyError("forward: empty token sequence");
  if (T > cfg.context)
    throw PolicyError("forward: sequence length " + std::to_string(T) +
                      " exceeds context " + std::to_string(cfg.context));
  std::vector<int64_t> pos_ids(tokens.size());
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  NodeId x = t.add(t.rows(t.param("embed"), tokens),
                   t.rows(t.param("pos"), pos_ids));
  int64_t dh = cfg.dim / cfg.heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t b = 0; b < cfg.blocks; ++b) {
    std::string pre = "b" + std::to_string(b) + ".";
    NodeId h = t.layer_norm(x, t.param(pre + "ln1.g"), t.param(pre + "ln1.b"));
    NodeId q = t.matmul(h, t.param(pre + "wq"));
    NodeId k = t.matmul(h, t.param(pre + "wk"));
    NodeId v = t.matmul(h, t.param(pre + "wv"));
    std::vector<NodeId> heads;
    for (int64_t hd = 0; hd < cfg.heads; ++hd) {
      NodeId qh = t.slice_cols(q, hd * dh, (hd + 1) * dh);
      NodeId kh = t.slice_cols(k, hd * dh, (hd + 1) * dh);
      NodeId vh = t.slice_cols(v, hd * dh, (hd + 1) * dh);
      NodeId probs = t.causal_softmax(t.scale(t.matmul_nt(qh, kh),
                                              inv_sqrt_dh));
      heads.push_back(t.matmul(probs, vh));
    }
    x = t.add(x, t.matmul(t.concat_cols(heads), t.param(pre + "wo")));
    NodeId f = t.layer_norm(x, t.param(pre + "ln2.g"), t.param(pre + "ln2.b"));
    f = t.relu(t.add_rowvec(t.matmul(f, t.param(pre + "ff.w1")),
                            t.param(pre + "ff.b1")));
    f = t.add_rowvec(t.matmul(f, t.param(pre + "ff.w2")),
                     t.param(pre + "ff.b2"));
    x = t.add(x, f);
  }
  x = t.layer_norm(x, t.param("lnf.g"), t.param("lnf.b"));
  return t.matmul(x, t.param("wout"));
}

double sft_step(Policy& p, const std::vector<std::vector<int64_t>>& sequences,
                const std::vector<int64_t>& prompt_lens, double lr) {
  if (sequences.empty() || sequences.size() != prompt_lens.size())
    throw PolicyError("sft_step: bad batch");
  Tape t(&p.params);
  NodeId total = t.constant(Tensor::scalar(0.0));
  double weight_sum = 0;
  std::vector<std::pair<NodeId, double>> parts;
  for (size_t s = 0; s < sequences.size(); ++s) {
    std::vector<int64_t> seq = sequences[s];
    if (static_cast<int64_t>(seq.size()) > p.cfg.context) {
      std::fprintf(stderr,
                   "sft_step: truncating sequence of %zu tokens to context "
                   "%lld\n",
                   seq.size(), static_cast<long long>(p.cfg.context));
      seq.resize(static_cast<size_t>(p.cfg.context));
    }
    int64_t T = static_cast<int64_t>(seq.size());
    int64_t plen = prompt_lens[s];
    if (plen < 1 || plen >= T)
      throw PolicyError("sft_step: prompt length out of range");
    NodeId logits = forward_on_tape(t, p.cfg, seq);
    std::vector<int64_t> rows_keep(static_cast<size_t>(T - 1));
    std::iota(rows_keep.begin(), rows_keep.end(), 0);
    std::vector<int64_t> targets(seq.begin() + 1, seq.end());
    std::vector<double> w(targets.size(), 0.0);
    double resp = 0;
    for (size_t i = 0; i < targets.size(); ++i)
      if (static_cast<int64_t>(i) + 1 >= plen) {
        w[i] = 1.0;
        resp += 1.0;
      }
    NodeId ce = t.cross_entropy_rows(t.rows(logits, rows_keep),
                                     std::move(targets), std::move(w));
    parts.emplace_back(ce, resp);
    weight_sum += resp;
  }
  for (auto& [ce, resp] : parts)
    total = t.add(total, t.scale(ce, resp / weight_sum));
  double loss = t.val(total).v[0];
  if (!std::isfinite(loss)) throw PolicyError("sft_step: non-finite loss");
  nn::GradMap grads = t.backward(total);
  nn::adam_step(p.params, grads, lr);
  return loss;
}

std::vector<double> sequence_log_prob(const Policy& p,
                                      const std::vector<int64_t>& prompt,
                                      const std::vector<int64_t>& output) {
  if (prompt.empty() || output.empty())
    throw PolicyError("sequence_log_prob: empty prompt or output");
  std::vector<int64_t> seq = prompt;
  seq.insert(seq.end(), output.begin(), output.end());
  if (static_cast<int64_t>(seq.size()) > p.cfg.context)
    throw PolicyError("sequence_log_prob: length exceeds context");
  Tape t(const_cast<nn::ParameterSet*>(&p.params));
  NodeId logp = t.log_softmax_rows(forward_on_tape(t, p.cfg, seq));
  const Tensor& L = t.val(logp);
  std::vector<double> out(output.size());
  int64_t plen = static_cast<int64_t>(prompt.size());
  for (size_t i = 0; i < output.size(); ++i)
    out[i] = L.at(plen - 1 + static_cast<int64_t>(i), output[i]);
  return out;
}

namespace {

std::string join_words(const Vocabulary& vocab,
                       const std::vector<int64_t>& ids) {
  std::string out;
  for (int64_t id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.tokens[static_cast<size_t>(id)];
  }
  return out;
}

bool is_word(const Vocabulary& v, int64_t id) { return id < v.bos || id == v.unk; }

}  // namespace

ParseResult parse_output(const std::vector<int64_t>& output,
                         const Vocabulary& vocab, bool require_think) {
  ParseResult res;
  size_t i = 0, n = output.size();
  std::vector<int64_t> think;
  if (require_think) {
    if (i >= n || output[i] != vocab.think_open) return res;
    ++i;
    while (i < n && is_word(vocab, output[i])) think.push_back(output[i++]);
    if (think.empty() || i >= n || output[i] != vocab.think_close) return res;
    ++i;
  }
  if (i >= n || output[i] != vocab.motion_open) return res;
  ++i;
  std::vector<int64_t> motion;
  while (i < n && vocab.is_motion(output[i]))
    motion.push_back(vocab.motion_code(output[i++]));
  if (motion.empty() || i >= n || output[i] != vocab.motion_close) return res;
  ++i;
  if (i < n && output[i] == vocab.eos) ++i;
  if (i != n) return res;  // trailing garbage
  res.think_text = join_words(vocab, think);
  res.motion_tokens = std::move(motion);
  res.ok = true;
  return res;
}

GenerationSample sample(const Policy& p, const std::vector<int64_t>& prompt,
                        const SamplingConfig& cfg, uint64_t seed) {
  if (prompt.empty()) throw PolicyError("sample: empty prompt");
  if (!cfg.greedy && cfg.temperature <= 0)
    throw PolicyError("sample: temperature must be > 0");
  if (cfg.top_k < 1) throw PolicyError("sample: top_k must be >= 1");
  Rng rng(seed);
  GenerationSample g;
  g.prompt = prompt;
  std::vector<int64_t> seq = prompt;
  int64_t V = p.vocab.size();
  for (int64_t step = 0; step < cfg.max_new_tokens; ++step) {
    if (static_cast<int64_t>(seq.size()) >= p.cfg.context) break;
    Tape t(const_cast<nn::ParameterSet*>(&p.params));
    NodeId logits = forward_on_tape(t, p.cfg, seq);
    const Tensor& L = t.val(logits);
    int64_t row = static_cast<int64_t>(seq.size()) - 1;
    double temp = cfg.greedy ? 1.0 : cfg.temperature;
    // log softmax(logits / temp), computed stably
    std::vector<double> logp(static_cast<size_t>(V));
    double mx = -1e300;
    for (int64_t j = 0; j < V; ++j) mx = std::max(mx, L.at(row, j) / temp);
    double z = 0;
    for (int64_t j = 0; j < V; ++j) {
      logp[static_cast<size_t>(j)] = L.at(row, j) / temp - mx;
      z += std::exp(logp[static_cast<size_t>(j)]);
    }
    double lz = std::log(z);
    for (double& v : logp) v -= lz;

    int64_t chosen;
    if (cfg.greedy || cfg.top_k == 1) {
      chosen = 0;
      for (int64_t j = 1; j < V; ++j)
        if (L.at(row, j) > L.at(row, chosen)) chosen = j;
    } else {
      std::vector<int64_t> idx(static_cast<size_t>(V));
      std::iota(idx.begin(), idx.end(), 0);
      int64_t k = std::min(cfg.top_k, V);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                        [&](int64_t a, int64_t b) {
                          double pa = logp[static_cast<size_t>(a)];
                          double pb = logp[static_cast<size_t>(b)];
                          return pa > pb || (pa == pb && a < b);
                        });
      double mass = 0;
      for (int64_t j = 0; j < k; ++j)
        mass += std::exp(logp[static_cast<size_t>(idx[j])]);
      double u = rng.uniform() * mass;
      chosen = idx[static_cast<size_t>(k - 1)];
      double acc = 0;
      for (int64_t j = 0; j < k; ++j) {
        acc += std::exp(logp[static_cast<size_t>(idx[j])]);
        if (u <= acc) {
          chosen = idx[static_cast<size_t>(j)];
          break;
        }
      }
    }
    g.output.push_back(chosen);
    g.logprobs.push_back(logp[static_cast<size_t>(chosen)]);
    seq.push_back(chosen);
    if (chosen == p.vocab.eos) break;
  }
  ParseResult pr = parse_output(g.output, p.vocab);
  g.parse_ok = pr.ok;
  g.think_text = std::move(pr.think_text);
  g.motion_tokens = std::move(pr.motion_tokens);
  return g;
}

std::vector<GenerationSample> sample_group(const Policy& p,
                                           const std::vector<int64_t>& prompt,
                                           int64_t G,
                                           const SamplingConfig& cfg,
                                           uint64_t seed) {
  if (G < 2) throw PolicyError("sample_group: G must be >= 2");
  std::vector<GenerationSample> out;
  out.reserve(static_cast<size_t>(G));
  for (int64_t i = 0; i < G; ++i)
    out.push_back(sample(p, prompt, cfg, Rng::derive(seed, i)));
  return out;
}

void save_policy(const std::string& path, const Policy& p) {
  nlohmann::json meta;
  meta["kind"] = "policy";
  meta["blocks"] = p.cfg.blocks;
  meta["heads"] = p.cfg.heads;
  meta["dim"] = p.cfg.dim;
  meta["context"] = p.cfg.context;
  meta["vocab"] = vocab_to_json(p.vocab);
  nn::save_checkpoint(path, p.params, meta.dump());
}

Policy load_policy(const std::string& path) {
  Policy p;
  nlohmann::json meta =
      nlohmann::json::parse(nn::load_checkpoint(path, p.params));
  if (meta.value("kind", "") != "policy")
    throw PolicyError("not a policy checkpoint: " + path);
  p.cfg.blocks = meta.at("blocks").get<int64_t>();
  p.cfg.heads = meta.at("heads").get<int64_t>();
  p.cfg.dim = meta.at("dim").get<int64_t>();
  p.cfg.context = meta.at("context").get<int64_t>();
  p.vocab = vocab_from_json(meta.at("vocab"));
  return p;
}

}  // namespace mr1::policy
