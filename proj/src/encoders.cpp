#include "motion_r1/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "motion_r1/checkpoint.hpp"

namespace mr1::enc {

using nn::NodeId;
using nn::Tape;

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Tensor motion_features(const MotionSequence& m) {
  int64_t T = m.frame_count(), D = m.channels();
  if (T < 1) throw EncError("motion_features: empty motion");
  Tensor f({kMotionFeatureDim});
  for (int64_t c = 0; c < D; ++c) {
    double mean = 0;
    for (int64_t t = 0; t < T; ++t) mean += m.frames.at(t, c);
    mean /= double(T);
    double var = 0;
    for (int64_t t = 0; t < T; ++t) {
      double d = m.frames.at(t, c) - mean;
      var += d * d;
    }
    double vel = 0;
    for (int64_t t = 0; t + 1 < T; ++t)
      vel += std::abs(m.frames.at(t + 1, c) - m.frames.at(t, c));
    f.v[c] = mean;
    f.v[D + c] = std::sqrt(var / double(T));
    f.v[2 * D + c] = T > 1 ? vel / double(T - 1) : 0.0;
  }
  return f;
}

Tensor text_features(const std::string& text) {
  Tensor f({kTextBuckets});
  for (const auto& w : tokenize_words(text))
    f.v[fnv1a(w) % kTextBuckets] += 1.0;
  return f;
}

Encoders make_encoders(const EncoderConfig& cfg) {
  Encoders enc;
  enc.cfg = cfg;
  Rng rng(Rng::derive(cfg.seed, 0xe2c));
  auto mlp = [&](const std::string& prefix, int64_t in) {
    enc.params.add(prefix + ".w1",
                   Tensor::randn(rng, {in, cfg.hidden}, std::sqrt(2.0 / in)));
    enc.params.add(prefix + ".b1", Tensor({cfg.hidden}));
    enc.params.add(prefix + ".w2",
                   Tensor::randn(rng, {cfg.hidden, cfg.embed_dim},
                                 std::sqrt(2.0 / cfg.hidden)));
    enc.params.add(prefix + ".b2", Tensor({cfg.embed_dim}));
  };
  mlp("mot", kMotionFeatureDim);
  mlp("txt", kTextBuckets);
  return enc;
}

namespace {

// Rows of `x` through the named MLP, layer-normalized so each embedding
// has squared norm embed_dim.
NodeId embed_rows(Tape& t, const EncoderConfig& cfg, const std::string& prefix,
                  Tensor x) {
  NodeId h = t.relu(t.add_rowvec(t.matmul(t.input(std::move(x)),
                                          t.param(prefix + ".w1")),
                                 t.param(prefix + ".b1")));
  NodeId e = t.add_rowvec(t.matmul(h, t.param(prefix + ".w2")),
                          t.param(prefix + ".b2"));
  NodeId ones = t.constant(Tensor::full({cfg.embed_dim}, 1.0));
  NodeId zeros = t.constant(Tensor({cfg.embed_dim}));
  return t.layer_norm(e, ones, zeros);
}

Tensor embed_one(const Encoders& enc, const std::string& prefix, Tensor feat) {
  feat.shape = {1, feat.numel()};
  Tape t(const_cast<nn::ParameterSet*>(&enc.params));
  Tensor row = t.val(embed_rows(t, enc.cfg, prefix, std::move(feat)));
  row.shape = {row.numel()};
  return row;
}

}  // namespace

Tensor embed_motion(const Encoders& enc, const MotionSequence& m) {
  return embed_one(enc, "mot", motion_features(m));
}

Tensor embed_text(const Encoders& enc, const std::string& text) {
  return embed_one(enc, "txt", text_features(text));
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw EncError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    dot += a.v[i] * b.v[i];
    na += a.v[i] * a.v[i];
    nb += b.v[i] * b.v[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

namespace {

Tensor stack_motion_features(const std::vector<data::MotionSample>& samples,
                             const std::vector<size_t>& ids) {
  Tensor x({static_cast<int64_t>(ids.size()), kMotionFeatureDim});
  for (size_t i = 0; i < ids.size(); ++i) {
    Tensor f = motion_features(samples[ids[i]].motion);
    std::copy(f.v.begin(), f.v.end(),
              x.v.begin() + static_cast<int64_t>(i) * kMotionFeatureDim);
  }
  return x;
}

Tensor stack_text_features(const std::vector<data::MotionSample>& samples,
                           const std::vector<size_t>& ids) {
  Tensor x({static_cast<int64_t>(ids.size()), kTextBuckets});
  for (size_t i = 0; i < ids.size(); ++i) {
    Tensor f = text_features(samples[ids[i]].text);
    std::copy(f.v.begin(), f.v.end(),
              x.v.begin() + static_cast<int64_t>(i) * kTextBuckets);
  }
  return x;
}

}  // namespace

ContrastiveHistory train_contrastive(
    Encoders& enc, const std::vector<data::MotionSample>& train,
    const std::vector<data::MotionSample>& val) {
  const EncoderConfig& cfg = enc.cfg;
  if (static_cast<int64_t>(train.size()) < 2)
    throw EncError("train_contrastive: need at least 2 samples");
  Rng rng(Rng::derive(cfg.seed, 0xc047));
  ContrastiveHistory hist;
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  int64_t steps_per_epoch = 0;
  for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size)
    if (order.size() - b0 >= 2) ++steps_per_epoch;
  int64_t total_steps = cfg.epochs * steps_per_epoch, step = 0;
  double inv_scale = 1.0 / (cfg.tau * static_cast<double>(cfg.embed_dim));

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int64_t>(i))]);
    double epoch_loss = 0;
    int64_t nb = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      if (b1 - b0 < 2) continue;  // a 1-way contrast carries no signal
      std::vector<size_t> ids(order.begin() + b0, order.begin() + b1);
      Tape t(&enc.params);
      NodeId em = embed_rows(t, cfg, "mot", stack_motion_features(train, ids));
      NodeId et = embed_rows(t, cfg, "txt", stack_text_features(train, ids));
      // cosine / tau both directions; targets are the diagonal
      NodeId logits_mt = t.scale(t.matmul_nt(em, et), inv_scale);
      NodeId logits_tm = t.scale(t.matmul_nt(et, em), inv_scale);
      std::vector<int64_t> diag(ids.size());
      std::iota(diag.begin(), diag.end(), 0);
      std::vector<double> w(ids.size(), 1.0);
      NodeId loss = t.scale(t.add(t.cross_entropy_rows(logits_mt, diag, w),
                                  t.cross_entropy_rows(logits_tm, diag, w)),
                            0.5);
      double lv = t.val(loss).v[0];
      if (!std::isfinite(lv))
        throw EncError("train_contrastive: loss diverged");
      nn::GradMap grads = t.backward(loss);
      nn::adam_step(enc.params, grads,
                    nn::cosine_lr(step, total_steps, cfg.lr, cfg.lr_min));
      ++step;
      epoch_loss += lv;
      ++nb;
    }
    hist.train_loss.push_back(epoch_loss / static_cast<double>(nb));
  }
  if (!val.empty())
    hist.val_top1 = retrieval_top1(enc, val, 32, Rng::derive(cfg.seed, 0x701));
  return hist;
}

double retrieval_top1(const Encoders& enc,
                      const std::vector<data::MotionSample>& samples,
                      int64_t pool, uint64_t seed) {
  if (samples.empty()) throw EncError("retrieval_top1: empty sample set");
  Rng rng(seed);
  int64_t n = static_cast<int64_t>(samples.size());
  int64_t p = std::min(pool, n);
  std::vector<Tensor> me(samples.size()), te(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    me[i] = embed_motion(enc, samples[i].motion);
    te[i] = embed_text(enc, samples[i].text);
  }
  auto dist2 = [&](int64_t m, int64_t t) {
    double s = 0;
    for (int64_t i = 0; i < me[m].numel(); ++i) {
      double d = me[m].v[i] - te[t].v[i];
      s += d * d;
    }
    return s;
  };
  int64_t hits = 0;
  for (int64_t q = 0; q < n; ++q) {
    // Motion query against its true description plus up to p-1 negatives
    // drawn without replacement. A candidate whose text equals the true
    // description is not a mismatch, so it cannot serve as a negative.
    std::vector<int64_t> others;
    for (int64_t i = 0; i < n; ++i)
      if (i != q && samples[i].text != samples[q].text) others.push_back(i);
    double own = dist2(q, q);
    bool beaten = false;
    int64_t draws = std::min<int64_t>(p - 1,
                                      static_cast<int64_t>(others.size()));
    for (int64_t k = 0; k < draws; ++k) {
      int64_t j = k + rng.uniform_int(static_cast<int64_t>(others.size()) - k);
      std::swap(others[k], others[j]);
      if (dist2(q, others[k]) < own) beaten = true;
    }
    if (!beaten) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

void save_encoders(const std::string& path, const Encoders& enc) {
  nlohmann::json meta;
  meta["kind"] = "encoders";
  meta["embed_dim"] = enc.cfg.embed_dim;
  meta["hidden"] = enc.cfg.hidden;
  meta["tau"] = enc.cfg.tau;
  nn::save_checkpoint(path, enc.params, meta.dump());
}

Encoders load_encoders(const std::string& path) {
  Encoders enc;
  nlohmann::json meta =
      nlohmann::json::parse(nn::load_checkpoint(path, enc.params));
  if (meta.value("kind", "") != "encoders")
    throw EncError("not an encoders checkpoint: " + path);
  enc.cfg.embed_dim = meta.at("embed_dim").get<int64_t>();
  enc.cfg.hidden = meta.at("hidden").get<int64_t>();
  enc.cfg.tau = meta.at("tau").get<double>();
  return enc;
}

}  // namespace mr1::enc
