#include "motion_r1/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "motion_r1/checkpoint.hpp"

namespace mr1::vq {

using nn::NodeId;
using nn::Tape;

Codebook Codebook::init(Rng& rng, int64_t n, int64_t d, double decay) {
  if (n < 2) throw TokError("codebook needs at least 2 codes");
  Codebook cb;
  cb.codes = Tensor::randn(rng, {n, d}, 1.0);
  cb.ema_counts = Tensor::full({n}, 1.0);
  cb.ema_sums = cb.codes;
  cb.decay = decay;
  cb.usage.assign(static_cast<size_t>(n), 0);
  return cb;
}

Tokenizer make_tokenizer(const TokenizerConfig& cfg) {
  Tokenizer tok;
  tok.cfg = cfg;
  Rng rng(Rng::derive(cfg.seed, 0x70c));
  int64_t D = cfg.channels, H = cfg.hidden, d = cfg.latent_dim;
  auto& p = tok.params;
  p.add("enc.conv1.w", Tensor::randn(rng, {4 * D, H}, std::sqrt(2.0 / (4 * D))));
  p.add("enc.conv1.b", Tensor({H}));
  p.add("enc.conv2.w", Tensor::randn(rng, {4 * H, d}, std::sqrt(2.0 / (4 * H))));
  p.add("enc.conv2.b", Tensor({d}));
  p.add("dec.tconv1.w", Tensor::randn(rng, {4 * d, H}, std::sqrt(2.0 / (4 * d))));
  p.add("dec.tconv1.b", Tensor({H}));
  p.add("dec.tconv2.w", Tensor::randn(rng, {4 * H, D}, std::sqrt(2.0 / (4 * H))));
  p.add("dec.tconv2.b", Tensor({D}));
  tok.codebook = Codebook::init(rng, cfg.codebook_size, d, cfg.ema_decay);
  return tok;
}

Tensor pad_frames(const Tensor& frames, int64_t l) {
  int64_t T = frames.shape[0], D = frames.shape[1];
  int64_t rem = T % l;
  if (rem == 0) return frames;
  int64_t pad = l - rem;
  Tensor out({T + pad, D});
  std::copy(frames.v.begin(), frames.v.end(), out.v.begin());
  for (int64_t t = T; t < T + pad; ++t)
    for (int64_t c = 0; c < D; ++c) out.at(t, c) = frames.at(T - 1, c);
  return out;
}

NodeId encode_on_tape(Tape& t, const TokenizerConfig& cfg,
                      const Tensor& padded) {
  if (padded.shape[0] < cfg.downsample)
    throw TokError("encode: sequence shorter than downsample rate");
  if (padded.shape[0] % cfg.downsample != 0)
    throw TokError("encode: frames not padded to a multiple of l");
  (void)cfg;
  NodeId x = t.input(padded);
  NodeId h = t.relu(t.conv1d(x, t.param("enc.conv1.w"), t.param("enc.conv1.b"),
                             4, 2, 1));
  return t.conv1d(h, t.param("enc.conv2.w"), t.param("enc.conv2.b"), 4, 2, 1);
}

NodeId decode_on_tape(Tape& t, const TokenizerConfig& cfg, NodeId zq) {
  (void)cfg;
  NodeId h = t.relu(t.tconv1d(zq, t.param("dec.tconv1.w"),
                              t.param("dec.tconv1.b"), 4, 2, 1));
  return t.tconv1d(h, t.param("dec.tconv2.w"), t.param("dec.tconv2.b"), 4, 2,
                   1);
}

Tensor encode(const Tokenizer& tok, const MotionSequence& m) {
  if (m.frame_count() < 1) throw TokError("encode: empty motion");
  Tensor padded = pad_frames(m.frames, tok.cfg.downsample);
  Tape t(const_cast<nn::ParameterSet*>(&tok.params));
  return t.val(encode_on_tape(t, tok.cfg, padded));
}

std::pair<std::vector<int64_t>, Tensor> quantize(const Tensor& latents,
                                                 const Codebook& cb) {
  if (latents.shape.size() != 2 || latents.shape[1] != cb.dim())
    throw TokError("quantize: latent dim does not match codebook");
  if (!latents.all_finite()) throw TokError("quantize: non-finite latent");
  int64_t steps = latents.shape[0], n = cb.size(), d = cb.dim();
  std::vector<int64_t> idx(static_cast<size_t>(steps));
  Tensor zq(latents.shape);
  for (int64_t i = 0; i < steps; ++i) {
    int64_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < n; ++c) {
      double d2 = 0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = latents.at(i, k) - cb.codes.at(c, k);
        d2 += diff * diff;
      }
      if (d2 < best_d2) {  // strict: ties keep the lowest index
        best_d2 = d2;
        best = c;
      }
    }
    idx[static_cast<size_t>(i)] = best;
    for (int64_t k = 0; k < d; ++k) zq.at(i, k) = cb.codes.at(best, k);
  }
  return {std::move(idx), std::move(zq)};
}

MotionSequence decode(const Tokenizer& tok, const std::vector<int64_t>& tokens,
                      int64_t trim_to) {
  if (tokens.empty()) throw TokError("decode: empty token sequence");
  int64_t n = tok.codebook.size(), d = tok.codebook.dim();
  Tensor zq({static_cast<int64_t>(tokens.size()), d});
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= n)
      throw TokError("decode: token " + std::to_string(tokens[i]) +
                     " out of range at position " + std::to_string(i));
    for (int64_t k = 0; k < d; ++k)
      zq.at(static_cast<int64_t>(i), k) = tok.codebook.codes.at(tokens[i], k);
  }
  Tape t(const_cast<nn::ParameterSet*>(&tok.params));
  Tensor frames = t.val(decode_on_tape(t, tok.cfg, t.input(zq)));
  if (trim_to >= 0) {
    if (trim_to > frames.shape[0]) throw TokError("decode: trim beyond output");
    Tensor cut({trim_to, frames.shape[1]});
    std::copy(frames.v.begin(), frames.v.begin() + cut.numel(), cut.v.begin());
    frames = std::move(cut);
  }
  return MotionSequence{std::move(frames), tok.cfg.fps};
}

namespace {

double smooth_l1_mean(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.v[i] - b.v[i];
    s += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  return s / static_cast<double>(a.numel());
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = a.v[i] - b.v[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

Tensor diff_rows(const Tensor& x) {
  Tensor out({x.shape[0] - 1, x.shape[1]});
  for (int64_t t = 0; t + 1 < x.shape[0]; ++t)
    for (int64_t c = 0; c < x.shape[1]; ++c)
      out.at(t, c) = x.at(t + 1, c) - x.at(t, c);
  return out;
}

}  // namespace

VqLossBreakdown vq_loss(const Tensor& m, const Tensor& m_hat, const Tensor& z,
                        const Tensor& z_q, double commit_weight,
                        double velocity_weight) {
  if (!m.same_shape(m_hat) || !z.same_shape(z_q))
    throw TokError("vq_loss: shape mismatch");
  VqLossBreakdown out;
  out.reconstruct = smooth_l1_mean(m_hat, m);
  if (m.shape[0] >= 2) {
    out.reconstruct +=
        velocity_weight * smooth_l1_mean(diff_rows(m_hat), diff_rows(m));
  }
  out.commit = mean_sq_diff(z, z_q);
  out.embed = mean_sq_diff(z, z_q);  // reported; carries no gradient under EMA
  out.total = out.reconstruct + commit_weight * out.commit + out.embed;
  return out;
}

void ema_update(Codebook& cb, const Tensor& z_batch,
                const std::vector<int64_t>& assignments, double eps_count) {
  if (static_cast<int64_t>(assignments.size()) != z_batch.shape[0])
    throw TokError("ema_update: assignment/latent length mismatch");
  int64_t n = cb.size(), d = cb.dim();
  std::vector<double> hits(static_cast<size_t>(n), 0.0);
  Tensor sums({n, d});
  for (size_t i = 0; i < assignments.size(); ++i) {
    int64_t c = assignments[i];
    hits[static_cast<size_t>(c)] += 1.0;
    for (int64_t k = 0; k < d; ++k)
      sums.at(c, k) += z_batch.at(static_cast<int64_t>(i), k);
  }
  double g = cb.decay;
  for (int64_t c = 0; c < n; ++c) {
    cb.ema_counts.v[c] = g * cb.ema_counts.v[c] + (1 - g) * hits[c];
    for (int64_t k = 0; k < d; ++k)
      cb.ema_sums.at(c, k) = g * cb.ema_sums.at(c, k) + (1 - g) * sums.at(c, k);
    double denom = std::max(cb.ema_counts.v[c], eps_count);
    for (int64_t k = 0; k < d; ++k)
      cb.codes.at(c, k) = cb.ema_sums.at(c, k) / denom;
  }
}

int64_t reset_dead_codes(Codebook& cb, const Tensor& z_batch,
                         double usage_threshold, Rng& rng) {
  if (z_batch.shape[0] < 1) throw TokError("reset_dead_codes: empty batch");
  if (cb.usage_total == 0) return 0;
  int64_t n = cb.size(), d = cb.dim();
  int64_t resets = 0;
  for (int64_t c = 0; c < n; ++c) {
    double frac = static_cast<double>(cb.usage[static_cast<size_t>(c)]) /
                  static_cast<double>(cb.usage_total);
    if (frac >= usage_threshold) continue;
    int64_t pick = rng.uniform_int(z_batch.shape[0]);
    for (int64_t k = 0; k < d; ++k) {
      cb.codes.at(c, k) = z_batch.at(pick, k);
      cb.ema_sums.at(c, k) = cb.codes.at(c, k);
    }
    cb.ema_counts.v[c] = 1.0;
    ++resets;
  }
  std::fill(cb.usage.begin(), cb.usage.end(), 0);
  cb.usage_total = 0;
  return resets;
}

namespace {

struct SeqLoss {
  VqLossBreakdown breakdown;
  Tensor latents;
  std::vector<int64_t> assignments;
};

// One sequence forward on a fresh tape; accumulates parameter gradients
// (straight-through at the quantizer) when `grads` is non-null.
SeqLoss sequence_loss(Tokenizer& tok, const Tensor& frames, nn::GradMap* grads) {
  const TokenizerConfig& cfg = tok.cfg;
  Tensor padded = pad_frames(frames, cfg.downsample);
  Tape t(&tok.params);
  NodeId z = encode_on_tape(t, cfg, padded);
  auto [idx, zq] = quantize(t.val(z), tok.codebook);
  NodeId zq_node = t.straight_through(z, zq);
  NodeId m_hat = decode_on_tape(t, cfg, zq_node);
  NodeId target = t.constant(padded);
  NodeId recon = t.mean_all(t.smooth_l1(m_hat, target));
  if (padded.shape[0] >= 2) {
    NodeId vel = t.mean_all(
        t.smooth_l1(t.diff_time(m_hat), t.diff_time(target)));
    recon = t.add(recon, t.scale(vel, cfg.velocity_weight));
  }
  NodeId commit_diff = t.sub(z, t.constant(zq));
  NodeId commit = t.mean_all(t.mul(commit_diff, commit_diff));
  NodeId total = t.add(recon, t.scale(commit, cfg.commit_weight));
  SeqLoss out;
  out.breakdown = vq_loss(padded, t.val(m_hat), t.val(z), zq,
                          cfg.commit_weight, cfg.velocity_weight);
  out.latents = t.val(z);
  out.assignments = idx;
  if (grads) {
    nn::GradMap g = t.backward(total);
    for (auto& [name, gt] : g) {
      auto it = grads->find(name);
      if (it == grads->end())
        (*grads)[name] = gt;
      else
        for (int64_t i = 0; i < gt.numel(); ++i) it->second.v[i] += gt.v[i];
    }
  }
  return out;
}

double validation_reconstruct(Tokenizer& tok,
                              const std::vector<data::MotionSample>& val,
                              std::vector<char>* hit_codes) {
  double sum = 0;
  for (const auto& s : val) {
    SeqLoss sl = sequence_loss(tok, s.motion.frames, nullptr);
    sum += sl.breakdown.reconstruct;
    if (hit_codes)
      for (int64_t c : sl.assignments)
        (*hit_codes)[static_cast<size_t>(c)] = 1;
  }
  return sum / static_cast<double>(val.size());
}

}  // namespace

TrainHistory train_tokenizer(Tokenizer& tok,
                             const std::vector<data::MotionSample>& train,
                             const std::vector<data::MotionSample>& val) {
  if (train.empty()) throw TokError("train_tokenizer: empty corpus");
  const TokenizerConfig& cfg = tok.cfg;
  Rng rng(Rng::derive(cfg.seed, 0x7e41));
  TrainHistory hist;
  hist.val_reconstruct.push_back(
      val.empty() ? 0 : validation_reconstruct(tok, val, nullptr));

  int64_t total_steps =
      cfg.epochs * ((static_cast<int64_t>(train.size()) + cfg.batch_size - 1) /
                    cfg.batch_size);
  int64_t step = 0;
  int64_t batches_since_reset = 0;
  double reset_threshold = cfg.reset_threshold_scale /
                           static_cast<double>(cfg.codebook_size);

  nn::ParameterSet good_params = tok.params;
  Codebook good_cb = tok.codebook;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int64_t>(i))]);
    VqLossBreakdown epoch_mean;
    int64_t nbatches = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      nn::GradMap grads;
      std::vector<Tensor> batch_latents;
      std::vector<int64_t> batch_assign;
      VqLossBreakdown batch_loss;
      for (size_t i = b0; i < b1; ++i) {
        SeqLoss sl = sequence_loss(tok, train[order[i]].motion.frames, &grads);
        batch_loss.reconstruct += sl.breakdown.reconstruct;
        batch_loss.commit += sl.breakdown.commit;
        batch_loss.embed += sl.breakdown.embed;
        batch_loss.total += sl.breakdown.total;
        batch_latents.push_back(std::move(sl.latents));
        batch_assign.insert(batch_assign.end(), sl.assignments.begin(),
                            sl.assignments.end());
      }
      double inv = 1.0 / static_cast<double>(b1 - b0);
      batch_loss.reconstruct *= inv;
      batch_loss.commit *= inv;
      batch_loss.embed *= inv;
      batch_loss.total *= inv;
      if (!std::isfinite(batch_loss.total)) {
        tok.params = std::move(good_params);
        tok.codebook = std::move(good_cb);
        throw TokError("train_tokenizer: loss diverged; restored last good "
                       "checkpoint");
      }
      for (auto& [k, g] : grads)
        for (double& x : g.v) x *= inv;
      double lr = nn::cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
      nn::adam_step(tok.params, grads, lr);
      ++step;

      // Stack batch latents for the EMA codebook update.
      int64_t rows = 0;
      for (auto& z : batch_latents) rows += z.shape[0];
      Tensor z_all({rows, cfg.latent_dim});
      int64_t off = 0;
      for (auto& z : batch_latents) {
        std::copy(z.v.begin(), z.v.end(), z_all.v.begin() + off * cfg.latent_dim);
        off += z.shape[0];
      }
      ema_update(tok.codebook, z_all, batch_assign, cfg.eps_count);
      for (int64_t c : batch_assign)
        tok.codebook.usage[static_cast<size_t>(c)] += 1;
      tok.codebook.usage_total += static_cast<int64_t>(batch_assign.size());
      if (cfg.reset_enabled && ++batches_since_reset >= cfg.reset_interval) {
        reset_dead_codes(tok.codebook, z_all, reset_threshold, rng);
        batches_since_reset = 0;
      }

      epoch_mean.reconstruct += batch_loss.reconstruct;
      epoch_mean.commit += batch_loss.commit;
      epoch_mean.embed += batch_loss.embed;
      epoch_mean.total += batch_loss.total;
      ++nbatches;
    }
    double inv = 1.0 / static_cast<double>(nbatches);
    epoch_mean.reconstruct *= inv;
    epoch_mean.commit *= inv;
    epoch_mean.embed *= inv;
    epoch_mean.total *= inv;
    hist.epochs.push_back(epoch_mean);
    if (!val.empty())
      hist.val_reconstruct.push_back(validation_reconstruct(tok, val, nullptr));
    good_params = tok.params;
    good_cb = tok.codebook;
  }
  if (!val.empty()) {
    std::vector<char> hits(static_cast<size_t>(cfg.codebook_size), 0);
    validation_reconstruct(tok, val, &hits);
    int64_t used = std::count(hits.begin(), hits.end(), 1);
    hist.val_codebook_usage =
        static_cast<double>(used) / static_cast<double>(cfg.codebook_size);
  }
  return hist;
}

void save_tokenizer(const std::string& path, const Tokenizer& tok) {
  nn::ParameterSet all = tok.params;
  all.add("codebook.codes", tok.codebook.codes);
  all.add("codebook.ema_counts", tok.codebook.ema_counts);
  all.add("codebook.ema_sums", tok.codebook.ema_sums);
  nlohmann::json meta;
  meta["kind"] = "tokenizer";
  meta["N"] = tok.cfg.codebook_size;
  meta["d"] = tok.cfg.latent_dim;
  meta["l"] = tok.cfg.downsample;
  meta["D"] = tok.cfg.channels;
  meta["hidden"] = tok.cfg.hidden;
  meta["fps"] = tok.cfg.fps;
  meta["ema_decay"] = tok.cfg.ema_decay;
  nn::save_checkpoint(path, all, meta.dump());
}

Tokenizer load_tokenizer(const std::string& path) {
  nn::ParameterSet all;
  nlohmann::json meta = nlohmann::json::parse(nn::load_checkpoint(path, all));
  if (meta.value("kind", "") != "tokenizer")
    throw TokError("not a tokenizer checkpoint: " + path);
  Tokenizer tok;
  tok.cfg.codebook_size = meta.at("N").get<int64_t>();
  tok.cfg.latent_dim = meta.at("d").get<int64_t>();
  tok.cfg.downsample = meta.at("l").get<int64_t>();
  tok.cfg.channels = meta.at("D").get<int64_t>();
  tok.cfg.hidden = meta.at("hidden").get<int64_t>();
  tok.cfg.fps = meta.at("fps").get<double>();
  tok.cfg.ema_decay = meta.at("ema_decay").get<double>();
  tok.codebook.codes = all.at("codebook.codes");
  tok.codebook.ema_counts = all.at("codebook.ema_counts");
  tok.codebook.ema_sums = all.at("codebook.ema_sums");
  tok.codebook.decay = tok.cfg.ema_decay;
  tok.codebook.usage.assign(
      static_cast<size_t>(tok.cfg.codebook_size), 0);
  for (auto& [name, t] : all.values)
    if (name.rfind("codebook.", 0) != 0) tok.params.add(name, t);
  return tok;
}

}  // namespace mr1::vq
