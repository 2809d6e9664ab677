#include "motion_r1/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mr1::grpo {

using nn::NodeId;
using nn::Tape;
using nn::Tensor;

double format_reward(const policy::GenerationSample& sample) {
  return sample.parse_ok ? 1.0 : 0.0;
}

double motion_reward(const std::vector<int64_t>& gen_tokens,
                     const data::MotionSequence& gt,
                     const vq::Tokenizer& tok, const enc::Encoders& encs) {
  if (gen_tokens.empty()) return 0.0;
  data::MotionSequence m = vq::decode(tok, gen_tokens);
  return enc::cosine(enc::embed_motion(encs, m), enc::embed_motion(encs, gt));
}

double semantic_reward(const std::vector<int64_t>& gen_tokens,
                       const std::string& text, const vq::Tokenizer& tok,
                       const enc::Encoders& encs) {
  if (gen_tokens.empty()) return 0.0;
  data::MotionSequence m = vq::decode(tok, gen_tokens);
  return enc::cosine(enc::embed_motion(encs, m), enc::embed_text(encs, text));
}

RewardBreakdown composite_reward(const policy::GenerationSample& sample,
                                 const data::MotionSequence& gt,
                                 const std::string& text,
                                 const vq::Tokenizer& tok,
                                 const enc::Encoders& encs,
                                 const GRPOConfig& cfg) {
  RewardBreakdown r;
  r.r_format = format_reward(sample);
  if (sample.parse_ok) {
    r.r_motion = motion_reward(sample.motion_tokens, gt, tok, encs);
    r.r_semantic = semantic_reward(sample.motion_tokens, text, tok, encs);
  }
  r.scalar = cfg.w_format * r.r_format + cfg.w_motion * r.r_motion +
             cfg.w_semantic * r.r_semantic;
  return r;
}

std::vector<double> compute_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2)
    throw GrpoError("compute_advantages: need at least 2 rewards");
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  double std_ = std::sqrt(var / static_cast<double>(rewards.size()));
  std::vector<double> adv(rewards.size(), 0.0);
  if (std_ <= 1e-8) return adv;  // zero-variance guard
  for (size_t i = 0; i < rewards.size(); ++i)
    adv[i] = (rewards[i] - mean) / std_;
  return adv;
}

double token_kl(const std::vector<double>& theta_lp,
                const std::vector<double>& ref_lp) {
  if (theta_lp.size() != ref_lp.size() || theta_lp.empty())
    throw GrpoError("token_kl: length mismatch");
  double s = 0;
  for (size_t i = 0; i < theta_lp.size(); ++i) {
    double d = ref_lp[i] - theta_lp[i];
    s += std::exp(d) - d - 1.0;
  }
  return s / static_cast<double>(theta_lp.size());
}

NodeId grpo_loss_on_tape(Tape& t, NodeId new_lp, const Tensor& old_lp,
                         const Tensor& ref_lp, const Tensor& adv_per_token,
                         double epsilon, double beta) {
  const Tensor& nl = t.val(new_lp);
  if (!nl.same_shape(old_lp) || !nl.same_shape(ref_lp) ||
      !nl.same_shape(adv_per_token))
    throw GrpoError("grpo_loss: per-token tensors misaligned");
  int64_t n = nl.numel();
  if (n < 1) throw GrpoError("grpo_loss: empty token set");
  NodeId old_c = t.constant(old_lp);
  NodeId adv_c = t.constant(adv_per_token);
  NodeId ratio = t.exp_(t.sub(new_lp, old_c));
  if (!t.val(ratio).all_finite())
    throw GrpoError("grpo_loss: non-finite ratio");
  NodeId unclipped = t.mul(ratio, adv_c);
  NodeId clipped = t.mul(t.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon), adv_c);
  NodeId term = t.minimum(unclipped, clipped);
  NodeId objective = t.mean_all(term);
  if (beta != 0.0) {
    NodeId d = t.sub(t.constant(ref_lp), new_lp);
    NodeId kl = t.mean_all(t.add_scalar(t.sub(t.exp_(d), d), -1.0));
    objective = t.sub(objective, t.scale(kl, beta));
  }
  return t.scale(objective, -1.0);
}

double grpo_loss(const std::vector<std::vector<double>>& old_lp,
                 const std::vector<std::vector<double>>& new_lp,
                 const std::vector<double>& advantages, double kl,
                 const GRPOConfig& cfg) {
  if (old_lp.size() != new_lp.size() || old_lp.size() != advantages.size())
    throw GrpoError("grpo_loss: group sizes misaligned");
  double sum = 0;
  int64_t count = 0;
  for (size_t i = 0; i < old_lp.size(); ++i) {
    if (old_lp[i].size() != new_lp[i].size())
      throw GrpoError("grpo_loss: per-token log-probs misaligned");
    for (size_t j = 0; j < old_lp[i].size(); ++j) {
      double rho = std::exp(new_lp[i][j] - old_lp[i][j]);
      if (!std::isfinite(rho)) throw GrpoError("grpo_loss: non-finite ratio");
      double a = advantages[i];
      double clipped =
          std::clamp(rho, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * a;
      sum += std::min(rho * a, clipped);
      ++count;
    }
  }
  if (count == 0) throw GrpoError("grpo_loss: empty token set");
  return -(sum / static_cast<double>(count) - cfg.beta * kl);
}

GrpoHistory grpo_train(policy::Policy& p, const vq::Tokenizer& tok,
                       const enc::Encoders& encs,
                       const std::vector<data::MotionSample>& dataset,
                       const GRPOConfig& cfg, const std::string& log_csv) {
  if (dataset.empty()) throw GrpoError("grpo_train: empty dataset");
  if (cfg.group_size < 2) throw GrpoError("grpo_train: G must be >= 2");
  policy::Policy pi_ref = p;  // frozen anchor
  policy::Policy pi_old = p;
  GrpoHistory hist;
  std::ofstream csv;
  if (!log_csv.empty()) {
    csv.open(log_csv, std::ios::trunc);
    if (!csv) throw GrpoError("cannot open step log: " + log_csv);
    csv << "step,mean_reward,format_rate,mean_motion,mean_semantic,kl,lr\n";
  }

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    if (step % cfg.old_refresh_interval == 0) pi_old.params = p.params;
    const data::MotionSample& gt =
        dataset[static_cast<size_t>(step) % dataset.size()];
    std::vector<int64_t> prompt = policy::prompt_tokens(p.vocab, gt.text);
    auto group = policy::sample_group(pi_old, prompt, cfg.group_size,
                                      cfg.sampling, Rng::derive(cfg.seed, step));
    if (cfg.no_cot) {
      // rescore against the think-free ablation grammar
      for (auto& g : group) {
        policy::ParseResult pr = policy::parse_output(g.output, p.vocab, false);
        g.parse_ok = pr.ok;
        g.think_text = pr.think_text;
        g.motion_tokens = pr.motion_tokens;
      }
    }

    std::vector<double> rewards;
    StepLog log;
    log.step = step;
    for (const auto& g : group) {
      RewardBreakdown r = composite_reward(g, gt.motion, gt.text, tok, encs,
                                           cfg);
      rewards.push_back(r.scalar);
      log.mean_reward += r.scalar;
      log.format_rate += r.r_format;
      log.mean_motion += r.r_motion;
      log.mean_semantic += r.r_semantic;
    }
    double invG = 1.0 / static_cast<double>(cfg.group_size);
    log.mean_reward *= invG;
    log.format_rate *= invG;
    log.mean_motion *= invG;
    log.mean_semantic *= invG;
    std::vector<double> adv = compute_advantages(rewards);

    // assemble one flat per-token problem across the group
    Tape t(&p.params);
    std::vector<NodeId> lp_nodes;
    std::vector<double> old_flat, ref_flat, adv_flat;
    double kl_sum = 0;
    int64_t kl_groups = 0;
    for (size_t i = 0; i < group.size(); ++i) {
      const auto& g = group[i];
      if (g.output.empty()) continue;
      std::vector<int64_t> seq = prompt;
      seq.insert(seq.end(), g.output.begin(), g.output.end());
      NodeId logp =
          t.log_softmax_rows(policy::forward_on_tape(t, p.cfg, seq));
      int64_t plen = static_cast<int64_t>(prompt.size());
      std::vector<int64_t> rows_keep(g.output.size());
      std::iota(rows_keep.begin(), rows_keep.end(), plen - 1);
      NodeId new_lp = t.pick(t.rows(logp, rows_keep), g.output);
      lp_nodes.push_back(new_lp);
      auto old_lp = policy::sequence_log_prob(pi_old, prompt, g.output);
      auto ref_lp = policy::sequence_log_prob(pi_ref, prompt, g.output);
      std::vector<double> th(t.val(new_lp).v);
      kl_sum += token_kl(th, ref_lp);
      ++kl_groups;
      old_flat.insert(old_flat.end(), old_lp.begin(), old_lp.end());
      ref_flat.insert(ref_flat.end(), ref_lp.begin(), ref_lp.end());
      adv_flat.insert(adv_flat.end(), g.output.size(), adv[i]);
    }
    if (lp_nodes.empty()) continue;
    double lr = nn::cosine_lr(step, cfg.total_steps, cfg.lr, cfg.lr_min);
    // per-sample losses averaged with token-count weights, so the result
    // equals the loss over the pooled token set
    int64_t total_tokens = static_cast<int64_t>(old_flat.size());
    NodeId loss = t.constant(Tensor::scalar(0.0));
    size_t off = 0;
    for (NodeId lp : lp_nodes) {
      int64_t n = t.val(lp).numel();
      Tensor o({n}), r({n}), a({n});
      std::copy(old_flat.begin() + off, old_flat.begin() + off + n, o.v.begin());
      std::copy(ref_flat.begin() + off, ref_flat.begin() + off + n, r.v.begin());
      std::copy(adv_flat.begin() + off, adv_flat.begin() + off + n, a.v.begin());
      NodeId li = grpo_loss_on_tape(t, lp, o, r, a, cfg.epsilon, cfg.beta);
      loss = t.add(loss, t.scale(li, static_cast<double>(n) /
                                         static_cast<double>(total_tokens)));
      off += static_cast<size_t>(n);
    }
    double lv = t.val(loss).v[0];
    if (!std::isfinite(lv))
      throw GrpoError("grpo_train: non-finite loss at step " +
                      std::to_string(step));
    nn::GradMap grads = t.backward(loss);
    nn::adam_step(p.params, grads, lr);

    log.kl = kl_groups > 0 ? kl_sum / static_cast<double>(kl_groups) : 0.0;
    log.lr = lr;
    hist.steps.push_back(log);
    if (csv.is_open())
      csv << log.step << ',' << log.mean_reward << ',' << log.format_rate
          << ',' << log.mean_motion << ',' << log.mean_semantic << ','
          << log.kl << ',' << log.lr << "\n";
  }
  return hist;
}

}  // namespace mr1::grpo
