#include "motion_r1/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "motion_r1/rng.hpp"

namespace mr1::eval {

namespace {

double dist2(const double* a, const double* b, int64_t d) {
  double s = 0;
  for (int64_t i = 0; i < d; ++i) {
    double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

// Cyclic Jacobi eigendecomposition of a symmetric d x d matrix.
// a is overwritten; eigenvalues land on its diagonal, columns of v are the
// eigenvectors. d is at most a few dozen here, so sweeps are cheap.
void jacobi_eigen(std::vector<double>& a, std::vector<double>& v, int64_t d) {
  v.assign(d * d, 0.0);
  for (int64_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off < 1e-24) return;
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (std::abs(apq) < 1e-300) continue;
        double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int64_t k = 0; k < d; ++k) {
          double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (int64_t k = 0; k < d; ++k) {
          double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        for (int64_t k = 0; k < d; ++k) {
          double vkp = v[k * d + p], vkq = v[k * d + q];
          v[k * d + p] = c * vkp - s * vkq;
          v[k * d + q] = s * vkp + c * vkq;
        }
      }
    }
  }
}

constexpr double kEigClamp = 1e-10;

// V diag(sqrt(max(lambda, 0))) V^T of a symmetric PSD matrix.
std::vector<double> sqrtm_psd(std::vector<double> a, int64_t d) {
  std::vector<double> v;
  jacobi_eigen(a, v, d);
  std::vector<double> lam(d);
  for (int64_t i = 0; i < d; ++i)
    lam[i] = std::sqrt(std::max(a[i * d + i], 0.0) < kEigClamp
                           ? 0.0
                           : std::max(a[i * d + i], 0.0));
  std::vector<double> out(d * d, 0.0);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double s = 0;
      for (int64_t k = 0; k < d; ++k) s += v[i * d + k] * lam[k] * v[j * d + k];
      out[i * d + j] = s;
    }
  return out;
}

std::vector<double> matmul(const std::vector<double>& a,
                           const std::vector<double>& b, int64_t d) {
  std::vector<double> out(d * d, 0.0);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < d; ++k) {
      double aik = a[i * d + k];
      if (aik == 0.0) continue;
      for (int64_t j = 0; j < d; ++j) out[i * d + j] += aik * b[k * d + j];
    }
  return out;
}

void mean_cov(const FeatureSet& f, std::vector<double>& mu,
              std::vector<double>& cov) {
  int64_t n = f.rows, d = f.dim;
  mu.assign(d, 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mu[j] += f.row(i)[j];
  for (double& m : mu) m /= static_cast<double>(n);
  cov.assign(d * d, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double* r = f.row(i);
    for (int64_t a = 0; a < d; ++a)
      for (int64_t b = a; b < d; ++b)
        cov[a * d + b] += (r[a] - mu[a]) * (r[b] - mu[b]);
  }
  for (int64_t a = 0; a < d; ++a)
    for (int64_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(n - 1);
      cov[b * d + a] = cov[a * d + b];
    }
}

MetricEstimate summarize(const std::vector<double>& xs) {
  MetricEstimate m;
  m.repeats = static_cast<int64_t>(xs.size());
  if (xs.empty()) return m;
  for (double x : xs) m.estimate += x;
  m.estimate /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - m.estimate) * (x - m.estimate);
  double sd = std::sqrt(var / static_cast<double>(xs.size()));
  m.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(xs.size()));
  return m;
}

}  // namespace

FeatureSet FeatureSet::zeros(int64_t rows, int64_t dim) {
  FeatureSet f;
  f.rows = rows;
  f.dim = dim;
  f.data.assign(rows * dim, 0.0);
  return f;
}

double r_precision(const std::vector<EmbeddingPair>& pairs, int k,
                   int64_t pool, uint64_t seed) {
  int64_t n = static_cast<int64_t>(pairs.size());
  if (n < pool) throw EvalError("r_precision: need at least pool pairs");
  if (k < 1) throw EvalError("r_precision: k must be positive");
  int64_t d = static_cast<int64_t>(pairs[0].first.size());
  int64_t hits = 0;
  for (int64_t q = 0; q < n; ++q) {
    const double* motion = pairs[q].second.data();
    double own = dist2(motion, pairs[q].first.data(), d);
    // draw pool-1 negative texts without replacement via partial shuffle
    std::vector<int64_t> others;
    others.reserve(n - 1);
    for (int64_t i = 0; i < n; ++i)
      if (i != q) others.push_back(i);
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(q)));
    int64_t closer = 0;
    for (int64_t j = 0; j < pool - 1; ++j) {
      int64_t pick = j + rng.uniform_int(static_cast<int64_t>(others.size()) - j);
      std::swap(others[j], others[pick]);
      if (dist2(motion, pairs[others[j]].first.data(), d) < own) ++closer;
    }
    if (closer + 1 <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

double fid(const FeatureSet& real, const FeatureSet& gen) {
  if (real.dim != gen.dim) throw EvalError("fid: dimension mismatch");
  int64_t d = real.dim;
  if (real.rows < d + 1 || gen.rows < d + 1)
    throw EvalError("fid: need at least dim+1 rows per set");
  std::vector<double> mu_r, mu_g, cov_r, cov_g;
  mean_cov(real, mu_r, cov_r);
  mean_cov(gen, mu_g, cov_g);
  double mean_term = 0;
  for (int64_t i = 0; i < d; ++i) {
    double t = mu_r[i] - mu_g[i];
    mean_term += t * t;
  }
  double tr_r = 0, tr_g = 0;
  for (int64_t i = 0; i < d; ++i) {
    tr_r += cov_r[i * d + i];
    tr_g += cov_g[i * d + i];
  }
  std::vector<double> root = sqrtm_psd(cov_r, d);
  std::vector<double> prod = matmul(matmul(root, cov_g, d), root, d);
  // symmetrize before the eigensolve to shed rounding skew
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = i + 1; j < d; ++j) {
      double s = 0.5 * (prod[i * d + j] + prod[j * d + i]);
      prod[i * d + j] = prod[j * d + i] = s;
    }
  std::vector<double> v;
  jacobi_eigen(prod, v, d);
  double tr_sqrt = 0;
  for (int64_t i = 0; i < d; ++i) {
    double lam = prod[i * d + i];
    if (lam > kEigClamp) tr_sqrt += std::sqrt(lam);
  }
  double out = mean_term + tr_r + tr_g - 2.0 * tr_sqrt;
  if (out < -1e-8)
    throw EvalError("fid: result below -1e-8, covariance math is off");
  return std::max(out, 0.0);
}

double diversity(const FeatureSet& feats, int64_t s_dis, uint64_t seed,
                 bool exhaustive) {
  if (feats.rows < 2) throw EvalError("diversity: need at least 2 rows");
  if (!exhaustive && s_dis < 1) throw EvalError("diversity: s_dis must be >= 1");
  int64_t n = feats.rows, d = feats.dim;
  double total = 0;
  int64_t count = 0;
  if (exhaustive) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (i == j) continue;
        total += std::sqrt(dist2(feats.row(i), feats.row(j), d));
        ++count;
      }
  } else {
    Rng rng(seed);
    for (int64_t s = 0; s < s_dis; ++s) {
      int64_t i = rng.uniform_int(n);
      int64_t j = rng.uniform_int(n - 1);
      if (j >= i) ++j;
      total += std::sqrt(dist2(feats.row(i), feats.row(j), d));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double mm_dist(const std::vector<EmbeddingPair>& pairs, MMDistMode mode) {
  if (pairs.empty()) throw EvalError("mm_dist: empty pair list");
  double total = 0;
  for (const auto& [text, motion] : pairs) {
    int64_t d = static_cast<int64_t>(text.size());
    if (mode == MMDistMode::euclidean) {
      total += std::sqrt(dist2(text.data(), motion.data(), d));
    } else {
      double dot = 0, na = 0, nb = 0;
      for (int64_t i = 0; i < d; ++i) {
        dot += text[i] * motion[i];
        na += text[i] * text[i];
        nb += motion[i] * motion[i];
      }
      double denom = std::sqrt(na) * std::sqrt(nb);
      double c = denom > 0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
      total += 1.0 - c;
    }
  }
  return total / static_cast<double>(pairs.size());
}

double mmodality(const MotionEmbedder& gen,
                 const std::vector<std::string>& texts, int64_t reps,
                 int64_t pairs_per_text, int64_t embed_dim, uint64_t seed) {
  if (reps < 2) throw EvalError("mmodality: reps must be >= 2");
  if (pairs_per_text < 1)
    throw EvalError("mmodality: pairs_per_text must be >= 1");
  if (texts.empty()) throw EvalError("mmodality: empty text list");
  double grand = 0;
  int64_t failures = 0;
  for (size_t ti = 0; ti < texts.size(); ++ti) {
    std::vector<std::vector<double>> embs;
    embs.reserve(reps);
    for (int64_t r = 0; r < reps; ++r) {
      uint64_t s = Rng::derive(Rng::derive(seed, ti), static_cast<uint64_t>(r));
      auto e = gen(texts[ti], s);
      if (e) {
        embs.push_back(std::move(*e));
      } else {
        embs.emplace_back(embed_dim, 0.0);
        ++failures;
      }
    }
    Rng rng(Rng::derive(seed, 0x4d4du ^ ti));
    double total = 0;
    for (int64_t p = 0; p < pairs_per_text; ++p) {
      int64_t i = rng.uniform_int(reps);
      int64_t j = rng.uniform_int(reps - 1);
      if (j >= i) ++j;
      total += std::sqrt(
          dist2(embs[i].data(), embs[j].data(), embed_dim));
    }
    grand += total / static_cast<double>(pairs_per_text);
  }
  if (failures > 0)
    std::fprintf(stderr, "mmodality: %lld generation failures scored as zero\n",
                 static_cast<long long>(failures));
  return grand / static_cast<double>(texts.size());
}

EvalReport evaluate(const policy::Policy& p, const vq::Tokenizer& tok,
                    const enc::Encoders& encs,
                    const std::vector<data::MotionSample>& test,
                    const EvalConfig& cfg) {
  if (cfg.repeats < 2) throw EvalError("evaluate: repeats must be >= 2");
  if (static_cast<int64_t>(test.size()) < cfg.pool)
    throw EvalError("evaluate: test split smaller than the retrieval pool");
  int64_t d = encs.cfg.embed_dim;
  int64_t n = static_cast<int64_t>(test.size());

  auto embed_generated =
      [&](const std::string& text,
          uint64_t seed) -> std::optional<std::vector<double>> {
    auto prompt = policy::prompt_tokens(p.vocab, text);
    policy::GenerationSample g = policy::sample(p, prompt, cfg.sampling, seed);
    if (cfg.no_cot) {
      policy::ParseResult pr = policy::parse_output(g.output, p.vocab, false);
      g.parse_ok = pr.ok;
      g.motion_tokens = pr.motion_tokens;
    }
    if (!g.parse_ok || g.motion_tokens.empty()) return std::nullopt;
    data::MotionSequence m = vq::decode(tok, g.motion_tokens);
    nn::Tensor e = enc::embed_motion(encs, m);
    return std::vector<double>(e.v.begin(), e.v.end());
  };

  FeatureSet real = FeatureSet::zeros(n, d);
  std::vector<std::vector<double>> text_embs(n);
  for (int64_t i = 0; i < n; ++i) {
    nn::Tensor e = enc::embed_motion(encs, test[i].motion);
    std::copy(e.v.begin(), e.v.end(), real.row(i));
    nn::Tensor te = enc::embed_text(encs, test[i].text);
    text_embs[i].assign(te.v.begin(), te.v.end());
  }

  std::vector<double> top1s, top2s, top3s, fids, divs, mms, modals;
  for (int64_t rep = 0; rep < cfg.repeats; ++rep) {
    uint64_t rep_seed = Rng::derive(cfg.seed, static_cast<uint64_t>(rep));
    FeatureSet gen = FeatureSet::zeros(n, d);
    std::vector<EmbeddingPair> pairs(n);
    for (int64_t i = 0; i < n; ++i) {
      auto e = embed_generated(test[i].text,
                               Rng::derive(rep_seed, static_cast<uint64_t>(i)));
      std::vector<double> emb = e ? *e : std::vector<double>(d, 0.0);
      std::copy(emb.begin(), emb.end(), gen.row(i));
      pairs[i] = {text_embs[i], std::move(emb)};
    }
    top1s.push_back(r_precision(pairs, 1, cfg.pool, rep_seed));
    top2s.push_back(r_precision(pairs, 2, cfg.pool, rep_seed));
    top3s.push_back(r_precision(pairs, 3, cfg.pool, rep_seed));
    fids.push_back(fid(real, gen));
    divs.push_back(diversity(gen, cfg.s_dis, rep_seed));
    mms.push_back(mm_dist(pairs, cfg.mode));
    if (rep < cfg.mm_repeats) {
      std::vector<std::string> texts;
      Rng rng(Rng::derive(rep_seed, 0x6d6du));
      for (int64_t t = 0; t < std::min<int64_t>(cfg.mm_texts, n); ++t)
        texts.push_back(test[rng.uniform_int(n)].text);
      modals.push_back(mmodality(embed_generated, texts, cfg.mm_reps,
                                 cfg.mm_pairs, d, rep_seed));
    }
  }

  EvalReport rpt;
  rpt.top1 = summarize(top1s);
  rpt.top2 = summarize(top2s);
  rpt.top3 = summarize(top3s);
  rpt.fid = summarize(fids);
  rpt.diversity = summarize(divs);
  rpt.mm_dist = summarize(mms);
  rpt.mmodality = summarize(modals);
  return rpt;
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvalError("write_report_csv: cannot open " + path);
  out << "metric,estimate,ci95,repeats\n";
  auto row = [&](const char* name, const MetricEstimate& m) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%lld\n", name, m.estimate,
                  m.ci95, static_cast<long long>(m.repeats));
    out << buf;
  };
  row("r_precision_top1", report.top1);
  row("r_precision_top2", report.top2);
  row("r_precision_top3", report.top3);
  row("fid", report.fid);
  row("diversity", report.diversity);
  row("mm_dist", report.mm_dist);
  row("mmodality", report.mmodality);
}

}  // namespace mr1::eval
