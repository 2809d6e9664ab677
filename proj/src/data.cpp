#include "motion_r1/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace mr1::data {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Resting pose: pelvis, head, left hand, right hand, left foot, right foot.
constexpr double kBasePose[kChannels] = {
    0.0, 1.0, 0.0, 1.7, -0.25, 1.0, 0.25, 1.0, -0.1, 0.0, 0.1, 0.0};

void set_pose(Tensor& frames, int64_t t, const double* pose) {
  for (int64_t c = 0; c < kChannels; ++c) frames.at(t, c) = pose[c];
}

void shift_x(double* pose, double dx) {
  for (int64_t j = 0; j < kJointCount; ++j) pose[2 * j] += dx;
}

// Every description word is tied to a motion attribute, so texts that differ
// describe motions that actually differ; retrieval stays learnable.
std::string subject(Rng&) { return "a person"; }

// "a person waves the left hand slowly" -> "waves the left hand slowly"
std::string verb_phrase(const std::string& text) {
  return text.substr(std::string("a person ").size());
}

// All base generators keep every coordinate within [-6, 6] horizontally and
// [-0.1, 2.6] vertically (the per-family envelope); jitter is added on top.

Tensor gen_walk_straight(Rng& rng, int64_t T, double fps, std::string* text) {
  int speed_idx = static_cast<int>(rng.uniform_int(3));
  const double speeds[] = {0.5, 1.0, 1.6};
  const char* speed_words[] = {"slowly", "at a steady pace", "quickly"};
  double speed = speeds[speed_idx];
  double stride_hz = 1.2 + 0.6 * speed;
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    double time = static_cast<double>(t) / fps;
    double phase = kTwoPi * stride_hz * time;
    shift_x(pose, speed * time);
    pose[9] = std::max(0.0, 0.12 * std::sin(phase));        // left foot lift
    pose[11] = std::max(0.0, 0.12 * std::sin(phase + 3.14159265));
    pose[8] += 0.2 * std::sin(phase);                        // foot swing
    pose[10] += 0.2 * std::sin(phase + 3.14159265);
    pose[4] += 0.1 * std::sin(phase + 3.14159265);           // arm swing
    pose[6] += 0.1 * std::sin(phase);
    pose[1] += 0.03 * std::sin(2 * phase);                   // pelvis bob
    pose[3] += 0.03 * std::sin(2 * phase);
    set_pose(frames, t, pose);
  }
  if (text)
    *text = subject(rng) + " walks straight ahead " + speed_words[speed_idx];
  return frames;
}

Tensor gen_walk_circle(Rng& rng, int64_t T, double fps, std::string* text) {
  (void)fps;
  int size_idx = static_cast<int>(rng.uniform_int(2));
  int dir_idx = static_cast<int>(rng.uniform_int(2));
  const double radii[] = {0.5, 1.5};
  const char* size_words[] = {"small", "wide"};
  const char* dir_words[] = {"clockwise", "counterclockwise"};
  double r = radii[size_idx];
  double dir = dir_idx == 0 ? 1.0 : -1.0;
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    // Angle completes a full loop over the clip so the trajectory closes.
    double theta = dir * kTwoPi * static_cast<double>(t) /
                   static_cast<double>(T - 1);
    shift_x(pose, r * std::sin(theta));
    double sway = 0.05 * std::cos(theta);
    for (int64_t j = 0; j < kJointCount; ++j) pose[2 * j + 1] += sway;
    pose[9] = std::max(0.0, 0.1 * std::sin(6 * theta));
    pose[11] = std::max(0.0, -0.1 * std::sin(6 * theta));
    set_pose(frames, t, pose);
  }
  if (text)
    *text = subject(rng) + " walks in a " + std::string(size_words[size_idx]) +
            " circle " + dir_words[dir_idx];
  return frames;
}

Tensor gen_wave_arm(Rng& rng, int64_t T, double fps, std::string* text) {
  int hand_idx = static_cast<int>(rng.uniform_int(2));  // 0 left, 1 right
  int speed_idx = static_cast<int>(rng.uniform_int(2));
  const double freqs[] = {0.8, 2.0};
  const char* hand_words[] = {"the left", "the right"};
  const char* speed_words[] = {"slowly", "quickly"};
  double freq = freqs[speed_idx];
  int64_t hand = hand_idx == 0 ? 2 : 3;  // joint index
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    double time = static_cast<double>(t) / fps;
    double lift = std::min(1.0, 3.0 * time);  // raise the arm first
    pose[2 * hand + 1] = 1.0 + 0.8 * lift;
    pose[2 * hand] += lift * 0.25 * std::sin(kTwoPi * freq * time);
    set_pose(frames, t, pose);
  }
  if (text)
    *text = subject(rng) + " waves " + hand_words[hand_idx] + " hand " +
            speed_words[speed_idx];
  return frames;
}

Tensor gen_squat(Rng& rng, int64_t T, double fps, std::string* text) {
  int depth_idx = static_cast<int>(rng.uniform_int(2));
  int speed_idx = static_cast<int>(rng.uniform_int(2));
  const double depths[] = {0.25, 0.5};
  const double freqs[] = {0.5, 1.0};
  const char* depth_words[] = {"shallow", "deep"};
  const char* speed_words[] = {"slowly", "quickly"};
  double depth = depths[depth_idx];
  double freq = freqs[speed_idx];
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    double time = static_cast<double>(t) / fps;
    double drop = depth * 0.5 * (1.0 - std::cos(kTwoPi * freq * time));
    pose[1] -= drop;           // pelvis
    pose[3] -= drop;           // head
    pose[5] -= 0.6 * drop;     // hands follow
    pose[7] -= 0.6 * drop;
    pose[4] += 0.15 * drop;    // arms forward for balance
    pose[6] += 0.15 * drop;
    set_pose(frames, t, pose);
  }
  if (text)
    *text = subject(rng) + " does " + depth_words[depth_idx] + " squats " +
            speed_words[speed_idx];
  return frames;
}

Tensor gen_turn_in_place(Rng& rng, int64_t T, double fps, std::string* text) {
  (void)fps;
  int amount_idx = static_cast<int>(rng.uniform_int(3));
  int dir_idx = static_cast<int>(rng.uniform_int(2));
  const double amounts[] = {0.25, 0.5, 1.0};
  const char* amount_words[] = {"a quarter", "a half", "a full"};
  const char* dir_words[] = {"left", "right"};
  double total = amounts[amount_idx] * kTwoPi * (dir_idx == 0 ? 1.0 : -1.0);
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    double phi = total * static_cast<double>(t) / static_cast<double>(T - 1);
    // Lateral offsets foreshorten as the body rotates out of plane.
    double c = std::cos(phi);
    for (int64_t j = 2; j < kJointCount; ++j) pose[2 * j] *= c;
    set_pose(frames, t, pose);
  }
  if (text)
    *text = subject(rng) + " turns " + amount_words[amount_idx] +
            " turn in place to the " + dir_words[dir_idx];
  return frames;
}

Tensor gen_jump(Rng& rng, int64_t T, double fps, std::string* text) {
  int height_idx = static_cast<int>(rng.uniform_int(2));
  const double heights[] = {0.15, 0.45};
  const char* height_words[] = {"hops in place", "jumps high in place"};
  double h = heights[height_idx];
  double freq = height_idx == 0 ? 1.5 : 0.8;
  Tensor frames({T, kChannels});
  for (int64_t t = 0; t < T; ++t) {
    double pose[kChannels];
    std::copy(std::begin(kBasePose), std::end(kBasePose), pose);
    double time = static_cast<double>(t) / fps;
    double cyc = std::sin(kTwoPi * freq * time);
    double air = h * std::max(0.0, cyc);
    double crouch = 0.12 * std::max(0.0, -cyc);  // load before takeoff
    for (int64_t j = 0; j < kJointCount; ++j) pose[2 * j + 1] += air;
    pose[1] -= crouch;
    pose[3] -= crouch;
    set_pose(frames, t, pose);
  }
  if (text) *text = subject(rng) + " " + height_words[height_idx];
  return frames;
}

Tensor blend_concat(const Tensor& a, const Tensor& b) {
  int64_t ta = a.shape[0], tb = b.shape[0];
  int64_t w = kBlendOverlap;
  int64_t T = ta + tb - w;
  // Continue part two from where part one left the root.
  double dx = a.at(ta - 1, 0) - b.at(0, 0);
  Tensor out({T, kChannels});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < kChannels; ++c) {
      double bshift = (c % 2 == 0) ? dx : 0.0;
      if (t < ta - w) {
        out.at(t, c) = a.at(t, c);
      } else if (t < ta) {
        double alpha = static_cast<double>(t - (ta - w) + 1) /
                       static_cast<double>(w + 1);
        out.at(t, c) = (1 - alpha) * a.at(t, c) +
                       alpha * (b.at(t - (ta - w), c) + bshift);
      } else {
        out.at(t, c) = b.at(t - (ta - w), c) + bshift;
      }
    }
  return out;
}

}  // namespace

const std::vector<std::string>& known_families() {
  static const std::vector<std::string> kFamilies = {
      "walk-straight", "walk-circle",   "wave-arm",       "squat",
      "turn-in-place", "jump",          "walk-then-wave", "squat-then-jump"};
  return kFamilies;
}

MotionSample generate_sample(const std::string& family, const std::string& id,
                             uint64_t seed, int min_frames, int max_frames,
                             double fps, double noise) {
  if (min_frames < 2 || max_frames < min_frames)
    throw DataError("generate_sample: bad frame range");
  Rng rng(seed);
  int64_t T = min_frames + rng.uniform_int(max_frames - min_frames + 1);
  Tensor frames;
  std::string text;
  if (family == "walk-straight") {
    frames = gen_walk_straight(rng, T, fps, &text);
  } else if (family == "walk-circle") {
    frames = gen_walk_circle(rng, T, fps, &text);
  } else if (family == "wave-arm") {
    frames = gen_wave_arm(rng, T, fps, &text);
  } else if (family == "squat") {
    frames = gen_squat(rng, T, fps, &text);
  } else if (family == "turn-in-place") {
    frames = gen_turn_in_place(rng, T, fps, &text);
  } else if (family == "jump") {
    frames = gen_jump(rng, T, fps, &text);
  } else if (family == "walk-then-wave") {
    int64_t t1 = (T + kBlendOverlap + 1) / 2;
    int64_t t2 = T + kBlendOverlap - t1;
    std::string s1, s2;
    Tensor a = gen_walk_straight(rng, t1, fps, &s1);
    Tensor b = gen_wave_arm(rng, t2, fps, &s2);
    frames = blend_concat(a, b);
    text = "a person " + verb_phrase(s1) + " and then " + verb_phrase(s2);
  } else if (family == "squat-then-jump") {
    int64_t t1 = (T + kBlendOverlap + 1) / 2;
    int64_t t2 = T + kBlendOverlap - t1;
    std::string s1, s2;
    Tensor a = gen_squat(rng, t1, fps, &s1);
    Tensor b = gen_jump(rng, t2, fps, &s2);
    frames = blend_concat(a, b);
    text = "a person " + verb_phrase(s1) + " and then " + verb_phrase(s2);
  } else {
    throw DataError("unknown motion family: " + family);
  }
  if (noise > 0)
    for (double& x : frames.v) x += noise * rng.normal();
  MotionSample s;
  s.id = id;
  s.text = std::move(text);
  s.family = family;
  s.motion = MotionSequence{std::move(frames), fps};
  s.seed = seed;
  return s;
}

std::vector<MotionSample> generate_corpus(const CorpusSpec& spec) {
  if (spec.families.empty()) throw DataError("corpus spec has no families");
  double ratio_sum = spec.train_ratio + spec.val_ratio + spec.test_ratio;
  if (std::abs(ratio_sum - 1.0) > 1e-9)
    throw DataError("split ratios must sum to 1");
  std::vector<MotionSample> out;
  uint64_t index = 0;
  for (const auto& [family, count] : spec.families) {
    if (count < 1) throw DataError("family count must be >= 1: " + family);
    if (std::find(known_families().begin(), known_families().end(), family) ==
        known_families().end())
      throw DataError("unknown motion family: " + family);
    for (int i = 0; i < count; ++i, ++index) {
      uint64_t seed = Rng::derive(spec.master_seed, index);
      std::string id = family + "-" + std::to_string(i);
      out.push_back(generate_sample(family, id, seed, spec.min_frames,
                                    spec.max_frames, spec.fps, spec.noise));
    }
  }
  return out;
}

CorpusSplits split_corpus(std::vector<MotionSample> corpus,
                          const CorpusSpec& spec) {
  Rng rng(Rng::derive(spec.master_seed, 0x5eed5));
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(static_cast<int64_t>(i))]);
  size_t n = corpus.size();
  size_t n_train = static_cast<size_t>(std::round(spec.train_ratio * n));
  size_t n_val = static_cast<size_t>(std::round(spec.val_ratio * n));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  CorpusSplits splits;
  for (size_t i = 0; i < n; ++i) {
    MotionSample& s = corpus[order[i]];
    if (i < n_train)
      splits.train.push_back(std::move(s));
    else if (i < n_train + n_val)
      splits.val.push_back(std::move(s));
    else
      splits.test.push_back(std::move(s));
  }
  return splits;
}

Tensor velocity(const MotionSequence& m) {
  if (m.frame_count() < 2) throw DataError("velocity: need at least 2 frames");
  int64_t T = m.frame_count(), D = m.channels();
  Tensor out({T - 1, D});
  for (int64_t t = 0; t + 1 < T; ++t)
    for (int64_t c = 0; c < D; ++c)
      out.at(t, c) = m.frames.at(t + 1, c) - m.frames.at(t, c);
  return out;
}

void save_jsonl(const std::string& path,
                const std::vector<MotionSample>& samples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open for write: " + path);
  for (const MotionSample& s : samples) {
    nlohmann::json j;
    j["id"] = s.id;
    j["text"] = s.text;
    j["family"] = s.family;
    j["fps"] = s.motion.fps;
    j["seed"] = s.seed;
    auto frames = nlohmann::json::array();
    int64_t T = s.motion.frame_count(), D = s.motion.channels();
    for (int64_t t = 0; t < T; ++t) {
      auto row = nlohmann::json::array();
      for (int64_t c = 0; c < D; ++c) row.push_back(s.motion.frames.at(t, c));
      frames.push_back(std::move(row));
    }
    j["frames"] = std::move(frames);
    os << j.dump() << "\n";
  }
  if (!os) throw DataError("write failed: " + path);
}

std::vector<MotionSample> load_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  std::vector<MotionSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") ||
        !j.contains("frames"))
      throw DataError("malformed JSONL at " + path + ":" +
                      std::to_string(lineno));
    MotionSample s;
    s.id = j.at("id").get<std::string>();
    s.text = j.at("text").get<std::string>();
    s.family = j.at("family").get<std::string>();
    s.seed = j.at("seed").get<uint64_t>();
    s.motion.fps = j.at("fps").get<double>();
    const auto& frames = j.at("frames");
    int64_t T = static_cast<int64_t>(frames.size());
    if (T < 1)
      throw DataError("empty frames at " + path + ":" + std::to_string(lineno));
    int64_t D = static_cast<int64_t>(frames[0].size());
    s.motion.frames = Tensor({T, D});
    for (int64_t t = 0; t < T; ++t) {
      if (static_cast<int64_t>(frames[t].size()) != D)
        throw DataError("ragged frames at " + path + ":" +
                        std::to_string(lineno));
      for (int64_t c = 0; c < D; ++c)
        s.motion.frames.at(t, c) = frames[t][c].get<double>();
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mr1::data
