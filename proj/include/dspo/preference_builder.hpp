#pragma once

#include <json.hpp>

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dspo/captioner.hpp"
#include "dspo/data_synthesis.hpp"
#include "dspo/iqa.hpp"
#include "dspo/sampler.hpp"
#include "dspo/semantic_instances.hpp"

namespace dspo {

/// One generation setting used to produce a candidate.
struct GenSettings {
  std::string label;
  int steps = 50;
  double cfg_scale = 5.5;
  double adapter_scale = 1.0;  // stands in for adapter-rank diversity

  void validate() const {
    if (steps < 1) throw InvalidArgument("GenSettings.steps must be >= 1");
    if (!(cfg_scale >= 0.0)) throw InvalidArgument("GenSettings.cfg_scale must be >= 0");
    if (label.empty()) throw InvalidArgument("GenSettings.label must be non-empty");
  }
};

inline void to_json(nlohmann::json& j, const GenSettings& s) {
  j = {{"label", s.label}, {"steps", s.steps}, {"cfg_scale", s.cfg_scale}, {"adapter_scale", s.adapter_scale}};
}
inline void from_json(const nlohmann::json& j, GenSettings& s) {
  s.label = j.at("label");
  s.steps = j.at("steps");
  s.cfg_scale = j.at("cfg_scale");
  s.adapter_scale = j.value("adapter_scale", 1.0);
}

/// Four multi-step settings: 20 and 80 sampling steps, guidance 4.5 and 10.5.
inline std::vector<GenSettings> multi_step_settings(int base_steps = 50, double base_cfg = 5.5) {
  return {{"step20", 20, base_cfg, 1.0},
          {"step80", 80, base_cfg, 1.0},
          {"cfg4.5", base_steps, 4.5, 1.0},
          {"cfg10.5", base_steps, 10.5, 1.0}};
}

/// One-step emulation: two adapter strengths standing in for LoRA ranks 16 and
/// 64, and guidance 6 and 12, around the one-step default guidance of 7.5.
inline std::vector<GenSettings> one_step_settings() {
  return {{"rank16", 1, 7.5, 0.8}, {"rank64", 1, 7.5, 1.25}, {"cfg6", 1, 6.0, 1.0}, {"cfg12", 1, 12.0, 1.0}};
}

struct Candidate {
  RasterImage image;
  GenSettings settings;
};

struct CandidateSet {
  std::string lq_id;
  std::vector<Candidate> candidates;

  std::size_t size() const { return candidates.size(); }
  void validate() const {
    if (candidates.size() < 2) throw InvalidArgument("CandidateSet needs N >= 2");
    for (const auto& c : candidates)
      if (!c.image.tensor().same_shape(candidates[0].image.tensor()))
        throw InvalidArgument("candidates must share resolution");
  }
};

/// Samples one SR candidate per setting; candidate i uses seed derive_seed(seed, label_i).
inline CandidateSet generate_candidates(const Denoiser& model, const NoiseSchedule& sched, std::string lq_id,
                                        const RasterImage& lq, const std::vector<GenSettings>& settings,
                                        std::uint64_t seed, const std::vector<int>& prompt = {}) {
  if (settings.size() < 2) throw InvalidArgument("generate_candidates needs at least two settings");
  std::set<std::string> labels;
  for (const auto& s : settings) {
    s.validate();
    if (!labels.insert(s.label).second) throw InvalidArgument("duplicate setting label '" + s.label + "'");
  }
  CandidateSet out{std::move(lq_id), {}};
  for (const auto& s : settings) {
    const SamplerConfig sc{std::min(s.steps, sched.T()), s.cfg_scale, derive_seed(seed, s.label)};
    SampleRequest req{prompt, {}, static_cast<float>(s.adapter_scale)};
    out.candidates.push_back({ddpm_sample(model, sched, lq, sc, req), s});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instance crops and scoring.

struct BoundingBox {
  int top = 0, left = 0, height = 0, width = 0;
};

inline BoundingBox bounding_box(const InstancePartition& p, int id) {
  int y0 = p.height(), x0 = p.width(), y1 = -1, x1 = -1;
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x)
      if (p.label(y, x) == id) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y1 < 0) throw InvalidArgument("instance " + std::to_string(id) + " is empty");
  return {y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

/// Bounding-box crop of an instance with out-of-mask pixels set to the in-mask
/// mean (per channel). Boxes thinner than `min_extent` are zero-padded.
inline Tensor instance_crop(const Tensor& img, const InstancePartition& p, int id, int min_extent = kSsimWindow) {
  if (img.height() != p.height() || img.width() != p.width())
    throw InvalidArgument("partition resolution does not match image");
  const BoundingBox box = bounding_box(p, id);
  const int h = std::max(box.height, min_extent), w = std::max(box.width, min_extent);
  Tensor out(img.channels(), h, w, 0.0f);
  for (int c = 0; c < img.channels(); ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < box.height; ++y)
      for (int x = 0; x < box.width; ++x)
        if (p.label(box.top + y, box.left + x) == id) sum += img(c, box.top + y, box.left + x), ++n;
    const float fill = static_cast<float>(sum / n);
    for (int y = 0; y < box.height; ++y)
      for (int x = 0; x < box.width; ++x)
        out(c, y, x) = p.label(box.top + y, box.left + x) == id ? img(c, box.top + y, box.left + x) : fill;
  }
  return out;
}

/// scores[candidate][k] is the metric vector of instance p.ids()[k].
using InstanceScores = std::vector<std::vector<MetricVector>>;

inline InstanceScores score_instances(const CandidateSet& cands, const RasterImage& gt, const InstancePartition& p,
                                      const MetricSuite& suite) {
  cands.validate();
  if (!gt.tensor().same_shape(cands.candidates[0].image.tensor()))
    throw InvalidArgument("ground truth and candidates differ in resolution");
  if (p.height() != gt.height() || p.width() != gt.width())
    throw InvalidArgument("partition resolution does not match candidates");
  InstanceScores scores(cands.size(), std::vector<MetricVector>(p.size()));
  for (std::size_t k = 0; k < p.size(); ++k) {
    const int id = p.ids()[k];
    const auto box = bounding_box(p, id);
    if (box.height < kSsimWindow || box.width < kSsimWindow)
      log::warn("instance " + std::to_string(id) + " of " + cands.lq_id +
                " is smaller than the SSIM window; scoring a zero-padded box");
    const Tensor gt_crop = instance_crop(gt.tensor(), p, id);
    for (std::size_t i = 0; i < cands.size(); ++i)
      scores[i][k] = suite.evaluate(instance_crop(cands.candidates[i].image.tensor(), p, id), gt_crop);
  }
  return scores;
}

struct BestWorst {
  int winner = 0;
  int loser = 0;
};

/// Argmax / argmin of the aggregate scores, ties to the lowest index.
/// nullopt when every candidate scores the same.
inline std::optional<BestWorst> select_best_worst(const std::vector<double>& scores) {
  if (scores.size() < 2) throw InvalidArgument("select_best_worst needs at least 2 candidates");
  BestWorst bw;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[bw.winner]) bw.winner = static_cast<int>(i);
    if (scores[i] < scores[bw.loser]) bw.loser = static_cast<int>(i);
  }
  if (scores[bw.winner] == scores[bw.loser]) return std::nullopt;
  return bw;
}

// ---------------------------------------------------------------------------
// Preference records.

enum class PreferenceSource { automatic, human };

inline std::string to_string(PreferenceSource s) { return s == PreferenceSource::automatic ? "auto" : "human"; }

struct PreferenceRecord {
  std::string lq_id;
  int instance_id = 0;
  std::string mask_path;  // label-map PNG; the mask is the pixels labelled instance_id
  std::string winner_path;
  std::string loser_path;
  double weight = 0.0;
  PreferenceSource source = PreferenceSource::automatic;
  std::optional<std::string> negative_prompt;
  std::string winner_setting;
  std::string loser_setting;

  void validate() const {
    if (lq_id.empty()) throw InvalidArgument("record without lq_id");
    if (winner_setting == loser_setting || winner_path == loser_path)
      throw InvalidArgument("record winner equals loser");
    if (!(weight >= 0.0 && weight <= 1.0)) throw InvalidArgument("record weight outside [0,1]");
  }
  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

inline nlohmann::json to_json_record(const PreferenceRecord& r) {
  return {{"lq_id", r.lq_id},
          {"instance_id", r.instance_id},
          {"mask_path", r.mask_path},
          {"winner_path", r.winner_path},
          {"loser_path", r.loser_path},
          {"weight", r.weight},
          {"source", to_string(r.source)},
          {"negative_prompt", r.negative_prompt ? nlohmann::json(*r.negative_prompt) : nlohmann::json()},
          {"settings", {{"winner", r.winner_setting}, {"loser", r.loser_setting}}}};
}

/// Schema-checked parse of one JSONL object.
inline PreferenceRecord from_json_record(const nlohmann::json& j) {
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw InvalidArgument(std::string("missing string field '") + key + "'");
    return j[key].get<std::string>();
  };
  if (!j.is_object()) throw InvalidArgument("record is not an object");
  static const std::set<std::string> allowed = {"lq_id",  "instance_id", "mask_path",       "winner_path", "loser_path",
                                                "weight", "source",      "negative_prompt", "settings"};
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw InvalidArgument("unknown field '" + k + "'");
  PreferenceRecord r;
  r.lq_id = str("lq_id");
  if (!j.contains("instance_id") || !j["instance_id"].is_number_integer())
    throw InvalidArgument("missing integer field 'instance_id'");
  r.instance_id = j["instance_id"].get<int>();
  r.mask_path = str("mask_path");
  r.winner_path = str("winner_path");
  r.loser_path = str("loser_path");
  if (!j.contains("weight") || !j["weight"].is_number()) throw InvalidArgument("missing numeric field 'weight'");
  r.weight = j["weight"].get<double>();
  const std::string source = str("source");
  if (source == "auto") r.source = PreferenceSource::automatic;
  else if (source == "human") r.source = PreferenceSource::human;
  else throw InvalidArgument("source must be auto|human");
  if (!j.contains("negative_prompt")) throw InvalidArgument("missing field 'negative_prompt'");
  if (!j["negative_prompt"].is_null()) {
    if (!j["negative_prompt"].is_string()) throw InvalidArgument("negative_prompt must be string or null");
    r.negative_prompt = j["negative_prompt"].get<std::string>();
  }
  if (!j.contains("settings") || !j["settings"].is_object()) throw InvalidArgument("missing object 'settings'");
  const auto& s = j["settings"];
  if (!s.contains("winner") || !s["winner"].is_string() || !s.contains("loser") || !s["loser"].is_string())
    throw InvalidArgument("settings needs string winner and loser");
  r.winner_setting = s["winner"].get<std::string>();
  r.loser_setting = s["loser"].get<std::string>();
  r.validate();
  return r;
}

inline void export_jsonl(const std::vector<PreferenceRecord>& records, const fs::path& path) {
  std::string out;
  for (const auto& r : records) {
    r.validate();
    out += to_json_record(r).dump() + "\n";
  }
  write_file_atomic(path, out);
}

inline std::vector<PreferenceRecord> import_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<PreferenceRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_json_record(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Per-instance outcome of automatic judging.
struct InstanceJudgement {
  int instance_id = 0;
  std::vector<double> aggregate;
  std::optional<BestWorst> choice;
  std::vector<HallucinationFlag> flags;
};

struct CandidateFiles {
  std::string mask_path;
  std::vector<std::string> candidate_paths;  // aligned with the candidate set
};

/// Aggregates per-instance scores, runs Best/Worst-of-N and the hallucination gate
/// for each instance in `instances`.
inline std::vector<InstanceJudgement> judge_instances(const CandidateSet& cands, const RasterImage& gt,
                                                      const InstancePartition& p, const InstanceScores& scores,
                                                      const std::vector<int>& instances, const Captioner& captioner,
                                                      double tau) {
  std::vector<InstanceJudgement> out;
  for (int id : instances) {
    const auto k = static_cast<std::size_t>(std::find(p.ids().begin(), p.ids().end(), id) - p.ids().begin());
    if (k == p.size()) throw InvalidArgument("instance " + std::to_string(id) + " not in partition");
    std::vector<MetricVector> group;
    for (const auto& per_candidate : scores) group.push_back(per_candidate[k]);
    InstanceJudgement j{id, normalize_aggregate(group), std::nullopt, {}};
    j.choice = select_best_worst(j.aggregate);
    std::vector<Tensor> crops;
    for (const auto& c : cands.candidates) crops.push_back(instance_crop(c.image.tensor(), p, id));
    j.flags = detect_hallucination(captioner, instance_crop(gt.tensor(), p, id), crops, tau);
    out.push_back(std::move(j));
  }
  return out;
}

/// One record per judged instance with a strict preference. The negative prompt
/// is the caption of a flagged candidate in that region (the loser's when it is
/// flagged, otherwise the lowest-index flagged candidate).
inline std::vector<PreferenceRecord> build_records(const std::string& lq_id, const std::vector<std::string>& labels,
                                                   const InstanceWeightVector& weights,
                                                   const std::vector<InstanceJudgement>& judgements,
                                                   const CandidateFiles& files) {
  if (files.candidate_paths.size() != labels.size()) throw InvalidArgument("candidate paths misaligned");
  std::vector<PreferenceRecord> out;
  for (const auto& j : judgements) {
    if (!j.choice) {
      log::info("no preference for instance " + std::to_string(j.instance_id) + " of " + lq_id + "; skipped");
      continue;
    }
    PreferenceRecord r;
    r.lq_id = lq_id;
    r.instance_id = j.instance_id;
    r.mask_path = files.mask_path;
    r.winner_path = files.candidate_paths.at(j.choice->winner);
    r.loser_path = files.candidate_paths.at(j.choice->loser);
    r.weight = weights.of(j.instance_id);
    r.source = PreferenceSource::automatic;
    r.winner_setting = labels.at(j.choice->winner);
    r.loser_setting = labels.at(j.choice->loser);
    if (!j.flags.empty()) {
      auto it = std::find_if(j.flags.begin(), j.flags.end(),
                             [&](const HallucinationFlag& f) { return f.candidate == j.choice->loser; });
      r.negative_prompt = (it != j.flags.end() ? *it : j.flags.front()).caption;
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<PreferenceRecord> build_records(const CandidateSet& cands, const InstancePartition& p,
                                                   const InstanceWeightVector& weights,
                                                   const std::vector<InstanceJudgement>& judgements,
                                                   const CandidateFiles& files) {
  for (const auto& j : judgements)
    if (!p.contains(j.instance_id)) throw InvalidArgument("judged instance missing from partition");
  std::vector<std::string> labels;
  for (const auto& c : cands.candidates) labels.push_back(c.settings.label);
  return build_records(cands.lq_id, labels, weights, judgements, files);
}

}  // namespace dspo
