#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dspo/annotation_service.hpp"
#include "dspo/captioner.hpp"
#include "dspo/checkpoint.hpp"
#include "dspo/data_synthesis.hpp"
#include "dspo/eval_report.hpp"
#include "dspo/preference_builder.hpp"
#include "dspo/semantic_instances.hpp"
#include "dspo/trainer.hpp"

namespace dspo {

// ---------------------------------------------------------------------------
// Configuration.

struct DataSection {
  std::string source_dir;   // training images
  std::string holdout_dir;  // evaluation images
  int crop = 64;
  DegradationConfig degradation;
};

struct CandidateSection {
  std::string settings = "multi-step";  // multi-step | one-step
  int base_steps = 50;
  double base_cfg = 5.5;
};

struct SegmentSection {
  std::string segmenter = "region";  // region | grid | external
  std::string external_dir;
  int top_k = 5;
};

struct ScoreSection {
  std::string metric_suite = "builtin";
  double hallucination_tau = kDefaultHallucinationTau;
};

struct EvaluateSection {
  int rounds = 3;
  int steps = 50;
  double cfg_scale = 5.5;
};

struct PipelineConfig {
  std::string run_name = "default";
  std::uint64_t seed = 0;
  DataSection data;
  DenoiserConfig model;
  TrainConfig pretrain;
  CandidateSection candidates;
  SegmentSection segment;
  ScoreSection score;
  TrainConfig finetune;
  EvaluateSection evaluate;

  PipelineConfig() {
    pretrain.method = Method::pretrain;
    pretrain.learning_rate = 1e-3;
    pretrain.max_steps = 1500;
    finetune.method = Method::dspo;
  }

  void validate() const {
    std::vector<std::string> problems;
    auto check = [&](bool ok, const std::string& what) {
      if (!ok) problems.push_back(what);
    };
    check(data.crop >= 8, "data.crop must be >= 8");
    check(data.crop == model.resolution, "data.crop must equal model.resolution");
    check(model.resolution % 2 == 0, "model.resolution must be even");
    check(pretrain.t_max == model.timesteps, "pretrain.t_max must equal model.timesteps");
    check(finetune.t_max == model.timesteps, "finetune.t_max must equal model.timesteps");
    check(pretrain.method == Method::pretrain, "pretrain.method must be pretrain");
    check(finetune.method != Method::pretrain, "finetune.method must be dspo|diffusion-dpo|sft");
    check(candidates.settings == "multi-step" || candidates.settings == "one-step",
          "candidates.settings must be multi-step|one-step");
    check(segment.segmenter == "region" || segment.segmenter == "grid" || segment.segmenter == "external",
          "segment.segmenter must be region|grid|external");
    check(segment.top_k >= 1, "segment.top_k must be >= 1");
    check(evaluate.rounds >= 1, "evaluate.rounds must be >= 1");
    check(evaluate.steps >= 1 && evaluate.steps <= model.timesteps, "evaluate.steps must lie in [1, model.timesteps]");
    for (auto* fn : {+[](const PipelineConfig& c) { c.data.degradation.validate(); },
                     +[](const PipelineConfig& c) { c.pretrain.validate(); },
                     +[](const PipelineConfig& c) { c.finetune.validate(); }}) {
      try {
        fn(*this);
      } catch (const Error& e) {
        problems.push_back(e.what());
      }
    }
    if (!problems.empty()) {
      std::string msg = "invalid configuration:";
      for (const auto& p : problems) msg += "\n  " + p;
      throw InvalidArgument(msg);
    }
  }
};

inline nlohmann::json to_json_config(const PipelineConfig& c) {
  nlohmann::json pre = c.pretrain, fin = c.finetune;
  return {{"run_name", c.run_name},
          {"seed", c.seed},
          {"data",
           {{"source_dir", c.data.source_dir},
            {"holdout_dir", c.data.holdout_dir},
            {"crop", c.data.crop},
            {"degradation", c.data.degradation}}},
          {"model", c.model},
          {"pretrain", pre},
          {"candidates",
           {{"settings", c.candidates.settings},
            {"base_steps", c.candidates.base_steps},
            {"base_cfg", c.candidates.base_cfg}}},
          {"segment",
           {{"segmenter", c.segment.segmenter}, {"external_dir", c.segment.external_dir}, {"top_k", c.segment.top_k}}},
          {"score", {{"metric_suite", c.score.metric_suite}, {"hallucination_tau", c.score.hallucination_tau}}},
          {"finetune", fin},
          {"evaluate",
           {{"rounds", c.evaluate.rounds}, {"steps", c.evaluate.steps}, {"cfg_scale", c.evaluate.cfg_scale}}}};
}

/// Overlays `j` onto the defaults. Every unknown key, at any level, is
/// collected and reported together.
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("configuration must be a JSON object");
  const nlohmann::json defaults = to_json_config(PipelineConfig());
  std::vector<std::string> unknown;
  std::function<void(const nlohmann::json&, const nlohmann::json&, const std::string&)> walk =
      [&](const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
        for (const auto& [k, v] : given.items()) {
          const std::string key = prefix.empty() ? k : prefix + "." + k;
          if (!known.contains(k)) unknown.push_back(key);
          else if (v.is_object() && known[k].is_object()) walk(v, known[k], key);
        }
      };
  walk(j, defaults, "");
  if (!unknown.empty()) {
    std::string msg = "unknown configuration keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw InvalidArgument(msg);
  }
  nlohmann::json merged = defaults;
  merged.merge_patch(j);
  PipelineConfig c;
  try {
    c.run_name = merged.at("run_name");
    c.seed = merged.at("seed");
    const auto& d = merged.at("data");
    c.data.source_dir = d.at("source_dir");
    c.data.holdout_dir = d.at("holdout_dir");
    c.data.crop = d.at("crop");
    c.data.degradation = d.at("degradation").get<DegradationConfig>();
    c.model = merged.at("model").get<DenoiserConfig>();
    c.pretrain = merged.at("pretrain").get<TrainConfig>();
    const auto& cs = merged.at("candidates");
    c.candidates = {cs.at("settings"), cs.at("base_steps"), cs.at("base_cfg")};
    const auto& sg = merged.at("segment");
    c.segment = {sg.at("segmenter"), sg.at("external_dir"), sg.at("top_k")};
    const auto& sc = merged.at("score");
    c.score = {sc.at("metric_suite"), sc.at("hallucination_tau")};
    c.finetune = merged.at("finetune").get<TrainConfig>();
    const auto& ev = merged.at("evaluate");
    c.evaluate = {ev.at("rounds"), ev.at("steps"), ev.at("cfg_scale")};
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("configuration has a value of the wrong type: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  return parse_pipeline_config(j);
}

// ---------------------------------------------------------------------------
// Stage bookkeeping.

/// Hash of every regular file below `dir` (relative path and contents),
/// skipping the manifest and files named in `skip`.
inline std::string hash_tree(const fs::path& dir, const std::set<std::string>& skip = {}) {
  std::vector<fs::path> files;
  if (fs::exists(dir))
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().filename() != "manifest.json" && !skip.count(e.path().filename().string()))
        files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    h.update(fs::relative(f, dir).generic_string());
    h.update(hash_file(f));
  }
  return h.hex();
}

/// Exclusive lock file for a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
    fs::create_directories(run_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      std::string holder;
      std::ifstream in(path_);
      std::getline(in, holder);
      throw Error("run directory " + run_dir.string() + " is locked (" + path_.string() +
                  (holder.empty() ? "" : ", held by pid " + holder) + ")");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) log::warn("could not record pid in " + path_.string());
  }
  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

struct StageOptions {
  bool force = false;
  std::optional<std::string> source_dir, holdout_dir;
  std::optional<Method> method;                 // finetune / evaluate
  std::string records = "auto";                 // finetune: auto | human | path to a records file
  std::string judge = "auto";                   // evaluate: auto | human-records
  std::optional<std::string> choices;           // evaluate with human-records
  std::optional<std::string> annotation_dir;    // export-human
};

struct StageResult {
  std::string stage;
  fs::path dir;
  bool skipped = false;
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"degrade", "pretrain", "candidates", "segment", "score",
                                                 "select",  "export-human", "finetune", "evaluate", "report"};
  return names;
}

/// Runs pipeline stages under <root>/<run_name>/<stage>/, each with a manifest
/// recording the hash of its inputs and outputs.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, fs::path root) : cfg_(std::move(cfg)), run_dir_(std::move(root) / cfg_.run_name) {
    cfg_.validate();
  }

  const fs::path& run_dir() const { return run_dir_; }
  const PipelineConfig& config() const { return cfg_; }
  fs::path annotation_dir() const { return run_dir_ / "score" / "annotation"; }

  fs::path stage_dir(const std::string& stage, const StageOptions& o = {}) const {
    if (stage == "finetune" || stage == "evaluate") return run_dir_ / stage / to_string(method(o));
    return run_dir_ / stage;
  }

  StageResult run(const std::string& stage, const StageOptions& opts = {}) {
    if (std::find(stage_names().begin(), stage_names().end(), stage) == stage_names().end())
      throw InvalidArgument("unknown stage '" + stage + "'");
    const fs::path dir = stage_dir(stage, opts);
    const std::string input_hash = inputs(stage, opts);  // also checks upstream artifacts
    if (!opts.force && up_to_date(dir, input_hash)) {
      log::info(stage + ": up to date (" + dir.string() + ")");
      return {stage, dir, true};
    }
    RunLock lock(run_dir_);
    const bool resumable = (stage == "pretrain" || stage == "finetune") && !fs::exists(dir / "manifest.json");
    if (opts.force || !resumable) fs::remove_all(dir);
    fs::create_directories(dir);
    log::info(stage + ": running in " + dir.string());
    execute(stage, dir, opts);
    nlohmann::json manifest = {{"stage", stage},
                               {"input_hash", input_hash},
                               {"output_hash", hash_tree(dir, volatile_files())},
                               {"config", to_json_config(cfg_)}};
    write_file_atomic(dir / "manifest.json", manifest.dump(2));
    return {stage, dir, false};
  }

 private:
  static std::set<std::string> volatile_files() { return {"submissions.jsonl"}; }

  Method method(const StageOptions& o) const { return o.method.value_or(cfg_.finetune.method); }

  fs::path require(const fs::path& p, const std::string& producer) const {
    if (!fs::exists(p)) throw IoError("missing upstream artifact " + p.string() + " (run '" + producer + "' first)");
    return p;
  }

  std::string upstream(const std::string& stage, const StageOptions& o = {}) const {
    return hash_file(require(stage_dir(stage, o) / "manifest.json", stage));
  }

  bool up_to_date(const fs::path& dir, const std::string& input_hash) const {
    const fs::path m = dir / "manifest.json";
    if (!fs::exists(m)) return false;
    try {
      const auto j = nlohmann::json::parse(read_text(m));
      return j.at("input_hash") == input_hash && j.at("output_hash") == hash_tree(dir, volatile_files());
    } catch (const std::exception&) {
      return false;
    }
  }

  std::string source(const StageOptions& o, bool holdout) const {
    const std::string s = holdout ? o.holdout_dir.value_or(cfg_.data.holdout_dir) : o.source_dir.value_or(cfg_.data.source_dir);
    return s;
  }

  /// Hash of everything a stage reads; throws when an upstream artifact is missing.
  std::string inputs(const std::string& stage, const StageOptions& o) const {
    nlohmann::json j = {{"stage", stage}, {"seed", cfg_.seed}, {"model", cfg_.model}};
    auto dir_hash = [](const std::string& d) {
      if (!fs::is_directory(d)) throw IoError("source directory not found: " + d);
      Fnv1a h;
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(d))
        if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) h.update(f.filename().string()).update(hash_file(f));
      return h.hex();
    };
    if (stage == "degrade") {
      const std::string src = source(o, false), hold = source(o, true);
      if (src.empty()) throw InvalidArgument("degrade needs a source directory (--source or data.source_dir)");
      j["source"] = dir_hash(src);
      if (!hold.empty()) j["holdout"] = dir_hash(hold);
      j["data"] = {{"crop", cfg_.data.crop}, {"degradation", cfg_.data.degradation}};
    } else if (stage == "pretrain") {
      j["degrade"] = upstream("degrade");
      nlohmann::json t = cfg_.pretrain;
      j["train"] = t;
    } else if (stage == "candidates") {
      j["pretrain"] = upstream("pretrain");
      j["candidates"] = to_json_config(cfg_)["candidates"];
    } else if (stage == "segment") {
      j["degrade"] = upstream("degrade");
      j["segment"] = to_json_config(cfg_)["segment"];
      if (cfg_.segment.segmenter == "external") j["external"] = hash_tree(cfg_.segment.external_dir);
    } else if (stage == "score") {
      j["candidates"] = upstream("candidates");
      j["segment"] = upstream("segment");
      j["score"] = to_json_config(cfg_)["score"];
    } else if (stage == "select") {
      j["score"] = upstream("score");
    } else if (stage == "export-human") {
      const fs::path ann = o.annotation_dir ? fs::path(*o.annotation_dir) : annotation_dir();
      j["tasks"] = hash_file(require(ann / "tasks.jsonl", "score"));
      j["submissions"] = fs::exists(ann / "submissions.jsonl") ? hash_file(ann / "submissions.jsonl") : "";
    } else if (stage == "finetune") {
      j["pretrain"] = upstream("pretrain");
      j["degrade"] = upstream("degrade");
      j["records"] = hash_file(records_path(o));
      TrainConfig t = cfg_.finetune;
      t.method = method(o);
      nlohmann::json tj = t;
      j["train"] = tj;
    } else if (stage == "evaluate") {
      j["pretrain"] = upstream("pretrain");
      j["finetune"] = upstream("finetune", o);
      j["degrade"] = upstream("degrade");
      j["evaluate"] = to_json_config(cfg_)["evaluate"];
      j["judge"] = o.judge;
      if (o.judge == "human-records") {
        if (!o.choices) throw InvalidArgument("--judge human-records needs --choices FILE");
        j["choices"] = hash_file(require(*o.choices, "an annotation session"));
      } else if (o.judge != "auto") {
        throw InvalidArgument("judge must be auto|human-records");
      }
    } else if (stage == "report") {
      auto evals = evaluated_methods();
      if (evals.empty()) throw IoError("missing upstream artifact " + (run_dir_ / "evaluate").string() + " (run 'evaluate' first)");
      for (const auto& m : evals) j["evaluate"][m] = hash_file(run_dir_ / "evaluate" / m / "manifest.json");
    }
    return hash_string(j.dump());
  }

  fs::path records_path(const StageOptions& o) const {
    if (o.records == "auto") return require(run_dir_ / "select" / "records.jsonl", "select");
    if (o.records == "human") return require(run_dir_ / "export-human" / "records.jsonl", "export-human");
    return require(o.records, "a records export");
  }

  std::vector<std::string> evaluated_methods() const {
    std::vector<std::string> out;
    const fs::path d = run_dir_ / "evaluate";
    if (fs::is_directory(d))
      for (const auto& e : fs::directory_iterator(d))
        if (fs::exists(e.path() / "manifest.json")) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<PairedSample> load_pairs(const std::string& which) const {
    const fs::path manifest = require(run_dir_ / "degrade" / which / "pairs.jsonl", "degrade");
    std::vector<PairedSample> out;
    for (const auto& r : read_pair_manifest(manifest)) out.push_back(load_pair(r));
    return out;
  }

  std::vector<GenSettings> settings() const {
    return cfg_.candidates.settings == "one-step" ? one_step_settings()
                                                  : multi_step_settings(cfg_.candidates.base_steps, cfg_.candidates.base_cfg);
  }

  static std::vector<int> lq_prompt(const RasterImage& lq, int res, const Captioner& cap) {
    return PromptVocab::encode(cap.caption(bicubic_resize(lq.tensor(), res, res)));
  }

  void execute(const std::string& stage, const fs::path& dir, const StageOptions& o) {
    const int res = cfg_.model.resolution;
    const HistogramCaptioner captioner;
    if (stage == "degrade") {
      build_pair_dataset(source(o, false), cfg_.data.degradation, cfg_.data.crop, dir / "train");
      if (!source(o, true).empty()) {
        DegradationConfig hold = cfg_.data.degradation;
        hold.seed = derive_seed(hold.seed, "holdout");
        build_pair_dataset(source(o, true), hold, cfg_.data.crop, dir / "holdout");
      }
    } else if (stage == "pretrain") {
      Denoiser model(cfg_.model);
      TrainConfig t = cfg_.pretrain;
      t.seed = derive_seed(cfg_.seed + t.seed, "pretrain");
      pretrain(model, load_pairs("train"), t, RunOptions{dir, true, {}}, captioner);
    } else if (stage == "candidates") {
      const Denoiser model = load_model(run_dir_ / "pretrain" / "checkpoint.bin");
      const NoiseSchedule sched = linear_schedule(cfg_.model.timesteps);
      std::string index;
      for (const auto& p : load_pairs("train")) {
        const auto cs = generate_candidates(model, sched, p.id, p.lq, settings(), derive_seed(cfg_.seed, "candidates/" + p.id),
                                            lq_prompt(p.lq, res, captioner));
        for (const auto& c : cs.candidates) {
          const std::string rel = p.id + "/" + c.settings.label + ".png";
          write_png(dir / rel, c.image);
          index += nlohmann::json{{"lq_id", p.id}, {"label", c.settings.label}, {"path", rel}, {"settings", c.settings}}.dump() + "\n";
        }
      }
      write_file_atomic(dir / "candidates.jsonl", index);
    } else if (stage == "segment") {
      const auto seg = make_segmenter(cfg_.segment.segmenter, cfg_.segment.external_dir);
      for (const auto& p : load_pairs("train")) {
        auto part = top_k_largest(enforce_partition(segment(p.hq, *seg, p.id), res, res), cfg_.segment.top_k);
        save_partition(part, dir / (p.id + ".png"));
      }
    } else if (stage == "score") {
      score_stage(dir, captioner);
    } else if (stage == "select") {
      select_stage(dir);
    } else if (stage == "export-human") {
      AnnotationStore store(o.annotation_dir ? fs::path(*o.annotation_dir) : annotation_dir());
      auto records = store.export_human_records();
      write_records(records, dir / "records.jsonl");
    } else if (stage == "finetune") {
      finetune_stage(dir, o, captioner);
    } else if (stage == "evaluate") {
      evaluate_stage(dir, o, captioner);
    } else if (stage == "report") {
      report_stage(dir);
    }
  }

  /// Records with paths relative to the records file.
  static void write_records(std::vector<PreferenceRecord> records, const fs::path& path) {
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](std::string& p) {
      if (!p.empty()) p = fs::relative(fs::absolute(p), base).generic_string();
    };
    for (auto& r : records) {
      rel(r.mask_path);
      rel(r.winner_path);
      rel(r.loser_path);
    }
    export_jsonl(records, path);
  }

  struct CandidateIndex {
    std::vector<std::string> labels;
    std::vector<fs::path> paths;
  };

  std::map<std::string, CandidateIndex> read_candidates() const {
    const fs::path dir = run_dir_ / "candidates";
    std::map<std::string, CandidateIndex> out;
    std::ifstream in(require(dir / "candidates.jsonl", "candidates"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      auto& c = out[j.at("lq_id").get<std::string>()];
      c.labels.push_back(j.at("label"));
      c.paths.push_back(fs::absolute(dir / j.at("path").get<std::string>()));
    }
    return out;
  }

  static std::vector<int> judged_instances(const InstancePartition& p) {
    std::vector<int> ids;
    for (int id : p.ids())
      if (p.background() != id) ids.push_back(id);
    if (ids.empty()) ids = p.ids();  // a single region: judge it
    return ids;
  }

  void score_stage(const fs::path& dir, const Captioner& captioner) {
    const auto suite = make_metric_suite(cfg_.score.metric_suite);
    const auto cands = read_candidates();
    AnnotationStore store(annotation_dir());
    std::vector<AnnotationTask> tasks;
    std::string lines;
    for (const auto& p : load_pairs("train")) {
      auto it = cands.find(p.id);
      if (it == cands.end()) throw IoError("no candidates for " + p.id + " in " + (run_dir_ / "candidates").string());
      CandidateSet cs{p.id, {}};
      for (std::size_t i = 0; i < it->second.labels.size(); ++i)
        cs.candidates.push_back({read_png(it->second.paths[i]), GenSettings{it->second.labels[i]}});
      const fs::path mask_png = require(run_dir_ / "segment" / (p.id + ".png"), "segment");
      const auto part = load_partition(mask_png);
      const auto weights = instance_weights(part);
      const auto scores = score_instances(cs, p.hq, part, suite);
      const auto ids = judged_instances(part);
      const auto judgements = judge_instances(cs, p.hq, part, scores, ids, captioner, cfg_.score.hallucination_tau);
      const RasterImage lq_up = RasterImage::from_clamped(bicubic_resize(p.lq.tensor(), p.hq.height(), p.hq.width()));
      for (const auto& jd : judgements) {
        const auto k = static_cast<std::size_t>(std::find(part.ids().begin(), part.ids().end(), jd.instance_id) - part.ids().begin());
        nlohmann::json metrics = nlohmann::json::array(), captions = nlohmann::json::array(), flags = nlohmann::json::array();
        AnnotationTask task;
        const std::string stem = p.id + "_" + std::to_string(jd.instance_id);
        task.lq_id = p.id;
        task.instance_id = jd.instance_id;
        task.mask_path = mask_png.string();
        task.weight = weights.of(jd.instance_id);
        task.lq_crop = "crops/" + stem + "_lq.png";
        task.gt_crop = "crops/" + stem + "_gt.png";
        write_png(store.dir() / task.lq_crop, RasterImage::from_clamped(instance_crop(lq_up.tensor(), part, jd.instance_id, RasterImage::kMinExtent)));
        write_png(store.dir() / task.gt_crop, RasterImage::from_clamped(instance_crop(p.hq.tensor(), part, jd.instance_id, RasterImage::kMinExtent)));
        for (std::size_t i = 0; i < cs.size(); ++i) {
          metrics.push_back(scores[i][k].values);
          const std::string caption = captioner.caption(instance_crop(cs.candidates[i].image.tensor(), part, jd.instance_id));
          const Tensor crop = instance_crop(cs.candidates[i].image.tensor(), part, jd.instance_id, RasterImage::kMinExtent);
          captions.push_back(caption);
          const std::string crop_rel = "crops/" + stem + "_" + cs.candidates[i].settings.label + ".png";
          write_png(store.dir() / crop_rel, RasterImage::from_clamped(crop));
          task.candidates.push_back({cs.candidates[i].settings.label, crop_rel, it->second.paths[i].string(), caption});
        }
        for (const auto& f : jd.flags)
          flags.push_back({{"candidate", f.candidate}, {"caption", f.caption}, {"similarity", f.similarity}});
        nlohmann::json row = {{"lq_id", p.id},
                              {"instance_id", jd.instance_id},
                              {"weight", task.weight},
                              {"mask_path", mask_png.string()},
                              {"labels", it->second.labels},
                              {"paths", nlohmann::json::array()},
                              {"metrics", metrics},
                              {"aggregate", jd.aggregate},
                              {"captions", captions},
                              {"flags", flags},
                              {"choice", jd.choice ? nlohmann::json{{"winner", jd.choice->winner}, {"loser", jd.choice->loser}}
                                                   : nlohmann::json()}};
        for (const auto& path : it->second.paths) row["paths"].push_back(path.string());
        lines += row.dump() + "\n";
        tasks.push_back(std::move(task));
      }
    }
    write_file_atomic(dir / "scores.jsonl", lines);
    store.create_tasks(std::move(tasks));
  }

  void select_stage(const fs::path& dir) {
    std::ifstream in(require(run_dir_ / "score" / "scores.jsonl", "score"));
    std::vector<PreferenceRecord> records;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      InstanceJudgement jd;
      jd.instance_id = j.at("instance_id");
      jd.aggregate = j.at("aggregate").get<std::vector<double>>();
      if (!j.at("choice").is_null()) jd.choice = BestWorst{j["choice"].at("winner"), j["choice"].at("loser")};
      for (const auto& f : j.at("flags")) jd.flags.push_back({f.at("candidate"), f.at("caption"), f.at("similarity")});
      InstanceWeightVector w{{jd.instance_id}, {j.at("weight").get<double>()}};
      CandidateFiles files{j.at("mask_path"), j.at("paths").get<std::vector<std::string>>()};
      for (auto& r : build_records(j.at("lq_id").get<std::string>(), j.at("labels").get<std::vector<std::string>>(), w,
                                   {jd}, files))
        records.push_back(std::move(r));
    }
    if (records.empty()) log::warn("select: no instance had a strict preference");
    write_records(records, dir / "records.jsonl");
  }

  void finetune_stage(const fs::path& dir, const StageOptions& o, const Captioner& captioner) {
    const fs::path rec_path = records_path(o);
    const auto records = import_jsonl(rec_path);
    std::map<std::string, RasterImage> lqs;
    for (const auto& p : load_pairs("train")) lqs.emplace(p.id, p.lq);
    auto lq_for = [&](const std::string& id) {
      auto it = lqs.find(id);
      if (it == lqs.end()) throw InvalidArgument("record refers to unknown LQ '" + id + "'");
      return it->second;
    };
    TrainConfig t = cfg_.finetune;
    t.method = method(o);
    t.seed = derive_seed(cfg_.seed + t.seed, "finetune/" + to_string(t.method));
    const auto samples = load_preference_samples(records, fs::absolute(rec_path).parent_path(), lq_for, t.method,
                                                  cfg_.model.resolution, captioner);
    Denoiser policy = load_model(run_dir_ / "pretrain" / "checkpoint.bin");
    const FrozenReference reference = clone_freeze_reference(policy);
    const auto ck = finetune(policy, reference, samples, t, RunOptions{dir, true, {}});
    const auto& h = ck.loss_history;
    nlohmann::json summary = {{"method", to_string(t.method)},
                              {"records", records.size()},
                              {"steps", h.size()},
                              {"step0_loss", h.empty() ? nlohmann::json() : nlohmann::json(h.front())},
                              {"final_loss", h.empty() ? nlohmann::json() : nlohmann::json(trailing_mean(h, 100))},
                              {"final_loss_median", h.empty() ? nlohmann::json() : nlohmann::json(trailing_median(h, 100))},
                              {"reference_fingerprint", reference.fingerprint()}};
    write_file_atomic(dir / "summary.json", summary.dump(2));
  }

  void evaluate_stage(const fs::path& dir, const StageOptions& o, const Captioner& captioner) {
    const auto hold = load_pairs("holdout");
    if (hold.empty()) throw InvalidArgument("no held-out pairs");
    const std::string m = to_string(method(o));
    const Denoiser base = load_model(run_dir_ / "pretrain" / "checkpoint.bin");
    const Denoiser tuned = load_model(run_dir_ / "finetune" / m / "checkpoint.bin");
    const NoiseSchedule sched = linear_schedule(cfg_.model.timesteps);
    const auto suite = make_metric_suite(cfg_.score.metric_suite);
    std::vector<std::vector<RasterImage>> out_tuned, out_base;
    std::vector<RasterImage> gts;
    std::vector<MetricVector> rows_tuned, rows_base;
    for (const auto& p : hold) gts.push_back(p.hq);
    for (int r = 0; r < cfg_.evaluate.rounds; ++r) {
      out_tuned.emplace_back();
      out_base.emplace_back();
      for (const auto& p : hold) {
        const SamplerConfig sc{cfg_.evaluate.steps, cfg_.evaluate.cfg_scale,
                               derive_seed(cfg_.seed + r, "evaluate/" + p.id)};
        const SampleRequest req{lq_prompt(p.lq, cfg_.model.resolution, captioner), {}, 1.0f};
        // Judge what is written to disk.
        out_tuned.back().push_back(quantize8(ddpm_sample(tuned, sched, p.lq, sc, req)));
        out_base.back().push_back(quantize8(ddpm_sample(base, sched, p.lq, sc, req)));
        const std::string name = "round" + std::to_string(r + 1) + "/" + p.id + ".png";
        write_png(dir / "outputs" / m / name, out_tuned.back().back());
        write_png(dir / "outputs" / "pretrained" / name, out_base.back().back());
        rows_tuned.push_back(suite.evaluate(out_tuned.back().back(), p.hq));
        rows_base.push_back(suite.evaluate(out_base.back().back(), p.hq));
      }
    }
    WinRateResult wr;
    if (o.judge == "human-records") {
      wr = tally_win_rate(read_human_judgements(*o.choices));
    } else {
      wr = win_rate(out_tuned, out_base, gts,
                    [&](const RasterImage& a, const RasterImage& b, const RasterImage& g, int) {
                      return automatic_judge(a, b, g, suite);
                    });
    }
    nlohmann::json wj = wr;
    write_file_atomic(dir / "winrate.json",
                      nlohmann::json{{"method", m}, {"versus", "pretrained"}, {"judge", o.judge}, {"result", wj}}.dump(2));
    write_file_atomic(dir / "metrics.json", nlohmann::json{{m, mean_metrics(rows_tuned).values},
                                                           {"pretrained", mean_metrics(rows_base).values}}
                                                .dump(2));
    log::info("evaluate: " + m + " vs pretrained win rate " + std::to_string(wr.rate) + " (" +
              std::to_string(wr.wins) + "/" + std::to_string(wr.losses) + "/" + std::to_string(wr.ties) + ")");
  }

  void report_stage(const fs::path& dir) {
    std::vector<MethodMetrics> table;
    nlohmann::json winrates = nlohmann::json::object();
    bool have_base = false;
    for (const auto& m : evaluated_methods()) {
      const fs::path d = run_dir_ / "evaluate" / m;
      const auto metrics = nlohmann::json::parse(read_text(d / "metrics.json"));
      if (!have_base) {
        table.push_back({"pretrained", {metrics.at("pretrained").get<std::array<double, kMetricCount>>()}});
        have_base = true;
      }
      table.push_back({m, {metrics.at(m).get<std::array<double, kMetricCount>>()}});
      winrates[m] = nlohmann::json::parse(read_text(d / "winrate.json")).at("result");
    }
    export_report(table, dir);
    write_file_atomic(dir / "winrates.json", winrates.dump(2));
  }

  PipelineConfig cfg_;
  fs::path run_dir_;
};

}  // namespace dspo
