#pragma once

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/preference_builder.hpp"

namespace dspo {

class NotFound : public Error {
 public:
  using Error::Error;
};

struct TaskCandidate {
  std::string label;
  std::string crop_path;   // instance crop shown to annotators
  std::string image_path;  // full SR output, used by exported records
  std::string caption;
};

struct AnnotationTask {
  std::string task_id;
  std::string lq_id;
  int instance_id = 0;
  std::string lq_crop;
  std::string gt_crop;  // empty when no ground truth is shown
  std::string mask_path;
  double weight = 0.0;
  std::vector<TaskCandidate> candidates;
  std::string status = "open";

  bool has_label(const std::string& l) const {
    return std::any_of(candidates.begin(), candidates.end(), [&](const auto& c) { return c.label == l; });
  }
};

inline void to_json(nlohmann::json& j, const TaskCandidate& c) {
  j = {{"label", c.label}, {"crop", c.crop_path}, {"image", c.image_path}, {"caption", c.caption}};
}
inline void from_json(const nlohmann::json& j, TaskCandidate& c) {
  c.label = j.at("label");
  c.crop_path = j.at("crop");
  c.image_path = j.at("image");
  c.caption = j.at("caption");
}
inline void to_json(nlohmann::json& j, const AnnotationTask& t) {
  j = {{"task_id", t.task_id},     {"lq_id", t.lq_id},     {"instance_id", t.instance_id},
       {"lq_crop", t.lq_crop},     {"gt_crop", t.gt_crop}, {"gt_reference", !t.gt_crop.empty()},
       {"mask_path", t.mask_path}, {"weight", t.weight},   {"candidates", t.candidates},
       {"status", t.status}};
}
inline void from_json(const nlohmann::json& j, AnnotationTask& t) {
  t.task_id = j.at("task_id");
  t.lq_id = j.at("lq_id");
  t.instance_id = j.at("instance_id");
  t.lq_crop = j.at("lq_crop");
  t.gt_crop = j.value("gt_crop", std::string());
  t.mask_path = j.at("mask_path");
  t.weight = j.at("weight");
  t.candidates = j.at("candidates").get<std::vector<TaskCandidate>>();
  t.status = j.value("status", std::string("open"));
}

struct AnnotationSubmission {
  std::string task_id;
  std::string annotator_id;
  std::string winner_label;
  std::string loser_label;
  std::vector<std::string> flagged_caption_labels;
  int round = 1;
  std::string timestamp;
};

inline void to_json(nlohmann::json& j, const AnnotationSubmission& s) {
  j = {{"task_id", s.task_id},         {"annotator_id", s.annotator_id},
       {"winner_label", s.winner_label}, {"loser_label", s.loser_label},
       {"flagged_caption_labels", s.flagged_caption_labels}, {"round", s.round},
       {"timestamp", s.timestamp}};
}

/// Strict parse of a submission body; the task id may come from the URL instead.
inline AnnotationSubmission parse_submission(const nlohmann::json& j, const std::string& task_id = {}) {
  if (!j.is_object()) throw InvalidArgument("submission must be a JSON object");
  static const std::set<std::string> keys = {"task_id", "annotator_id", "winner_label", "loser_label",
                                             "flagged_caption_labels", "round", "timestamp"};
  for (const auto& [k, _] : j.items())
    if (!keys.count(k)) throw InvalidArgument("unknown field '" + k + "'");
  auto str = [&](const char* k) {
    if (!j.contains(k) || !j[k].is_string()) throw InvalidArgument(std::string("missing string field '") + k + "'");
    return j[k].get<std::string>();
  };
  AnnotationSubmission s;
  s.task_id = task_id.empty() ? str("task_id") : task_id;
  if (!task_id.empty() && j.contains("task_id") && j["task_id"] != task_id)
    throw InvalidArgument("task_id in body does not match the URL");
  s.annotator_id = str("annotator_id");
  s.winner_label = str("winner_label");
  s.loser_label = str("loser_label");
  if (j.contains("flagged_caption_labels")) {
    if (!j["flagged_caption_labels"].is_array()) throw InvalidArgument("flagged_caption_labels must be an array");
    for (const auto& v : j["flagged_caption_labels"]) {
      if (!v.is_string()) throw InvalidArgument("flagged_caption_labels must hold strings");
      s.flagged_caption_labels.push_back(v.get<std::string>());
    }
  }
  if (j.contains("round")) {
    if (!j["round"].is_number_integer()) throw InvalidArgument("round must be an integer");
    s.round = j["round"].get<int>();
  }
  if (j.contains("timestamp")) s.timestamp = str("timestamp");
  return s;
}

inline std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// File-backed task queue and submission log.
///
/// tasks.jsonl holds the tasks; submissions.jsonl is append-only. Paths inside
/// tasks are relative to the data directory. All public methods are serialized
/// by one mutex.
class AnnotationStore {
 public:
  explicit AnnotationStore(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    load();
  }

  const fs::path& dir() const { return dir_; }

  /// Appends tasks with fresh ids; every referenced file must exist.
  std::vector<std::string> create_tasks(std::vector<AnnotationTask> tasks) {
    std::lock_guard lock(mu_);
    for (const auto& t : tasks) {
      if (t.candidates.size() < 2) throw InvalidArgument("a task needs at least 2 candidates");
      std::set<std::string> labels;
      for (const auto& c : t.candidates)
        if (!labels.insert(c.label).second) throw InvalidArgument("duplicate candidate label '" + c.label + "'");
      std::vector<std::string> paths = {t.lq_crop};
      if (!t.gt_crop.empty()) paths.push_back(t.gt_crop);
      for (const auto& c : t.candidates) paths.insert(paths.end(), {c.crop_path, c.image_path});
      for (const auto& p : paths)
        if (!fs::exists(resolve(p))) throw IoError("task file not found: " + resolve(p).string());
    }
    std::vector<std::string> ids;
    std::string lines;
    for (auto& t : tasks) {
      t.task_id = "task-" + std::to_string(tasks_.size() + 1);
      t.status = "open";
      ids.push_back(t.task_id);
      index_[t.task_id] = tasks_.size();
      lines += nlohmann::json(t).dump() + "\n";
      tasks_.push_back(std::move(t));
    }
    append(dir_ / "tasks.jsonl", lines);
    return ids;
  }

  std::size_t task_count() const {
    std::lock_guard lock(mu_);
    return tasks_.size();
  }

  /// First open task this annotator has not answered in `round`.
  std::optional<AnnotationTask> next_task(const std::string& annotator, int round = 1) const {
    if (annotator.empty()) throw InvalidArgument("annotator id required");
    std::lock_guard lock(mu_);
    for (const auto& t : tasks_)
      if (t.status == "open" && !latest_.count({t.task_id, annotator, round})) return t;
    return std::nullopt;
  }

  /// Validates and appends; a later submission for the same (task, annotator, round) replaces earlier ones.
  void submit(AnnotationSubmission s) {
    std::lock_guard lock(mu_);
    auto it = index_.find(s.task_id);
    if (it == index_.end()) throw NotFound("unknown task '" + s.task_id + "'");
    validate(tasks_[it->second], s);
    if (s.timestamp.empty()) s.timestamp = utc_timestamp();
    append(dir_ / "submissions.jsonl", nlohmann::json(s).dump() + "\n");
    latest_[{s.task_id, s.annotator_id, s.round}] = std::move(s);
  }

  /// Majority vote per task over the latest answer of each (annotator, round).
  /// Ties on the winner or the loser skip the task. The most-flagged caption
  /// (ties to the earlier candidate) becomes the negative prompt.
  std::vector<PreferenceRecord> export_human_records() const {
    std::lock_guard lock(mu_);
    if (latest_.empty()) {
      log::warn("no annotation submissions; exporting nothing");
      return {};
    }
    std::map<std::string, std::vector<const AnnotationSubmission*>> by_task;
    for (const auto& [_, s] : latest_) by_task[s.task_id].push_back(&s);
    std::vector<PreferenceRecord> out;
    for (const auto& t : tasks_) {
      auto it = by_task.find(t.task_id);
      if (it == by_task.end()) continue;
      std::map<std::string, int> wins, losses, flags;
      for (const auto* s : it->second) {
        ++wins[s->winner_label];
        ++losses[s->loser_label];
        for (const auto& f : s->flagged_caption_labels) ++flags[f];
      }
      const auto winner = unique_max(wins), loser = unique_max(losses);
      if (!winner || !loser || *winner == *loser) {
        log::info("no majority for " + t.task_id + "; skipped");
        continue;
      }
      PreferenceRecord r;
      r.lq_id = t.lq_id;
      r.instance_id = t.instance_id;
      r.mask_path = resolve(t.mask_path).string();
      r.weight = t.weight;
      r.source = PreferenceSource::human;
      r.winner_setting = *winner;
      r.loser_setting = *loser;
      int best_flags = 0;
      for (const auto& c : t.candidates) {
        if (c.label == *winner) r.winner_path = resolve(c.image_path).string();
        if (c.label == *loser) r.loser_path = resolve(c.image_path).string();
        auto f = flags.find(c.label);
        if (f != flags.end() && f->second > best_flags) {
          best_flags = f->second;
          r.negative_prompt = c.caption;
        }
      }
      r.validate();
      out.push_back(std::move(r));
    }
    return out;
  }

  nlohmann::json stats() const {
    std::lock_guard lock(mu_);
    std::set<std::string> annotators, answered;
    std::map<int, int> per_round;
    for (const auto& [key, s] : latest_) {
      annotators.insert(s.annotator_id);
      answered.insert(s.task_id);
      ++per_round[s.round];
    }
    nlohmann::json rounds = nlohmann::json::object();
    for (auto [r, n] : per_round) rounds[std::to_string(r)] = n;
    return {{"tasks", tasks_.size()},
            {"submissions", latest_.size()},
            {"tasks_answered", answered.size()},
            {"annotators", annotators.size()},
            {"per_round", rounds}};
  }

  fs::path resolve(const std::string& p) const { return fs::path(p).is_absolute() ? fs::path(p) : dir_ / p; }

 private:
  using Key = std::tuple<std::string, std::string, int>;

  static std::optional<std::string> unique_max(const std::map<std::string, int>& votes) {
    std::optional<std::string> best;
    int top = 0, count = 0;
    for (const auto& [label, n] : votes) {
      if (n > top) top = n, best = label, count = 1;
      else if (n == top) ++count;
    }
    return count == 1 ? best : std::nullopt;
  }

  static void validate(const AnnotationTask& t, const AnnotationSubmission& s) {
    if (s.annotator_id.empty()) throw InvalidArgument("annotator_id must be non-empty");
    if (s.round < 1) throw InvalidArgument("round must be >= 1");
    if (s.winner_label == s.loser_label) throw InvalidArgument("winner and loser must differ");
    if (!t.has_label(s.winner_label)) throw InvalidArgument("unknown winner label '" + s.winner_label + "'");
    if (!t.has_label(s.loser_label)) throw InvalidArgument("unknown loser label '" + s.loser_label + "'");
    for (const auto& f : s.flagged_caption_labels)
      if (!t.has_label(f)) throw InvalidArgument("unknown flagged label '" + f + "'");
  }

  void append(const fs::path& path, const std::string& lines) {
    std::ofstream out(path, std::ios::app | std::ios::binary);
    out << lines;
    out.flush();
    if (!out) throw IoError("cannot append to " + path.string());
  }

  void load() {
    auto each_line = [](const fs::path& p, auto&& fn) {
      if (!fs::exists(p)) return;
      std::ifstream in(p);
      std::string line;
      int n = 0;
      while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
          fn(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
          // A torn final line from an interrupted append is dropped; anything else is corruption.
          if (in.peek() == std::char_traits<char>::eof()) {
            log::warn(p.string() + ": ignoring incomplete last line " + std::to_string(n));
            return;
          }
          throw IoError(p.string() + ": line " + std::to_string(n) + ": " + e.what());
        }
      }
    };
    each_line(dir_ / "tasks.jsonl", [&](const nlohmann::json& j) {
      auto t = j.get<AnnotationTask>();
      index_[t.task_id] = tasks_.size();
      tasks_.push_back(std::move(t));
    });
    each_line(dir_ / "submissions.jsonl", [&](const nlohmann::json& j) {
      auto s = parse_submission(j);
      latest_[{s.task_id, s.annotator_id, s.round}] = std::move(s);
    });
  }

  fs::path dir_;
  mutable std::mutex mu_;
  std::vector<AnnotationTask> tasks_;
  std::map<std::string, std::size_t> index_;
  std::map<Key, AnnotationSubmission> latest_;
};

}  // namespace dspo
