#pragma once

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dspo/alignment_losses.hpp"
#include "dspo/captioner.hpp"
#include "dspo/checkpoint.hpp"
#include "dspo/data_synthesis.hpp"
#include "dspo/denoiser.hpp"
#include "dspo/preference_builder.hpp"
#include "dspo/semantic_instances.hpp"

namespace dspo {

enum class Method { pretrain, dspo, diffusion_dpo, sft };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::pretrain: return "pretrain";
    case Method::dspo: return "dspo";
    case Method::diffusion_dpo: return "diffusion-dpo";
    case Method::sft: return "sft";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "pretrain") return Method::pretrain;
  if (s == "dspo") return Method::dspo;
  if (s == "diffusion-dpo") return Method::diffusion_dpo;
  if (s == "sft") return Method::sft;
  throw InvalidArgument("unknown method '" + std::string(s) + "' (pretrain|dspo|diffusion-dpo|sft)");
}

struct TrainConfig {
  Method method = Method::dspo;
  double learning_rate = 5e-5;
  int batch_size = 4;
  double beta = 8000.0;
  int max_steps = 2000;
  std::uint64_t seed = 0;
  int t_max = 100;
  int checkpoint_every = 200;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  double prompt_dropout = 0.1;  // pre-training only
  ErrorReduction reduction = ErrorReduction::sum;

  void validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("learning_rate must be > 0");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (!(beta > 0)) throw InvalidArgument("beta must be > 0");
    if (max_steps < 0) throw InvalidArgument("max_steps must be >= 0");
    if (t_max < 2) throw InvalidArgument("t_max must be >= 2");
    if (checkpoint_every < 1) throw InvalidArgument("checkpoint_every must be >= 1");
    if (prompt_dropout < 0 || prompt_dropout > 1) throw InvalidArgument("prompt_dropout must lie in [0,1]");
  }

  /// Hash of the fields that must agree for a resumed run.
  std::string hash() const {
    nlohmann::json j = *this;
    j.erase("max_steps");
    j.erase("checkpoint_every");
    return hash_string(j.dump());
  }

  friend void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"method", to_string(c.method)},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"beta", c.beta},
         {"max_steps", c.max_steps},
         {"seed", c.seed},
         {"t_max", c.t_max},
         {"checkpoint_every", c.checkpoint_every},
         {"grad_clip", c.grad_clip},
         {"weight_decay", c.weight_decay},
         {"prompt_dropout", c.prompt_dropout},
         {"reduction", c.reduction == ErrorReduction::sum ? "sum" : "mean"}};
  }
  friend void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const std::set<std::string> keys = {"method", "learning_rate", "batch_size", "beta",
                                               "max_steps", "seed", "t_max", "checkpoint_every",
                                               "grad_clip", "weight_decay", "prompt_dropout", "reduction"};
    for (const auto& [k, _] : j.items())
      if (!keys.count(k)) throw InvalidArgument("unknown training option '" + k + "'");
    TrainConfig d;
    c.method = parse_method(j.value("method", to_string(d.method)));
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.beta = j.value("beta", d.beta);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.seed = j.value("seed", d.seed);
    c.t_max = j.value("t_max", d.t_max);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.prompt_dropout = j.value("prompt_dropout", d.prompt_dropout);
    const std::string r = j.value("reduction", std::string("sum"));
    if (r != "sum" && r != "mean") throw InvalidArgument("reduction must be sum|mean");
    c.reduction = r == "sum" ? ErrorReduction::sum : ErrorReduction::mean;
  }
};

/// Read-only copy of a model. fingerprint() at construction lets callers
/// confirm nothing mutated it.
class FrozenReference {
 public:
  explicit FrozenReference(const Denoiser& model)
      : model_(std::make_shared<const Denoiser>(model)), fingerprint_(model_->params().fingerprint()) {}
  const Denoiser& model() const { return *model_; }
  const std::string& fingerprint() const { return fingerprint_; }
  bool intact() const { return model_->params().fingerprint() == fingerprint_; }

 private:
  std::shared_ptr<const Denoiser> model_;
  std::string fingerprint_;
};

inline FrozenReference clone_freeze_reference(const Denoiser& model) {
  if (!model.params().all_finite()) throw InvalidArgument("cannot freeze a model with NaN/Inf parameters");
  return FrozenReference(model);
}

/// One preference record resolved to tensors at working resolution.
struct PreferenceSample {
  std::string key;  // lq_id/instance_id, for diagnostics
  ConditioningBundle cond;
  Tensor winner;  // model space
  Tensor loser;   // empty for SFT
  Mask mask;
  double weight = 1.0;
};

/// Resolves records to tensors. `lq_for` maps an lq_id to its LQ image. Loser
/// files are not opened for SFT; masks are not required for Diffusion-DPO or SFT.
inline std::vector<PreferenceSample> load_preference_samples(
    const std::vector<PreferenceRecord>& records, const fs::path& base_dir,
    const std::function<RasterImage(const std::string&)>& lq_for, Method method, int resolution,
    const Captioner& captioner) {
  if (records.empty()) throw InvalidArgument("no preference records");
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
  std::map<std::string, ConditioningBundle> cond_cache;
  std::vector<PreferenceSample> out;
  for (const auto& r : records) {
    PreferenceSample s;
    s.key = r.lq_id + "/" + std::to_string(r.instance_id);
    auto it = cond_cache.find(r.lq_id);
    if (it == cond_cache.end()) {
      ConditioningBundle c = ConditioningBundle::from_lq(lq_for(r.lq_id), resolution);
      c.prompt = PromptVocab::encode(captioner.caption(from_model_space(c.lq_upsampled).tensor()));
      it = cond_cache.emplace(r.lq_id, std::move(c)).first;
    }
    s.cond = it->second;
    if (r.negative_prompt) s.cond.negative_prompt = PromptVocab::encode(*r.negative_prompt);
    s.winner = to_model_space(read_png(resolve(r.winner_path)).tensor());
    if (s.winner.height() != resolution || s.winner.width() != resolution)
      throw InvalidArgument(r.winner_path + " is not at working resolution");
    if (method != Method::sft) {
      s.loser = to_model_space(read_png(resolve(r.loser_path)).tensor());
      require_same_shape(s.winner, s.loser, "winner/loser");
    }
    if (method == Method::dspo) {
      if (r.mask_path.empty()) throw InvalidArgument("record " + s.key + " has no mask");
      const auto part = load_partition(resolve(r.mask_path));
      if (part.height() != resolution || part.width() != resolution)
        throw InvalidArgument("mask of " + s.key + " is not at working resolution");
      if (!part.contains(r.instance_id)) throw InvalidArgument("record " + s.key + ": instance missing from mask");
      s.mask = part.mask(r.instance_id);
      s.weight = r.weight;
    } else {
      s.mask = Mask(resolution, resolution, true);
      s.weight = 1.0;
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct RunOptions {
  std::optional<fs::path> out_dir;  // checkpoints and train_log.jsonl
  bool resume = true;               // continue from out_dir/checkpoint.bin when present
  std::function<void(long step, double loss)> on_step;
};

struct StepLog {
  long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double z_mean = 0.0, z_min = 0.0, z_max = 0.0;
};

namespace detail {

inline fs::path checkpoint_path(const fs::path& dir) { return dir / "checkpoint.bin"; }

/// Shared optimizer loop: resume, per-step callback, NaN guard, logging, checkpoints.
class TrainLoop {
 public:
  TrainLoop(Denoiser& model, const TrainConfig& cfg, const RunOptions& opts)
      : model_(model), cfg_(cfg), opts_(opts), rng_(cfg.seed),
        adam_(model.params(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay}),
        grads_(model.params().zeros_like()) {
    cfg_.validate();
    if (opts_.out_dir) {
      fs::create_directories(*opts_.out_dir);
      const auto ck = checkpoint_path(*opts_.out_dir);
      if (opts_.resume && fs::exists(ck)) restore(load_checkpoint(ck));
    }
  }

  std::mt19937_64& rng() { return rng_; }
  nn::ParamSet& grads() { return grads_; }
  long start_step() const { return static_cast<long>(history_.size()); }

  /// Runs `body` once per remaining step; body fills grads() and returns the step log.
  Checkpoint run(const std::function<StepLog(long)>& body) {
    std::ofstream log_file;
    if (opts_.out_dir) {
      truncate_log(start_step());
      log_file.open(*opts_.out_dir / "train_log.jsonl", std::ios::app);
    }
    for (long step = start_step(); step < cfg_.max_steps; ++step) {
      grads_.set_zero();
      StepLog s;
      try {
        s = body(step);
      } catch (const NumericError&) {
        s.loss = std::numeric_limits<double>::quiet_NaN();
        s.step = step;
        abort_nan(s);
      }
      s.step = step;
      if (!std::isfinite(s.loss) || !grads_.all_finite()) abort_nan(s);
      s.grad_norm = nn::clip_global_norm(grads_, cfg_.grad_clip);
      adam_.step(model_.params(), grads_);
      if (!model_.params().all_finite()) abort_nan(s);
      history_.push_back(s.loss);
      if (log_file)
        log_file << nlohmann::json{{"step", s.step},       {"loss", s.loss},   {"grad_norm", s.grad_norm},
                                   {"z_mean", s.z_mean},   {"z_min", s.z_min}, {"z_max", s.z_max}}
                        .dump()
                 << '\n'
                 << std::flush;
      if (opts_.on_step) opts_.on_step(step, s.loss);
      if (opts_.out_dir && ((step + 1) % cfg_.checkpoint_every == 0 || step + 1 == cfg_.max_steps))
        save_checkpoint(snapshot(), checkpoint_path(*opts_.out_dir));
    }
    Checkpoint ck = snapshot();
    if (opts_.out_dir) save_checkpoint(ck, checkpoint_path(*opts_.out_dir));
    return ck;
  }

 private:
  Checkpoint snapshot() const {
    Checkpoint ck;
    ck.step = static_cast<long>(history_.size());
    ck.model = model_.config();
    ck.params = model_.params();
    ck.optimizer_steps = adam_.steps();
    ck.adam_m = adam_.first_moment();
    ck.adam_v = adam_.second_moment();
    ck.rng_state = rng_to_string(rng_);
    ck.config_hash = cfg_.hash();
    ck.method = to_string(cfg_.method);
    ck.loss_history = history_;
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.method != to_string(cfg_.method))
      throw InvalidArgument(opts_.out_dir->string() + " holds a " + ck.method + " checkpoint");
    if (ck.config_hash != cfg_.hash())
      throw InvalidArgument("checkpoint in " + opts_.out_dir->string() +
                            " was written with a different configuration; use a fresh directory");
    model_ = model_from_checkpoint(ck);
    adam_.restore(ck.optimizer_steps, ck.adam_m, ck.adam_v);
    rng_ = rng_from_string(ck.rng_state);
    history_ = ck.loss_history;
    log::info("resuming " + ck.method + " from step " + std::to_string(ck.step));
  }

  void truncate_log(long keep) const {
    const fs::path p = *opts_.out_dir / "train_log.jsonl";
    if (!fs::exists(p)) return;
    std::ifstream in(p);
    std::string line, kept;
    for (long i = 0; i < keep && std::getline(in, line); ++i) kept += line + "\n";
    in.close();
    write_file_atomic(p, kept);
  }

  [[noreturn]] void abort_nan(const StepLog& s) const {
    nlohmann::json dump = {{"step", s.step},
                           {"loss", std::isfinite(s.loss) ? nlohmann::json(s.loss) : nlohmann::json("non-finite")},
                           {"grads_finite", grads_.all_finite()},
                           {"params_finite", model_.params().all_finite()},
                           {"grad_norm", grads_.all_finite() ? grads_.l2_norm() : -1.0},
                           {"recent_losses", std::vector<double>(
                                history_.end() - std::min<std::size_t>(history_.size(), 20), history_.end())}};
    std::string where;
    if (opts_.out_dir) {
      const fs::path p = *opts_.out_dir / "nan_dump.json";
      write_file_atomic(p, dump.dump(2));
      where = "; diagnostics in " + p.string();
    }
    throw Error("non-finite loss or gradient at step " + std::to_string(s.step) + where);
  }

  Denoiser& model_;
  TrainConfig cfg_;
  RunOptions opts_;
  std::mt19937_64 rng_;
  nn::AdamW adam_;
  nn::ParamSet grads_;
  std::vector<double> history_;
};

inline Tensor gaussian_like(const Tensor& like, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor e(like.channels(), like.height(), like.width());
  for (float& v : e.values()) v = n(rng);
  return e;
}

}  // namespace detail

/// Standard ε-prediction training on (HQ, LQ) pairs. The positive prompt is the
/// HQ caption, replaced by the null prompt with probability prompt_dropout.
inline Checkpoint pretrain(Denoiser& model, const std::vector<PairedSample>& pairs, const TrainConfig& cfg,
                           const RunOptions& opts = {}, const Captioner& captioner = HistogramCaptioner()) {
  if (cfg.method != Method::pretrain) throw InvalidArgument("pretrain requires method=pretrain");
  if (pairs.empty()) throw InvalidArgument("pretrain: empty dataset");
  if (cfg.t_max != model.config().timesteps) throw InvalidArgument("t_max must equal the model's timesteps");
  const int res = model.config().resolution;
  std::vector<Tensor> targets;
  std::vector<ConditioningBundle> conds;
  for (const auto& p : pairs) {
    if (p.hq.height() != res || p.hq.width() != res)
      throw InvalidArgument("pair " + p.id + " HQ is not at working resolution");
    targets.push_back(to_model_space(p.hq.tensor()));
    auto c = ConditioningBundle::from_lq(p.lq, res);
    c.prompt = PromptVocab::encode(captioner.caption(p.hq.tensor()));
    conds.push_back(std::move(c));
  }
  const NoiseSchedule sched = linear_schedule(cfg.t_max);
  detail::TrainLoop loop(model, cfg, opts);
  DenoiserActivations acts;
  return loop.run([&](long) {
    auto& rng = loop.rng();
    std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
    std::uniform_int_distribution<int> tdist(1, cfg.t_max);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = pick(rng);
      const int t = tdist(rng);
      const Tensor eps = detail::gaussian_like(targets[i], rng);
      ConditioningBundle c = conds[i];
      if (u(rng) < cfg.prompt_dropout) c.prompt.clear();
      const Tensor xt = forward_noise(targets[i], t, eps, sched);
      const Tensor pred = model.forward(xt, t, c, &acts);
      Tensor g;
      loss += sft_loss(eps, pred, &g);
      for (float& v : g.values()) v /= static_cast<float>(cfg.batch_size);
      model.backward(acts, g, loop.grads());
    }
    return StepLog{0, loss / cfg.batch_size};
  });
}

/// Preference fine-tuning against a frozen reference.
///
/// Each step draws batch_size records; each record gets its own t and ε, shared
/// by its winner and loser. The step loss is the weight-normalized mean of the
/// record losses, so a policy equal to the reference scores exactly ln 2.
inline Checkpoint finetune(Denoiser& policy, const FrozenReference& reference,
                           const std::vector<PreferenceSample>& samples, const TrainConfig& cfg,
                           const RunOptions& opts = {}) {
  if (cfg.method == Method::pretrain) throw InvalidArgument("finetune requires dspo, diffusion-dpo or sft");
  if (samples.empty()) throw InvalidArgument("finetune: empty record set");
  if (cfg.t_max != policy.config().timesteps || cfg.t_max != reference.model().config().timesteps)
    throw InvalidArgument("t_max must equal the models' timesteps");
  for (const auto& s : samples) {
    if (cfg.method != Method::sft && s.loser.size() == 0) throw InvalidArgument("record " + s.key + " has no loser");
    if (cfg.method == Method::dspo && s.mask.count() == 0) throw InvalidArgument("record " + s.key + " lacks a mask");
  }
  const NoiseSchedule sched = linear_schedule(cfg.t_max);
  detail::TrainLoop loop(policy, cfg, opts);
  DenoiserActivations acts_w, acts_l;

  auto result = loop.run([&](long) {
    auto& rng = loop.rng();
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::uniform_int_distribution<int> tdist(1, cfg.t_max);
    std::vector<std::size_t> chosen(cfg.batch_size);
    for (auto& c : chosen) c = pick(rng);
    double weight_sum = 0.0;
    for (auto c : chosen) weight_sum += cfg.method == Method::dspo ? samples[c].weight : 1.0;
    const bool plain_mean = !(weight_sum > 0.0);

    StepLog log;
    log.z_min = std::numeric_limits<double>::infinity();
    log.z_max = -log.z_min;
    double loss = 0.0;
    for (auto c : chosen) {
      const auto& s = samples[c];
      const int t = tdist(rng);
      const Tensor eps = detail::gaussian_like(s.winner, rng);
      const Tensor xw = forward_noise(s.winner, t, eps, sched);
      if (cfg.method == Method::sft) {
        const Tensor pred = policy.forward(xw, t, s.cond, &acts_w);
        Tensor g;
        loss += sft_loss(eps, pred, &g) / cfg.batch_size;
        for (float& v : g.values()) v /= static_cast<float>(cfg.batch_size);
        policy.backward(acts_w, g, loop.grads());
        continue;
      }
      const Tensor xl = forward_noise(s.loser, t, eps, sched);
      NoisePredictionBatch<float> b;
      b.eps_true = eps;
      b.eps_theta_w = policy.forward(xw, t, s.cond, &acts_w);
      b.eps_theta_l = policy.forward(xl, t, s.cond, &acts_l);
      b.eps_ref_w = reference.model().forward(xw, t, s.cond);
      b.eps_ref_l = reference.model().forward(xl, t, s.cond);
      // Diffusion-DPO scores the whole image regardless of the record's instance.
      b.masks = {cfg.method == Method::dspo ? s.mask : Mask(s.winner.height(), s.winner.width(), true)};
      b.t = t;
      b.gamma = sched.gamma(t);
      b.beta = cfg.beta;
      b.T = cfg.t_max;
      b.reduction = cfg.reduction;
      b.weights = {1.0};
      const double share = plain_mean ? 1.0 / cfg.batch_size
                                      : (cfg.method == Method::dspo ? s.weight : 1.0) / weight_sum;
      LossGradients<float> g;
      const LossValue v = cfg.method == Method::dspo ? dspo_record_loss(b, &g) : diffusion_dpo_loss(b, &g);
      loss += share * v.total;
      for (float& x : g.eps_theta_w.values()) x *= static_cast<float>(share);
      for (float& x : g.eps_theta_l.values()) x *= static_cast<float>(share);
      const double z = v.inner_argument[0];
      log.z_mean += z / cfg.batch_size;
      log.z_min = std::min(log.z_min, z);
      log.z_max = std::max(log.z_max, z);
      policy.backward(acts_w, g.eps_theta_w, loop.grads());
      policy.backward(acts_l, g.eps_theta_l, loop.grads());
    }
    if (cfg.method == Method::sft) log.z_min = log.z_max = 0.0;
    log.loss = loss;
    return log;
  });
  if (!reference.intact()) throw Error("reference parameters changed during fine-tuning");
  return result;
}

/// Mean of the last `window` entries of a loss history.
inline double trailing_mean(const std::vector<double>& history, std::size_t window) {
  if (history.empty()) throw InvalidArgument("empty loss history");
  const std::size_t n = std::min(window, history.size());
  double s = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) s += history[i];
  return s / n;
}

/// Median of the last `window` entries; robust to the rare saturated batches
/// that dominate the mean at large β.
inline double trailing_median(const std::vector<double>& history, std::size_t window) {
  if (history.empty()) throw InvalidArgument("empty loss history");
  const std::size_t n = std::min(window, history.size());
  std::vector<double> tail(history.end() - n, history.end());
  const auto mid = tail.begin() + n / 2;
  std::nth_element(tail.begin(), mid, tail.end());
  if (n % 2) return *mid;
  return 0.5 * (*mid + *std::max_element(tail.begin(), mid));
}

}  // namespace dspo
