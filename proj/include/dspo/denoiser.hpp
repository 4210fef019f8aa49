#pragma once

#include <json.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "dspo/image.hpp"
#include "dspo/nn.hpp"
#include "dspo/prompt_vocab.hpp"

namespace dspo {

/// Images live in [0,1]; the diffusion process runs in [-1,1].
inline Tensor to_model_space(const Tensor& img) {
  Tensor out = img;
  for (float& v : out.values()) v = 2.0f * v - 1.0f;
  return out;
}

inline RasterImage from_model_space(const Tensor& x) {
  Tensor out = x;
  for (float& v : out.values()) v = 0.5f * (v + 1.0f);
  return RasterImage::from_clamped(std::move(out));
}

struct DenoiserConfig {
  int resolution = 64;  // working resolution (square)
  int base_channels = 16;
  int mid_channels = 32;
  int embed_dim = 32;
  int hidden_dim = 64;
  int vocab_size = PromptVocab::kSize;
  int timesteps = 100;  // schedule T, used to scale the timestep embedding
  std::uint64_t seed = 0;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"resolution", c.resolution},   {"base_channels", c.base_channels},
       {"mid_channels", c.mid_channels}, {"embed_dim", c.embed_dim},
       {"hidden_dim", c.hidden_dim},   {"vocab_size", c.vocab_size},
       {"timesteps", c.timesteps},     {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.resolution = j.at("resolution");
  c.base_channels = j.at("base_channels");
  c.mid_channels = j.at("mid_channels");
  c.embed_dim = j.at("embed_dim");
  c.hidden_dim = j.at("hidden_dim");
  c.vocab_size = j.at("vocab_size");
  c.timesteps = j.at("timesteps");
  c.seed = j.at("seed");
}

/// Everything the denoiser is conditioned on besides x_t and t.
struct ConditioningBundle {
  Tensor lq_upsampled;               // model space, working resolution
  std::vector<int> prompt;           // empty = null prompt
  std::vector<int> negative_prompt;  // empty = none
  float adapter_scale = 1.0f;        // strength of the LQ conditioning path

  static ConditioningBundle from_lq(const RasterImage& lq, int resolution) {
    if (resolution % lq.height() || resolution % lq.width())
      throw InvalidArgument("LQ size must divide the working resolution");
    ConditioningBundle c;
    c.lq_upsampled = to_model_space(bicubic_resize(lq.tensor(), resolution, resolution));
    return c;
  }
};

/// Intermediate values of one forward pass, consumed by backward.
struct DenoiserActivations {
  AlignedVector<float> embed_in, hidden_pre, hidden, biases;
  std::vector<int> prompt, negative_prompt;
  AlignedVector<float> cols1, cols2, cols3, cols4, cols5;
  Tensor a1, s1, a2, s2, a3, s3, a4, s4;
  int height = 0, width = 0;
};

/// Small conditional encoder–decoder predicting ε from (x_t, t, LQ, prompts).
///
///   [x_t ‖ LQ] → conv(c1) → down conv(c2, /2) → conv(c2) → up ×2 → conv(c1) + skip → conv(3)
///
/// The timestep and prompt embeddings feed an MLP that emits per-channel biases for
/// the first three convolutions. Negative prompts use a separate table that
/// starts at zero, so a freshly pre-trained model ignores them.
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.resolution % 2) throw InvalidArgument("working resolution must be even");
    prompt_table_ = params_.add("prompt_table", {cfg_.vocab_size, cfg_.embed_dim});
    negative_table_ = params_.add("negative_table", {cfg_.vocab_size, cfg_.embed_dim});
    mlp1_ = nn::Linear::declare(params_, "embed.fc1", cfg_.embed_dim, cfg_.hidden_dim);
    mlp2_ = nn::Linear::declare(params_, "embed.fc2", cfg_.hidden_dim, bias_width());
    conv_in_ = nn::Conv3x3::declare(params_, "conv_in", 6, cfg_.base_channels);
    conv_down_ = nn::Conv3x3::declare(params_, "conv_down", cfg_.base_channels, cfg_.mid_channels, 2);
    conv_mid_ = nn::Conv3x3::declare(params_, "conv_mid", cfg_.mid_channels, cfg_.mid_channels);
    conv_up_ = nn::Conv3x3::declare(params_, "conv_up", cfg_.mid_channels, cfg_.base_channels);
    conv_out_ = nn::Conv3x3::declare(params_, "conv_out", cfg_.base_channels, 3);

    std::mt19937_64 rng(cfg_.seed);
    std::normal_distribution<float> n(0.0f, 0.1f);
    for (float& v : params_[prompt_table_].values) v = n(rng);
    mlp1_.init(params_, rng);
    mlp2_.init(params_, rng, 0.5f);
    conv_in_.init(params_, rng);
    conv_down_.init(params_, rng);
    conv_mid_.init(params_, rng);
    conv_up_.init(params_, rng);
    conv_out_.init(params_, rng, 0.5f);
  }

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::size_t parameter_count() const { return params_.total_size(); }

  Tensor forward(const Tensor& x_t, int t, const ConditioningBundle& cond,
                 DenoiserActivations* keep = nullptr) const {
    const int res = cfg_.resolution;
    if (x_t.channels() != 3 || x_t.height() != res || x_t.width() != res)
      throw InvalidArgument("x_t " + x_t.shape_string() + " does not match working resolution " +
                            std::to_string(res));
    if (!cond.lq_upsampled.same_shape(x_t))
      throw InvalidArgument("conditioning LQ " + cond.lq_upsampled.shape_string() +
                            " does not match x_t " + x_t.shape_string());
    if (t < 1 || t > cfg_.timesteps) throw InvalidArgument("timestep out of range");
    check_tokens(cond.prompt);
    check_tokens(cond.negative_prompt);

    DenoiserActivations local;
    DenoiserActivations& a = keep ? *keep : local;
    a.height = x_t.height();
    a.width = x_t.width();
    a.prompt = cond.prompt;
    a.negative_prompt = cond.negative_prompt;

    a.embed_in = timestep_features(t);
    add_token_mean(prompt_table_, cond.prompt, true, a.embed_in);
    add_token_mean(negative_table_, cond.negative_prompt, false, a.embed_in);
    a.hidden_pre = mlp1_.forward(params_, a.embed_in);
    a.hidden = nn::silu_copy(a.hidden_pre);
    a.biases = mlp2_.forward(params_, a.hidden);

    Tensor x_in(6, x_t.height(), x_t.width());
    std::copy(x_t.values().begin(), x_t.values().end(), x_in.values().begin());
    for (std::size_t i = 0; i < cond.lq_upsampled.size(); ++i)
      x_in[x_t.size() + i] = cond.adapter_scale * cond.lq_upsampled[i];

    const int c1 = cfg_.base_channels, c2 = cfg_.mid_channels;
    a.a1 = conv_in_.forward(params_, x_in, a.cols1);
    add_channel_bias(a.a1, a.biases.data());
    a.s1 = nn::silu_copy(a.a1);
    a.a2 = conv_down_.forward(params_, a.s1, a.cols2);
    add_channel_bias(a.a2, a.biases.data() + c1);
    a.s2 = nn::silu_copy(a.a2);
    a.a3 = conv_mid_.forward(params_, a.s2, a.cols3);
    add_channel_bias(a.a3, a.biases.data() + c1 + c2);
    a.s3 = nn::silu_copy(a.a3);
    a.a4 = conv_up_.forward(params_, nn::upsample_nearest2(a.s3), a.cols4);
    for (std::size_t i = 0; i < a.a4.size(); ++i) a.a4[i] += a.s1[i];
    a.s4 = nn::silu_copy(a.a4);
    return conv_out_.forward(params_, a.s4, a.cols5);
  }

  /// Accumulates ∂L/∂params into `grads` given ∂L/∂ε̂.
  void backward(const DenoiserActivations& a, const Tensor& d_eps, nn::ParamSet& grads) const {
    const int c1 = cfg_.base_channels, c2 = cfg_.mid_channels;
    const int h = a.height, w = a.width;
    Tensor da4 = conv_out_.backward(params_, a.cols5, d_eps, h, w, grads);
    nn::silu_backward(a.a4, da4);
    Tensor ds1 = da4;  // skip connection
    Tensor du = conv_up_.backward(params_, a.cols4, da4, h, w, grads);
    Tensor da3 = nn::upsample_nearest2_backward(du);
    nn::silu_backward(a.a3, da3);
    AlignedVector<float> dbias(a.biases.size(), 0.0f);
    accumulate_channel_sums(da3, dbias.data() + c1 + c2);
    Tensor da2 = conv_mid_.backward(params_, a.cols3, da3, da3.height(), da3.width(), grads);
    nn::silu_backward(a.a2, da2);
    accumulate_channel_sums(da2, dbias.data() + c1);
    Tensor ds1b = conv_down_.backward(params_, a.cols2, da2, h, w, grads);
    for (std::size_t i = 0; i < ds1.size(); ++i) ds1[i] += ds1b[i];
    nn::silu_backward(a.a1, ds1);
    accumulate_channel_sums(ds1, dbias.data());
    conv_in_.backward(params_, a.cols1, ds1, h, w, grads, false);

    AlignedVector<float> dhidden = mlp2_.backward(params_, a.hidden, dbias, grads);
    for (std::size_t i = 0; i < dhidden.size(); ++i) dhidden[i] *= nn::silu_grad(a.hidden_pre[i]);
    const AlignedVector<float> dembed = mlp1_.backward(params_, a.embed_in, dhidden, grads);
    scatter_token_grad(prompt_table_, a.prompt, true, dembed, grads);
    scatter_token_grad(negative_table_, a.negative_prompt, false, dembed, grads);
  }

 private:
  int bias_width() const { return cfg_.base_channels + 2 * cfg_.mid_channels; }

  void check_tokens(const std::vector<int>& tokens) const {
    for (int id : tokens)
      if (id < 1 || id >= cfg_.vocab_size) throw InvalidArgument("prompt token out of range");
  }

  AlignedVector<float> timestep_features(int t) const {
    const int half = cfg_.embed_dim / 2;
    const double scaled = t * 1000.0 / cfg_.timesteps;
    AlignedVector<float> e(cfg_.embed_dim, 0.0f);
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      e[i] = static_cast<float>(std::sin(scaled * freq));
      e[half + i] = static_cast<float>(std::cos(scaled * freq));
    }
    return e;
  }

  void add_token_mean(std::size_t table, const std::vector<int>& tokens, bool null_row,
                      AlignedVector<float>& out) const {
    const float* rows = params_.data(table);
    const int d = cfg_.embed_dim;
    if (tokens.empty()) {
      if (null_row)
        for (int k = 0; k < d; ++k) out[k] += rows[PromptVocab::kNull * d + k];
      return;
    }
    const float inv = 1.0f / static_cast<float>(tokens.size());
    for (int id : tokens)
      for (int k = 0; k < d; ++k) out[k] += inv * rows[id * d + k];
  }

  void scatter_token_grad(std::size_t table, const std::vector<int>& tokens, bool null_row,
                          const AlignedVector<float>& dembed, nn::ParamSet& grads) const {
    float* rows = grads.data(table);
    const int d = cfg_.embed_dim;
    if (tokens.empty()) {
      if (null_row)
        for (int k = 0; k < d; ++k) rows[PromptVocab::kNull * d + k] += dembed[k];
      return;
    }
    const float inv = 1.0f / static_cast<float>(tokens.size());
    for (int id : tokens)
      for (int k = 0; k < d; ++k) rows[id * d + k] += inv * dembed[k];
  }

  static void add_channel_bias(Tensor& x, const float* bias) {
    for (int c = 0; c < x.channels(); ++c)
      for (float& v : x.channel(c)) v += bias[c];
  }

  static void accumulate_channel_sums(const Tensor& x, float* out) {
    for (int c = 0; c < x.channels(); ++c) {
      double s = 0.0;
      for (float v : x.channel(c)) s += v;
      out[c] += static_cast<float>(s);
    }
  }

  DenoiserConfig cfg_;
  nn::ParamSet params_;
  std::size_t prompt_table_ = 0, negative_table_ = 0;
  nn::Linear mlp1_, mlp2_;
  nn::Conv3x3 conv_in_, conv_down_, conv_mid_, conv_up_, conv_out_;
};

/// ε_θ(x_t, t | conditioning).
inline Tensor predict_noise(const Denoiser& model, const Tensor& x_t, int t, const ConditioningBundle& cond) {
  return model.forward(x_t, t, cond);
}

}  // namespace dspo
