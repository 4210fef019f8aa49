#pragma once

#include <array>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dspo/common.hpp"

namespace dspo {

/// Token vocabulary shared by the builtin captioner and the denoiser's prompt
/// tables. Id 0 is the reserved null prompt.
struct PromptVocab {
  static constexpr int kNull = 0;
  static constexpr int kHues = 6;
  static constexpr std::array<std::string_view, kHues> kHueNames = {"red",  "yellow", "green",
                                                                    "cyan", "blue",   "magenta"};
  static constexpr std::array<std::string_view, 3> kTextureNames = {"smooth", "textured", "busy"};

  // 1..12 chromatic (dark/light × hue), 13 black, 14 white, 15..17 texture.
  static constexpr int kBlack = 1 + 2 * kHues;
  static constexpr int kWhite = kBlack + 1;
  static constexpr int kTextureBase = kWhite + 1;
  static constexpr int kSize = kTextureBase + 3;

  static int chromatic(bool light, int hue) { return 1 + (light ? kHues : 0) + hue; }
  static int texture(int level) { return kTextureBase + level; }

  static std::string name(int id) {
    if (id == kNull) return "<null>";
    if (id >= 1 && id < kBlack) {
      const bool light = id - 1 >= kHues;
      return std::string(light ? "light-" : "dark-") + std::string(kHueNames[(id - 1) % kHues]);
    }
    if (id == kBlack) return "black";
    if (id == kWhite) return "white";
    if (id >= kTextureBase && id < kSize) return std::string(kTextureNames[id - kTextureBase]);
    throw InvalidArgument("token id out of range: " + std::to_string(id));
  }

  static int id(std::string_view token) {
    for (int i = 1; i < kSize; ++i)
      if (name(i) == token) return i;
    throw InvalidArgument("unknown prompt token '" + std::string(token) + "'");
  }

  /// Whitespace-separated tokens → ids (duplicates kept, so repetition acts as weight).
  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) ids.push_back(id(tok));
    return ids;
  }

  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    for (int i : ids) {
      if (!out.empty()) out += ' ';
      out += name(i);
    }
    return out;
  }
};

}  // namespace dspo
