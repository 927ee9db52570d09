#pragma once

#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lsattn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { Bidirectional, Causal };

inline std::string_view to_string(Mode mode) { return mode == Mode::Causal ? "causal" : "bidirectional"; }

/// Hyperparameters of one long-short attention layer.
struct LSConfig {
  std::size_t n = 0;       // sequence length
  std::size_t d = 0;       // model width
  std::size_t h = 1;       // heads
  std::size_t w = 0;       // window segment size, even
  std::size_t r = 0;       // projection rank
  std::size_t l = 1;       // causal projection segment length
  Mode mode = Mode::Bidirectional;
  bool dual_ln = true;

  std::size_t head_dim() const { return d / h; }

  void validate() const {
    if (d == 0 || h == 0) throw ConfigError("config: d and h must be positive");
    if (d % h != 0) throw ConfigError("config: d=" + std::to_string(d) + " not divisible by h=" + std::to_string(h));
    if (w % 2 != 0) throw ConfigError("config: window size w must be even, got " + std::to_string(w));
    if (w == 0 && r == 0) throw ConfigError("config: w and r cannot both be zero");
    if (mode == Mode::Causal) {
      if (l == 0) throw ConfigError("config: causal mode requires l >= 1");
      if (2 * w < l) throw ConfigError("config: causal mode requires w >= l/2");
    }
  }
};

/// Hyperparameters used for character-level language modelling at full
/// scale; desk runs shrink these.
inline LSConfig char_lm_preset(std::size_t n, std::size_t d, std::size_t h) {
  LSConfig cfg;
  cfg.n = n;
  cfg.d = d;
  cfg.h = h;
  cfg.w = 512;
  cfg.l = 16;
  cfg.r = 1;
  cfg.mode = Mode::Causal;
  return cfg;
}

/// Parses `key = value` lines; `#` starts a comment. Later keys overwrite.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::string_view text) {
    KeyValueFile file;
    std::size_t line_no = 0;
    while (!text.empty()) {
      ++line_no;
      const auto eol = text.find('\n');
      std::string_view line = text.substr(0, eol);
      text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("presets: line " + std::to_string(line_no) + " is not `key = value`");
      }
      const auto key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("presets: empty key on line " + std::to_string(line_no));
      file.values_[std::string(key)] = std::string(trim(line.substr(eq + 1)));
    }
    return file;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("presets: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
  }

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string get(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      const auto v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("presets: `" + key + "` is not a non-negative integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError("presets: `" + key + "` is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError("presets: `" + key + "` is not a boolean: " + it->second);
  }

 private:
  static std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace lsattn
