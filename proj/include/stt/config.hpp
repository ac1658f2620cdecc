#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stt {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// key=value text with `#` comments. Readers mark keys as used so leftover
// (unknown) keys can be rejected before any work starts.
class KeyValues {
public:
  KeyValues() = default;
  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

  // Throws ConfigError naming every key no reader asked for.
  void reject_unused() const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

private:
  const std::string* lookup(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

std::string join_sizes(const std::vector<std::size_t>& v);
std::string format_double(double v);

}  // namespace stt
