#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace derain {

/// Malformed config text. line() is 1-based, 0 when not tied to a line.
class ConfigParseError : public std::runtime_error {
 public:
  ConfigParseError(const std::string& source, int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
/// A repeated key is a parse error.
class KeyValueFile {
 public:
  struct Entry {
    std::string key;
    std::string value;
    int line = 0;
    bool used = false;
  };

  static KeyValueFile parse(const std::string& text, const std::string& source = "<config>");
  static KeyValueFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  /// Line a key was set on, 0 when absent.
  int line_of(const std::string& key) const;
  std::optional<std::string> raw(const std::string& key);

  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key, double fallback);
  int get_int(const std::string& key, int fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);

  /// Throws for the first key that no getter asked for.
  void reject_unused() const;

  const std::string& source() const { return source_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  Entry* find(const std::string& key);
  const Entry* find(const std::string& key) const;
  [[noreturn]] void fail(const Entry& e, const std::string& what) const;

  std::string source_;
  std::vector<Entry> entries_;
};

}  // namespace derain
