#include "derain/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace derain {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string where(const std::string& source, int line) {
  return line > 0 ? source + ":" + std::to_string(line) : source;
}

}  // namespace

ConfigParseError::ConfigParseError(const std::string& source, int line, const std::string& message)
    : std::runtime_error(where(source, line) + ": " + message), line_(line) {}

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& source) {
  KeyValueFile kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigParseError(source, number, "expected 'key = value', got '" + line + "'");
    }
    Entry e;
    e.key = trim(line.substr(0, eq));
    e.value = trim(line.substr(eq + 1));
    e.line = number;
    if (e.key.empty()) throw ConfigParseError(source, number, "missing key before '='");
    for (const Entry& prev : kv.entries_) {
      if (prev.key == e.key) {
        throw ConfigParseError(source, number,
                               "duplicate key '" + e.key + "' (first set on line " +
                                   std::to_string(prev.line) + ")");
      }
    }
    kv.entries_.push_back(std::move(e));
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigParseError(path.string(), 0, "cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

KeyValueFile::Entry* KeyValueFile::find(const std::string& key) {
  for (Entry& e : entries_) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

const KeyValueFile::Entry* KeyValueFile::find(const std::string& key) const {
  for (const Entry& e : entries_) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

void KeyValueFile::fail(const Entry& e, const std::string& what) const {
  throw ConfigParseError(source_, e.line, "key '" + e.key + "': " + what + ", got '" + e.value + "'");
}

bool KeyValueFile::has(const std::string& key) const { return find(key) != nullptr; }

int KeyValueFile::line_of(const std::string& key) const {
  const Entry* e = find(key);
  return e == nullptr ? 0 : e->line;
}

std::optional<std::string> KeyValueFile::raw(const std::string& key) {
  Entry* e = find(key);
  if (e == nullptr) return std::nullopt;
  e->used = true;
  return e->value;
}

std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) {
  return raw(key).value_or(fallback);
}

double KeyValueFile::get_double(const std::string& key, double fallback) {
  Entry* e = find(key);
  if (e == nullptr) return fallback;
  e->used = true;
  double v = 0;
  const char* end = e->value.data() + e->value.size();
  auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(*e, "expected a number");
  return v;
}

int KeyValueFile::get_int(const std::string& key, int fallback) {
  Entry* e = find(key);
  if (e == nullptr) return fallback;
  e->used = true;
  int v = 0;
  const char* end = e->value.data() + e->value.size();
  auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(*e, "expected an integer");
  return v;
}

std::uint64_t KeyValueFile::get_u64(const std::string& key, std::uint64_t fallback) {
  Entry* e = find(key);
  if (e == nullptr) return fallback;
  e->used = true;
  std::uint64_t v = 0;
  const char* end = e->value.data() + e->value.size();
  auto [ptr, ec] = std::from_chars(e->value.data(), end, v);
  if (ec != std::errc() || ptr != end) fail(*e, "expected a non-negative integer");
  return v;
}

bool KeyValueFile::get_bool(const std::string& key, bool fallback) {
  Entry* e = find(key);
  if (e == nullptr) return fallback;
  e->used = true;
  if (e->value == "true" || e->value == "1" || e->value == "on" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "off" || e->value == "no") return false;
  fail(*e, "expected true or false");
}

void KeyValueFile::reject_unused() const {
  for (const Entry& e : entries_) {
    if (!e.used) throw ConfigParseError(source_, e.line, "unknown key '" + e.key + "'");
  }
}

}  // namespace derain
