#include "hello/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "hello/common.hpp"

namespace hello {

void HyperParams::validate() const {
  if (!std::isfinite(lambda_ce) || lambda_ce < 0.0)
    throw ConfigError("lambda_ce must be a finite non-negative real");
  if (!std::isfinite(beta_ce) || beta_ce < 0.0)
    throw ConfigError("beta_ce must be a finite non-negative real");
  if (!std::isfinite(alpha_lr) || alpha_lr <= 0.0)
    throw ConfigError("alpha_lr must be a finite positive real");
  if (epochs_K < 1) throw ConfigError("epochs_K must be >= 1");
}

Config::Config(nlohmann::json root) : root_(std::move(root)) {
  if (!root_.is_object()) throw ConfigError("config root must be an object");
}

Config Config::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return Config(std::move(j));
}

void Config::apply_env() {
  const char* s = std::getenv("HELLO_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  unsigned long long v = std::strtoull(s, &end, 10);
  if (!end || *end != '\0') throw ConfigError("HELLO_SEED is not an integer");
  root_["seed"] = static_cast<uint64_t>(v);
}

void Config::set(const std::string& dotted_path, const std::string& value) {
  if (dotted_path.empty()) throw ConfigError("empty config key");
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
    if (!parsed.is_number() && !parsed.is_boolean() && !parsed.is_array() &&
        !parsed.is_string() && !parsed.is_null())
      parsed = value;  // objects stay out of flag overrides
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;
  }
  nlohmann::json* node = &root_;
  std::size_t start = 0;
  for (;;) {
    std::size_t dot = dotted_path.find('.', start);
    std::string key = dotted_path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("malformed config key: " + dotted_path);
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    if (!node->contains(key)) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    if (!node->is_object())
      throw ConfigError("config key " + dotted_path + " crosses a non-object");
    start = dot + 1;
  }
}

const nlohmann::json* Config::find(const std::string& dotted_path) const {
  const nlohmann::json* node = &root_;
  std::size_t start = 0;
  for (;;) {
    std::size_t dot = dotted_path.find('.', start);
    std::string key = dotted_path.substr(start, dot - start);
    auto it = node->find(key);
    if (it == node->end()) return nullptr;
    node = &*it;
    if (dot == std::string::npos) return node;
    if (!node->is_object()) return nullptr;
    start = dot + 1;
  }
}

bool Config::has(const std::string& dotted_path) const {
  return find(dotted_path) != nullptr;
}

double Config::get_num(const std::string& dotted_path, double def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_number()) throw ConfigError("config key " + dotted_path + " must be a number");
  return n->get<double>();
}

double Config::require_num(const std::string& dotted_path) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) throw ConfigError("missing required config key: " + dotted_path);
  if (!n->is_number()) throw ConfigError("config key " + dotted_path + " must be a number");
  return n->get<double>();
}

int64_t Config::get_int(const std::string& dotted_path, int64_t def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_number_integer())
    throw ConfigError("config key " + dotted_path + " must be an integer");
  return n->get<int64_t>();
}

bool Config::get_bool(const std::string& dotted_path, bool def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_boolean()) throw ConfigError("config key " + dotted_path + " must be a boolean");
  return n->get<bool>();
}

std::string Config::get_str(const std::string& dotted_path,
                            const std::string& def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_string()) throw ConfigError("config key " + dotted_path + " must be a string");
  return n->get<std::string>();
}

std::string Config::require_str(const std::string& dotted_path) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) throw ConfigError("missing required config key: " + dotted_path);
  if (!n->is_string()) throw ConfigError("config key " + dotted_path + " must be a string");
  return n->get<std::string>();
}

std::vector<int64_t> Config::get_int_list(const std::string& dotted_path,
                                          std::vector<int64_t> def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_array()) throw ConfigError("config key " + dotted_path + " must be an array");
  std::vector<int64_t> out;
  for (const auto& e : *n) {
    if (!e.is_number_integer())
      throw ConfigError("config key " + dotted_path + " must hold integers");
    out.push_back(e.get<int64_t>());
  }
  return out;
}

std::vector<std::string> Config::get_str_list(const std::string& dotted_path,
                                              std::vector<std::string> def) const {
  const nlohmann::json* n = find(dotted_path);
  if (!n) return def;
  if (!n->is_array()) throw ConfigError("config key " + dotted_path + " must be an array");
  std::vector<std::string> out;
  for (const auto& e : *n) {
    if (!e.is_string())
      throw ConfigError("config key " + dotted_path + " must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

HyperParams Config::hyper() const {
  HyperParams hp;
  hp.lambda_ce = get_num("transfer.lambda_ce", hp.lambda_ce);
  hp.beta_ce = get_num("student.beta_ce", hp.beta_ce);
  hp.alpha_lr = get_num("student.alpha_lr", hp.alpha_lr);
  hp.epochs_K = get_int("student.epochs_K", hp.epochs_K);
  hp.seed = static_cast<uint64_t>(get_int("seed", 0));
  hp.validate();
  return hp;
}

std::string Config::canonical() const {
  // nlohmann objects iterate in sorted key order, so dump() is canonical.
  return root_.dump();
}

uint64_t Config::hash() const {
  std::string c = canonical();
  return fnv1a64(c.data(), c.size());
}

}  // namespace hello
