#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

namespace hello {

// The scalar knobs shared across training stages. Everything else lives in
// the structured config and is read where used.
struct HyperParams {
  double lambda_ce = 0.1;  // CE weight in the projector transfer objective
  double beta_ce = 0.1;    // CE weight in the downstream student objective
  double alpha_lr = 0.01;  // downstream student learning rate
  int64_t epochs_K = 400;  // downstream iteration count
  uint64_t seed = 0;

  void validate() const;
};

// Structured configuration: one JSON file, env var HELLO_SEED on top of it,
// CLI overrides on top of that. Keys are addressed by dotted paths.
class Config {
 public:
  Config() : root_(nlohmann::json::object()) {}
  explicit Config(nlohmann::json root);

  static Config from_file(const std::string& path);

  // Layering, lowest to highest priority: file, HELLO_SEED, CLI overrides.
  void apply_env();
  // value is parsed as JSON when possible, kept as a string otherwise.
  void set(const std::string& dotted_path, const std::string& value);

  bool has(const std::string& dotted_path) const;
  double get_num(const std::string& dotted_path, double def) const;
  double require_num(const std::string& dotted_path) const;
  int64_t get_int(const std::string& dotted_path, int64_t def) const;
  bool get_bool(const std::string& dotted_path, bool def) const;
  std::string get_str(const std::string& dotted_path, const std::string& def) const;
  std::string require_str(const std::string& dotted_path) const;
  std::vector<int64_t> get_int_list(const std::string& dotted_path,
                                    std::vector<int64_t> def) const;
  std::vector<std::string> get_str_list(const std::string& dotted_path,
                                        std::vector<std::string> def) const;

  HyperParams hyper() const;

  const nlohmann::json& root() const { return root_; }

  // Canonical text form (sorted keys, no whitespace) and its 64-bit hash.
  // Artifacts embed the hash so stages refuse to mix mismatched runs.
  std::string canonical() const;
  uint64_t hash() const;

 private:
  const nlohmann::json* find(const std::string& dotted_path) const;
  nlohmann::json root_;
};

}  // namespace hello
