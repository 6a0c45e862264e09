#pragma once

#include "cocon/autograd.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace cocon {

/// Named, ordered collection of trainable leaves. Order is registration
/// order and defines the on-disk layout.
class ParameterSet {
 public:
  ag::Var add(std::string name, ag::Matrix init);
  /// Glorot-uniform initialized rows x cols parameter.
  ag::Var add_glorot(std::string name, Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);
  ag::Var add_zeros(std::string name, Eigen::Index rows, Eigen::Index cols);

  std::size_t size() const { return vars_.size(); }
  const std::vector<ag::Var>& vars() const { return vars_; }
  const std::vector<std::string>& names() const { return names_; }
  ag::Var get(const std::string& name) const;

  void zero_grad();
  /// Toggles gradient tracking for every parameter (frozen sets get no grads
  /// but still pass gradients to their inputs).
  void set_trainable(bool trainable);
  bool all_finite() const;
  std::size_t scalar_count() const;

  /// Flat copy of all values in registration order.
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

  /// SHA-256 over names, shapes and raw values.
  std::string hash() const;

  /// Binary format: "CCPR" magic, u32 count, then per parameter
  /// u32 name length, name bytes, i64 rows, i64 cols, rows*cols f64 (little endian).
  void save(const std::filesystem::path& path) const;
  /// Loads values into an already-registered set; names and shapes must match.
  void load(const std::filesystem::path& path);

 private:
  std::vector<std::string> names_;
  std::vector<ag::Var> vars_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamConfig config);
  /// Applies one update using the accumulated gradients, then zeroes them.
  void step();
  void set_lr(double lr) { config_.lr = lr; }

 private:
  const ParameterSet& params_;
  AdamConfig config_;
  std::vector<ag::Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace cocon
