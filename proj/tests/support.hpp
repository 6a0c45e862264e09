#pragma once

#include "cocon/autograd.hpp"
#include "cocon/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

namespace cocon::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cocon-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Turn turn(int speaker, const std::string& text) {
  Turn t;
  t.speaker = speaker;
  t.text = text;
  t.tokens = tokenize(text);
  return t;
}

/// Dialogue whose turn j (1-based) reads "w<j>".
inline Dialogue numbered_dialogue(const std::string& id, int turns) {
  Dialogue d;
  d.id = id;
  for (int j = 1; j <= turns; ++j) d.turns.push_back(turn((j - 1) % 2, "w" + std::to_string(j)));
  return d;
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient of `loss` with central differences for
/// every entry of every var (at most `max_entries` per var, evenly spread).
/// The relative error uses max(|a|, |n|, floor) as denominator.
inline GradCheck check_gradients(const std::function<ag::Var()>& loss, const std::vector<ag::Var>& vars,
                                 double h = 1e-6, std::size_t max_entries = 40, double floor = 1e-6) {
  for (const auto& v : vars) v.node()->grad.resize(0, 0);
  ag::Var out = loss();
  ag::backward(out);
  GradCheck r;
  for (const auto& v : vars) {
    ag::Matrix analytic = v.node()->has_grad() ? v.node()->grad : ag::Matrix::Zero(v.rows(), v.cols());
    const auto n = v.node()->value.size();
    const auto stride = std::max<Eigen::Index>(1, n / static_cast<Eigen::Index>(max_entries));
    for (Eigen::Index i = 0; i < n; i += stride) {
      double& x = v.node()->value.data()[i];
      const double orig = x;
      x = orig + h;
      double up = loss().scalar();
      x = orig - h;
      double down = loss().scalar();
      x = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace cocon::test
