#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "icmu/rng.hpp"
#include "icmu/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
  const double scale = std::max(std::max(std::fabs(a), std::fabs(b)), 1e-7);
  return std::fabs(a - b) / scale;
}

inline icmu::Tensor random_tensor(icmu::Shape shape, icmu::Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
  std::vector<double> values(static_cast<size_t>(icmu::numel(shape)));
  for (auto& v : values) v = rng.uniform(lo, hi);
  return icmu::Tensor(std::move(shape), std::move(values));
}

// Central-difference check of every sampled coordinate of each tensor in
// `wrt` against the tape gradient of loss_builder(). The builder is re-run
// with no active tape for the finite-difference evaluations, so it must be a
// pure function of the current tensor values.
struct GradCheck {
  double h = 1e-5;
  double tol = 1e-4;
  int max_coords_per_tensor = 0;  // 0 = all coordinates
  uint64_t coord_seed = 17;
  // Coordinates whose gradient sits below the finite-difference noise floor
  // cannot measure relative error meaningfully; the floor keeps them from
  // reporting noise while errors on real-sized coordinates still register.
  double denom_floor = 1e-4;
};

inline double max_grad_fd_error(std::vector<icmu::Tensor> wrt,
                                const std::function<icmu::Tensor()>& loss_builder,
                                const GradCheck& opts = {}) {
  using icmu::Tape;
  using icmu::Tensor;
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = loss_builder();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (auto& t : wrt) analytic.push_back(t.grad());

  icmu::Rng coord_rng(opts.coord_seed);
  double worst = 0.0;
  for (size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& values = wrt[ti].values();
    std::vector<int> coords;
    if (opts.max_coords_per_tensor <= 0 ||
        static_cast<int>(values.size()) <= opts.max_coords_per_tensor) {
      for (size_t i = 0; i < values.size(); ++i) coords.push_back(static_cast<int>(i));
    } else {
      for (int i = 0; i < opts.max_coords_per_tensor; ++i) {
        coords.push_back(static_cast<int>(coord_rng.uniform_int(static_cast<long>(values.size()))));
      }
    }
    for (int c : coords) {
      const double orig = values[static_cast<size_t>(c)];
      values[static_cast<size_t>(c)] = orig + opts.h;
      const double fp = loss_builder().value();
      values[static_cast<size_t>(c)] = orig - opts.h;
      const double fm = loss_builder().value();
      values[static_cast<size_t>(c)] = orig;
      const double fd = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[ti][static_cast<size_t>(c)];
      const double scale = std::max(std::max(std::fabs(a), std::fabs(fd)), opts.denom_floor);
      worst = std::max(worst, std::fabs(a - fd) / scale);
    }
  }
  return worst;
}

// Scratch directory removed on scope exit.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto candidate = base / (tag + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path_ = candidate;
        return;
      }
    }
    std::abort();
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
  std::filesystem::path path_;
};

}  // namespace testutil
