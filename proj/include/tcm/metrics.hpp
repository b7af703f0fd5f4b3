#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcm {

// One kernel's config sweep: ground-truth runtimes and model outputs
// (scores for the tile task, cycles for regression).
struct KernelEval {
  std::string kernel_id;
  std::vector<double> true_runtimes;
  std::vector<double> predicted;
};

// Argmin of predictions; ties break toward the smallest config index.
inline int predicted_best_index(const std::vector<double>& predicted) {
  if (predicted.empty()) throw std::invalid_argument("empty prediction list");
  int best = 0;
  for (int i = 1; i < static_cast<int>(predicted.size()); ++i)
    if (predicted[i] < predicted[best]) best = i;
  return best;
}

// Eq-2 style program metric: totals of per-kernel regret over totals of
// per-kernel best runtimes, in percent.
inline double tile_size_ape(const std::vector<KernelEval>& kernels) {
  if (kernels.empty()) throw std::invalid_argument("tile_size_ape: empty program");
  double regret = 0.0, best_total = 0.0;
  for (const KernelEval& k : kernels) {
    if (k.true_runtimes.empty() || k.true_runtimes.size() != k.predicted.size())
      throw std::invalid_argument("tile_size_ape: malformed kernel eval");
    double best = *std::min_element(k.true_runtimes.begin(), k.true_runtimes.end());
    double chosen = k.true_runtimes[predicted_best_index(k.predicted)];
    regret += std::abs(chosen - best);
    best_total += best;
  }
  return 100.0 * regret / best_total;
}

// Tie-adjusted Kendall tau-b by direct pair counting. All-tied input on
// either side has no defined correlation and reports as missing.
inline std::optional<double> kendall_tau(const std::vector<double>& x,
                                         const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("kendall_tau needs two equal lists of size >= 2");
  long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
  std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) {
        ++ties_x;
        ++ties_y;
      } else if (dx == 0.0) {
        ++ties_x;
      } else if (dy == 0.0) {
        ++ties_y;
      } else if ((dx > 0.0) == (dy > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  long long n0 = static_cast<long long>(n) * (n - 1) / 2;
  if (ties_x == n0 || ties_y == n0) return std::nullopt;
  double denom = std::sqrt(static_cast<double>(n0 - ties_x)) *
                 std::sqrt(static_cast<double>(n0 - ties_y));
  return (concordant - discordant) / denom;
}

// Mean absolute percentage error over kernels at or above the runtime
// filter; missing when nothing passes the filter.
inline std::optional<double> mape(const std::vector<double>& predicted,
                                  const std::vector<double>& truth,
                                  double min_runtime_filter) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("mape: length mismatch");
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] <= 0.0) throw std::invalid_argument("mape: nonpositive target");
    if (truth[i] < min_runtime_filter) continue;
    sum += 100.0 * std::abs(predicted[i] - truth[i]) / truth[i];
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty list");
  std::sort(values.begin(), values.end());
  double idx = p / 100.0 * (values.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(idx));
  std::size_t hi = static_cast<std::size_t>(std::ceil(idx));
  double frac = idx - lo;
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

struct Aggregate {
  double median = std::numeric_limits<double>::quiet_NaN();
  double mean = std::numeric_limits<double>::quiet_NaN();
  double geomean = std::numeric_limits<double>::quiet_NaN();
  int count = 0;    // values aggregated
  int missing = 0;  // values excluded as missing
};

inline Aggregate aggregate_values(const std::vector<std::optional<double>>& values) {
  Aggregate a;
  std::vector<double> v;
  for (const auto& o : values) {
    if (o.has_value()) v.push_back(*o);
    else ++a.missing;
  }
  a.count = static_cast<int>(v.size());
  if (v.empty()) return a;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  a.median = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  double sum = 0.0;
  for (double x : v) sum += x;
  a.mean = sum / n;
  bool positive = true;
  double logsum = 0.0;
  for (double x : v) {
    if (x <= 0.0) {
      positive = false;
      break;
    }
    logsum += std::log(x);
  }
  a.geomean = positive ? std::exp(logsum / n)
                       : std::numeric_limits<double>::quiet_NaN();
  return a;
}

// Per-program row of a Table-2 style report.
struct ProgramReport {
  std::string program_id;
  std::optional<double> tile_ape;   // percent
  std::optional<double> mean_tau;   // mean per-kernel Kendall tau
  std::optional<double> mape_pct;   // percent
  int kernel_count = 0;
  int filtered_count = 0;  // kernels passing the MAPE runtime filter
};

}  // namespace tcm
