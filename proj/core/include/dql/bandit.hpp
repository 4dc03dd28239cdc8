#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "dql/dataset.hpp"

namespace dql {

enum class BanditLayout { Edges, Corners, Custom };

std::string to_string(BanditLayout layout);
BanditLayout parse_layout(std::string_view name);

/// Synthetic 2D bandit: an equal mixture of axis-aligned Gaussians in
/// [-1, 1]^2, each mode paying a Gaussian reward around its own mean.
struct BanditSpec {
  BanditLayout layout = BanditLayout::Edges;
  std::vector<Eigen::Vector2d> centers;
  Eigen::Vector2d data_std{0.05, 0.05};
  std::vector<double> reward_means;
  double reward_std = 0.5;
  std::size_t m = 10000;

  static BanditSpec edges();
  static BanditSpec corners();
  static BanditSpec for_layout(BanditLayout layout);

  std::size_t num_modes() const noexcept { return centers.size(); }
  std::size_t optimal_mode() const;
  double best_reward_mean() const;
  void validate() const;
};

inline const std::vector<double> kDefaultRewardMeans{0.2, 0.4, 0.6, 1.0};
// Three data standard deviations.
inline constexpr double kModeRadius = 0.15;

/// Exactly m / modes rows per mode, emitted mode by mode. State and next
/// state are the constant 1-vector (0); every row is terminal.
OfflineDataset gen_dataset(const BanditSpec& spec, std::uint64_t seed);

struct ModeCoverage {
  std::vector<double> per_mode;
  double ood = 0.0;

  double total() const;
};

// actions: (2 x n). Each point counts toward its nearest center if that
// center lies within `radius`; otherwise it is out of distribution.
ModeCoverage mode_coverage(const Matrix& actions, const BanditSpec& spec,
                           double radius = kModeRadius);

/// Mean of the nearest mode's reward mean; out-of-distribution actions score
/// min(reward_means) - reward_std.
double true_expected_reward(const Matrix& actions, const BanditSpec& spec,
                            double radius = kModeRadius);

// Delimited text: header s0..,a0..,r,ns0..,t then one row per transition,
// numbers at 17 significant digits.
void write_dataset(std::ostream& os, const OfflineDataset& data);
OfflineDataset read_dataset(std::istream& is);
void export_dataset(const OfflineDataset& data, const std::filesystem::path& path);
OfflineDataset import_dataset(const std::filesystem::path& path);

}  // namespace dql
