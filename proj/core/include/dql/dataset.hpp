#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dql/rng.hpp"
#include "dql/tensornet.hpp"

namespace dql {

struct Transition {
  Vector state;
  Vector action;
  double reward = 0.0;
  Vector next_state;
  bool terminal = false;

  friend bool operator==(const Transition& a, const Transition& b) {
    return a.state == b.state && a.action == b.action && a.reward == b.reward &&
           a.next_state == b.next_state && a.terminal == b.terminal;
  }
};

struct DatasetMetadata {
  std::string origin;  // e.g. "bandit:edges" or the source file path
  std::uint64_t seed = 0;
};

struct OfflineDataset {
  std::vector<Transition> rows;
  DatasetMetadata meta;

  std::size_t size() const noexcept { return rows.size(); }
  bool empty() const noexcept { return rows.empty(); }
  int state_dim() const;
  int action_dim() const;
  // Throws DimensionError if rows disagree on dimensions.
  void validate() const;
};

/// Column-batched mini-batch: each column is one transition.
struct TransitionBatch {
  Matrix states;       // state_dim x B
  Matrix actions;      // action_dim x B
  Vector rewards;      // B
  Matrix next_states;  // state_dim x B
  std::vector<bool> terminals;

  Eigen::Index size() const noexcept { return actions.cols(); }
  bool all_terminal() const;
};

TransitionBatch make_batch(const OfflineDataset& data, const std::vector<std::size_t>& indices);
// Uniform with replacement.
TransitionBatch sample_batch(const OfflineDataset& data, std::size_t batch_size, Rng& rng);
TransitionBatch full_batch(const OfflineDataset& data);

}  // namespace dql
