#include "dql/dataset.hpp"

#include <string>

#include "dql/errors.hpp"

namespace dql {

int OfflineDataset::state_dim() const {
  return rows.empty() ? 0 : static_cast<int>(rows.front().state.size());
}

int OfflineDataset::action_dim() const {
  return rows.empty() ? 0 : static_cast<int>(rows.front().action.size());
}

void OfflineDataset::validate() const {
  const auto sd = state_dim();
  const auto ad = action_dim();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    if (r.state.size() != sd || r.next_state.size() != sd || r.action.size() != ad)
      throw DimensionError("transition " + std::to_string(k) + " has inconsistent dimensions");
  }
}

bool TransitionBatch::all_terminal() const {
  for (bool t : terminals)
    if (!t) return false;
  return true;
}

TransitionBatch make_batch(const OfflineDataset& data, const std::vector<std::size_t>& indices) {
  const auto sd = data.state_dim();
  const auto ad = data.action_dim();
  const auto b = static_cast<Eigen::Index>(indices.size());
  TransitionBatch out;
  out.states.resize(sd, b);
  out.actions.resize(ad, b);
  out.rewards.resize(b);
  out.next_states.resize(sd, b);
  out.terminals.resize(indices.size());
  for (Eigen::Index j = 0; j < b; ++j) {
    const Transition& t = data.rows.at(indices[static_cast<std::size_t>(j)]);
    out.states.col(j) = t.state;
    out.actions.col(j) = t.action;
    out.rewards(j) = t.reward;
    out.next_states.col(j) = t.next_state;
    out.terminals[static_cast<std::size_t>(j)] = t.terminal;
  }
  return out;
}

TransitionBatch sample_batch(const OfflineDataset& data, std::size_t batch_size, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("cannot sample from an empty dataset");
  std::vector<std::size_t> idx(batch_size);
  const auto hi = static_cast<std::int64_t>(data.size()) - 1;
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, hi));
  return make_batch(data, idx);
}

TransitionBatch full_batch(const OfflineDataset& data) {
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(data, idx);
}

}  // namespace dql
