#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dql/tensornet.hpp"

namespace dql {

inline constexpr std::string_view kCheckpointMagic = "DQL-CKPT-v1";

/// Everything needed to rebuild a training run or a policy for evaluation.
///
/// On disk: the magic line, a little-endian u64 header length, a JSON header
/// (algorithm, counters, config, rng state, scalars and the name/shape of
/// every array), then the raw little-endian doubles of each array in header
/// order.
struct Checkpoint {
  std::string algorithm;
  int epoch = 0;
  long step = 0;
  nlohmann::json config = nlohmann::json::object();
  std::string rng_state;
  nlohmann::json scalars = nlohmann::json::object();
  std::vector<std::pair<std::string, ParamSet>> groups;

  void add_group(std::string name, ParamSet params);
  const ParamSet& group(std::string_view name) const;
  bool has_group(std::string_view name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dql
