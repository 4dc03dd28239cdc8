#include "dql/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <system_error>

#include "dql/errors.hpp"

namespace dql {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void Checkpoint::add_group(std::string name, ParamSet params) {
  if (has_group(name)) throw ConfigError("duplicate checkpoint group '" + name + "'");
  groups.emplace_back(std::move(name), std::move(params));
}

bool Checkpoint::has_group(std::string_view name) const {
  for (const auto& [n, _] : groups)
    if (n == name) return true;
  return false;
}

const ParamSet& Checkpoint::group(std::string_view name) const {
  for (const auto& [n, p] : groups)
    if (n == name) return p;
  throw std::out_of_range("checkpoint has no group '" + std::string(name) + "'");
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& [gname, params] : ckpt.groups)
    for (std::size_t i = 0; i < params.size(); ++i)
      arrays.push_back({{"group", gname},
                        {"name", params.name(i)},
                        {"rows", params.value(i).rows()},
                        {"cols", params.value(i).cols()}});
  const nlohmann::json header = {{"algorithm", ckpt.algorithm}, {"epoch", ckpt.epoch},
                                 {"step", ckpt.step},           {"config", ckpt.config},
                                 {"rng_state", ckpt.rng_state}, {"scalars", ckpt.scalars},
                                 {"arrays", arrays}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  os << kCheckpointMagic << '\n';
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, params] : ckpt.groups)
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& m = params.value(i);
      os.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
}

Checkpoint read_checkpoint(std::istream& is) {
  std::string magic;
  if (!std::getline(is, magic)) throw IoError("empty checkpoint stream");
  if (magic != kCheckpointMagic) {
    if (magic.rfind("DQL-CKPT-", 0) == 0)
      throw VersionError("checkpoint version '" + magic + "' is not supported (expected " +
                         std::string(kCheckpointMagic) + ")");
    throw IoError("not a checkpoint file (bad magic header)");
  }
  std::uint64_t len = 0;
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30))
    throw IoError("truncated checkpoint header");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw IoError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.algorithm = header.at("algorithm").get<std::string>();
  ckpt.epoch = header.at("epoch").get<int>();
  ckpt.step = header.at("step").get<long>();
  ckpt.config = header.at("config");
  ckpt.rng_state = header.at("rng_state").get<std::string>();
  ckpt.scalars = header.at("scalars");
  for (const auto& a : header.at("arrays")) {
    const auto gname = a.at("group").get<std::string>();
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw IoError("corrupt checkpoint array shape");
    Matrix m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double))))
      throw IoError("truncated checkpoint data for " + gname);
    if (ckpt.groups.empty() || ckpt.groups.back().first != gname)
      ckpt.groups.emplace_back(gname, ParamSet{});
    ckpt.groups.back().second.add(a.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    write_checkpoint(os, ckpt);
    os.flush();
    if (!os) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move checkpoint into place at '" + path.string() + "'");
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(is);
}

}  // namespace dql
