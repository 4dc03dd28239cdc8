#include "dql/bandit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "dql/errors.hpp"

namespace dql {

std::string to_string(BanditLayout layout) {
  switch (layout) {
    case BanditLayout::Edges: return "edges";
    case BanditLayout::Corners: return "corners";
    case BanditLayout::Custom: return "custom";
  }
  return "custom";
}

BanditLayout parse_layout(std::string_view name) {
  if (name == "edges") return BanditLayout::Edges;
  if (name == "corners") return BanditLayout::Corners;
  if (name == "custom") return BanditLayout::Custom;
  throw ConfigError("unknown bandit layout '" + std::string(name) +
                    "' (expected edges, corners or custom)");
}

BanditSpec BanditSpec::edges() {
  BanditSpec s;
  s.layout = BanditLayout::Edges;
  s.centers = {{0.0, 0.8}, {0.8, 0.0}, {0.0, -0.8}, {-0.8, 0.0}};
  s.reward_means = kDefaultRewardMeans;
  return s;
}

BanditSpec BanditSpec::corners() {
  BanditSpec s;
  s.layout = BanditLayout::Corners;
  s.centers = {{-0.8, 0.8}, {0.8, 0.8}, {0.8, -0.8}, {-0.8, -0.8}};
  s.reward_means = kDefaultRewardMeans;
  return s;
}

BanditSpec BanditSpec::for_layout(BanditLayout layout) {
  switch (layout) {
    case BanditLayout::Edges: return edges();
    case BanditLayout::Corners: return corners();
    case BanditLayout::Custom: break;
  }
  throw ConfigError("custom bandit layouts need explicit centers");
}

std::size_t BanditSpec::optimal_mode() const {
  validate();
  return static_cast<std::size_t>(
      std::max_element(reward_means.begin(), reward_means.end()) - reward_means.begin());
}

double BanditSpec::best_reward_mean() const { return reward_means.at(optimal_mode()); }

void BanditSpec::validate() const {
  if (centers.empty()) throw ConfigError("bandit needs at least one mode");
  if (reward_means.size() != centers.size())
    throw ConfigError("bandit has " + std::to_string(centers.size()) + " modes but " +
                      std::to_string(reward_means.size()) + " reward means");
  for (const auto& c : centers)
    if (std::abs(c.x()) > 1.0 || std::abs(c.y()) > 1.0)
      throw ConfigError("bandit mode center outside [-1, 1]^2");
  if (!(reward_std >= 0.0)) throw ConfigError("reward std must be >= 0");
  if ((data_std.array() < 0.0).any()) throw ConfigError("data std must be >= 0");
  if (m == 0 || m % centers.size() != 0)
    throw ConfigError("dataset size m = " + std::to_string(m) +
                      " is not a positive multiple of the mode count " +
                      std::to_string(centers.size()));
}

OfflineDataset gen_dataset(const BanditSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  OfflineDataset data;
  data.meta.origin = "bandit:" + to_string(spec.layout);
  data.meta.seed = seed;
  const std::size_t per_mode = spec.m / spec.num_modes();
  data.rows.reserve(spec.m);
  const Vector zero_state = Vector::Zero(1);
  for (std::size_t k = 0; k < spec.num_modes(); ++k) {
    for (std::size_t n = 0; n < per_mode; ++n) {
      Transition t;
      t.state = zero_state;
      t.next_state = zero_state;
      t.terminal = true;
      Vector a(2);
      a(0) = std::clamp(spec.centers[k].x() + spec.data_std.x() * rng.normal(), -1.0, 1.0);
      a(1) = std::clamp(spec.centers[k].y() + spec.data_std.y() * rng.normal(), -1.0, 1.0);
      t.action = std::move(a);
      t.reward = spec.reward_means[k] + spec.reward_std * rng.normal();
      data.rows.push_back(std::move(t));
    }
  }
  return data;
}

double ModeCoverage::total() const {
  double s = 0.0;
  for (double f : per_mode) s += f;
  return s;
}

namespace {

// Index of the nearest center within `radius`, or -1.
long assign_mode(const Eigen::Vector2d& p, const BanditSpec& spec, double radius) {
  long best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < spec.centers.size(); ++k) {
    const double d = (p - spec.centers[k]).norm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<long>(k);
    }
  }
  return best_d <= radius ? best : -1;
}

void check_actions(const Matrix& actions) {
  if (actions.rows() != 2) throw DimensionError("bandit metrics expect 2D actions");
  if (actions.cols() == 0) throw std::invalid_argument("bandit metrics need at least one action");
}

}  // namespace

ModeCoverage mode_coverage(const Matrix& actions, const BanditSpec& spec, double radius) {
  check_actions(actions);
  ModeCoverage cov;
  cov.per_mode.assign(spec.num_modes(), 0.0);
  const double n = static_cast<double>(actions.cols());
  for (Eigen::Index j = 0; j < actions.cols(); ++j) {
    const long k = assign_mode(actions.col(j), spec, radius);
    if (k < 0)
      cov.ood += 1.0;
    else
      cov.per_mode[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& f : cov.per_mode) f /= n;
  cov.ood /= n;
  return cov;
}

double true_expected_reward(const Matrix& actions, const BanditSpec& spec, double radius) {
  check_actions(actions);
  const double ood_score =
      *std::min_element(spec.reward_means.begin(), spec.reward_means.end()) - spec.reward_std;
  double total = 0.0;
  for (Eigen::Index j = 0; j < actions.cols(); ++j) {
    const long k = assign_mode(actions.col(j), spec, radius);
    total += k < 0 ? ood_score : spec.reward_means[static_cast<std::size_t>(k)];
  }
  return total / static_cast<double>(actions.cols());
}

namespace {

void put_number(std::ostream& os, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  os << buf;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_number(std::string_view field, std::size_t line) {
  field = trim(field);
  double v = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end || field.empty())
    throw ParseError(line, "malformed number '" + std::string(field) + "'");
  return v;
}

// Counts the run of columns named prefix0, prefix1, ... starting at `pos`.
int count_prefixed(const std::vector<std::string_view>& cols, std::size_t pos,
                   std::string_view prefix) {
  int n = 0;
  while (pos + static_cast<std::size_t>(n) < cols.size() &&
         trim(cols[pos + static_cast<std::size_t>(n)]) == std::string(prefix) + std::to_string(n))
    ++n;
  return n;
}

}  // namespace

void write_dataset(std::ostream& os, const OfflineDataset& data) {
  data.validate();
  const int sd = std::max(data.state_dim(), 1);
  const int ad = std::max(data.action_dim(), 1);
  for (int k = 0; k < sd; ++k) os << 's' << k << ',';
  for (int k = 0; k < ad; ++k) os << 'a' << k << ',';
  os << 'r';
  for (int k = 0; k < sd; ++k) os << ",ns" << k;
  os << ",t\n";
  for (const auto& t : data.rows) {
    for (Eigen::Index k = 0; k < t.state.size(); ++k) {
      put_number(os, t.state(k));
      os << ',';
    }
    for (Eigen::Index k = 0; k < t.action.size(); ++k) {
      put_number(os, t.action(k));
      os << ',';
    }
    put_number(os, t.reward);
    for (Eigen::Index k = 0; k < t.next_state.size(); ++k) {
      os << ',';
      put_number(os, t.next_state(k));
    }
    os << ',' << (t.terminal ? 1 : 0) << '\n';
  }
}

OfflineDataset read_dataset(std::istream& is) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(is, line) || trim(line).empty())
    throw ParseError(1, "missing header row");
  const auto header = split(trim(line), ',');
  const int sd = count_prefixed(header, 0, "s");
  const int ad = count_prefixed(header, static_cast<std::size_t>(sd), "a");
  const auto r_pos = static_cast<std::size_t>(sd + ad);
  const bool ok = sd > 0 && ad > 0 && r_pos < header.size() && trim(header[r_pos]) == "r" &&
                  count_prefixed(header, r_pos + 1, "ns") == sd &&
                  r_pos + 1 + static_cast<std::size_t>(sd) + 1 == header.size() &&
                  trim(header.back()) == "t";
  if (!ok) throw ParseError(1, "header must be s0..,a0..,r,ns0..,t");

  OfflineDataset data;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                                    std::to_string(f.size()));
    Transition t;
    t.state.resize(sd);
    t.action.resize(ad);
    t.next_state.resize(sd);
    std::size_t c = 0;
    for (int k = 0; k < sd; ++k) t.state(k) = parse_number(f[c++], line_no);
    for (int k = 0; k < ad; ++k) t.action(k) = parse_number(f[c++], line_no);
    t.reward = parse_number(f[c++], line_no);
    for (int k = 0; k < sd; ++k) t.next_state(k) = parse_number(f[c++], line_no);
    const auto term = trim(f[c]);
    if (term == "1" || term == "true")
      t.terminal = true;
    else if (term == "0" || term == "false")
      t.terminal = false;
    else
      throw ParseError(line_no, "terminal flag must be 0 or 1, got '" + std::string(term) + "'");
    data.rows.push_back(std::move(t));
  }
  return data;
}

void export_dataset(const OfflineDataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_dataset(os, data);
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

OfflineDataset import_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  OfflineDataset d = read_dataset(is);
  d.meta.origin = path.string();
  return d;
}

}  // namespace dql
