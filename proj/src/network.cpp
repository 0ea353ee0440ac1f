#include "i2v/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace i2v {

namespace {

constexpr double kColumnSumTol = 1e-9;
constexpr double kRenormalizeTol = 1e-6;

std::string link_name(LinkId i) { return "link " + std::to_string(i + 1); }

}  // namespace

void NetworkTopology::finalize() {
  if (num_links < 0 || num_nodes < 0) throw std::invalid_argument("negative link or node count");
  if (static_cast<std::int32_t>(link_class.size()) != num_links)
    throw std::invalid_argument("link_class size does not match num_links");
  for (auto [i, j] : pairs) {
    if (i < 0 || j < 0 || i >= num_links || j >= num_links)
      throw std::invalid_argument("pair references link id out of range");
  }
  // Deterministic pair order: by sender column, then receiver.
  std::sort(pairs.begin(), pairs.end(), [](auto a, auto b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  succ_off_.assign(num_links + 1, 0);
  pred_off_.assign(num_links + 1, 0);
  for (auto [i, j] : pairs) {
    succ_off_[j + 1]++;
    pred_off_[i + 1]++;
  }
  for (std::int32_t k = 0; k < num_links; ++k) {
    succ_off_[k + 1] += succ_off_[k];
    pred_off_[k + 1] += pred_off_[k];
  }
  succ_.resize(pairs.size());
  pred_.resize(pairs.size());
  std::vector<std::int32_t> sc = succ_off_, pc = pred_off_;
  for (auto [i, j] : pairs) {
    succ_[sc[j]++] = i;
    pred_[pc[i]++] = j;
  }
  for (std::int32_t k = 0; k < num_links; ++k) {
    std::sort(succ_.begin() + succ_off_[k], succ_.begin() + succ_off_[k + 1]);
    std::sort(pred_.begin() + pred_off_[k], pred_.begin() + pred_off_[k + 1]);
  }
}

NetworkTopology make_topology(std::int32_t num_nodes,
                              std::span<const std::int32_t> from_node,
                              std::span<const std::int32_t> to_node,
                              std::span<const LinkClass> link_class) {
  if (from_node.size() != to_node.size() || from_node.size() != link_class.size())
    throw std::invalid_argument("from_node, to_node, link_class must have equal length");
  NetworkTopology topo;
  topo.num_nodes = num_nodes;
  topo.num_links = static_cast<std::int32_t>(from_node.size());
  topo.link_class.assign(link_class.begin(), link_class.end());
  for (std::int32_t e = 0; e < topo.num_links; ++e) {
    if (from_node[e] >= num_nodes || to_node[e] >= num_nodes)
      throw std::invalid_argument("link endpoint out of range");
  }
  for (std::int32_t j = 0; j < topo.num_links; ++j) {
    if (to_node[j] < 0) continue;  // drains outside
    for (std::int32_t i = 0; i < topo.num_links; ++i) {
      if (from_node[i] == to_node[j] && i != j) topo.pairs.emplace_back(i, j);
    }
  }
  topo.finalize();
  return topo;
}

ValidationReport validate_topology(const NetworkTopology& topo) {
  ValidationReport report;
  const std::int32_t n = topo.num_links;
  auto add = [&](std::string code, std::string msg) {
    report.issues.push_back({std::move(code), std::move(msg)});
  };

  if (static_cast<std::int32_t>(topo.link_class.size()) != n) {
    add("class-size", "link_class length does not match num_links");
    return report;
  }
  for (auto [i, j] : topo.pairs) {
    if (i < 0 || j < 0 || i >= n || j >= n) {
      add("pair-range", "pair (" + link_name(i) + ", " + link_name(j) + ") out of range");
      return report;
    }
  }
  for (std::int32_t j = 0; j < n; ++j) {
    const bool off = topo.is_off_ramp(j);
    const auto succ = topo.successors(j);
    if (off && !succ.empty())
      add("off-ramp-has-successors", link_name(j) + " is an off-ramp but has outgoing pairs");
    if (!off && succ.empty())
      add("missing-successors", link_name(j) + " is not an off-ramp and has no outgoing pairs");
  }
  return report;
}

RoutingPattern::RoutingPattern(const NetworkTopology& topo) : n_(topo.num_links) {
  col_off_.assign(n_ + 1, 0);
  // Column-major frozen order: sender j ascending, receiver i ascending.
  for (LinkId j = 0; j < n_; ++j) {
    for (LinkId i : topo.successors(j)) {
      rows_.push_back(i);
      cols_.push_back(j);
    }
    col_off_[j + 1] = static_cast<std::int32_t>(rows_.size());
  }
}

std::int32_t RoutingPattern::find(LinkId i, LinkId j) const {
  if (j < 0 || j >= n_) return -1;
  for (std::int32_t e = col_off_[j]; e < col_off_[j + 1]; ++e)
    if (rows_[e] == i) return e;
  return -1;
}

RoutingMatrix::RoutingMatrix(RoutingPattern pattern, std::vector<double> values,
                             const NetworkTopology& topo)
    : pattern_(std::move(pattern)), values_(std::move(values)) {
  if (static_cast<std::int32_t>(values_.size()) != pattern_.nnz())
    throw std::invalid_argument("routing values length does not match pattern nnz");
  const std::int32_t n = pattern_.dim();
  if (n != topo.num_links) throw std::invalid_argument("pattern and topology dimensions differ");
  for (std::int32_t e = 0; e < pattern_.nnz(); ++e) {
    const double v = values_[e];
    if (!(v >= -kRenormalizeTol && v <= 1.0 + kRenormalizeTol))
      throw std::invalid_argument("routing entry outside [0,1] at (" + link_name(pattern_.row(e)) +
                                  ", " + link_name(pattern_.col(e)) + ")");
  }
  for (LinkId j = 0; j < n; ++j) {
    auto [b, e] = pattern_.col_range(j);
    double sum = 0.0;
    for (std::int32_t k = b; k < e; ++k) sum += values_[k];
    const double target = topo.is_off_ramp(j) ? 0.0 : 1.0;
    const double dev = std::abs(sum - target);
    if (dev <= kColumnSumTol) continue;
    if (dev < kRenormalizeTol && target == 1.0 && sum > 0.0) {
      for (std::int32_t k = b; k < e; ++k) values_[k] /= sum;
    } else {
      throw std::invalid_argument("column sum violated at " + link_name(j) + ": got " +
                                  std::to_string(sum) + ", expected " + std::to_string(target));
    }
  }
  for (double& v : values_) v = std::clamp(v, 0.0, 1.0);
}

RoutingMatrix RoutingMatrix::unchecked(RoutingPattern pattern, std::vector<double> values) {
  if (values.size() != static_cast<std::size_t>(pattern.nnz()))
    throw std::invalid_argument("routing values length does not match pattern nnz");
  RoutingMatrix m;
  m.pattern_ = std::move(pattern);
  m.values_ = std::move(values);
  return m;
}

double RoutingMatrix::at(LinkId i, LinkId j) const {
  const std::int32_t e = pattern_.find(i, j);
  return e < 0 ? 0.0 : values_[e];
}

std::vector<double> RoutingMatrix::vec_dense() const {
  const std::int64_t n = pattern_.dim();
  std::vector<double> v(n * n, 0.0);
  for (std::int32_t e = 0; e < pattern_.nnz(); ++e) v[pattern_.dense_index(e)] = values_[e];
  return v;
}

TrustVector TrustVector::constant(std::int32_t n, double value) {
  return TrustVector{std::vector<double>(static_cast<std::size_t>(n), value)};
}

void check_trust(const TrustVector& sigma) {
  for (std::int32_t i = 0; i < sigma.dim(); ++i) {
    const double s = sigma[i];
    if (!(s >= 0.0 && s <= 1.0))
      throw std::invalid_argument("trust entry outside [0,1] at " + link_name(i));
  }
}

RoutingMatrix compose_routing(const TrustVector& sigma, const RoutingMatrix& rc,
                              const RoutingMatrix& rs, const NetworkTopology& topo) {
  if (!(rc.pattern() == rs.pattern()))
    throw std::invalid_argument("controlled and selfish routing live on different patterns");
  if (sigma.dim() != rc.dim())
    throw std::invalid_argument("trust vector dimension does not match routing");
  check_trust(sigma);
  const RoutingPattern& pat = rc.pattern();
  std::vector<double> mixed(pat.nnz());
  for (std::int32_t e = 0; e < pat.nnz(); ++e) {
    const double s = sigma[pat.col(e)];
    mixed[e] = s * rc.value(e) + (1.0 - s) * rs.value(e);
  }
  return RoutingMatrix(pat, std::move(mixed), topo);
}

RoutingMatrix build_uniform_selfish(const NetworkTopology& topo) {
  RoutingPattern pat(topo);
  std::vector<double> values(pat.nnz(), 0.0);
  for (LinkId j = 0; j < topo.num_links; ++j) {
    auto [b, e] = pat.col_range(j);
    const std::int32_t k = e - b;
    if (topo.is_off_ramp(j)) continue;
    if (k == 0)
      throw std::invalid_argument(link_name(j) + " is not an off-ramp and has no successors; "
                                  "uniform split is infeasible");
    for (std::int32_t t = b; t < e; ++t) values[t] = 1.0 / k;
  }
  return RoutingMatrix(std::move(pat), std::move(values), topo);
}

RoutingMatrix devectorize_dense(std::span<const double> v, const NetworkTopology& topo) {
  RoutingPattern pat(topo);
  const std::int64_t n = pat.dim();
  if (static_cast<std::int64_t>(v.size()) != n * n)
    throw std::invalid_argument("dense routing vector must have length n*n");
  std::vector<double> values(pat.nnz());
  std::vector<bool> on_pattern(v.size(), false);
  for (std::int32_t e = 0; e < pat.nnz(); ++e) {
    values[e] = v[pat.dense_index(e)];
    on_pattern[pat.dense_index(e)] = true;
  }
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (!on_pattern[k] && std::abs(v[k]) > 1e-12)
      throw std::invalid_argument("dense routing vector has a nonzero off the sparsity pattern");
  }
  return RoutingMatrix(std::move(pat), std::move(values), topo);
}

RoutingMatrix devectorize_compressed(std::span<const double> v, const NetworkTopology& topo) {
  RoutingPattern pat(topo);
  if (static_cast<std::int32_t>(v.size()) != pat.nnz())
    throw std::invalid_argument("compressed routing vector must have length nnz");
  return RoutingMatrix(std::move(pat), std::vector<double>(v.begin(), v.end()), topo);
}

}  // namespace i2v
