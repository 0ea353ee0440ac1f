/*
  Network core: link-level directed traffic graph, sparse column-stochastic
  routing matrices on its pattern, trust vectors, and the trust-weighted
  composition of controlled and selfish routing.

  Conventions used throughout the library:
    - Links are indexed 0..n-1 internally; scenario files use 1-based ids.
    - A pair (i, j) means traffic leaving link j may enter link i.
    - Routing matrices are column-stochastic: column j sums to 1 for every
      non-off-ramp j and is empty for off-ramps.
    - Pattern entries are frozen in column-major order (j, then i); this
      order defines the decision-variable indexing shared by the optimizer
      and the sensitivity code.
*/
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace i2v {

using LinkId = std::int32_t;

enum class LinkClass : std::uint8_t { OnRamp, Internal, OffRamp };

/// Directed traffic graph at link granularity.
struct NetworkTopology {
  std::int32_t num_nodes = 0;
  std::int32_t num_links = 0;
  /// Link-pair adjacency: pairs[k] = (into, from) meaning flow from link
  /// `from` may continue into link `into`.
  std::vector<std::pair<LinkId, LinkId>> pairs;
  std::vector<LinkClass> link_class;  // length num_links

  bool is_on_ramp(LinkId i) const { return link_class[i] == LinkClass::OnRamp; }
  bool is_off_ramp(LinkId i) const { return link_class[i] == LinkClass::OffRamp; }

  /// Successor links of j (links i with (i, j) in pairs), ascending.
  std::span<const LinkId> successors(LinkId j) const { return {succ_.data() + succ_off_[j], succ_.data() + succ_off_[j + 1]}; }
  /// Predecessor links of i (links j with (i, j) in pairs), ascending.
  std::span<const LinkId> predecessors(LinkId i) const { return {pred_.data() + pred_off_[i], pred_.data() + pred_off_[i + 1]}; }

  /// Builds adjacency indexes; must be called after filling the fields.
  /// Throws std::invalid_argument on out-of-range link ids.
  void finalize();

private:
  std::vector<LinkId> succ_, pred_;
  std::vector<std::int32_t> succ_off_, pred_off_;
};

/// Construct a topology from per-link (from_node, to_node) endpoints.
/// Node id -1 marks the outside world (on-ramp tails, off-ramp heads).
/// The pair set is derived from node incidence: (i, j) whenever
/// to_node[j] == from_node[i] != -1.
NetworkTopology make_topology(std::int32_t num_nodes,
                              std::span<const std::int32_t> from_node,
                              std::span<const std::int32_t> to_node,
                              std::span<const LinkClass> link_class);

struct ValidationIssue {
  std::string code;     // stable machine key, e.g. "partition-overlap"
  std::string message;  // human diagnostic
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
};

/// Structural validation. Diagnostics are returned, never thrown.
ValidationReport validate_topology(const NetworkTopology& topo);

/// Frozen column-major enumeration of the structurally nonzero routing
/// entries. Shared by every module that indexes decision variables.
class RoutingPattern {
public:
  RoutingPattern() = default;
  explicit RoutingPattern(const NetworkTopology& topo);

  std::int32_t dim() const { return n_; }
  std::int32_t nnz() const { return static_cast<std::int32_t>(rows_.size()); }
  LinkId row(std::int32_t e) const { return rows_[e]; }   // receiving link i
  LinkId col(std::int32_t e) const { return cols_[e]; }   // sending link j
  /// Entries of column j as pattern indices [begin, end).
  std::pair<std::int32_t, std::int32_t> col_range(LinkId j) const { return {col_off_[j], col_off_[j + 1]}; }
  /// Pattern index of (i, j), or -1 if structurally zero.
  std::int32_t find(LinkId i, LinkId j) const;
  /// Position of entry e in the dense column-major vec() of the full matrix.
  std::int64_t dense_index(std::int32_t e) const { return static_cast<std::int64_t>(cols_[e]) * n_ + rows_[e]; }

  bool operator==(const RoutingPattern& other) const { return rows_ == other.rows_ && cols_ == other.cols_ && n_ == other.n_; }

private:
  std::int32_t n_ = 0;
  std::vector<LinkId> rows_, cols_;
  std::vector<std::int32_t> col_off_;
};

/// Sparse routing matrix on a fixed pattern. Values are aligned with the
/// pattern's frozen entry order. Immutable after construction.
class RoutingMatrix {
public:
  RoutingMatrix() = default;  // empty matrix; assign before use

  /// Validates entries in [0,1] and column sums (1 for non-off-ramps, 0 for
  /// off-ramps). Deviations below 1e-6 are renormalized; larger ones throw
  /// std::invalid_argument.
  RoutingMatrix(RoutingPattern pattern, std::vector<double> values,
                const NetworkTopology& topo);

  /// Wrap values without validation or renormalization. For derivative
  /// probes and solver internals that evaluate at infeasible points.
  static RoutingMatrix unchecked(RoutingPattern pattern, std::vector<double> values);

  const RoutingPattern& pattern() const { return pattern_; }
  std::int32_t dim() const { return pattern_.dim(); }
  std::int32_t nnz() const { return pattern_.nnz(); }
  double value(std::int32_t e) const { return values_[e]; }
  std::span<const double> values() const { return values_; }
  /// Value at (i, j); 0 for structural zeros.
  double at(LinkId i, LinkId j) const;

  /// Dense column-major vectorization, length n*n.
  std::vector<double> vec_dense() const;
  /// Compressed vectorization on the pattern, length nnz().
  std::vector<double> vec_compressed() const { return values_; }

private:
  RoutingPattern pattern_;
  std::vector<double> values_;
};

/// Per-link controllable-vehicle ratios, each in [0, 1].
struct TrustVector {
  std::vector<double> sigma;

  std::int32_t dim() const { return static_cast<std::int32_t>(sigma.size()); }
  double operator[](std::int32_t i) const { return sigma[i]; }
  static TrustVector constant(std::int32_t n, double value);
};

/// Throws std::invalid_argument unless all entries lie in [0, 1].
void check_trust(const TrustVector& sigma);

/// Trust-weighted composition, column-wise by origin link:
///   r_ij = sigma_j * rc_ij + (1 - sigma_j) * rs_ij.
/// Equivalent to R = Rc*Sigma + Rs*(I - Sigma); preserves column sums.
RoutingMatrix compose_routing(const TrustVector& sigma, const RoutingMatrix& rc,
                              const RoutingMatrix& rs, const NetworkTopology& topo);

/// Uniform selfish preferences: every non-off-ramp column splits equally
/// over its successors. Throws if a non-off-ramp link has none.
RoutingMatrix build_uniform_selfish(const NetworkTopology& topo);

/// Rebuild a matrix from a dense column-major vector (length n*n). Entries
/// off the pattern must be zero (tolerance 1e-12).
RoutingMatrix devectorize_dense(std::span<const double> v, const NetworkTopology& topo);

/// Rebuild from a compressed vector (length pattern nnz).
RoutingMatrix devectorize_compressed(std::span<const double> v, const NetworkTopology& topo);

}  // namespace i2v
