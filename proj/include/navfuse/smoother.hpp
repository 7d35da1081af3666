#pragma once

#include <Eigen/Sparse>

#include <algorithm>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <vector>

#include "navfuse/factors.hpp"

namespace navfuse {

struct SolverConfig {
  int max_iterations = 10;
  double damping_init = 1e-4;
  double damping_scale = 10.0;
  double damping_floor = 1e-12;
  double rel_cost_tol = 1e-6;   // convergence on relative cost decrease
  double horizon_s = 5.0;       // receding-horizon window length
};

/// Dense Gaussian prior produced by marginalizing trimmed-out nodes.
struct MarginalPrior {
  NodeKey key = 0;
  NavState mean;
  Mat15 covariance;
};

struct OptimizeResult {
  double final_cost = 0.0;
  int iterations = 0;
};

/// Fixed-lag factor-graph window: nodes keyed by monotonically increasing
/// keys, factors over them, and a sliding-window trim that replaces old
/// nodes with a Schur-complement marginal prior. Owned by one execution
/// context at a time.
class GraphWindow {
 public:
  struct NodeEntry {
    double t = 0.0;
    NavState value;
  };

  explicit GraphWindow(double horizon_s = 5.0) : horizon_(horizon_s) {}

  void add_node(NodeKey key, double t, const NavState& initial) {
    NAVFUSE_CHECK(nodes_.find(key) == nodes_.end(),
                  "add_node: duplicate key " + std::to_string(key));
    if (!nodes_.empty()) {
      NAVFUSE_CHECK(t >= nodes_.rbegin()->second.t,
                    "add_node: time regression at key " + std::to_string(key));
      NAVFUSE_CHECK(key > nodes_.rbegin()->first,
                    "add_node: keys must increase with time");
    }
    nodes_[key] = NodeEntry{t, initial};
  }

  void add_factor(Factor f) {
    for (const NodeKey k : f.keys()) {
      NAVFUSE_CHECK(nodes_.count(k) == 1,
                    "add_factor: key " + std::to_string(k) + " not in graph");
    }
    factors_.push_back(std::move(f));
  }

  /// Inserts a node between existing ones (delayed measurements). The key
  /// must slot into the existing key order at a timestamp consistent with
  /// its neighbors, keeping timestamps monotone in key order.
  void insert_node(NodeKey key, double t, const NavState& value) {
    NAVFUSE_CHECK(nodes_.find(key) == nodes_.end(),
                  "insert_node: duplicate key " + std::to_string(key));
    auto after = nodes_.upper_bound(key);
    if (after != nodes_.end()) {
      NAVFUSE_CHECK(after->second.t >= t, "insert_node: time/key order violated");
    }
    if (after != nodes_.begin()) {
      NAVFUSE_CHECK(std::prev(after)->second.t <= t, "insert_node: time/key order violated");
    }
    nodes_[key] = NodeEntry{t, value};
  }

  /// Splits the IMU factor spanning (i, j) at a new node with the two
  /// re-integrated halves. Returns false when no such span exists.
  bool split_imu_span(NodeKey i, NodeKey j, NodeKey new_key, double t, const NavState& seed,
                      const PreintegratedDelta& left, const PreintegratedDelta& right,
                      const ImuNoiseSpec& spec, const Vec3& gravity) {
    auto it = std::find_if(factors_.begin(), factors_.end(), [&](const Factor& f) {
      return f.kind() == FactorKind::Imu && f.keys()[0] == i && f.keys()[1] == j;
    });
    if (it == factors_.end() || !has_node(i) || !has_node(j)) return false;
    factors_.erase(it);
    insert_node(new_key, t, seed);
    factors_.push_back(Factor::imu(i, new_key, left, spec, gravity));
    factors_.push_back(Factor::imu(new_key, j, right, spec, gravity));
    return true;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_factors() const { return factors_.size(); }
  bool has_node(NodeKey key) const { return nodes_.count(key) == 1; }
  double horizon() const { return horizon_; }

  const NodeEntry& node(NodeKey key) const {
    auto it = nodes_.find(key);
    NAVFUSE_CHECK(it != nodes_.end(), "node: unknown key " + std::to_string(key));
    return it->second;
  }

  NodeKey newest_key() const {
    NAVFUSE_CHECK(!nodes_.empty(), "newest_key: empty graph");
    return nodes_.rbegin()->first;
  }

  NodeKey oldest_key() const {
    NAVFUSE_CHECK(!nodes_.empty(), "oldest_key: empty graph");
    return nodes_.begin()->first;
  }

  const std::map<NodeKey, NodeEntry>& nodes() const { return nodes_; }
  const std::vector<Factor>& factors() const { return factors_; }

  void set_value(NodeKey key, const NavState& v) {
    auto it = nodes_.find(key);
    NAVFUSE_CHECK(it != nodes_.end(), "set_value: unknown key " + std::to_string(key));
    it->second.value = v;
  }

  std::size_t count_factors(FactorKind kind) const {
    std::size_t n = 0;
    for (const auto& f : factors_)
      if (f.kind() == kind) ++n;
    return n;
  }

  double total_cost() const {
    double c = 0.0;
    for (const auto& f : factors_) c += f.cost(lookup(f));
    return c;
  }

  /// Levenberg-Marquardt over all nodes, on-manifold retraction. Accepted
  /// steps never increase the cost; deterministic for identical inputs.
  OptimizeResult optimize(const SolverConfig& cfg) {
    NAVFUSE_CHECK(cfg.max_iterations >= 1, "optimize: max_iterations must be >= 1");
    NAVFUSE_CHECK(cfg.rel_cost_tol > 0.0, "optimize: tolerance must be positive");
    check_observability();

    const int n = static_cast<int>(nodes_.size());
    const int dim = n * kNavStateDim;
    std::map<NodeKey, int> index;
    int next = 0;
    for (const auto& [key, entry] : nodes_) index[key] = next++;

    double cost = total_cost();
    double lambda = cfg.damping_init;
    OptimizeResult result{cost, 0};

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
      Eigen::SparseMatrix<double> H(dim, dim);
      VecX g = VecX::Zero(dim);
      build_normal_equations(index, H, g);
      const VecX H_diag = H.diagonal();

      bool accepted = false;
      for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
        Eigen::SparseMatrix<double> damped = H;
        for (int k = 0; k < dim; ++k)
          damped.coeffRef(k, k) = H_diag(k) + lambda * std::max(H_diag(k), cfg.damping_floor);

        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower,
                              Eigen::NaturalOrdering<int>>
            chol(damped);
        if (chol.info() != Eigen::Success) {
          throw UnobservableGraphError("optimize: Cholesky failed, graph keys " +
                                       keys_to_string());
        }
        const VecX step = chol.solve(-g);
        if (!step.allFinite()) {
          throw UnobservableGraphError("optimize: non-finite step, graph keys " +
                                       keys_to_string());
        }

        std::map<NodeKey, NavState> trial;
        for (const auto& [key, entry] : nodes_) {
          const Vec15 d = step.segment<kNavStateDim>(index[key] * kNavStateDim);
          trial[key] = retract(entry.value, d);
        }
        const double trial_cost = cost_at(trial);
        if (trial_cost <= cost) {
          for (auto& [key, entry] : nodes_) entry.value = trial[key];
          const double rel_decrease = (cost - trial_cost) / std::max(cost, 1e-300);
          cost = trial_cost;
          lambda = std::max(lambda / cfg.damping_scale, cfg.damping_floor);
          accepted = true;
          result.iterations = iter + 1;
          result.final_cost = cost;
          if (rel_decrease < cfg.rel_cost_tol) return result;
        } else {
          lambda *= cfg.damping_scale;
        }
      }
      if (!accepted) {
        result.final_cost = cost;
        return result;  // damping exhausted, keep best values
      }
    }
    result.final_cost = cost;
    return result;
  }

  /// Removes nodes older than the horizon, replacing them with a dense
  /// marginal prior on the boundary node (Schur complement at the current
  /// linearization point). The cut is placed at the oldest node at or after
  /// `now - horizon` for which all crossing factors touch only that retained
  /// node; with between factors present this may trim slightly past the
  /// horizon, never less.
  void trim_window(double now) {
    if (nodes_.empty()) return;
    const double cutoff = now - horizon_;
    if (nodes_.begin()->second.t >= cutoff) return;

    const NodeKey cut = find_clean_cut(cutoff);
    if (cut == nodes_.begin()->first) return;
    marginalize_below(cut);
  }

  /// Textual dump for debugging. Line formats:
  ///   NODE key t x y z qx qy qz qw vx vy vz bgx bgy bgz bax bay baz
  ///   FACTOR kind keys...
  void dump(std::ostream& os) const {
    os.precision(17);
    for (const auto& [key, entry] : nodes_) {
      const auto& s = entry.value;
      const auto q = s.R.quaternion();
      os << "NODE " << key << ' ' << entry.t << ' ' << s.p.x() << ' ' << s.p.y() << ' '
         << s.p.z() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << q.w() << ' '
         << s.v.x() << ' ' << s.v.y() << ' ' << s.v.z() << ' ' << s.bg.x() << ' ' << s.bg.y()
         << ' ' << s.bg.z() << ' ' << s.ba.x() << ' ' << s.ba.y() << ' ' << s.ba.z() << '\n';
    }
    for (const auto& f : factors_) {
      os << "FACTOR " << to_string(f.kind());
      for (const NodeKey k : f.keys()) os << ' ' << k;
      os << '\n';
    }
  }

 private:
  std::array<const NavState*, 2> lookup(const Factor& f) const {
    std::array<const NavState*, 2> states{nullptr, nullptr};
    for (std::size_t i = 0; i < f.keys().size(); ++i) states[i] = &nodes_.at(f.keys()[i]).value;
    return states;
  }

  double cost_at(const std::map<NodeKey, NavState>& values) const {
    double c = 0.0;
    for (const auto& f : factors_) {
      std::array<const NavState*, 2> states{nullptr, nullptr};
      for (std::size_t i = 0; i < f.keys().size(); ++i) states[i] = &values.at(f.keys()[i]);
      c += f.cost(states);
    }
    return c;
  }

  void build_normal_equations(const std::map<NodeKey, int>& index,
                              Eigen::SparseMatrix<double>& H, VecX& g) const {
    std::vector<Eigen::Triplet<double>> triplets;
    std::vector<LinearBlock> blocks;
    for (const auto& f : factors_) {
      blocks.clear();
      f.evaluate(lookup(f), true, blocks);
      const auto& keys = f.keys();
      for (const auto& b : blocks) {
        for (int a = 0; a < b.num_keys; ++a) {
          const int ia = index.at(keys[a]) * kNavStateDim;
          g.segment<kNavStateDim>(ia) += b.J[a].transpose() * b.r;
          for (int c = 0; c < b.num_keys; ++c) {
            const int ic = index.at(keys[c]) * kNavStateDim;
            const MatX Hac = b.J[a].transpose() * b.J[c];
            for (int rr = 0; rr < kNavStateDim; ++rr)
              for (int cc = 0; cc < kNavStateDim; ++cc)
                if (Hac(rr, cc) != 0.0) triplets.emplace_back(ia + rr, ic + cc, Hac(rr, cc));
          }
        }
      }
    }
    H.setFromTriplets(triplets.begin(), triplets.end());
  }

  /// Every connected component must contain a prior or unary factor,
  /// otherwise the gauge is free and the solve must be refused.
  void check_observability() const {
    if (nodes_.empty()) throw UnobservableGraphError("optimize: empty graph");
    std::map<NodeKey, std::vector<NodeKey>> adj;
    std::set<NodeKey> anchored;
    for (const auto& f : factors_) {
      if (f.keys().size() == 1) anchored.insert(f.keys()[0]);
      if (f.keys().size() == 2) {
        adj[f.keys()[0]].push_back(f.keys()[1]);
        adj[f.keys()[1]].push_back(f.keys()[0]);
      }
    }
    std::set<NodeKey> visited;
    for (const auto& [start, entry] : nodes_) {
      if (visited.count(start)) continue;
      std::vector<NodeKey> stack{start}, component;
      bool has_anchor = false;
      while (!stack.empty()) {
        const NodeKey k = stack.back();
        stack.pop_back();
        if (!visited.insert(k).second) continue;
        component.push_back(k);
        if (anchored.count(k)) has_anchor = true;
        for (const NodeKey nb : adj[k]) stack.push_back(nb);
      }
      if (!has_anchor) {
        std::ostringstream oss;
        oss << "optimize: unobservable component without prior/unary factor, node keys";
        for (const NodeKey k : component) oss << ' ' << k;
        throw UnobservableGraphError(oss.str());
      }
    }
  }

  NodeKey find_clean_cut(double cutoff) const {
    // oldest node with t >= cutoff
    auto it = nodes_.begin();
    while (it != nodes_.end() && it->second.t < cutoff) ++it;
    if (it == nodes_.end()) it = std::prev(nodes_.end());
    NodeKey cut = it->first;

    // advance until every factor crossing the cut touches only `cut` on the
    // retained side
    while (true) {
      bool clean = true;
      for (const auto& f : factors_) {
        bool removed_side = false, dirty_retained = false;
        for (const NodeKey k : f.keys()) {
          if (k < cut) removed_side = true;
          if (k > cut) dirty_retained = true;
        }
        if (removed_side && dirty_retained) {
          clean = false;
          break;
        }
      }
      if (clean) return cut;
      auto next = nodes_.upper_bound(cut);
      if (next == nodes_.end()) return nodes_.rbegin()->first;
      cut = next->first;
    }
  }

  void marginalize_below(NodeKey cut) {
    std::vector<NodeKey> removed;
    for (const auto& [key, entry] : nodes_) {
      if (key < cut) removed.push_back(key);
    }
    if (removed.empty()) return;

    // variables of the removed subgraph: removed nodes + boundary node
    std::map<NodeKey, int> index;
    int next = 0;
    for (const NodeKey k : removed) index[k] = next++;
    index[cut] = next++;
    const int dim = next * kNavStateDim;
    const int boundary_off = (next - 1) * kNavStateDim;

    MatX H = MatX::Zero(dim, dim);
    VecX g = VecX::Zero(dim);
    std::vector<Factor> kept;
    std::vector<LinearBlock> blocks;
    for (const auto& f : factors_) {
      const bool touches_removed = std::any_of(f.keys().begin(), f.keys().end(),
                                               [&](NodeKey k) { return k < cut; });
      if (!touches_removed) {
        kept.push_back(f);
        continue;
      }
      blocks.clear();
      f.evaluate(lookup(f), true, blocks);
      const auto& keys = f.keys();
      for (const auto& b : blocks) {
        for (int a = 0; a < b.num_keys; ++a) {
          const int ia = index.at(keys[a]) * kNavStateDim;
          g.segment<kNavStateDim>(ia) += b.J[a].transpose() * b.r;
          for (int c = 0; c < b.num_keys; ++c) {
            const int ic = index.at(keys[c]) * kNavStateDim;
            H.block<kNavStateDim, kNavStateDim>(ia, ic) += b.J[a].transpose() * b.J[c];
          }
        }
      }
    }

    // Schur complement onto the boundary node
    const int rdim = boundary_off;
    const MatX H_rr = H.topLeftCorner(rdim, rdim);
    const MatX H_rb = H.topRightCorner(rdim, kNavStateDim);
    const MatX H_bb = H.bottomRightCorner(kNavStateDim, kNavStateDim);
    const VecX g_r = g.head(rdim);
    const VecX g_b = g.tail(kNavStateDim);

    const Eigen::LDLT<MatX> ldlt(H_rr);
    const MatX H_rr_inv_H_rb = ldlt.solve(H_rb);
    Mat15 H_marg = H_bb - H_rb.transpose() * H_rr_inv_H_rb;
    H_marg = 0.5 * (H_marg + H_marg.transpose());
    const Vec15 g_marg = g_b - H_rb.transpose() * ldlt.solve(g_r);

    // Fold the gradient into the prior mean; covariance is the inverse
    // marginal information, eigenvalue-floored against numerically
    // semidefinite directions.
    Eigen::SelfAdjointEigenSolver<Mat15> eig(H_marg);
    const double lambda_floor = std::max(eig.eigenvalues().maxCoeff(), 1.0) * 1e-12;
    Vec15 inv_eigs;
    for (int k = 0; k < kNavStateDim; ++k)
      inv_eigs(k) = 1.0 / std::max(eig.eigenvalues()(k), lambda_floor);
    const Mat15 cov =
        eig.eigenvectors() * inv_eigs.asDiagonal() * eig.eigenvectors().transpose();

    const NavState& boundary_value = nodes_.at(cut).value;
    MarginalPrior prior;
    prior.key = cut;
    prior.mean = retract(boundary_value, Vec15(cov * -g_marg));
    prior.covariance = 0.5 * (cov + cov.transpose());

    factors_ = std::move(kept);
    factors_.push_back(
        Factor::prior_full(cut, prior.mean, NoiseModel::from_covariance(prior.covariance)));
    for (const NodeKey k : removed) nodes_.erase(k);
  }

  std::string keys_to_string() const {
    std::ostringstream oss;
    for (const auto& [key, entry] : nodes_) oss << key << ' ';
    return oss.str();
  }

  std::map<NodeKey, NodeEntry> nodes_;
  std::vector<Factor> factors_;
  double horizon_;
};

}  // namespace navfuse
