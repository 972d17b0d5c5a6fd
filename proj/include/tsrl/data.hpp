#pragma once

#include <tsrl/common.hpp>
#include <tsrl/rng.hpp>

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

namespace tsrl::data {

/// Columnar store of transitions. Immutable after construction by
/// convention; all pipeline ops return new datasets.
struct TransitionDataset {
  Matd states;       // N x d_s
  Matd actions;      // N x d_a
  Vecd rewards;      // N
  Matd next_states;  // N x d_s
  std::vector<std::uint8_t> terminals;  // N
  std::vector<std::uint8_t> timeouts;   // N (empty means all false)
  std::string name;

  Eigen::Index n() const { return states.rows(); }
  Eigen::Index state_dim() const { return states.cols(); }
  Eigen::Index action_dim() const { return actions.cols(); }

  bool timeout_at(Eigen::Index i) const {
    return !timeouts.empty() && timeouts[static_cast<std::size_t>(i)] != 0;
  }
  bool terminal_at(Eigen::Index i) const { return terminals[static_cast<std::size_t>(i)] != 0; }

  void validate() const {
    const Eigen::Index N = n();
    if (N < 1) throw ValidationError("dataset '" + name + "': empty");
    auto check = [&](Eigen::Index rows, const char* key) {
      if (rows != N) {
        std::ostringstream os;
        os << "dataset '" << name << "': row count mismatch for " << key << " (" << rows
           << " vs " << N << ")";
        throw ValidationError(os.str());
      }
    };
    check(actions.rows(), "actions");
    check(static_cast<Eigen::Index>(rewards.size()), "rewards");
    check(next_states.rows(), "next_observations");
    check(static_cast<Eigen::Index>(terminals.size()), "terminals");
    if (!timeouts.empty()) check(static_cast<Eigen::Index>(timeouts.size()), "timeouts");
    if (next_states.cols() != states.cols())
      throw ValidationError("dataset '" + name + "': next_observations dim mismatch");
    for (Eigen::Index i = 0; i < N; ++i)
      if (terminal_at(i) && timeout_at(i))
        throw ValidationError("dataset '" + name + "': terminal and timeout both set at row " +
                              std::to_string(i));
  }
};

struct NormalizationStats {
  Vecd mean;
  Vecd std;
  static constexpr double kStdFloor = 1e-3;

  std::string hash() const {
    std::uint64_t h = hash_matrix<double>(Matd(mean));
    h = hash_matrix<double>(Matd(std), h);
    return hex64(h);
  }
};

/// Half-open index range [start, end) into a dataset.
struct Trajectory {
  Eigen::Index start = 0;
  Eigen::Index end = 0;
  Eigen::Index length() const { return end - start; }
};

/// Segments close after any terminal or timeout row, or at dataset end.
/// The segments partition [0, N).
inline std::vector<Trajectory> split_trajectories(const TransitionDataset& d) {
  std::vector<Trajectory> out;
  Eigen::Index start = 0;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    if (d.terminal_at(i) || d.timeout_at(i)) {
      out.push_back({start, i + 1});
      start = i + 1;
    }
  }
  if (start < d.n()) out.push_back({start, d.n()});
  return out;
}

namespace detail {

inline TransitionDataset take_rows(const TransitionDataset& d,
                                   const std::vector<Eigen::Index>& rows) {
  TransitionDataset out;
  const auto m = static_cast<Eigen::Index>(rows.size());
  out.states.resize(m, d.state_dim());
  out.actions.resize(m, d.action_dim());
  out.next_states.resize(m, d.state_dim());
  out.rewards.resize(m);
  out.terminals.resize(rows.size());
  out.timeouts.resize(rows.size());
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index r = rows[static_cast<std::size_t>(i)];
    out.states.row(i) = d.states.row(r);
    out.actions.row(i) = d.actions.row(r);
    out.next_states.row(i) = d.next_states.row(r);
    out.rewards(i) = d.rewards(r);
    out.terminals[static_cast<std::size_t>(i)] = d.terminals[static_cast<std::size_t>(r)];
    out.timeouts[static_cast<std::size_t>(i)] = d.timeout_at(r) ? 1 : 0;
  }
  out.name = d.name;
  return out;
}

}  // namespace detail

/// Draws whole trajectories uniformly without replacement until the kept
/// transition count first reaches `target_transitions`. Trajectories are
/// kept in full and concatenated in draw order.
inline TransitionDataset subsample_trajectories(const TransitionDataset& d,
                                                Eigen::Index target_transitions,
                                                std::uint64_t seed) {
  if (target_transitions < 1 || target_transitions > d.n())
    throw ArgumentError("subsample: target_transitions must be in [1, N], got " +
                        std::to_string(target_transitions));
  const auto trajs = split_trajectories(d);
  std::vector<std::size_t> order(trajs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "subsample");
  rng.shuffle(order);

  std::vector<Eigen::Index> rows;
  Eigen::Index total = 0;
  for (std::size_t k = 0; k < order.size() && total < target_transitions; ++k) {
    const Trajectory& t = trajs[order[k]];
    for (Eigen::Index i = t.start; i < t.end; ++i) rows.push_back(i);
    total += t.length();
  }
  TransitionDataset out = detail::take_rows(d, rows);
  out.name = d.name + "#sub" + std::to_string(target_transitions);
  return out;
}

/// Keeps rows with states[:, dim] <= fraction * max(states[:, dim]).
/// Removed interior rows split their trajectory: a kept row whose successor
/// was dropped becomes a timeout boundary.
inline TransitionDataset filter_by_feature(const TransitionDataset& d, Eigen::Index dim,
                                           double fraction) {
  if (dim < 0 || dim >= d.state_dim())
    throw ArgumentError("filter: dim out of range: " + std::to_string(dim));
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ArgumentError("filter: fraction must be in (0, 1]");
  const double cutoff = fraction * d.states.col(dim).maxCoeff();
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < d.n(); ++i)
    if (d.states(i, dim) <= cutoff) rows.push_back(i);
  if (rows.empty()) {
    std::ostringstream os;
    os << "filter: no rows remain (dim " << dim << ", fraction " << fraction << ", cutoff "
       << cutoff << ")";
    throw ValidationError(os.str());
  }
  TransitionDataset out = detail::take_rows(d, rows);
  for (std::size_t k = 0; k + 1 < rows.size(); ++k) {
    const bool successor_dropped = rows[k + 1] != rows[k] + 1;
    if (successor_dropped && !out.terminals[k]) out.timeouts[k] = 1;
  }
  out.name = d.name + "#filtered";
  return out;
}

/// Per-dimension mean and sample std (ddof = 1) over `states`, with the std
/// floored at kStdFloor so constant dimensions stay finite.
inline NormalizationStats compute_stats(const TransitionDataset& d) {
  if (d.n() < 2) throw ArgumentError("normalize: need at least 2 rows");
  NormalizationStats st;
  st.mean = d.states.colwise().mean();
  Matd centered = d.states.rowwise() - st.mean.transpose();
  st.std = (centered.array().square().colwise().sum() /
            static_cast<double>(d.n() - 1))
               .sqrt()
               .matrix()
               .transpose();
  st.std = st.std.cwiseMax(NormalizationStats::kStdFloor);
  return st;
}

/// (x - mean) / std over both states and next_states with the same stats.
inline TransitionDataset apply_normalization(const TransitionDataset& d,
                                             const NormalizationStats& st) {
  TransitionDataset out = d;
  const RowVecd mean = st.mean.transpose();
  const RowVecd inv = st.std.cwiseInverse().transpose();
  out.states = ((d.states.rowwise() - mean).array().rowwise() * inv.array()).matrix();
  out.next_states =
      ((d.next_states.rowwise() - mean).array().rowwise() * inv.array()).matrix();
  return out;
}

inline std::pair<TransitionDataset, NormalizationStats> normalize_states(
    const TransitionDataset& d) {
  NormalizationStats st = compute_stats(d);
  return {apply_normalization(d, st), st};
}

inline Vecd denormalize_state(const Vecd& x, const NormalizationStats& st) {
  return (x.array() * st.std.array() + st.mean.array()).matrix();
}

inline Vecd normalize_state(const Vecd& s, const NormalizationStats& st) {
  return ((s - st.mean).array() / st.std.array()).matrix();
}

/// Finite-difference state derivative: s_next - s.
inline Vecd state_derivative(const Vecd& s, const Vecd& s_next) {
  if (s.size() != s_next.size())
    throw ArgumentError("state_derivative: dimension mismatch (" + std::to_string(s.size()) +
                        " vs " + std::to_string(s_next.size()) + ")");
  return s_next - s;
}

}  // namespace tsrl::data
