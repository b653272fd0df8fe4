#include "bevtrack/assign.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "bevtrack/loss.hpp"

namespace bevtrack {

void AssignConfig::validate() const {
  if (tau <= 0) throw ConfigError("assign: tau must be positive");
  if (k == 0) throw ConfigError("assign: k must be at least 1");
  if (focal_alpha <= 0 || focal_alpha >= 1) throw ConfigError("assign: focal_alpha outside (0,1)");
  if (focal_gamma < 0) throw ConfigError("assign: focal_gamma must be non-negative");
}

CostMatrix matching_cost(std::span<const GroundTruthTarget> gts,
                         std::span<const DetachedPrediction> preds, const AssignConfig& cfg,
                         double half_range, double vel_scale) {
  if (gts.empty() || preds.empty())
    throw ContractError("matching_cost: both lists must be non-empty");
  for (const auto& p : preds) {
    for (double v : p.norm_box)
      if (!std::isfinite(v)) throw ContractError("matching_cost: non-finite prediction");
    for (double v : p.class_probs)
      if (!std::isfinite(v)) throw ContractError("matching_cost: non-finite prediction");
  }

  CostMatrix mc;
  mc.rows = gts.size();
  mc.cols = preds.size();
  mc.cost.resize(mc.rows * mc.cols);
  for (std::size_t i = 0; i < mc.rows; ++i) {
    const auto gt_box = normalized_box(gts[i], half_range, vel_scale);
    for (std::size_t j = 0; j < mc.cols; ++j) {
      // cost-side focal tolerates saturated scores; probabilities are
      // clamped away from the {0,1} endpoints
      std::vector<double> probs = preds[j].class_probs;
      for (double& p : probs) p = std::clamp(p, 1e-12, 1.0 - 1e-12);
      const double cls =
          focal_loss_value(probs, gts[i].class_id, cfg.focal_alpha, cfg.focal_gamma);
      double l1 = 0.0;
      for (std::size_t d = 0; d < gt_box.size(); ++d)
        l1 += std::abs(preds[j].norm_box[d] - gt_box[d]);
      mc.at(i, j) = cls + l1;
    }
  }
  return mc;
}

namespace {

// Shortest-augmenting-path assignment with potentials; requires rows <= cols.
std::vector<int> solve_rows_leq_cols(const CostMatrix& a) {
  const std::size_t n = a.rows, m = a.cols;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> match(m + 1, 0);  // column -> row (1-based, 0 = free)
  std::vector<std::size_t> way(m + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_of_col(m, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (match[j] != 0) row_of_col[j - 1] = static_cast<int>(match[j] - 1);
  return row_of_col;
}

void fill_unmatched(AssignmentResult& r, std::size_t rows, std::size_t cols) {
  std::vector<char> gt_used(rows, 0), q_used(cols, 0);
  for (auto& [i, j] : r.pairs) {
    gt_used[i] = 1;
    q_used[j] = 1;
  }
  for (std::size_t i = 0; i < rows; ++i)
    if (!gt_used[i]) r.unmatched_gts.push_back(i);
  for (std::size_t j = 0; j < cols; ++j)
    if (!q_used[j]) r.unmatched_queries.push_back(j);
}

}  // namespace

AssignmentResult hungarian(const CostMatrix& cost) {
  for (double c : cost.cost)
    if (!std::isfinite(c)) throw ContractError("hungarian: non-finite cost");

  AssignmentResult result;
  if (cost.rows == 0 || cost.cols == 0) {
    fill_unmatched(result, cost.rows, cost.cols);
    return result;
  }

  if (cost.rows <= cost.cols) {
    const auto row_of_col = solve_rows_leq_cols(cost);
    for (std::size_t j = 0; j < cost.cols; ++j)
      if (row_of_col[j] >= 0)
        result.pairs.emplace_back(static_cast<std::size_t>(row_of_col[j]), j);
  } else {
    CostMatrix t;
    t.rows = cost.cols;
    t.cols = cost.rows;
    t.cost.resize(cost.rows * cost.cols);
    for (std::size_t i = 0; i < cost.rows; ++i)
      for (std::size_t j = 0; j < cost.cols; ++j) t.at(j, i) = cost.at(i, j);
    const auto col_of_row = solve_rows_leq_cols(t);
    for (std::size_t i = 0; i < cost.rows; ++i)
      if (col_of_row[i] >= 0)
        result.pairs.emplace_back(i, static_cast<std::size_t>(col_of_row[i]));
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  fill_unmatched(result, cost.rows, cost.cols);
  return result;
}

AssignmentResult assign_track_queries(const QuerySet& queries,
                                      std::span<const GroundTruthTarget> gts) {
  std::map<std::int64_t, std::size_t> gt_of_id;
  for (std::size_t i = 0; i < gts.size(); ++i) gt_of_id.emplace(gts[i].id, i);

  AssignmentResult result;
  std::set<std::int64_t> seen;
  for (std::size_t q = 0; q < queries.n_track; ++q) {
    const auto& meta = queries.meta[q];
    if (!meta.track_id.has_value())
      throw ContractError("assign_track_queries: track query without a track_id");
    if (!seen.insert(*meta.track_id).second)
      throw ContractError("assign_track_queries: duplicate track_id among live queries");
    auto it = gt_of_id.find(*meta.track_id);
    if (it != gt_of_id.end()) {
      result.pairs.emplace_back(it->second, q);
    } else {
      result.unmatched_queries.push_back(q);  // disappeared target: no label
    }
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  std::set<std::size_t> matched_gts;
  for (auto& [i, _] : result.pairs) matched_gts.insert(i);
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (!matched_gts.contains(i)) result.unmatched_gts.push_back(i);
  return result;
}

AssignmentResult assign_one_to_many(const CostMatrix& cost, const AssignConfig& cfg) {
  if (cfg.strategy != AssignStrategy::OneToMany)
    throw ContractError("assign_one_to_many: config strategy must be OneToMany");

  struct Entry {
    double c;
    std::size_t i, j;
  };
  std::vector<Entry> admissible;
  for (std::size_t i = 0; i < cost.rows; ++i)
    for (std::size_t j = 0; j < cost.cols; ++j)
      if (cost.at(i, j) <= cfg.tau) admissible.push_back({cost.at(i, j), i, j});
  std::sort(admissible.begin(), admissible.end(), [](const Entry& a, const Entry& b) {
    if (a.c != b.c) return a.c < b.c;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  std::vector<std::size_t> per_gt(cost.rows, 0);
  std::vector<char> query_used(cost.cols, 0);
  AssignmentResult result;
  for (const Entry& e : admissible) {
    if (per_gt[e.i] >= cfg.k) continue;
    if (!cfg.allow_query_overlap && query_used[e.j]) continue;
    result.pairs.emplace_back(e.i, e.j);
    ++per_gt[e.i];
    query_used[e.j] = 1;
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  fill_unmatched(result, cost.rows, cost.cols);
  return result;
}

}  // namespace bevtrack
