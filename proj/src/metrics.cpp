#include "bevtrack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "bevtrack/assign.hpp"

namespace bevtrack {

void EvalConfig::validate() const {
  if (d_match <= 0) throw ConfigError("eval: d_match must be positive");
  if (map_thresholds.empty()) throw ConfigError("eval: map_thresholds must be non-empty");
  if (amota_recall_points == 0) throw ConfigError("eval: amota_recall_points must be positive");
}

namespace {

constexpr double kBig = 1.0e9;

struct FramePreds {
  std::vector<const Emission*> preds;
};

// emissions bucketed by frame index for one scene
std::vector<FramePreds> bucket_by_frame(const std::vector<Emission>& emissions,
                                        std::size_t frames, int class_id,
                                        double score_threshold) {
  std::vector<FramePreds> out(frames);
  for (const Emission& e : emissions) {
    if (e.class_id != class_id || e.score < score_threshold) continue;
    if (e.t < frames) out[e.t].preds.push_back(&e);
  }
  return out;
}

double bev_dist(const Emission& e, const GroundTruthTarget& g) {
  return std::hypot(e.box[0] - g.center[0], e.box[1] - g.center[1]);
}

}  // namespace

ClearCounts clear_mot(std::span<const Scene> scenes,
                      std::span<const std::vector<Emission>> emissions, double d_match,
                      int class_id, double score_threshold) {
  if (scenes.size() != emissions.size())
    throw ContractError("clear_mot: one emission list per scene required");

  ClearCounts counts;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    const auto frames = bucket_by_frame(emissions[s], scene.frames.size(), class_id,
                                        score_threshold);
    std::map<std::int64_t, std::int64_t> last_match;  // gt id -> prediction id

    for (std::size_t t = 0; t < scene.frames.size(); ++t) {
      std::vector<const GroundTruthTarget*> gts;
      for (const auto& g : scene.frames[t].targets)
        if (g.class_id == class_id) gts.push_back(&g);
      const auto& preds = frames[t].preds;
      counts.gt += gts.size();

      std::vector<char> gt_done(gts.size(), 0), pred_done(preds.size(), 0);
      std::vector<std::pair<std::size_t, std::size_t>> matches;

      // keep last frame's association when it is still plausible
      for (std::size_t i = 0; i < gts.size(); ++i) {
        auto it = last_match.find(gts[i]->id);
        if (it == last_match.end()) continue;
        for (std::size_t j = 0; j < preds.size(); ++j) {
          if (pred_done[j] || preds[j]->id != it->second) continue;
          const double d = bev_dist(*preds[j], *gts[i]);
          if (d <= d_match) {
            matches.emplace_back(i, j);
            gt_done[i] = 1;
            pred_done[j] = 1;
          }
          break;
        }
      }

      // Hungarian over the remaining candidates
      std::vector<std::size_t> gi, pj;
      for (std::size_t i = 0; i < gts.size(); ++i)
        if (!gt_done[i]) gi.push_back(i);
      for (std::size_t j = 0; j < preds.size(); ++j)
        if (!pred_done[j]) pj.push_back(j);
      if (!gi.empty() && !pj.empty()) {
        CostMatrix cost;
        cost.rows = gi.size();
        cost.cols = pj.size();
        cost.cost.resize(cost.rows * cost.cols);
        for (std::size_t a = 0; a < gi.size(); ++a)
          for (std::size_t b = 0; b < pj.size(); ++b) {
            const double d = bev_dist(*preds[pj[b]], *gts[gi[a]]);
            cost.at(a, b) = d <= d_match ? d : kBig;
          }
        for (const auto& [a, b] : hungarian(cost).pairs)
          if (cost.at(a, b) < kBig) matches.emplace_back(gi[a], pj[b]);
      }

      counts.tp += matches.size();
      counts.fp += preds.size() - matches.size();
      counts.fn += gts.size() - matches.size();
      for (const auto& [i, j] : matches) {
        counts.dist_sum += bev_dist(*preds[j], *gts[i]);
        auto it = last_match.find(gts[i]->id);
        if (it != last_match.end() && it->second != preds[j]->id) ++counts.ids;
        last_match[gts[i]->id] = preds[j]->id;
      }
    }
  }
  return counts;
}

AmotaResult amota(std::span<const Scene> scenes,
                  std::span<const std::vector<Emission>> emissions, double d_match,
                  int class_id, std::size_t recall_points) {
  std::size_t total_gt = 0;
  std::set<double> score_set;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const auto& f : scenes[s].frames)
      for (const auto& g : f.targets)
        if (g.class_id == class_id) ++total_gt;
    for (const Emission& e : emissions[s]) {
      if (e.class_id != class_id) continue;
      if (!std::isfinite(e.score)) throw ContractError("amota: unscored prediction");
      score_set.insert(e.score);
    }
  }
  AmotaResult result;
  if (total_gt == 0) return result;

  // operating points, highest threshold first
  std::vector<double> thresholds(score_set.rbegin(), score_set.rend());
  struct Point {
    double recall;
    ClearCounts counts;
  };
  std::vector<Point> points;
  points.reserve(thresholds.size());
  for (double thr : thresholds) {
    ClearCounts c = clear_mot(scenes, emissions, d_match, class_id, thr);
    points.push_back({static_cast<double>(c.tp) / static_cast<double>(total_gt), c});
  }

  const double P = static_cast<double>(total_gt);
  double amota_sum = 0.0, amotp_sum = 0.0;
  std::size_t achievable = 0;
  for (std::size_t i = 1; i <= recall_points; ++i) {
    const double target = static_cast<double>(i) / static_cast<double>(recall_points);
    const Point* op = nullptr;
    for (const Point& p : points) {
      if (p.recall >= target) {
        op = &p;
        break;
      }
    }
    if (op == nullptr) continue;  // unreachable target: zero accuracy
    const double rho = op->recall;
    const double motar =
        std::max(0.0, 1.0 - (static_cast<double>(op->counts.ids + op->counts.fp +
                                                 op->counts.fn) -
                             (1.0 - rho) * P) /
                                (rho * P));
    amota_sum += motar;
    amotp_sum += op->counts.motp();
    ++achievable;
  }
  result.amota = amota_sum / static_cast<double>(recall_points);
  result.amotp = achievable == 0 ? 0.0 : amotp_sum / static_cast<double>(achievable);
  return result;
}

double average_precision(std::span<const Scene> scenes,
                         std::span<const std::vector<Emission>> emissions, int class_id,
                         double dist_threshold) {
  struct Det {
    double score;
    std::size_t scene, frame;
    const Emission* e;
  };
  std::vector<Det> dets;
  std::size_t total_gt = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (const auto& f : scenes[s].frames)
      for (const auto& g : f.targets)
        if (g.class_id == class_id) ++total_gt;
    for (const Emission& e : emissions[s])
      if (e.class_id == class_id) dets.push_back({e.score, s, e.t, &e});
  }
  if (total_gt == 0) return 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    return a.score > b.score;
  });

  // per (scene, frame): which gt instances are already claimed
  std::map<std::pair<std::size_t, std::size_t>, std::vector<char>> claimed;
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const Det& det : dets) {
    const auto& targets = scenes[det.scene].frames[det.frame].targets;
    auto& used = claimed[{det.scene, det.frame}];
    if (used.empty()) used.assign(targets.size(), 0);

    double best = std::numeric_limits<double>::infinity();
    std::size_t best_i = targets.size();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (used[i] || targets[i].class_id != class_id) continue;
      const double d = bev_dist(*det.e, targets[i]);
      if (d < best) {
        best = d;
        best_i = i;
      }
    }
    if (best_i < targets.size() && best <= dist_threshold) {
      used[best_i] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double target = static_cast<double>(r) / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= target) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 101.0;
}

TrackingSummary evaluate_tracking(std::span<const Scene> scenes,
                                  std::span<const std::vector<Emission>> emissions,
                                  const EvalConfig& cfg) {
  cfg.validate();
  std::set<int> classes;
  for (const Scene& s : scenes)
    for (const auto& f : s.frames)
      for (const auto& g : f.targets) classes.insert(g.class_id);

  TrackingSummary summary;
  for (int cls : classes) {
    TrackingSummary::PerClass pc;
    pc.class_id = cls;
    const ClearCounts c =
        clear_mot(scenes, emissions, cfg.d_match, cls, -std::numeric_limits<double>::infinity());
    pc.mota = c.mota();
    pc.motp = c.motp();
    pc.recall = c.recall();
    pc.ids = c.ids;
    pc.fp = c.fp;
    pc.fn = c.fn;
    pc.tp = c.tp;
    pc.gt = c.gt;
    const AmotaResult ar = amota(scenes, emissions, cfg.d_match, cls, cfg.amota_recall_points);
    pc.amota = ar.amota;
    pc.amotp = ar.amotp;
    double ap = 0.0;
    for (double thr : cfg.map_thresholds) ap += average_precision(scenes, emissions, cls, thr);
    pc.ap = ap / static_cast<double>(cfg.map_thresholds.size());
    summary.per_class.push_back(pc);
  }

  if (!summary.per_class.empty()) {
    for (const auto& pc : summary.per_class) {
      summary.amota += pc.amota;
      summary.amotp += pc.amotp;
      summary.map += pc.ap;
      summary.ids += pc.ids;
      summary.fp += pc.fp;
      summary.fn += pc.fn;
      summary.tp += pc.tp;
      summary.gt += pc.gt;
    }
    const double n = static_cast<double>(summary.per_class.size());
    summary.amota /= n;
    summary.amotp /= n;
    summary.map /= n;
    summary.mota =
        summary.gt == 0
            ? 0.0
            : 1.0 - static_cast<double>(summary.fp + summary.fn + summary.ids) /
                        static_cast<double>(summary.gt);
    summary.recall = summary.tp + summary.fn == 0
                         ? 0.0
                         : static_cast<double>(summary.tp) /
                               static_cast<double>(summary.tp + summary.fn);
  }
  return summary;
}

}  // namespace bevtrack
