#include "bevtrack/loss.hpp"

#include <algorithm>
#include <cmath>

namespace bevtrack {

void LossWeights::validate() const {
  if (det < 0 || track < 0 || asso < 0)
    throw ConfigError("loss: lambda coefficients must be non-negative");
}

double term_value(const Tensor& t) { return t.defined() ? t.value() : 0.0; }

double focal_loss_value(std::span<const double> probs, std::optional<int> target,
                        double alpha, double gamma) {
  if (target.has_value() &&
      (*target < 0 || static_cast<std::size_t>(*target) >= probs.size()))
    throw ContractError("focal_loss: target class out of range");
  double loss = 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    const double p = probs[c];
    if (!(p > 0.0 && p < 1.0)) throw ContractError("focal_loss: probability outside (0,1)");
    if (target.has_value() && static_cast<std::size_t>(*target) == c) {
      loss += -alpha * std::pow(1.0 - p, gamma) * std::log(p);
    } else {
      loss += -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
    }
  }
  return loss;
}

namespace {

void check_probs_domain(const Tensor& probs) {
  for (double p : probs.data())
    if (!(p > 0.0 && p < 1.0)) throw ContractError("focal_loss: probability outside (0,1)");
}

// Sum of per-row focal losses; `targets[r]` is the positive class of row r.
Tensor focal_loss_matrix(const Tensor& probs, const std::vector<std::optional<int>>& targets,
                         double alpha, double gamma) {
  check_probs_domain(probs);
  const std::size_t rows = probs.rows(), nc = probs.cols();
  if (targets.size() != rows) throw ContractError("focal_loss: target count mismatch");

  Tensor pos_mask = Tensor::zeros({rows, nc});
  Tensor neg_mask = Tensor::full({rows, nc}, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!targets[r].has_value()) continue;
    const int t = *targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= nc)
      throw ContractError("focal_loss: target class out of range");
    pos_mask.data()[r * nc + t] = 1.0;
    neg_mask.data()[r * nc + t] = 0.0;
  }

  Tensor one = Tensor::full({rows, nc}, 1.0);
  Tensor q = sub(one, probs);  // 1 - p
  Tensor pos = mul(pos_mask, mul(powc(q, gamma), log(probs)));
  Tensor negt = mul(neg_mask, mul(powc(probs, gamma), log(q)));
  return add(scale(reduce_sum(pos), -alpha), scale(reduce_sum(negt), -(1.0 - alpha)));
}

}  // namespace

Tensor focal_loss(const Tensor& class_probs, std::optional<int> target, double alpha,
                  double gamma) {
  Tensor probs = class_probs.rank() == 1
                     ? reshape(class_probs, {1, class_probs.numel()})
                     : class_probs;
  if (probs.rows() != 1) throw ContractError("focal_loss: expected a single score row");
  return focal_loss_matrix(probs, {target}, alpha, gamma);
}

double box_l1_value(const Box3D& pred, const GroundTruthTarget& gt, double half_range,
                    double vel_scale) {
  const auto a = normalized_box(pred, half_range, vel_scale);
  const auto b = normalized_box(gt, half_range, vel_scale);
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) l1 += std::abs(a[i] - b[i]);
  return l1;
}

namespace {

Tensor accumulate(Tensor acc, const Tensor& term) {
  if (!term.defined()) return acc;
  return acc.defined() ? add(acc, term) : term;
}

// focal + L1 on matched rows, background focal on the given rows, averaged
// over the matched count (clamped to 1)
Tensor supervised_term(const Prediction& pred, std::span<const GroundTruthTarget> gts,
                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                       const std::vector<std::size_t>& background_rows,
                       const AssignConfig& acfg, const ModelConfig& mcfg) {
  Tensor total;
  if (!pairs.empty()) {
    std::vector<std::size_t> rows;
    std::vector<std::optional<int>> classes;
    Tensor gt_boxes = Tensor::zeros({pairs.size(), 10});
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto& [gi, row] = pairs[p];
      rows.push_back(row);
      classes.emplace_back(gts[gi].class_id);
      const auto nb = normalized_box(gts[gi], mcfg.half_range, mcfg.vel_scale);
      std::copy(nb.begin(), nb.end(), gt_boxes.data().begin() + p * 10);
    }
    Tensor matched_probs = gather_rows(pred.class_probs, rows);
    Tensor cls = focal_loss_matrix(matched_probs, classes, acfg.focal_alpha, acfg.focal_gamma);
    Tensor boxes = gather_rows(pred.norm_box_tensor(), rows);
    Tensor l1 = reduce_sum(abs(sub(boxes, gt_boxes)));
    total = accumulate(total, add(cls, l1));
  }
  if (!background_rows.empty()) {
    Tensor bg_probs = gather_rows(pred.class_probs, background_rows);
    std::vector<std::optional<int>> none(background_rows.size(), std::nullopt);
    total = accumulate(total, focal_loss_matrix(bg_probs, none, acfg.focal_alpha,
                                                acfg.focal_gamma));
  }
  if (!total.defined()) return total;
  const double denom = static_cast<double>(std::max<std::size_t>(pairs.size(), 1));
  return scale(total, 1.0 / denom);
}

std::vector<GroundTruthTarget> gather_targets(std::span<const GroundTruthTarget> targets,
                                              const std::vector<std::size_t>& idx) {
  std::vector<GroundTruthTarget> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(targets[i]);
  return out;
}

std::vector<DetachedPrediction> detach_rows(const Prediction& pred, std::size_t row0,
                                            std::size_t row1) {
  std::vector<DetachedPrediction> out;
  out.reserve(row1 - row0);
  for (std::size_t r = row0; r < row1; ++r) out.push_back(pred.detach(r));
  return out;
}

}  // namespace

AssignmentResult object_assignment(std::span<const GroundTruthTarget> gts,
                                   std::span<const DetachedPrediction> preds,
                                   AssignStrategy strategy, const AssignConfig& acfg,
                                   const ModelConfig& mcfg) {
  if (gts.empty() || preds.empty()) {
    AssignmentResult empty;
    for (std::size_t j = 0; j < preds.size(); ++j) empty.unmatched_queries.push_back(j);
    for (std::size_t i = 0; i < gts.size(); ++i) empty.unmatched_gts.push_back(i);
    return empty;
  }
  CostMatrix cost = matching_cost(gts, preds, acfg, mcfg.half_range, mcfg.vel_scale);
  if (strategy == AssignStrategy::OneToOne) return hungarian(cost);
  AssignConfig o2m = acfg;
  o2m.strategy = AssignStrategy::OneToMany;
  return assign_one_to_many(cost, o2m);
}

FrameTerms frame_losses(const DecoderOutput& s_out, const DecoderOutput* u_out,
                        const FrameLossContext& ctx, const ParamStore& params,
                        const ModelConfig& mcfg, const AssignConfig& acfg,
                        const SupervisionToggles& toggles, const AuxAssignVariant& variant) {
  if (ctx.queries == nullptr || ctx.split == nullptr || ctx.track_assign == nullptr)
    throw ContractError("frame_losses: missing context");
  const QuerySet& queries = *ctx.queries;
  const std::size_t n_track = queries.n_track;
  const std::size_t n_total = queries.size();
  const std::size_t n_obj = n_total - n_track;

  const auto consistent = gather_targets(ctx.targets, ctx.split->consistent);
  const auto newborn = gather_targets(ctx.targets, ctx.split->newborn);
  std::vector<GroundTruthTarget> all_targets(ctx.targets.begin(), ctx.targets.end());

  auto range_targets = [&](AuxRange range) -> std::span<const GroundTruthTarget> {
    switch (range) {
      case AuxRange::Newborn: return newborn;
      case AuxRange::Consistent: return consistent;
      case AuxRange::All: return all_targets;
    }
    return consistent;
  };

  // identity-guided track pairs, as global query rows (layer-independent)
  std::vector<std::pair<std::size_t, std::size_t>> track_pairs = ctx.track_assign->pairs;

  FrameTerms terms;
  terms.has_u = u_out != nullptr;

  for (std::size_t l = 0; l < s_out.layers.size(); ++l) {
    Prediction pred_s = predict(s_out.layers[l], queries.references_t, params, mcfg);

    if (!track_pairs.empty())
      terms.track_s = accumulate(
          terms.track_s, supervised_term(pred_s, consistent, track_pairs, {}, acfg, mcfg));

    // standard detection: Hungarian one-to-one against new-born targets,
    // all-negative supervision for the unmatched object queries
    if (n_obj > 0) {
      const auto obj_preds = detach_rows(pred_s, n_track, n_total);
      AssignmentResult o2o =
          object_assignment(newborn, obj_preds, AssignStrategy::OneToOne, acfg, mcfg);
      std::vector<std::pair<std::size_t, std::size_t>> pairs;
      for (const auto& [gi, col] : o2o.pairs) pairs.emplace_back(gi, n_track + col);
      std::vector<std::size_t> background;
      for (std::size_t col : o2o.unmatched_queries) background.push_back(n_track + col);
      terms.det_s = accumulate(
          terms.det_s, supervised_term(pred_s, newborn, pairs, background, acfg, mcfg));

      // assignment-strategy variant that moves the auxiliary one-to-many
      // supervision onto the standard decoder's object queries
      if (toggles.o2m && variant.source == AuxSource::SDecoder) {
        auto gts = range_targets(variant.range);
        AssignmentResult aux = object_assignment(gts, obj_preds, variant.strategy, acfg, mcfg);
        if (!aux.pairs.empty()) {
          std::vector<std::pair<std::size_t, std::size_t>> apairs;
          for (const auto& [gi, col] : aux.pairs) apairs.emplace_back(gi, n_track + col);
          terms.det_s = accumulate(
              terms.det_s, supervised_term(pred_s, gts, apairs, {}, acfg, mcfg));
        }
      }
    }

    if (u_out != nullptr) {
      Prediction pred_u = predict((*u_out).layers[l], queries.references_t, params, mcfg);

      if (toggles.o2o && !track_pairs.empty())
        terms.track_u = accumulate(
            terms.track_u, supervised_term(pred_u, consistent, track_pairs, {}, acfg, mcfg));

      if (toggles.o2m && variant.source == AuxSource::UDecoder && n_obj > 0) {
        auto gts = range_targets(variant.range);
        const auto obj_preds = detach_rows(pred_u, n_track, n_total);
        AssignmentResult aux = object_assignment(gts, obj_preds, variant.strategy, acfg, mcfg);
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (const auto& [gi, col] : aux.pairs) pairs.emplace_back(gi, n_track + col);
        std::vector<std::size_t> background;
        for (std::size_t col : aux.unmatched_queries) background.push_back(n_track + col);
        terms.det_u = accumulate(
            terms.det_u, supervised_term(pred_u, gts, pairs, background, acfg, mcfg));
      }
    }
  }

  if (toggles.asso && ctx.aff != nullptr && ctx.asso_target != nullptr)
    terms.asso = asso_loss(*ctx.aff, *ctx.asso_target);

  return terms;
}

ClipLossReport clip_loss(std::span<const FrameTerms> frames, const LossWeights& weights) {
  weights.validate();
  ClipLossReport report;
  if (frames.empty()) {
    report.total_tensor = Tensor::scalar(0.0);
    return report;
  }
  if (frames[0].track_s.defined() || frames[0].track_u.defined() || frames[0].asso.defined())
    throw ContractError("clip_loss: frame 1 cannot carry track or association terms");

  Tensor total;
  for (std::size_t idx = 0; idx < frames.size(); ++idx) {
    const FrameTerms& ft = frames[idx];
    const std::size_t frame = idx + 1;

    auto row = [&](const char* name, const Tensor& t) {
      if (t.defined()) report.rows.push_back({frame, name, t.value()});
    };
    row("det_s", ft.det_s);
    row("det_u", ft.det_u);
    row("track_s", ft.track_s);
    row("track_u", ft.track_u);
    row("asso", ft.asso);

    const double det = term_value(ft.det_s) + term_value(ft.det_u);
    report.det_total += weights.det * det;
    if (weights.det > 0) {
      total = accumulate(total, ft.det_s.defined() ? scale(ft.det_s, weights.det) : Tensor());
      total = accumulate(total, ft.det_u.defined() ? scale(ft.det_u, weights.det) : Tensor());
    }

    if (frame >= 2) {
      const double track = term_value(ft.track_s) + term_value(ft.track_u);
      report.track_total += weights.track * track;
      report.asso_total += weights.asso * term_value(ft.asso);
      if (weights.track > 0) {
        total = accumulate(total,
                           ft.track_s.defined() ? scale(ft.track_s, weights.track) : Tensor());
        total = accumulate(total,
                           ft.track_u.defined() ? scale(ft.track_u, weights.track) : Tensor());
      }
      if (weights.asso > 0)
        total = accumulate(total, ft.asso.defined() ? scale(ft.asso, weights.asso) : Tensor());
    }
  }
  report.total = report.det_total + report.track_total + report.asso_total;
  report.total_tensor = total.defined() ? total : Tensor::scalar(0.0);
  return report;
}

}  // namespace bevtrack
