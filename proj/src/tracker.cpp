#include "bevtrack/tracker.hpp"

#include <algorithm>
#include <set>

namespace bevtrack {

void LifecycleConfig::validate() const {
  if (!(keep_threshold > 0 && keep_threshold <= spawn_threshold && spawn_threshold < 1))
    throw ConfigError("lifecycle: need 0 < keep_threshold <= spawn_threshold < 1");
  if (max_miss_age < 0) throw ConfigError("lifecycle: max_miss_age must be non-negative");
}

void propagate(TrackState& state, std::span<const Box3D> boxes, double dt,
               const SE2& ego_prev, const SE2& ego_cur) {
  if (dt <= 0) throw ContractError("propagate: dt must be positive");
  if (boxes.size() != state.tracks.size())
    throw ContractError("propagate: one box per live track required");
  if (state.tracks.empty()) return;

  // row-vector forms: local->world is p * R(h)^T + t, world->local is
  // (p - t) * R(h)
  const double cp = std::cos(ego_prev.heading), sp = std::sin(ego_prev.heading);
  const double cc = std::cos(ego_cur.heading), sc = std::sin(ego_cur.heading);
  Tensor rot_prev_t = Tensor::from_data({2, 2}, {cp, sp, -sp, cp});
  Tensor rot_cur = Tensor::from_data({2, 2}, {cc, -sc, sc, cc});
  Tensor t_prev = Tensor::from_data({2}, {ego_prev.x, ego_prev.y});
  Tensor t_cur_neg = Tensor::from_data({2}, {-ego_cur.x, -ego_cur.y});

  for (std::size_t i = 0; i < state.tracks.size(); ++i) {
    TrackEntry& tr = state.tracks[i];
    Tensor xy = slice_cols(tr.ref_tensor, 0, 2);
    Tensor advanced = add(xy, scale(tr.vel_tensor, dt));
    Tensor world = add_rowvec(matmul(advanced, rot_prev_t), t_prev);
    Tensor local = matmul(add_rowvec(world, t_cur_neg), rot_cur);
    Tensor z = slice_cols(tr.ref_tensor, 2, 3);
    std::vector<Tensor> parts = {local, z};
    tr.ref_tensor = concat_cols(parts);
    tr.vel_tensor = matmul(matmul(tr.vel_tensor, rot_prev_t), rot_cur);

    tr.reference = {tr.ref_tensor.at(0, 0), tr.ref_tensor.at(0, 1), tr.ref_tensor.at(0, 2)};
    tr.velocity = {tr.vel_tensor.at(0, 0), tr.vel_tensor.at(0, 1)};
  }
}

FrameForward forward_frame(const TrackState& state, const TokenField& tokens,
                           const ParamStore& params, const ModelConfig& cfg) {
  FrameForward fwd;
  QuerySet obj = make_object_queries(params, cfg);
  const std::size_t n_track = state.tracks.size();

  if (n_track == 0) {
    fwd.queries = std::move(obj);
  } else {
    std::vector<Tensor> embeds, refs;
    embeds.reserve(n_track + 1);
    refs.reserve(n_track + 1);
    QuerySet qs;
    for (std::size_t i = 0; i < n_track; ++i) {
      const TrackEntry& tr = state.tracks[i];
      embeds.push_back(tr.embedding);
      refs.push_back(tr.ref_tensor);
      qs.references.push_back(tr.reference);
      qs.meta.push_back(QueryMeta{QueryKind::Track, tr.id, tr.age, tr.miss_count});
    }
    embeds.push_back(obj.embeddings);
    refs.push_back(obj.references_t);
    qs.embeddings = concat_rows(embeds);
    qs.references_t = concat_rows(refs);
    qs.references.insert(qs.references.end(), obj.references.begin(), obj.references.end());
    qs.meta.insert(qs.meta.end(), obj.meta.begin(), obj.meta.end());
    qs.n_track = n_track;
    fwd.queries = std::move(qs);
  }

  fwd.s_out = run_decoder(DecoderKind::Standard, fwd.queries, tokens, params, cfg);
  fwd.s_pred = predict(fwd.s_out.layers.back(), fwd.queries.references_t, params, cfg);
  return fwd;
}

std::vector<Emission> step_frame(TrackState& state, const TokenField& tokens,
                                 const ParamStore& params, const ModelConfig& mcfg,
                                 const LifecycleConfig& lcfg, std::size_t frame_t) {
  lcfg.validate();
  NoGradGuard ng;
  FrameForward fwd = forward_frame(state, tokens, params, mcfg);
  const std::size_t n_track = fwd.queries.n_track;
  const std::size_t n_total = fwd.queries.size();
  const Tensor final_emb = fwd.s_out.layers.back();

  std::vector<Emission> emissions;
  for (std::size_t i = 0; i < n_track; ++i) {
    TrackEntry& tr = state.tracks[i];
    const Box3D box = fwd.s_pred.box_at(i);
    const ClassScores scores = fwd.s_pred.scores_at(i);
    tr.embedding = slice_rows(final_emb, i, i + 1);
    tr.ref_tensor = slice_rows(fwd.s_pred.center, i, i + 1);
    tr.vel_tensor = slice_rows(fwd.s_pred.velocity, i, i + 1);
    tr.reference = box.center;
    tr.velocity = box.velocity;
    tr.last_box = box;
    ++tr.age;
    const double score = scores.p[static_cast<std::size_t>(tr.class_id)];
    if (score >= lcfg.keep_threshold) {
      tr.miss_count = 0;
      emissions.push_back({frame_t, tr.id, tr.class_id, score, box.flat()});
    } else {
      ++tr.miss_count;
    }
  }

  std::erase_if(state.tracks,
                [&](const TrackEntry& tr) { return tr.miss_count > lcfg.max_miss_age; });

  for (std::size_t j = n_track; j < n_total; ++j) {
    const ClassScores scores = fwd.s_pred.scores_at(j);
    if (scores.max_score() < lcfg.spawn_threshold) continue;
    const Box3D box = fwd.s_pred.box_at(j);
    TrackEntry tr;
    tr.id = state.next_id++;
    tr.class_id = scores.argmax();
    tr.embedding = slice_rows(final_emb, j, j + 1);
    tr.ref_tensor = slice_rows(fwd.s_pred.center, j, j + 1);
    tr.vel_tensor = slice_rows(fwd.s_pred.velocity, j, j + 1);
    tr.reference = box.center;
    tr.velocity = box.velocity;
    tr.last_box = box;
    emissions.push_back({frame_t, tr.id, tr.class_id, scores.max_score(), box.flat()});
    state.tracks.push_back(std::move(tr));
  }
  return emissions;
}

ClipLossReport run_clip_training(const Scene& scene, std::size_t start_frame,
                                 const ClipConfig& clip, const ParamStore& params,
                                 const ModelConfig& mcfg, const AssignConfig& acfg,
                                 const LifecycleConfig& lcfg) {
  lcfg.validate();
  acfg.validate();
  if (clip.clip_length == 0) throw ContractError("run_clip_training: empty clip");
  if (start_frame + clip.clip_length > scene.frames.size())
    throw ContractError("run_clip_training: scene shorter than the requested clip");

  TrackState state;
  std::vector<FrameTerms> frame_terms;
  std::vector<GroundTruthTarget> prev_targets;
  std::vector<Box3D> last_boxes;

  for (std::size_t k = 0; k < clip.clip_length; ++k) {
    const GroundTruthFrame& frame = scene.frames[start_frame + k];
    const TokenField tokens = render_tokens(frame, scene.config, scene.seed);

    if (k > 0) {
      const GroundTruthFrame& prev = scene.frames[start_frame + k - 1];
      propagate(state, last_boxes, prev.dt, prev.ego, frame.ego);
    }

    FrameForward fwd = forward_frame(state, tokens, params, mcfg);
    const std::size_t n_track = fwd.queries.n_track;
    const std::size_t n_total = fwd.queries.size();
    const std::size_t n_obj = n_total - n_track;

    const FrameSplit split = split_consistent_newborn(prev_targets, frame);
    std::vector<GroundTruthTarget> consistent, newborn;
    for (std::size_t i : split.consistent) consistent.push_back(frame.targets[i]);
    for (std::size_t i : split.newborn) newborn.push_back(frame.targets[i]);

    const AssignmentResult track_assign = assign_track_queries(fwd.queries, consistent);

    // the parallel decoder runs from the second frame on, and only when some
    // of its supervision is enabled
    const bool want_u = k > 0 && clip.variant.source == AuxSource::UDecoder &&
                        (clip.toggles.o2m || clip.toggles.o2o || clip.toggles.asso);
    DecoderOutput u_out;
    if (want_u) u_out = run_decoder(DecoderKind::NoSelfAttention, fwd.queries, tokens,
                                    params, mcfg);

    AffinityMatrix aff;
    AssoTarget asso_target;
    bool have_asso = false;
    if (want_u && clip.toggles.asso && n_track > 0 && n_obj > 0) {
      const Tensor u_final = u_out.layers.back();
      Tensor obj_emb = slice_rows(u_final, n_track, n_total);
      Tensor trk_emb = slice_rows(u_final, 0, n_track);
      aff = affinity(obj_emb, trk_emb, params, mcfg.asso_ffn_on_track);

      Prediction u_pred = predict(u_final, fwd.queries.references_t, params, mcfg);
      std::vector<DetachedPrediction> obj_preds;
      for (std::size_t j = n_track; j < n_total; ++j) obj_preds.push_back(u_pred.detach(j));
      std::span<const GroundTruthTarget> range =
          clip.variant.range == AuxRange::Consistent
              ? std::span<const GroundTruthTarget>(consistent)
              : clip.variant.range == AuxRange::Newborn
                    ? std::span<const GroundTruthTarget>(newborn)
                    : std::span<const GroundTruthTarget>(frame.targets);
      AssignmentResult obj_assign =
          object_assignment(range, obj_preds, clip.variant.strategy, acfg, mcfg);

      // with ranges beyond the consistent set, a matched gt may own no track
      const bool allow_unmatched = clip.variant.range != AuxRange::Consistent;
      AssignmentResult track_in_range =
          clip.variant.range == AuxRange::Consistent
              ? track_assign
              : assign_track_queries(fwd.queries, range);
      asso_target = build_asso_target(obj_assign, track_in_range, n_obj, allow_unmatched);
      for (std::size_t n = 0; n < n_obj; ++n)
        aff.row_mask[n] = asso_target.track_col[n] >= 0 ? 1 : 0;
      have_asso = !asso_target.all_masked();
    }

    FrameLossContext ctx;
    ctx.queries = &fwd.queries;
    ctx.targets = frame.targets;
    ctx.split = &split;
    ctx.track_assign = &track_assign;
    ctx.aff = have_asso ? &aff : nullptr;
    ctx.asso_target = have_asso ? &asso_target : nullptr;

    frame_terms.push_back(frame_losses(fwd.s_out, want_u ? &u_out : nullptr, ctx, params,
                                       mcfg, acfg, clip.toggles, clip.variant));

    // teacher-forced lifecycle: keep tracks while their target lives, spawn
    // from the final-layer Hungarian matches onto new-born targets
    std::set<std::int64_t> cur_ids;
    for (const auto& g : frame.targets) cur_ids.insert(g.id);
    const Tensor final_emb = fwd.s_out.layers.back();

    for (std::size_t i = 0; i < n_track; ++i) {
      TrackEntry& tr = state.tracks[i];
      const Box3D box = fwd.s_pred.box_at(i);
      tr.embedding = slice_rows(final_emb, i, i + 1);
      tr.ref_tensor = slice_rows(fwd.s_pred.center, i, i + 1);
      tr.vel_tensor = slice_rows(fwd.s_pred.velocity, i, i + 1);
      tr.reference = box.center;
      tr.velocity = box.velocity;
      tr.last_box = box;
      ++tr.age;
      if (cur_ids.contains(tr.id)) {
        tr.miss_count = 0;
      } else {
        ++tr.miss_count;
      }
    }
    std::erase_if(state.tracks,
                  [&](const TrackEntry& tr) { return tr.miss_count > lcfg.max_miss_age; });

    if (!newborn.empty() && n_obj > 0) {
      std::vector<DetachedPrediction> obj_preds;
      for (std::size_t j = n_track; j < n_total; ++j) obj_preds.push_back(fwd.s_pred.detach(j));
      AssignmentResult spawn_assign =
          object_assignment(newborn, obj_preds, AssignStrategy::OneToOne, acfg, mcfg);
      for (const auto& [gi, col] : spawn_assign.pairs) {
        const std::size_t row = n_track + col;
        TrackEntry tr;
        tr.id = newborn[gi].id;
        tr.class_id = newborn[gi].class_id;
        tr.embedding = slice_rows(final_emb, row, row + 1);
        tr.ref_tensor = slice_rows(fwd.s_pred.center, row, row + 1);
        tr.vel_tensor = slice_rows(fwd.s_pred.velocity, row, row + 1);
        const Box3D box = fwd.s_pred.box_at(row);
        tr.reference = box.center;
        tr.velocity = box.velocity;
        tr.last_box = box;
        state.tracks.push_back(std::move(tr));
      }
    }

    last_boxes.clear();
    for (const TrackEntry& tr : state.tracks) last_boxes.push_back(tr.last_box);
    prev_targets = frame.targets;
  }

  return clip_loss(frame_terms, clip.weights);
}

}  // namespace bevtrack
