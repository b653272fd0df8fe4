#include "bevtrack/association.hpp"

#include <map>

namespace bevtrack {

AffinityMatrix affinity(const Tensor& object_emb, const Tensor& track_emb,
                        const ParamStore& params, bool ffn_on_track) {
  const std::size_t n = object_emb.rows();
  const std::size_t m = track_emb.rows();
  if (n == 0 || m == 0) throw ContractError("affinity: needs at least one query per side");
  if (object_emb.cols() != track_emb.cols())
    throw ContractError("affinity: channel mismatch");

  auto ffn = [&](const Tensor& x) {
    Tensor h = relu(linear(x, params.get("asso.ffn.fc1.w"), params.get("asso.ffn.fc1.b")));
    return linear(h, params.get("asso.ffn.fc2.w"), params.get("asso.ffn.fc2.b"));
  };

  const Tensor obj = ffn_on_track ? object_emb : ffn(object_emb);
  const Tensor trk = ffn_on_track ? ffn(track_emb) : track_emb;

  Tensor pairwise = pairwise_hadamard(obj, trk);  // (N*M) x C, row n*M + m
  Tensor h = relu(linear(pairwise, params.get("asso.mlp.fc1.w"), params.get("asso.mlp.fc1.b")));
  Tensor flat = linear(h, params.get("asso.mlp.fc2.w"), params.get("asso.mlp.fc2.b"));

  AffinityMatrix aff;
  aff.logits = reshape(flat, {n, m});
  aff.probs = softmax(aff.logits, 1);
  aff.row_mask.assign(n, 1);
  return aff;
}

AssoTarget build_asso_target(const AssignmentResult& object_assign,
                             const AssignmentResult& track_assign,
                             std::size_t n_object_queries, bool allow_unmatched_gt) {
  std::map<std::size_t, std::size_t> track_col_of_gt;
  for (const auto& [gt, col] : track_assign.pairs) track_col_of_gt.emplace(gt, col);

  AssoTarget target;
  target.track_col.assign(n_object_queries, -1);
  for (const auto& [gt, obj] : object_assign.pairs) {
    if (obj >= n_object_queries)
      throw ContractError("build_asso_target: object query index out of range");
    auto it = track_col_of_gt.find(gt);
    if (it == track_col_of_gt.end()) {
      if (allow_unmatched_gt) continue;  // masked: gt owns no live track query
      throw ContractError("build_asso_target: matched gt has no live track query");
    }
    target.track_col[obj] = static_cast<int>(it->second);
  }
  return target;
}

Tensor asso_loss(const AffinityMatrix& aff, const AssoTarget& target) {
  if (target.track_col.size() != aff.objects())
    throw ContractError("asso_loss: target size mismatch");

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t n = 0; n < target.track_col.size(); ++n) {
    const int col = target.track_col[n];
    if (col < 0) continue;
    if (static_cast<std::size_t>(col) >= aff.tracks())
      throw ContractError("asso_loss: target column out of range");
    picks.emplace_back(n, static_cast<std::size_t>(col));
  }
  if (picks.empty()) return Tensor::scalar(0.0);

  Tensor logp = log_softmax(aff.logits, 1);
  return neg(reduce_mean(gather_entries(logp, std::move(picks))));
}

}  // namespace bevtrack
