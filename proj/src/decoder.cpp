#include "bevtrack/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "bevtrack/rng.hpp"

namespace bevtrack {

void ModelConfig::validate() const {
  if (channels == 0 || channels % 2 != 0) throw ConfigError("model: channels must be even");
  if (heads == 0 || channels % heads != 0)
    throw ConfigError("model: channels must divide evenly into heads");
  if (layers == 0) throw ConfigError("model: layers must be positive");
  if (ffn_hidden == 0) throw ConfigError("model: ffn_hidden must be positive");
  if (object_queries == 0) throw ConfigError("model: object_queries must be positive");
  if (n_classes == 0) throw ConfigError("model: n_classes must be positive");
  if (half_range <= 0 || vel_scale <= 0) throw ConfigError("model: bad normalization scales");
}

int ClassScores::argmax() const {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double ClassScores::max_score() const { return *std::max_element(p.begin(), p.end()); }

std::array<double, 10> normalized_box(const Box3D& b, double half_range, double vel_scale) {
  return {b.center[0] / half_range, b.center[1] / half_range, b.center[2] / half_range,
          std::log(b.size[0]),      std::log(b.size[1]),      std::log(b.size[2]),
          std::sin(b.yaw),          std::cos(b.yaw),          b.velocity[0] / vel_scale,
          b.velocity[1] / vel_scale};
}

std::array<double, 10> normalized_box(const GroundTruthTarget& g, double half_range,
                                      double vel_scale) {
  Box3D b;
  b.center = g.center;
  b.size = g.size;
  b.yaw = g.yaw;
  b.velocity = g.velocity;
  return normalized_box(b, half_range, vel_scale);
}

Tensor Prediction::norm_box_tensor() const {
  std::vector<Tensor> parts = {scale(center, 1.0 / half_range), size_log, yaw_sincos,
                               scale(velocity, 1.0 / vel_scale)};
  return concat_cols(parts);
}

Box3D Prediction::box_at(std::size_t i) const {
  Box3D b;
  b.center = {center.at(i, 0), center.at(i, 1), center.at(i, 2)};
  b.size = {std::exp(size_log.at(i, 0)), std::exp(size_log.at(i, 1)),
            std::exp(size_log.at(i, 2))};
  b.yaw = std::atan2(yaw_sincos.at(i, 0), yaw_sincos.at(i, 1));
  b.velocity = {velocity.at(i, 0), velocity.at(i, 1)};
  return b;
}

ClassScores Prediction::scores_at(std::size_t i) const {
  ClassScores s;
  const std::size_t nc = class_probs.cols();
  s.p.resize(nc);
  for (std::size_t c = 0; c < nc; ++c) s.p[c] = class_probs.at(i, c);
  return s;
}

DetachedPrediction Prediction::detach(std::size_t i) const {
  DetachedPrediction d;
  d.norm_box = {center.at(i, 0) / half_range,
                center.at(i, 1) / half_range,
                center.at(i, 2) / half_range,
                size_log.at(i, 0),
                size_log.at(i, 1),
                size_log.at(i, 2),
                yaw_sincos.at(i, 0),
                yaw_sincos.at(i, 1),
                velocity.at(i, 0) / vel_scale,
                velocity.at(i, 1) / vel_scale};
  d.class_probs = scores_at(i).p;
  return d;
}

namespace {

std::vector<double> xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng,
                           double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (auto& v : w) v = dist(rng);
  return w;
}

void create_linear(ParamStore& store, const std::string& prefix, std::size_t in,
                   std::size_t out, std::uint64_t seed, double gain = 1.0) {
  auto rng = make_rng(seed, prefix);
  store.create(prefix + ".w", {in, out}, xavier(in, out, rng, gain));
  store.create_zeros(prefix + ".b", {out});
}

void create_norm(ParamStore& store, const std::string& prefix, std::size_t c) {
  store.create(prefix + ".gain", {c}, std::vector<double>(c, 1.0));
  store.create_zeros(prefix + ".bias", {c});
}

void create_identity_linear(ParamStore& store, const std::string& prefix, std::size_t c,
                            std::uint64_t seed) {
  auto rng = make_rng(seed, prefix);
  std::vector<double> w = xavier(c, c, rng, 0.25);
  for (std::size_t i = 0; i < c; ++i) w[i * c + i] += 1.0;
  store.create(prefix + ".w", {c, c}, std::move(w));
  store.create_zeros(prefix + ".b", {c});
}

// query/key projections start near the identity so position-aligned tokens
// receive high attention before any training
void create_attention(ParamStore& store, const std::string& prefix, std::size_t c,
                      std::uint64_t seed) {
  create_identity_linear(store, prefix + ".q", c, seed);
  create_identity_linear(store, prefix + ".k", c, seed);
  create_linear(store, prefix + ".v", c, c, seed);
  create_linear(store, prefix + ".o", c, c, seed);
}

void alias_linear(ParamStore& store, const std::string& alias, const std::string& canonical) {
  store.alias(alias + ".w", canonical + ".w");
  store.alias(alias + ".b", canonical + ".b");
}

void alias_norm(ParamStore& store, const std::string& alias, const std::string& canonical) {
  store.alias(alias + ".gain", canonical + ".gain");
  store.alias(alias + ".bias", canonical + ".bias");
}

Tensor head_mlp(const Tensor& h, const ParamStore& params, const std::string& prefix) {
  Tensor hidden = relu(linear(h, params.get(prefix + ".fc1.w"), params.get(prefix + ".fc1.b")));
  return linear(hidden, params.get(prefix + ".fc2.w"), params.get(prefix + ".fc2.b"));
}

// Multi-head attention; positional encodings are added into the query/key
// projections, values carry none.
Tensor attention(const Tensor& q_in, const Tensor& kv_in, const Tensor& q_pos,
                 const Tensor& k_pos, const ParamStore& params, const std::string& prefix,
                 std::size_t heads) {
  const std::size_t c = q_in.cols();
  const std::size_t dh = c / heads;
  Tensor q = linear(add(q_in, q_pos), params.get(prefix + ".q.w"), params.get(prefix + ".q.b"));
  Tensor k = linear(add(kv_in, k_pos), params.get(prefix + ".k.w"), params.get(prefix + ".k.b"));
  Tensor v = linear(kv_in, params.get(prefix + ".v.w"), params.get(prefix + ".v.b"));

  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, 1);
    head_outs.push_back(matmul(attn, vh));
  }
  Tensor merged = concat_cols(head_outs);
  return linear(merged, params.get(prefix + ".o.w"), params.get(prefix + ".o.b"));
}

Tensor ffn(const Tensor& x, const ParamStore& params, const std::string& prefix) {
  Tensor h = relu(linear(x, params.get(prefix + ".fc1.w"), params.get(prefix + ".fc1.b")));
  return linear(h, params.get(prefix + ".fc2.w"), params.get(prefix + ".fc2.b"));
}

Tensor norm(const Tensor& x, const ParamStore& params, const std::string& prefix) {
  return layer_norm(x, params.get(prefix + ".gain"), params.get(prefix + ".bias"));
}

std::string layer_prefix(DecoderKind kind, std::size_t layer) {
  const char* base = kind == DecoderKind::Standard ? "s_decoder" : "u_decoder";
  return std::string(base) + ".layer" + std::to_string(layer);
}

}  // namespace

void build_model_params(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t c = cfg.channels;

  {
    auto rng = make_rng(seed, "object_queries.embed");
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> embed(cfg.object_queries * c);
    for (auto& v : embed) v = n01(rng);
    store.create("object_queries.embed", {cfg.object_queries, c}, std::move(embed));

    // anchor-style initialization: a jittered grid covering the range keeps
    // the worst-case center offset small from the start
    auto rrng = make_rng(seed, "object_queries.ref");
    const std::size_t side = static_cast<std::size_t>(
        std::ceil(std::sqrt(static_cast<double>(cfg.object_queries))));
    const double extent = 0.9 * cfg.half_range;
    const double step = 2.0 * extent / static_cast<double>(side);
    std::uniform_real_distribution<double> jitter(-0.2 * step, 0.2 * step);
    std::uniform_real_distribution<double> z(0.5, 1.5);
    std::vector<double> refs(cfg.object_queries * 3);
    for (std::size_t i = 0; i < cfg.object_queries; ++i) {
      const std::size_t gx = i % side, gy = i / side;
      refs[i * 3 + 0] = -extent + (gx + 0.5) * step + jitter(rrng);
      refs[i * 3 + 1] = -extent + (gy + 0.5) * step + jitter(rrng);
      refs[i * 3 + 2] = z(rrng);
    }
    store.create("object_queries.ref", {cfg.object_queries, 3}, std::move(refs));
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string s = layer_prefix(DecoderKind::Standard, l);
    const std::string u = layer_prefix(DecoderKind::NoSelfAttention, l);

    // self-attention belongs to the S-decoder alone
    create_norm(store, s + ".ln_sa", c);
    create_attention(store, s + ".sa", c, seed);

    // cross-attention, FFN and their norms are shared with the U-decoder
    create_norm(store, s + ".ln_ca", c);
    create_attention(store, s + ".ca", c, seed);
    create_norm(store, s + ".ln_ffn", c);
    create_linear(store, s + ".ffn.fc1", c, cfg.ffn_hidden, seed);
    create_linear(store, s + ".ffn.fc2", cfg.ffn_hidden, c, seed);

    alias_norm(store, u + ".ln_ca", s + ".ln_ca");
    for (const char* part : {".ca.q", ".ca.k", ".ca.v", ".ca.o"})
      alias_linear(store, u + part, s + part);
    alias_norm(store, u + ".ln_ffn", s + ".ln_ffn");
    alias_linear(store, u + ".ffn.fc1", s + ".ffn.fc1");
    alias_linear(store, u + ".ffn.fc2", s + ".ffn.fc2");
  }

  // shared predictors: one set serves both decoders and both query kinds
  create_norm(store, "predictor.norm", c);
  struct Head {
    const char* name;
    std::size_t out;
  };
  for (const Head& h : {Head{"offset", 3}, Head{"size", 3}, Head{"yaw", 2}, Head{"vel", 2},
                        Head{"cls", cfg.n_classes}}) {
    const std::string prefix = std::string("predictor.") + h.name;
    create_linear(store, prefix + ".fc1", c, c, seed);
    create_linear(store, prefix + ".fc2", c, h.out, seed, /*gain=*/0.1);
  }
  // detection-style prior: start every class probability near 0.01
  {
    Tensor cls_bias = store.get("predictor.cls.fc2.b");
    const double prior = -std::log((1.0 - 0.01) / 0.01);
    for (auto& v : cls_bias.data()) v = prior;
  }

  // association head: FFN into pairwise Hadamard features, MLP to logits
  create_linear(store, "asso.ffn.fc1", c, c, seed);
  create_linear(store, "asso.ffn.fc2", c, c, seed);
  create_linear(store, "asso.mlp.fc1", c, c, seed);
  create_linear(store, "asso.mlp.fc2", c, 1, seed);
}

Tensor reference_posenc(std::span<const Vec3> positions, const ModelConfig& cfg) {
  return sinusoidal_posenc(positions, cfg.channels, 4.0 * cfg.half_range, 4.0);
}

Tensor s_decoder_block(const Tensor& e, const Tensor& tokens, const Tensor& ref_pos,
                       const Tensor& tok_pos, const ParamStore& params,
                       const ModelConfig& cfg, std::size_t layer) {
  const std::string p = layer_prefix(DecoderKind::Standard, layer);
  Tensor x = norm(e, params, p + ".ln_sa");
  Tensor sa = attention(x, x, ref_pos, ref_pos, params, p + ".sa", cfg.heads);
  Tensor e1 = add(e, sa);
  Tensor ca = attention(norm(e1, params, p + ".ln_ca"), tokens, ref_pos, tok_pos, params,
                        p + ".ca", cfg.heads);
  Tensor e2 = add(e1, ca);
  Tensor f = ffn(norm(e2, params, p + ".ln_ffn"), params, p + ".ffn");
  return add(e2, f);
}

Tensor u_decoder_block(const Tensor& e, const Tensor& tokens, const Tensor& ref_pos,
                       const Tensor& tok_pos, const ParamStore& params,
                       const ModelConfig& cfg, std::size_t layer) {
  const std::string p = layer_prefix(DecoderKind::NoSelfAttention, layer);
  Tensor ca = attention(norm(e, params, p + ".ln_ca"), tokens, ref_pos, tok_pos, params,
                        p + ".ca", cfg.heads);
  Tensor e2 = add(e, ca);
  Tensor f = ffn(norm(e2, params, p + ".ln_ffn"), params, p + ".ffn");
  return add(e2, f);
}

DecoderOutput run_decoder(DecoderKind kind, const QuerySet& queries, const TokenField& tokens,
                          const ParamStore& params, const ModelConfig& cfg) {
  if (tokens.positions.empty()) throw ContractError("run_decoder: empty token field");
  if (queries.size() == 0) throw ContractError("run_decoder: empty query set");

  // differentiable in the reference coordinates, so learned object-query
  // reference points train through the attention path as well
  Tensor ref_pos = posenc_tensor(queries.references_t, cfg.channels, 4.0 * cfg.half_range, 4.0);
  Tensor tok_pos = reference_posenc(tokens.positions, cfg);

  DecoderOutput out;
  out.layers.reserve(cfg.layers);
  Tensor e = queries.embeddings;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    e = kind == DecoderKind::Standard
            ? s_decoder_block(e, tokens.tokens, ref_pos, tok_pos, params, cfg, l)
            : u_decoder_block(e, tokens.tokens, ref_pos, tok_pos, params, cfg, l);
    out.layers.push_back(e);
  }
  return out;
}

Prediction predict(const Tensor& embeddings, const Tensor& references_t,
                   const ParamStore& params, const ModelConfig& cfg) {
  if (embeddings.rows() != references_t.rows())
    throw ContractError("predict: embedding/reference count mismatch");

  Tensor h = norm(embeddings, params, "predictor.norm");
  Prediction pred;
  pred.half_range = cfg.half_range;
  pred.vel_scale = cfg.vel_scale;
  pred.center = add(references_t, head_mlp(h, params, "predictor.offset"));
  pred.size_log = head_mlp(h, params, "predictor.size");
  pred.yaw_sincos = head_mlp(h, params, "predictor.yaw");
  pred.velocity = head_mlp(h, params, "predictor.vel");
  pred.class_probs = sigmoid(head_mlp(h, params, "predictor.cls"));
  return pred;
}

void refine_references(QuerySet& queries, std::span<const Box3D> boxes) {
  if (boxes.size() != queries.size())
    throw ContractError("refine_references: one box per query required");
  for (std::size_t i = 0; i < boxes.size(); ++i) queries.references[i] = boxes[i].center;
  Tensor refs = Tensor::zeros({queries.size(), 3});
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) refs.data()[i * 3 + d] = boxes[i].center[d];
  queries.references_t = refs;
}

QuerySet make_object_queries(const ParamStore& params, const ModelConfig& cfg) {
  QuerySet qs;
  qs.embeddings = params.get("object_queries.embed");
  qs.references_t = params.get("object_queries.ref");
  qs.references.resize(cfg.object_queries);
  const auto& r = qs.references_t.data();
  for (std::size_t i = 0; i < cfg.object_queries; ++i)
    qs.references[i] = {r[i * 3], r[i * 3 + 1], r[i * 3 + 2]};
  qs.meta.assign(cfg.object_queries, QueryMeta{QueryKind::Object, std::nullopt, 0, 0});
  qs.n_track = 0;
  return qs;
}

}  // namespace bevtrack
