#pragma once

// Causal self-attention sequence model scoring catalog items per position
// under the shifted-sequence objective. Scores are dot products between
// hidden states and (by default tied) item embeddings; the gBCE variant is
// this model plus a LossSpec of kind GBCE.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsrec/core/graph.hpp"
#include "gsrec/core/rng.hpp"
#include "gsrec/losses/losses.hpp"
#include "gsrec/sampling/negatives.hpp"

namespace gsrec::model {

struct ModelConfig {
  int64_t max_seq_len = 200;
  int64_t embed_dim = 64;
  int64_t n_blocks = 2;
  int64_t n_heads = 1;
  double dropout_rate = 0.2;
  bool tie_output_embeddings = true;

  void validate() const {
    if (max_seq_len < 1)
      throw std::invalid_argument("model: max_seq_len must be >= 1");
    if (embed_dim < 1 || n_blocks < 1 || n_heads < 1)
      throw std::invalid_argument("model: dims and counts must be >= 1");
    if (embed_dim % n_heads != 0)
      throw std::invalid_argument("model: embed_dim must divide into heads");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw std::invalid_argument("model: dropout_rate must be in [0,1)");
  }
};

inline nlohmann::json config_json(const ModelConfig& cfg,
                                  int64_t catalog_size) {
  return {{"max_seq_len", cfg.max_seq_len},
          {"embed_dim", cfg.embed_dim},
          {"n_blocks", cfg.n_blocks},
          {"n_heads", cfg.n_heads},
          {"dropout_rate", cfg.dropout_rate},
          {"tie_output_embeddings", cfg.tie_output_embeddings},
          {"catalog_size", catalog_size}};
}

inline ModelConfig config_from_json(const nlohmann::json& j,
                                    int64_t* catalog_size = nullptr) {
  ModelConfig cfg;
  cfg.max_seq_len = j.at("max_seq_len").get<int64_t>();
  cfg.embed_dim = j.at("embed_dim").get<int64_t>();
  cfg.n_blocks = j.at("n_blocks").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.dropout_rate = j.at("dropout_rate").get<double>();
  cfg.tie_output_embeddings = j.at("tie_output_embeddings").get<bool>();
  if (catalog_size) *catalog_size = j.at("catalog_size").get<int64_t>();
  cfg.validate();
  return cfg;
}

// Left-padded fixed-length training rows. Position j predicts the item that
// followed input j, so targets are the inputs shifted one step left; mask is
// 1 exactly where a (input, target) pair is real. With pairs padded together
// the same mask serves as both attention key validity and loss mask.
struct SequenceBatch {
  Tensor inputs;
  Tensor targets;
  Tensor mask;

  int64_t batch() const { return inputs.dim(0); }
  int64_t seq_len() const { return inputs.dim(1); }

  int64_t valid_count() const {
    int64_t n = 0;
    for (int64_t i = 0; i < mask.numel(); ++i)
      if (mask[i] == 1.0) ++n;
    return n;
  }
};

inline SequenceBatch make_batch(const std::vector<std::vector<int64_t>>& seqs,
                                int64_t seq_len) {
  if (seqs.empty()) throw std::invalid_argument("batch: no sequences");
  if (seq_len < 1) throw std::invalid_argument("batch: seq_len must be >= 1");
  int64_t B = static_cast<int64_t>(seqs.size());
  SequenceBatch batch;
  batch.inputs.resize({B, seq_len});
  batch.targets.resize({B, seq_len});
  batch.mask.resize({B, seq_len});
  for (int64_t r = 0; r < B; ++r) {
    const auto& s = seqs[static_cast<size_t>(r)];
    int64_t pairs = static_cast<int64_t>(s.size()) - 1;
    int64_t use = std::min(pairs, seq_len);
    for (int64_t t = 0; t < use; ++t) {
      int64_t pos = seq_len - use + t;  // right-aligned: keep the newest pairs
      int64_t src = pairs - use + t;
      batch.inputs.at({r, pos}) = double(s[static_cast<size_t>(src)]);
      batch.targets.at({r, pos}) = double(s[static_cast<size_t>(src) + 1]);
      batch.mask.at({r, pos}) = 1.0;
    }
  }
  return batch;
}

// Inference rows: the raw last seq_len items, left-padded, no shift. The
// hidden state at the final position is the next-item query.
struct InferenceBatch {
  Tensor inputs;
  Tensor mask;
};

inline InferenceBatch make_inference_batch(
    const std::vector<std::vector<int64_t>>& seqs, int64_t seq_len) {
  if (seqs.empty()) throw std::invalid_argument("batch: no sequences");
  if (seq_len < 1) throw std::invalid_argument("batch: seq_len must be >= 1");
  int64_t B = static_cast<int64_t>(seqs.size());
  InferenceBatch batch;
  batch.inputs.resize({B, seq_len});
  batch.mask.resize({B, seq_len});
  for (int64_t r = 0; r < B; ++r) {
    const auto& s = seqs[static_cast<size_t>(r)];
    if (s.empty())
      throw std::invalid_argument("batch: empty sequence at row " +
                                  std::to_string(r));
    int64_t use = std::min<int64_t>(static_cast<int64_t>(s.size()), seq_len);
    for (int64_t t = 0; t < use; ++t) {
      int64_t pos = seq_len - use + t;
      batch.inputs.at({r, pos}) =
          double(s[s.size() - static_cast<size_t>(use - t)]);
      batch.mask.at({r, pos}) = 1.0;
    }
  }
  return batch;
}

inline void init_params(ParameterStore& store, const ModelConfig& cfg,
                        int64_t catalog_size, uint64_t seed) {
  cfg.validate();
  if (catalog_size < 1)
    throw std::invalid_argument("model: catalog_size must be >= 1");
  Rng rng = Rng::rooted(seed);
  auto gauss = [&](Tensor& t, double sd) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = sd * rng.gaussian();
  };
  double wsd = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));

  auto item_table = [&](const std::string& name) {
    Tensor& t = store.create(name, {catalog_size + 1, cfg.embed_dim});
    gauss(t, 0.02);
    // padding row stays zero: masking keeps its gradient zero, so it never
    // drifts and never contributes to any score
    std::fill_n(t.data(), cfg.embed_dim, 0.0);
  };
  item_table("item_embedding");
  if (!cfg.tie_output_embeddings) item_table("output_embedding");

  gauss(store.create("pos_embedding", {cfg.max_seq_len, cfg.embed_dim}), 0.02);
  for (int64_t b = 0; b < cfg.n_blocks; ++b) {
    std::string p = "block" + std::to_string(b) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
      gauss(store.create(p + w, {cfg.embed_dim, cfg.embed_dim}), wsd);
    for (const char* ln : {"ln1", "ln2"}) {
      Tensor& gain = store.create(p + ln + std::string(".gain"),
                                  {cfg.embed_dim});
      for (int64_t i = 0; i < gain.numel(); ++i) gain[i] = 1.0;
      store.create(p + ln + std::string(".bias"), {cfg.embed_dim});
    }
    gauss(store.create(p + "ffn.w1", {cfg.embed_dim, cfg.embed_dim}), wsd);
    store.create(p + "ffn.b1", {cfg.embed_dim});
    gauss(store.create(p + "ffn.w2", {cfg.embed_dim, cfg.embed_dim}), wsd);
    store.create(p + "ffn.b2", {cfg.embed_dim});
  }
  Tensor& gain = store.create("final_ln.gain", {cfg.embed_dim});
  for (int64_t i = 0; i < gain.numel(); ++i) gain[i] = 1.0;
  store.create("final_ln.bias", {cfg.embed_dim});
}

// Hidden-state stack over graph inputs "input_ids" [B,L], "key_valid" [B,L]
// and "pos_mask" [B,L,1]. Pre-norm residual blocks; padded positions are
// re-zeroed after the embedding and after every residual so they stay inert.
inline NodeId forward_hidden(CompGraph& g, const ModelConfig& cfg) {
  cfg.validate();
  NodeId ids = g.input("input_ids");
  NodeId key_valid = g.input("key_valid");
  NodeId mask3 = g.input("pos_mask");

  NodeId x = g.embedding(g.param("item_embedding"), ids);
  x = g.scale(x, std::sqrt(static_cast<double>(cfg.embed_dim)));
  x = g.add(x, g.param("pos_embedding"));
  x = g.dropout(x, cfg.dropout_rate);
  x = g.mul(x, mask3);

  for (int64_t b = 0; b < cfg.n_blocks; ++b) {
    std::string p = "block" + std::to_string(b) + ".";
    NodeId a = g.layer_norm(x, g.param(p + "ln1.gain"),
                            g.param(p + "ln1.bias"));
    NodeId att = g.causal_attention(
        g.matmul(a, g.param(p + "attn.wq")),
        g.matmul(a, g.param(p + "attn.wk")),
        g.matmul(a, g.param(p + "attn.wv")), key_valid,
        static_cast<int>(cfg.n_heads));
    att = g.dropout(g.matmul(att, g.param(p + "attn.wo")), cfg.dropout_rate);
    x = g.mul(g.add(x, att), mask3);

    NodeId f = g.layer_norm(x, g.param(p + "ln2.gain"),
                            g.param(p + "ln2.bias"));
    NodeId h = g.relu(g.add(g.matmul(f, g.param(p + "ffn.w1")),
                            g.param(p + "ffn.b1")));
    h = g.dropout(h, cfg.dropout_rate);
    h = g.add(g.matmul(h, g.param(p + "ffn.w2")), g.param(p + "ffn.b2"));
    h = g.dropout(h, cfg.dropout_rate);
    x = g.mul(g.add(x, h), mask3);
  }
  return g.layer_norm(x, g.param("final_ln.gain"), g.param("final_ln.bias"));
}

inline NodeId output_table(CompGraph& g, const ModelConfig& cfg) {
  return g.param(cfg.tie_output_embeddings ? "item_embedding"
                                           : "output_embedding");
}

struct TrainingGraph {
  NodeId loss = -1;
  NodeId hidden = -1;
  double beta = 1.0;
};

// Scalar mean loss over valid positions. Extra graph inputs beyond
// forward_hidden's: "target_ids" [B,L,1], "loss_mask" [B,L],
// "inv_valid_count" [1], and "negative_ids" [B,L,k] for sampled kinds.
inline TrainingGraph build_training_graph(CompGraph& g, const ModelConfig& cfg,
                                          const LossSpec& spec,
                                          int64_t catalog_size) {
  spec.validate();
  if (catalog_size < 2)
    throw std::invalid_argument("model: catalog_size must be >= 2");

  TrainingGraph out;
  out.hidden = forward_hidden(g, cfg);
  NodeId table = output_table(g, cfg);
  NodeId s_plus = g.reshape(
      g.gather_dot(out.hidden, table, g.input("target_ids")),
      {-1, cfg.max_seq_len});
  NodeId s_minus = -1;
  NodeId catalog = -1;
  if (spec.needs_negatives())
    s_minus = g.gather_dot(out.hidden, table, g.input("negative_ids"));
  if (spec.needs_catalog()) catalog = g.catalog_scores(out.hidden, table);
  if (spec.kind == LossSpec::Kind::GBCE)
    out.beta = beta_from_t(spec.t, sampling::sampling_rate(spec.k,
                                                           catalog_size));
  NodeId per_pos =
      fragments::per_position_loss(g, spec, out.beta, s_plus, s_minus,
                                   catalog);
  out.loss = fragments::masked_mean(g, per_pos, g.input("loss_mask"),
                                    g.input("inv_valid_count"));
  return out;
}

inline Bindings training_bindings(const SequenceBatch& batch,
                                  const ModelConfig& cfg, const LossSpec& spec,
                                  int64_t catalog_size, Rng& rng) {
  spec.validate();
  int64_t B = batch.batch(), L = batch.seq_len();
  if (L != cfg.max_seq_len)
    throw std::invalid_argument("model: batch seq_len " + std::to_string(L) +
                                " != configured " +
                                std::to_string(cfg.max_seq_len));
  int64_t valid = batch.valid_count();
  if (valid == 0)
    throw std::runtime_error("model: batch has no valid targets");

  Bindings binds;
  binds["input_ids"] = batch.inputs;
  binds["key_valid"] = batch.mask;
  Tensor mask3 = batch.mask;
  mask3.reshape({B, L, 1});
  binds["pos_mask"] = std::move(mask3);
  Tensor targets3 = batch.targets;
  targets3.reshape({B, L, 1});
  binds["target_ids"] = std::move(targets3);
  binds["loss_mask"] = batch.mask;
  binds["inv_valid_count"] =
      Tensor({1}, {1.0 / static_cast<double>(valid)});

  if (spec.needs_negatives()) {
    Tensor negs;
    negs.resize({B, L, spec.k});
    for (int64_t r = 0; r < B; ++r) {
      for (int64_t pos = 0; pos < L; ++pos) {
        double* dst = negs.data() + (r * L + pos) * spec.k;
        if (batch.mask.at({r, pos}) == 1.0) {
          auto set = sampling::sample_negatives(
              static_cast<int64_t>(batch.targets.at({r, pos})), catalog_size,
              spec.k, rng);
          for (int64_t i = 0; i < spec.k; ++i)
            dst[i] = double(set.indices[static_cast<size_t>(i)]);
        } else {
          for (int64_t i = 0; i < spec.k; ++i) dst[i] = 1.0;  // masked out
        }
      }
    }
    binds["negative_ids"] = std::move(negs);
  }
  return binds;
}

// One-shot convenience: builds the graph, binds a batch, returns the loss
// value. Training mode (dropout active) needs a graph rng.
inline double training_loss(const ModelConfig& cfg, const LossSpec& spec,
                            ParameterStore& store, const SequenceBatch& batch,
                            int64_t catalog_size, Rng& sample_rng,
                            const ForwardOptions& opt = {}) {
  CompGraph g(&store);
  TrainingGraph tg = build_training_graph(g, cfg, spec, catalog_size);
  Bindings binds =
      training_bindings(batch, cfg, spec, catalog_size, sample_rng);
  return g.forward(tg.loss, binds, opt)[0];
}

}  // namespace gsrec::model
