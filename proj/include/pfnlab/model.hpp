#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pfnlab/common.hpp"
#include "pfnlab/graph.hpp"
#include "pfnlab/param_store.hpp"
#include "pfnlab/prior.hpp"
#include "pfnlab/rng.hpp"

namespace pfnlab {

enum class EmbeddingKind { shared_linear, untied_linear, piecewise_linear };

const char* embedding_kind_name(EmbeddingKind k);
EmbeddingKind embedding_kind_from(const std::string& s);

struct ModelConfig {
    int64_t d_model = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t d_ff = 256;
    int64_t max_features = 16;
    int64_t max_classes = 10;
    EmbeddingKind embedding_kind = EmbeddingKind::shared_linear;
    int64_t n_bins = 8;  // piecewise_linear only
    float dropout = 0.0f;
    int64_t lora_rank = 0;  // 0 = no adapters injected
    float lora_alpha = 0.0f;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Parameters plus the fitted piecewise bin edges; the edges are data, not
// learnable weights, and travel through checkpoints as metadata.
template <typename T>
struct PFNParamsT {
    ModelConfig config;
    ParamStoreT<T> store;
    std::vector<std::vector<float>> pw_edges;

    template <typename U>
    PFNParamsT<U> cast() const {
        PFNParamsT<U> out;
        out.config = config;
        out.store = store.template cast<U>();
        out.pw_edges = pw_edges;
        return out;
    }
};
using PFNParams = PFNParamsT<float>;

// Labeled context plus unlabeled queries: the model's prompt.
struct ContextBatch {
    Tensor x_train;  // n_tr x m
    Tensor x_test;   // n_te x m
    std::vector<float> y_train_reg;
    std::vector<int64_t> y_train_cls;
    std::vector<uint8_t> feature_mask;  // per-column, 1 = active; empty = all active
    TaskType task_type = TaskType::regression;
    int64_t active_classes = 0;

    int64_t n_train() const { return x_train.rows(); }
    int64_t n_test() const { return x_test.rows(); }
    int64_t n_features() const { return x_train.cols(); }
    bool feature_active(int64_t j) const { return feature_mask.empty() || feature_mask[size_t(j)] != 0; }
};

// Context target statistics for regression. Embedding uses the guarded std
// (1 when the raw std is degenerate); de-scaling uses the raw std, so a
// constant context collapses every prediction onto the context mean.
struct TargetStats {
    double mean = 0.0;
    double std_raw = 1.0;
    double std_emb = 1.0;
};
TargetStats context_target_stats(const std::vector<float>& y_train);

struct ForwardOptions {
    bool training = false;  // enables dropout when config.dropout > 0
    uint64_t dropout_seed = 0;
    bool with_attention = false;
};

// Final-layer inter-sample attention for test-row queries over train-row
// keys. max_test_key_weight is the largest weight the masked softmax put on
// any test key; the mask contract makes it exactly zero.
struct AttentionRecord {
    int64_t n_test = 0;
    int64_t n_train = 0;
    int64_t n_heads = 0;
    Tensor weights;  // n_test x n_train x n_heads
    float max_test_key_weight = 0.0f;
};

struct Predictions {
    TaskType task_type = TaskType::regression;
    Tensor values;  // regression: (n_te)
    Tensor logits;  // classification: (n_te x max_classes), inactive classes -inf
    int64_t active_classes = 0;

    int64_t n() const { return task_type == TaskType::regression ? values.numel() : logits.rows(); }
    // Softmax over active classes; inactive classes carry exactly 0.
    Tensor probabilities() const;
    std::vector<int64_t> labels() const;
};

PFNParams init_params(const ModelConfig& config, uint64_t seed);

Predictions forward(const PFNParams& params, const ContextBatch& batch);
std::pair<Predictions, AttentionRecord> forward_with_attention(const PFNParams& params,
                                                               const ContextBatch& batch);

// Token matrix the backbone sees (one row per sample), for inspection/tests.
Tensor embed_context(const ContextBatch& batch, const PFNParams& params);

// Adds untied-linear or piecewise-linear feature embedding modules whose
// initial output reproduces the base shared-linear map exactly; the new
// parameters are trainable. Piecewise bins are fit on train_X quantiles.
PFNParams attach_feature_embeddings(const PFNParams& params, EmbeddingKind kind, const Tensor& train_X,
                                    int64_t n_bins);

// Piecewise-linear basis for one value given bin edges (first/last bins are
// unclamped so the basis can represent the identity everywhere).
void piecewise_basis(float value, const std::vector<float>& edges, std::span<float> out);

// Quantile bin edges (n_bins + 1, deduplicated; single-bin fallback for
// constant samples).
std::vector<float> fit_quantile_edges(std::span<const float> values, int64_t n_bins);

// ---- checkpoint io (binary PFNCKPT1 container) ----

void save_checkpoint(const std::string& path, const PFNParams& params,
                     const std::string& extra_metadata_json = "{}");
PFNParams load_checkpoint(const std::string& path, std::string* metadata_json = nullptr);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& json_text);

// ---- model-ready dataset carrier shared by trainer/retrieval/bench ----

struct SupervisedData {
    std::string name;
    Tensor X;  // n x m, preprocessed
    std::vector<float> y_reg;
    std::vector<int64_t> y_cls;
    TaskType task_type = TaskType::regression;
    int64_t n_classes = 0;
    std::vector<int64_t> train_idx, val_idx, test_idx;

    int64_t n_train() const { return int64_t(train_idx.size()); }
};

ContextBatch make_context_batch(const SupervisedData& data, std::span<const int64_t> prompt_rows,
                                std::span<const int64_t> query_rows);
ContextBatch batch_from_task(const SyntheticTask& task, const ContextSplit& split);
SupervisedData data_from_task(const SyntheticTask& task, std::string name, float train_frac,
                              float val_frac, uint64_t split_seed);

std::vector<float> gather_reg(const std::vector<float>& y, std::span<const int64_t> rows);
std::vector<int64_t> gather_cls(const std::vector<int64_t>& y, std::span<const int64_t> rows);

// ---- graph-level builders (templated so grad_check can run them in f64) ----

template <typename T>
struct ForwardNodes {
    int prediction = -1;  // regression: (n_te x 1) de-scaled; classification: (n_te x active) logits
    TargetStats stats;
    std::vector<int> last_layer_head_weights;  // with_attention: per-head (n x n) weight nodes
    int64_t n_tr = 0, n_te = 0;
};

namespace detail {

template <typename T>
int linear_maybe_lora(GraphT<T>& g, const PFNParamsT<T>& params, int64_t layer, const char* which, int x) {
    const std::string base_name = "layer" + std::to_string(layer) + ".attn." + which;
    const int base = g.matmul(x, g.param(params.store, base_name));
    if (params.config.lora_rank <= 0) return base;
    const std::string lora = "lora.layer" + std::to_string(layer) + "." + which;
    const int a = g.param(params.store, lora + ".A");  // rank x d
    const int b = g.param(params.store, lora + ".B");  // d x rank
    const double scale = double(params.config.lora_alpha) / double(params.config.lora_rank);
    const int xa = g.matmul(x, a, false, true);
    return g.add(base, g.matmul(xa, b, false, true, scale));
}

// Sum of per-feature embeddings for every row of X (train rows stacked above
// test rows), according to the configured embedding kind.
template <typename T>
int build_feature_tokens(GraphT<T>& g, const PFNParamsT<T>& params, const ContextBatch& batch) {
    const ModelConfig& cfg = params.config;
    const int64_t m = batch.n_features();
    const int64_t n = batch.n_train() + batch.n_test();

    TensorT<T> xall({n, m});
    for (int64_t i = 0; i < batch.n_train(); ++i)
        for (int64_t j = 0; j < m; ++j)
            xall.at(i, j) = batch.feature_active(j) ? T(batch.x_train.at(i, j)) : T(0);
    for (int64_t i = 0; i < batch.n_test(); ++i)
        for (int64_t j = 0; j < m; ++j)
            xall.at(batch.n_train() + i, j) = batch.feature_active(j) ? T(batch.x_test.at(i, j)) : T(0);

    std::vector<int64_t> active;
    for (int64_t j = 0; j < m; ++j)
        if (batch.feature_active(j)) active.push_back(j);

    if (cfg.embedding_kind == EmbeddingKind::shared_linear) {
        const int w = g.param(params.store, "feat_emb.W");
        const int wm = g.slice_rows(w, 0, m);
        return g.matmul(g.input(std::move(xall)), wm);
    }
    if (cfg.embedding_kind == EmbeddingKind::untied_linear) {
        const int u = g.param(params.store, "feat_emb.untied.W");
        check_shape(g.value(u).rows() == m, "untied embedding was attached for a different feature count");
        const int lin = g.matmul(g.input(std::move(xall)), u);
        const int bias = g.param(params.store, "feat_emb.untied.bias");
        const int bias_sum = g.sum_over_rows(g.gather_rows(bias, active));
        return g.add_rowvec(lin, bias_sum);
    }
    // piecewise_linear: sum_j P_j(x_j) V_j + per-feature bias
    check_shape(int64_t(params.pw_edges.size()) == m,
                "piecewise embedding was attached for a different feature count");
    int acc = -1;
    for (int64_t j : active) {
        const auto& edges = params.pw_edges[size_t(j)];
        const int64_t k = int64_t(edges.size()) - 1;
        TensorT<T> basis({n, k});
        std::vector<float> row(static_cast<size_t>(k));
        for (int64_t i = 0; i < n; ++i) {
            const float v = float(xall.at(i, j));
            piecewise_basis(v, edges, row);
            for (int64_t b = 0; b < k; ++b) basis.at(i, b) = T(row[size_t(b)]);
        }
        const int vj = g.param(params.store, "feat_emb.pw.V." + std::to_string(j));
        const int term = g.matmul(g.input(std::move(basis)), vj);
        acc = acc < 0 ? term : g.add(acc, term);
    }
    const int bias = g.param(params.store, "feat_emb.pw.bias");
    const int bias_sum = g.sum_over_rows(g.gather_rows(bias, active));
    if (acc < 0) acc = g.input(TensorT<T>({n, cfg.d_model}));  // no active features
    return g.add_rowvec(acc, bias_sum);
}

}  // namespace detail

// Embedding + masked inter-sample attention blocks + prediction head. Keys
// and values are structurally restricted to train rows, which realizes the
// attention mask (test tokens are queries only). When with_attention is set,
// the final layer instead scores the full key set under an explicit boolean
// mask so the record can certify the exact zeros on test keys; the masked
// weights are identical to the restricted ones.
template <typename T>
ForwardNodes<T> build_forward(GraphT<T>& g, const PFNParamsT<T>& params, const ContextBatch& batch,
                              const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = params.config;
    cfg.validate();
    const int64_t n_tr = batch.n_train();
    const int64_t n_te = batch.n_test();
    const int64_t n = n_tr + n_te;
    const int64_t d = cfg.d_model;
    const int64_t dh = d / cfg.n_heads;

    if (n_tr < 1) throw ContractError("forward: empty train context");
    check_shape(batch.n_features() <= cfg.max_features,
                "feature count " + std::to_string(batch.n_features()) + " exceeds max_features " +
                    std::to_string(cfg.max_features));
    if (batch.n_test() > 0)
        check_shape(batch.x_test.cols() == batch.n_features(), "train/test feature width mismatch");

    ForwardNodes<T> out;
    out.n_tr = n_tr;
    out.n_te = n_te;

    // target-side tokens
    int train_tgt = -1;
    if (batch.task_type == TaskType::regression) {
        check_arg(int64_t(batch.y_train_reg.size()) == n_tr, "forward: y_train size mismatch");
        out.stats = context_target_stats(batch.y_train_reg);
        TensorT<T> ycol({n_tr, 1});
        for (int64_t i = 0; i < n_tr; ++i)
            ycol.at(i, 0) = T((double(batch.y_train_reg[size_t(i)]) - out.stats.mean) / out.stats.std_emb);
        train_tgt = g.matmul(g.input(std::move(ycol)), g.param(params.store, "target_emb.reg_w"));
    } else {
        check_arg(int64_t(batch.y_train_cls.size()) == n_tr, "forward: y_train size mismatch");
        check_arg(batch.active_classes >= 2 && batch.active_classes <= cfg.max_classes,
                  "forward: active_classes out of range");
        for (int64_t y : batch.y_train_cls)
            check_arg(y >= 0 && y < batch.active_classes, "forward: train label outside active classes");
        train_tgt = g.gather_rows(g.param(params.store, "target_emb.class_emb"), batch.y_train_cls);
    }
    const int missing = g.broadcast_row(g.param(params.store, "target_emb.missing"), n_te);
    const int tgt = g.concat_rows({train_tgt, missing});

    const int feat = detail::build_feature_tokens(g, params, batch);
    int x = g.add(feat, tgt);

    const bool use_dropout = opts.training && cfg.dropout > 0.0f;
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        const std::string pfx = "layer" + std::to_string(layer) + ".";
        const bool full_keys = opts.with_attention && layer == cfg.n_layers - 1;

        const int ln1 = g.layer_norm(x, g.param(params.store, pfx + "ln1.gamma"),
                                     g.param(params.store, pfx + "ln1.beta"), 1e-5);
        const int kv_src = full_keys ? ln1 : g.slice_rows(ln1, 0, n_tr);
        const int q = detail::linear_maybe_lora(g, params, layer, "wq", ln1);
        const int k = detail::linear_maybe_lora(g, params, layer, "wk", kv_src);
        const int v = detail::linear_maybe_lora(g, params, layer, "wv", kv_src);

        std::vector<uint8_t> mask;
        if (full_keys) {
            mask.assign(size_t(n * n), 0);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n_tr; ++j) mask[size_t(i * n + j)] = 1;
        }

        std::vector<int> mixes;
        for (int64_t h = 0; h < cfg.n_heads; ++h) {
            const int qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            const int kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            const int vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            const int scores = g.matmul(qh, kh, false, true, 1.0 / std::sqrt(double(dh)));
            const int weights = full_keys ? g.softmax_rows(scores, &mask) : g.softmax_rows(scores);
            if (full_keys) out.last_layer_head_weights.push_back(weights);
            mixes.push_back(g.matmul(weights, vh));
        }
        int attn = detail::linear_maybe_lora(g, params, layer, "wo", g.concat_cols(mixes));
        if (use_dropout)
            attn = g.dropout(attn, double(cfg.dropout), hash_combine(opts.dropout_seed, uint64_t(layer), 0));
        x = g.add(x, attn);

        const int ln2 = g.layer_norm(x, g.param(params.store, pfx + "ln2.gamma"),
                                     g.param(params.store, pfx + "ln2.beta"), 1e-5);
        const int h1 = g.gelu(g.add_rowvec(g.matmul(ln2, g.param(params.store, pfx + "mlp.W1")),
                                           g.param(params.store, pfx + "mlp.b1")));
        int h2 = g.add_rowvec(g.matmul(h1, g.param(params.store, pfx + "mlp.W2")),
                              g.param(params.store, pfx + "mlp.b2"));
        if (use_dropout)
            h2 = g.dropout(h2, double(cfg.dropout), hash_combine(opts.dropout_seed, uint64_t(layer), 1));
        x = g.add(x, h2);
    }

    const int xt = g.slice_rows(x, n_tr, n);
    const int hn = g.layer_norm(xt, g.param(params.store, "head.ln.gamma"),
                                g.param(params.store, "head.ln.beta"), 1e-5);
    const int h1 = g.gelu(
        g.add_rowvec(g.matmul(hn, g.param(params.store, "head.W1")), g.param(params.store, "head.b1")));
    const int head_out =
        g.add_rowvec(g.matmul(h1, g.param(params.store, "head.W2")), g.param(params.store, "head.b2"));

    if (batch.task_type == TaskType::regression) {
        const int col = g.slice_cols(head_out, 0, 1);
        out.prediction = g.affine(col, out.stats.std_raw, out.stats.mean);
    } else {
        out.prediction = g.slice_cols(head_out, 1, 1 + batch.active_classes);
    }
    return out;
}

// Task-appropriate training loss on the query rows.
template <typename T>
int build_loss(GraphT<T>& g, const PFNParamsT<T>& params, const ContextBatch& batch,
               const std::vector<float>& target_reg, const std::vector<int64_t>& target_cls,
               const ForwardOptions& opts = {}) {
    const ForwardNodes<T> fwd = build_forward(g, params, batch, opts);
    if (batch.task_type == TaskType::regression) {
        TensorT<T> t({int64_t(target_reg.size())});
        for (size_t i = 0; i < target_reg.size(); ++i) t.at(int64_t(i)) = T(target_reg[i]);
        return g.mse_loss(fwd.prediction, t);
    }
    return g.cross_entropy_loss(fwd.prediction, target_cls, batch.active_classes);
}

}  // namespace pfnlab
