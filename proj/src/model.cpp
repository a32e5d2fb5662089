#include "pfnlab/model.hpp"

#include <algorithm>
#include <limits>

namespace pfnlab {

const char* embedding_kind_name(EmbeddingKind k) {
    switch (k) {
        case EmbeddingKind::shared_linear: return "shared_linear";
        case EmbeddingKind::untied_linear: return "untied_linear";
        case EmbeddingKind::piecewise_linear: return "piecewise_linear";
    }
    return "shared_linear";
}

EmbeddingKind embedding_kind_from(const std::string& s) {
    if (s == "shared_linear") return EmbeddingKind::shared_linear;
    if (s == "untied_linear") return EmbeddingKind::untied_linear;
    if (s == "piecewise_linear") return EmbeddingKind::piecewise_linear;
    throw DataError("unknown embedding kind: " + s);
}

void ModelConfig::validate() const {
    check_arg(d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_ff >= 1, "model config: sizes must be >= 1");
    check_arg(d_model % n_heads == 0, "model config: d_model must be divisible by n_heads");
    check_arg(max_classes >= 2, "model config: max_classes must be >= 2");
    check_arg(max_features >= 1, "model config: max_features must be >= 1");
    if (embedding_kind == EmbeddingKind::piecewise_linear)
        check_arg(n_bins >= 2, "model config: piecewise embedding needs n_bins >= 2");
    check_arg(dropout >= 0.0f && dropout < 1.0f, "model config: dropout must be in [0,1)");
}

TargetStats context_target_stats(const std::vector<float>& y_train) {
    TargetStats s;
    if (y_train.empty()) return s;
    double mean = 0.0;
    for (float v : y_train) mean += double(v);
    mean /= double(y_train.size());
    double var = 0.0;
    for (float v : y_train) var += (double(v) - mean) * (double(v) - mean);
    var /= double(y_train.size());
    s.mean = mean;
    s.std_raw = std::sqrt(var);
    s.std_emb = s.std_raw < 1e-6 ? 1.0 : s.std_raw;
    return s;
}

namespace {

void add_gaussian(ParamStore& store, Rng& rng, const std::string& name, std::vector<int64_t> shape,
                  int64_t fan_in) {
    Tensor t(std::move(shape));
    const double std = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : t.data) v = float(rng.normal() * std);
    store.add(name, std::move(t));
}

void add_const(ParamStore& store, const std::string& name, std::vector<int64_t> shape, float value) {
    store.add(name, Tensor(std::move(shape), value));
}

}  // namespace

PFNParams init_params(const ModelConfig& config, uint64_t seed) {
    config.validate();
    check_arg(config.embedding_kind == EmbeddingKind::shared_linear,
              "init_params builds the base model; feature embeddings are attached afterwards");
    check_arg(config.lora_rank == 0, "init_params builds the base model; LoRA is injected afterwards");

    PFNParams params;
    params.config = config;
    Rng rng(seed, hash_str("init_params"));
    ParamStore& s = params.store;
    const int64_t d = config.d_model;

    add_gaussian(s, rng, "feat_emb.W", {config.max_features, d}, 1);
    add_gaussian(s, rng, "target_emb.reg_w", {1, d}, 1);
    add_gaussian(s, rng, "target_emb.class_emb", {config.max_classes, d}, 1);
    add_gaussian(s, rng, "target_emb.missing", {d}, 1);
    for (int64_t l = 0; l < config.n_layers; ++l) {
        const std::string pfx = "layer" + std::to_string(l) + ".";
        for (const char* w : {"wq", "wk", "wv", "wo"}) add_gaussian(s, rng, pfx + "attn." + w, {d, d}, d);
        add_const(s, pfx + "ln1.gamma", {d}, 1.0f);
        add_const(s, pfx + "ln1.beta", {d}, 0.0f);
        add_const(s, pfx + "ln2.gamma", {d}, 1.0f);
        add_const(s, pfx + "ln2.beta", {d}, 0.0f);
        add_gaussian(s, rng, pfx + "mlp.W1", {d, config.d_ff}, d);
        add_const(s, pfx + "mlp.b1", {config.d_ff}, 0.0f);
        add_gaussian(s, rng, pfx + "mlp.W2", {config.d_ff, d}, config.d_ff);
        add_const(s, pfx + "mlp.b2", {d}, 0.0f);
    }
    add_const(s, "head.ln.gamma", {d}, 1.0f);
    add_const(s, "head.ln.beta", {d}, 0.0f);
    add_gaussian(s, rng, "head.W1", {d, d}, d);
    add_const(s, "head.b1", {d}, 0.0f);
    add_gaussian(s, rng, "head.W2", {d, 1 + config.max_classes}, d);
    add_const(s, "head.b2", {1 + config.max_classes}, 0.0f);
    return params;
}

namespace {

Predictions predictions_from(const GraphT<float>& g, const ForwardNodes<float>& fwd,
                             const ContextBatch& batch, const ModelConfig& cfg) {
    Predictions p;
    p.task_type = batch.task_type;
    if (batch.task_type == TaskType::regression) {
        const Tensor& v = g.value(fwd.prediction);
        p.values = Tensor({v.numel()}, v.data);
    } else {
        p.active_classes = batch.active_classes;
        const Tensor& l = g.value(fwd.prediction);
        p.logits = Tensor({l.rows(), cfg.max_classes}, -std::numeric_limits<float>::infinity());
        for (int64_t i = 0; i < l.rows(); ++i)
            for (int64_t c = 0; c < batch.active_classes; ++c) p.logits.at(i, c) = l.at(i, c);
    }
    return p;
}

}  // namespace

Predictions forward(const PFNParams& params, const ContextBatch& batch) {
    GraphT<float> g;
    const ForwardNodes<float> fwd = build_forward(g, params, batch);
    return predictions_from(g, fwd, batch, params.config);
}

std::pair<Predictions, AttentionRecord> forward_with_attention(const PFNParams& params,
                                                               const ContextBatch& batch) {
    GraphT<float> g;
    ForwardOptions opts;
    opts.with_attention = true;
    const ForwardNodes<float> fwd = build_forward(g, params, batch, opts);

    AttentionRecord rec;
    rec.n_test = fwd.n_te;
    rec.n_train = fwd.n_tr;
    rec.n_heads = params.config.n_heads;
    rec.weights = Tensor({rec.n_test, rec.n_train, rec.n_heads});
    const int64_t n = fwd.n_tr + fwd.n_te;
    for (int64_t h = 0; h < rec.n_heads; ++h) {
        const Tensor& w = g.value(fwd.last_layer_head_weights[size_t(h)]);  // n x n, test keys masked
        for (int64_t i = 0; i < rec.n_test; ++i) {
            for (int64_t j = 0; j < rec.n_train; ++j) rec.weights.at(i, j, h) = w.at(fwd.n_tr + i, j);
            for (int64_t j = rec.n_train; j < n; ++j)
                rec.max_test_key_weight = std::max(rec.max_test_key_weight, w.at(fwd.n_tr + i, j));
        }
    }
    return {predictions_from(g, fwd, batch, params.config), rec};
}

Tensor embed_context(const ContextBatch& batch, const PFNParams& params) {
    GraphT<float> g;
    int train_tgt = -1;
    if (batch.task_type == TaskType::regression) {
        const TargetStats stats = context_target_stats(batch.y_train_reg);
        TensorT<float> ycol({batch.n_train(), 1});
        for (int64_t i = 0; i < batch.n_train(); ++i)
            ycol.at(i, 0) = float((double(batch.y_train_reg[size_t(i)]) - stats.mean) / stats.std_emb);
        train_tgt = g.matmul(g.input(std::move(ycol)), g.param(params.store, "target_emb.reg_w"));
    } else {
        train_tgt = g.gather_rows(g.param(params.store, "target_emb.class_emb"), batch.y_train_cls);
    }
    const int missing = g.broadcast_row(g.param(params.store, "target_emb.missing"), batch.n_test());
    const int tgt = g.concat_rows({train_tgt, missing});
    const int feat = detail::build_feature_tokens(g, params, batch);
    return g.value(g.add(feat, tgt));
}

Tensor Predictions::probabilities() const {
    check_arg(task_type == TaskType::classification, "probabilities: classification only");
    Tensor out({logits.rows(), logits.cols()}, 0.0f);
    for (int64_t i = 0; i < logits.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t c = 0; c < active_classes; ++c) mx = std::max(mx, double(logits.at(i, c)));
        double denom = 0.0;
        for (int64_t c = 0; c < active_classes; ++c) denom += std::exp(double(logits.at(i, c)) - mx);
        for (int64_t c = 0; c < active_classes; ++c)
            out.at(i, c) = float(std::exp(double(logits.at(i, c)) - mx) / denom);
    }
    return out;
}

std::vector<int64_t> Predictions::labels() const {
    check_arg(task_type == TaskType::classification, "labels: classification only");
    std::vector<int64_t> out(size_t(logits.rows()));
    for (int64_t i = 0; i < logits.rows(); ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < active_classes; ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
        out[size_t(i)] = best;
    }
    return out;
}

std::vector<float> fit_quantile_edges(std::span<const float> values, int64_t n_bins) {
    check_arg(!values.empty(), "fit_quantile_edges: empty sample");
    check_arg(n_bins >= 1, "fit_quantile_edges: n_bins must be >= 1");
    std::vector<float> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const int64_t n = int64_t(sorted.size());
    std::vector<float> edges;
    for (int64_t k = 0; k <= n_bins; ++k) {
        const double pos = double(k) / double(n_bins) * double(n - 1);
        const int64_t lo = int64_t(std::floor(pos));
        const int64_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - double(lo);
        const double q = double(sorted[size_t(lo)]) * (1.0 - frac) + double(sorted[size_t(hi)]) * frac;
        const float qf = float(q);
        if (edges.empty() || qf > edges.back()) edges.push_back(qf);
    }
    if (edges.size() < 2) {
        // constant feature: single unit-width bin
        const float t0 = edges.empty() ? 0.0f : edges[0];
        edges.assign({t0, t0 + 1.0f});
    }
    return edges;
}

void piecewise_basis(float value, const std::vector<float>& edges, std::span<float> out) {
    const int64_t k = int64_t(edges.size()) - 1;
    check_arg(int64_t(out.size()) == k, "piecewise_basis: output size mismatch");
    for (int64_t b = 0; b < k; ++b) {
        const double w = double(edges[size_t(b + 1)]) - double(edges[size_t(b)]);
        double t = (double(value) - double(edges[size_t(b)])) / w;
        if (b > 0 && t < 0.0) t = 0.0;      // only bin 0 extends below the range
        if (b < k - 1 && t > 1.0) t = 1.0;  // only the last bin extends above

        out[size_t(b)] = float(t);
    }
}

PFNParams attach_feature_embeddings(const PFNParams& params, EmbeddingKind kind, const Tensor& train_X,
                                    int64_t n_bins) {
    check_arg(kind == EmbeddingKind::untied_linear || kind == EmbeddingKind::piecewise_linear,
              "attach_feature_embeddings: kind must be untied_linear or piecewise_linear");
    if (params.config.embedding_kind != EmbeddingKind::shared_linear)
        throw ContractError("attach_feature_embeddings: embeddings already attached");
    const int64_t m = train_X.cols();
    check_shape(m >= 1 && m <= params.config.max_features, "attach_feature_embeddings: bad feature count");

    PFNParams out = params;
    const Tensor& base = out.store.at("feat_emb.W").tensor;
    const int64_t d = out.config.d_model;

    if (kind == EmbeddingKind::untied_linear) {
        Tensor u({m, d});
        for (int64_t j = 0; j < m; ++j)
            for (int64_t c = 0; c < d; ++c) u.at(j, c) = base.at(j, c);
        out.store.add("feat_emb.untied.W", std::move(u), true);
        out.store.add("feat_emb.untied.bias", Tensor({m, d}), true);
        out.config.embedding_kind = EmbeddingKind::untied_linear;
        return out;
    }

    check_arg(n_bins >= 2, "attach_feature_embeddings: piecewise needs n_bins >= 2");
    out.pw_edges.clear();
    for (int64_t j = 0; j < m; ++j) {
        std::vector<float> col(size_t(train_X.rows()));
        for (int64_t i = 0; i < train_X.rows(); ++i) col[size_t(i)] = train_X.at(i, j);
        auto edges = fit_quantile_edges(col, n_bins);
        const int64_t bins = int64_t(edges.size()) - 1;
        Tensor v({bins, d});
        for (int64_t b = 0; b < bins; ++b) {
            const float width = edges[size_t(b + 1)] - edges[size_t(b)];
            for (int64_t c = 0; c < d; ++c) v.at(b, c) = width * base.at(j, c);
        }
        out.store.add("feat_emb.pw.V." + std::to_string(j), std::move(v), true);
        out.pw_edges.push_back(std::move(edges));
    }
    Tensor bias({m, d});
    for (int64_t j = 0; j < m; ++j)
        for (int64_t c = 0; c < d; ++c) bias.at(j, c) = out.pw_edges[size_t(j)][0] * base.at(j, c);
    out.store.add("feat_emb.pw.bias", std::move(bias), true);
    out.config.embedding_kind = EmbeddingKind::piecewise_linear;
    out.config.n_bins = n_bins;
    return out;
}

ContextBatch make_context_batch(const SupervisedData& data, std::span<const int64_t> prompt_rows,
                                std::span<const int64_t> query_rows) {
    ContextBatch b;
    b.task_type = data.task_type;
    b.active_classes = data.n_classes;
    const int64_t m = data.X.cols();
    b.x_train = Tensor({int64_t(prompt_rows.size()), m});
    b.x_test = Tensor({int64_t(query_rows.size()), m});
    for (size_t i = 0; i < prompt_rows.size(); ++i)
        for (int64_t j = 0; j < m; ++j) b.x_train.at(int64_t(i), j) = data.X.at(prompt_rows[i], j);
    for (size_t i = 0; i < query_rows.size(); ++i)
        for (int64_t j = 0; j < m; ++j) b.x_test.at(int64_t(i), j) = data.X.at(query_rows[i], j);
    if (data.task_type == TaskType::regression)
        b.y_train_reg = gather_reg(data.y_reg, prompt_rows);
    else
        b.y_train_cls = gather_cls(data.y_cls, prompt_rows);
    return b;
}

ContextBatch batch_from_task(const SyntheticTask& task, const ContextSplit& split) {
    SupervisedData d;
    d.X = task.X;
    d.y_reg = task.y_reg;
    d.y_cls = task.y_cls;
    d.task_type = task.spec.task_type;
    d.n_classes = task.spec.task_type == TaskType::classification ? task.spec.n_classes : 0;
    return make_context_batch(d, split.train_idx, split.test_idx);
}

SupervisedData data_from_task(const SyntheticTask& task, std::string name, float train_frac,
                              float val_frac, uint64_t split_seed) {
    check_arg(train_frac > 0 && val_frac > 0 && train_frac + val_frac < 1.0f,
              "data_from_task: bad split fractions");
    SupervisedData d;
    d.name = std::move(name);
    d.X = task.X;
    d.y_reg = task.y_reg;
    d.y_cls = task.y_cls;
    d.task_type = task.spec.task_type;
    d.n_classes = task.spec.task_type == TaskType::classification ? task.spec.n_classes : 0;
    Rng rng(split_seed, hash_str("three_way_split"));
    const auto perm = rng.permutation(task.n());
    const int64_t n_tr = llround(double(train_frac) * double(task.n()));
    const int64_t n_val = llround(double(val_frac) * double(task.n()));
    check_arg(n_tr >= 4 && n_val >= 1 && n_tr + n_val < task.n(), "data_from_task: degenerate split");
    d.train_idx.assign(perm.begin(), perm.begin() + n_tr);
    d.val_idx.assign(perm.begin() + n_tr, perm.begin() + n_tr + n_val);
    d.test_idx.assign(perm.begin() + n_tr + n_val, perm.end());
    return d;
}

std::vector<float> gather_reg(const std::vector<float>& y, std::span<const int64_t> rows) {
    std::vector<float> out;
    out.reserve(rows.size());
    for (int64_t i : rows) out.push_back(y[size_t(i)]);
    return out;
}

std::vector<int64_t> gather_cls(const std::vector<int64_t>& y, std::span<const int64_t> rows) {
    std::vector<int64_t> out;
    out.reserve(rows.size());
    for (int64_t i : rows) out.push_back(y[size_t(i)]);
    return out;
}

}  // namespace pfnlab
