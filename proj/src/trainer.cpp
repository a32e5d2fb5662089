#include "pfnlab/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "pfnlab/parallel.hpp"

namespace pfnlab {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool segment_is_layernorm(const std::string& name) {
    size_t start = 0;
    while (start <= name.size()) {
        size_t end = name.find('.', start);
        if (end == std::string::npos) end = name.size();
        const std::string seg = name.substr(start, end - start);
        if (seg.rfind("ln", 0) == 0) {
            bool digits = true;
            for (size_t i = 2; i < seg.size(); ++i) digits = digits && std::isdigit((unsigned char)seg[i]);
            if (digits) return true;
        }
        if (end == name.size()) break;
        start = end + 1;
    }
    return false;
}

int64_t layer_index_of(const std::string& name) {
    if (name.rfind("layer", 0) != 0) return -1;
    size_t i = 5;
    int64_t v = 0;
    bool any = false;
    while (i < name.size() && std::isdigit((unsigned char)name[i])) {
        v = v * 10 + (name[i] - '0');
        ++i;
        any = true;
    }
    return (any && i < name.size() && name[i] == '.') ? v : -1;
}

struct LoopState {
    ParamStore best_store;
    double best_metric = 0.0;
    int64_t best_step = -1;
    int64_t non_improving = 0;
};

// The shared finetune / from-scratch training loop. Evaluations happen at
// steps eval_every, 2*eval_every, ...; the best evaluation's parameters are
// restored at the end.
FinetuneResult run_training_loop(PFNParams params, const SupervisedData& data,
                                 const TrainProtocol& protocol) {
    check_arg(protocol.pred_len >= 1, "protocol: pred_len must be >= 1");
    check_arg(protocol.eval_every >= 1, "protocol: eval_every must be >= 1");
    check_arg(protocol.patience >= 1, "protocol: patience must be >= 1");
    check_arg(protocol.max_steps >= 0, "protocol: max_steps must be >= 0");
    check_arg(!data.train_idx.empty(), "finetune: dataset has no train split");
    check_arg(!data.val_idx.empty(), "finetune: dataset has no val split");

    const int64_t n_train = int64_t(data.train_idx.size());
    // Desk-scale rule: cap the loss-object count at half the train split so a
    // prompt always remains.
    const int64_t pred_len = std::min(protocol.pred_len, n_train / 2);
    if (pred_len < 1)
        throw TrainError("protocol error: pred_len " + std::to_string(protocol.pred_len) +
                         " leaves no prompt/loss partition for train size " + std::to_string(n_train));

    const auto t0 = Clock::now();
    FinetuneResult out;
    out.params = params;
    LoopState best;
    const AdamConfig adam{double(protocol.lr), 0.9, 0.999, 1e-8};

    for (int64_t step = 1; step <= protocol.max_steps; ++step) {
        const uint64_t step_seed = hash_combine(protocol.seed, hash_str("ft_step"), uint64_t(step));
        Rng rng(step_seed, hash_str("partition"));
        std::vector<int64_t> rows = data.train_idx;
        rng.shuffle(rows);
        const std::vector<int64_t> loss_rows(rows.begin(), rows.begin() + pred_len);
        const std::vector<int64_t> prompt_rows(rows.begin() + pred_len, rows.end());

        const ContextBatch batch = make_context_batch(data, prompt_rows, loss_rows);
        GraphT<float> g;
        const int loss_node =
            build_loss(g, params, batch, gather_reg(data.y_reg, loss_rows), gather_cls(data.y_cls, loss_rows));
        const double loss = double(g.scalar_value(loss_node));
        if (!std::isfinite(loss))
            throw TrainError("finetune diverged: non-finite loss at step " + std::to_string(step));
        g.backward(loss_node);
        adam_step(params.store, g.trainable_grads(params.store), adam);

        if (step % protocol.eval_every == 0) {
            const double val = evaluate_metric(params, data, data.val_idx);
            out.history.records.push_back({step, val, loss});
            if (best.best_step < 0 || metric_improves(val, best.best_metric, data.task_type)) {
                best.best_store = params.store;
                best.best_metric = val;
                best.best_step = step;
                best.non_improving = 0;
            } else if (++best.non_improving >= protocol.patience) {
                break;
            }
        }
    }

    out.history.wall_clock_seconds = seconds_since(t0);
    if (best.best_step >= 0) {
        out.params.store = std::move(best.best_store);
        out.history.best_step = best.best_step;
        out.history.best_val_metric = best.best_metric;
    }
    return out;
}

}  // namespace

std::string FinetuneStrategy::name() const {
    switch (kind) {
        case Kind::full: return "full";
        case Kind::lora: return "lora_r" + std::to_string(lora_rank);
        case Kind::last_layers: return "last" + std::to_string(last_k);
        case Kind::emb_ln_head: return "emb_ln_head";
        case Kind::feature_emb:
            return std::string("feat_") +
                   (fe_kind == EmbeddingKind::piecewise_linear ? "piecewise" : "untied") +
                   (fe_also_full ? "_full" : "");
    }
    return "full";
}

FinetuneStrategy strategy_from_name(const std::string& name) {
    if (name == "full") return FinetuneStrategy::full_ft();
    if (name.rfind("lora_r", 0) == 0) {
        const int64_t r = std::stoll(name.substr(6));
        return FinetuneStrategy::lora(r, float(r));
    }
    if (name.rfind("last", 0) == 0) return FinetuneStrategy::last_layers(std::stoll(name.substr(4)));
    if (name == "emb_ln_head") return FinetuneStrategy::emb_ln_head();
    if (name == "feat_untied") return FinetuneStrategy::feature_emb(EmbeddingKind::untied_linear, false, 8);
    if (name == "feat_untied_full") return FinetuneStrategy::feature_emb(EmbeddingKind::untied_linear, true, 8);
    if (name == "feat_piecewise") return FinetuneStrategy::feature_emb(EmbeddingKind::piecewise_linear, false, 8);
    if (name == "feat_piecewise_full")
        return FinetuneStrategy::feature_emb(EmbeddingKind::piecewise_linear, true, 8);
    throw DataError("unknown finetune strategy: " + name);
}

void build_trainable_mask(PFNParams& params, const FinetuneStrategy& strategy) {
    const int64_t n_layers = params.config.n_layers;
    if (strategy.kind == FinetuneStrategy::Kind::last_layers)
        check_arg(strategy.last_k >= 1 && strategy.last_k <= n_layers,
                  "build_trainable_mask: last_layers k out of range");
    if (strategy.kind == FinetuneStrategy::Kind::lora)
        check_arg(params.config.lora_rank > 0,
                  "build_trainable_mask: LoRA mask requested before inject_lora");
    if (strategy.kind == FinetuneStrategy::Kind::feature_emb)
        check_arg(params.config.embedding_kind != EmbeddingKind::shared_linear,
                  "build_trainable_mask: feature embeddings not attached");

    for (const auto& name : params.store.names()) {
        bool on = false;
        switch (strategy.kind) {
            case FinetuneStrategy::Kind::full: on = true; break;
            case FinetuneStrategy::Kind::lora: on = name.rfind("lora.", 0) == 0; break;
            case FinetuneStrategy::Kind::last_layers: {
                const int64_t layer = layer_index_of(name);
                on = (layer >= n_layers - strategy.last_k && layer >= 0) || name.rfind("head.", 0) == 0;
                break;
            }
            case FinetuneStrategy::Kind::emb_ln_head:
                on = name.rfind("feat_emb.", 0) == 0 || name.rfind("target_emb.", 0) == 0 ||
                     name.rfind("head.", 0) == 0 || segment_is_layernorm(name);
                break;
            case FinetuneStrategy::Kind::feature_emb:
                on = strategy.fe_also_full || name.rfind("feat_emb.untied.", 0) == 0 ||
                     name.rfind("feat_emb.pw.", 0) == 0;
                break;
        }
        params.store.set_trainable(name, on);
    }
}

PFNParams inject_lora(const PFNParams& params, int64_t rank, float alpha) {
    check_arg(rank >= 1, "inject_lora: rank must be >= 1");
    if (params.config.lora_rank > 0) throw ContractError("inject_lora: adapters already injected");

    PFNParams out = params;
    const int64_t d = out.config.d_model;
    Rng rng(hash_combine(hash_str("lora_init"), uint64_t(rank)), 0);
    for (int64_t l = 0; l < out.config.n_layers; ++l) {
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            const std::string host = "layer" + std::to_string(l) + ".attn." + w;
            out.store.set_trainable(host, false);  // base matrices frozen
            Tensor a({rank, d});
            const double std = 1.0 / std::sqrt(double(d));
            for (auto& v : a.data) v = float(rng.normal() * std);
            out.store.add("lora.layer" + std::to_string(l) + "." + w + ".A", std::move(a), true);
            out.store.add("lora.layer" + std::to_string(l) + "." + w + ".B", Tensor({d, rank}), true);
        }
    }
    out.config.lora_rank = rank;
    out.config.lora_alpha = alpha;
    return out;
}

PretrainResult pretrain(const ModelConfig& config, const PriorConfig& prior, const PretrainConfig& cfg) {
    check_arg(cfg.steps >= 0, "pretrain: steps must be >= 0");
    check_arg(prior.n_features_max <= config.max_features,
              "pretrain: prior n_features_max exceeds model max_features");
    check_arg(prior.n_classes_max <= config.max_classes,
              "pretrain: prior n_classes_max exceeds model max_classes");

    PretrainResult out;
    out.params = init_params(config, cfg.seed);
    const auto t0 = Clock::now();

    struct TaskGrad {
        double loss = 0.0;
        GradMap grads;
    };

    for (int64_t step = 0; step < cfg.steps; ++step) {
        const auto batch = sample_meta_batch(prior, step);
        const int64_t b = int64_t(batch.size());
        std::vector<TaskGrad> results(static_cast<size_t>(b));

        parallel_for(b, cfg.n_threads, [&](int64_t slot) {
            const auto& item = batch[size_t(slot)];
            const ContextBatch cb = batch_from_task(item.task, item.split);
            GraphT<float> g;
            ForwardOptions opts;
            opts.training = true;
            opts.dropout_seed = hash_combine(cfg.seed, hash_str("dropout"), uint64_t(step), uint64_t(slot));
            const int loss_node = build_loss(g, out.params, cb,
                                             gather_reg(item.task.y_reg, item.split.test_idx),
                                             gather_cls(item.task.y_cls, item.split.test_idx), opts);
            results[size_t(slot)].loss = double(g.scalar_value(loss_node));
            g.backward(loss_node);
            results[size_t(slot)].grads = g.trainable_grads(out.params.store);
        });

        // deterministic merge in slot order
        double step_loss = 0.0;
        GradMap total;
        for (int64_t slot = 0; slot < b; ++slot) {
            step_loss += results[size_t(slot)].loss / double(b);
            for (auto& [name, grad] : results[size_t(slot)].grads) {
                auto it = total.find(name);
                if (it == total.end()) {
                    Tensor scaled = grad;
                    for (auto& v : scaled.data) v /= float(b);
                    total.emplace(name, std::move(scaled));
                } else {
                    for (int64_t i = 0; i < grad.numel(); ++i) it->second.at(i) += grad.at(i) / float(b);
                }
            }
        }
        if (!std::isfinite(step_loss))
            throw TrainError("pretrain diverged: non-finite loss at step " + std::to_string(step));

        const double warm =
            cfg.warmup_steps > 0 ? std::min(1.0, double(step + 1) / double(cfg.warmup_steps)) : 1.0;
        adam_step(out.params.store, total, {double(cfg.lr) * warm, 0.9, 0.999, 1e-8});

        if (step % cfg.log_every == 0 || step == cfg.steps - 1) {
            out.loss_curve.push_back({step, 0.0, step_loss});
            if (cfg.verbose)
                std::fprintf(stderr, "[pretrain] step %lld/%lld loss %.4f (%.1fs)\n", (long long)step,
                             (long long)cfg.steps, step_loss, seconds_since(t0));
        }
    }
    return out;
}

FinetuneResult finetune(const PFNParams& checkpoint, const SupervisedData& data,
                        const FinetuneStrategy& strategy, const TrainProtocol& protocol) {
    PFNParams params = checkpoint;
    if (strategy.kind == FinetuneStrategy::Kind::lora)
        params = inject_lora(params, strategy.lora_rank, strategy.lora_alpha);
    if (strategy.kind == FinetuneStrategy::Kind::feature_emb) {
        Tensor train_x({int64_t(data.train_idx.size()), data.X.cols()});
        for (size_t i = 0; i < data.train_idx.size(); ++i)
            for (int64_t j = 0; j < data.X.cols(); ++j)
                train_x.at(int64_t(i), j) = data.X.at(data.train_idx[i], j);
        params = attach_feature_embeddings(params, strategy.fe_kind, train_x, strategy.fe_bins);
    }
    build_trainable_mask(params, strategy);
    params.store.reset_adam_state();

    FinetuneResult out = run_training_loop(std::move(params), data, protocol);
    if (out.history.records.empty()) {
        // No evaluation ever ran, so there is no "best evaluation" to
        // restore; hand back the input checkpoint untouched.
        out.params = checkpoint;
    }
    return out;
}

FinetuneResult train_from_scratch(const ModelConfig& config, const SupervisedData& data,
                                  const TrainProtocol& protocol) {
    PFNParams params = init_params(config, protocol.seed);
    FinetuneResult out = run_training_loop(params, data, protocol);
    if (out.history.records.empty()) out.params = std::move(params);
    return out;
}

std::vector<double> lr_grid() {
    const double lo = 5e-6, hi = 5e-4;
    std::vector<double> grid(10);
    for (int i = 0; i < 10; ++i)
        grid[size_t(i)] = std::exp(std::log(lo) + double(i) / 9.0 * (std::log(hi) - std::log(lo)));
    grid.front() = lo;  // endpoints exact
    grid.back() = hi;
    return grid;
}

SweepResult lr_sweep(const PFNParams& checkpoint, const SupervisedData& data,
                     const FinetuneStrategy& strategy, const TrainProtocol& base_protocol,
                     int64_t n_threads, std::span<const double> grid_override) {
    const std::vector<double> grid =
        grid_override.empty() ? lr_grid() : std::vector<double>(grid_override.begin(), grid_override.end());
    SweepResult out;
    out.entries.resize(grid.size());

    parallel_for(int64_t(grid.size()), n_threads, [&](int64_t i) {
        SweepEntry& e = out.entries[size_t(i)];
        e.lr = grid[size_t(i)];
        TrainProtocol p = base_protocol;
        p.lr = float(e.lr);
        try {
            e.result = finetune(checkpoint, data, strategy, p);
            if (e.result.history.records.empty()) {
                e.diverged = true;
                e.error = "no evaluations recorded";
            }
        } catch (const std::exception& ex) {
            e.diverged = true;
            e.error = ex.what();
        }
    });

    bool found = false;
    double best_metric = worst_metric(data.task_type);
    for (size_t i = 0; i < out.entries.size(); ++i) {
        const SweepEntry& e = out.entries[i];
        if (e.diverged) continue;
        // strict improvement only: ties resolve toward the smaller lr
        if (!found || metric_improves(e.result.history.best_val_metric, best_metric, data.task_type)) {
            found = true;
            best_metric = e.result.history.best_val_metric;
            out.best_index = i;
            out.best_lr = e.lr;
        }
    }
    if (!found) throw TrainError("sweep error: all learning rates diverged");
    return out;
}

Predictions predict(const PFNParams& params, const SupervisedData& data, std::span<const int64_t> rows) {
    return forward(params, make_context_batch(data, data.train_idx, rows));
}

double evaluate_metric(const PFNParams& params, const SupervisedData& data,
                       std::span<const int64_t> rows) {
    const Predictions p = predict(params, data, rows);
    if (data.task_type == TaskType::classification) {
        const auto labels = p.labels();
        return accuracy(labels, gather_cls(data.y_cls, rows));
    }
    return rmse(p.values.data, gather_reg(data.y_reg, rows));
}

Predictions ensemble_predict(const std::vector<PFNParams>& members, const SupervisedData& data,
                             std::span<const int64_t> rows) {
    check_arg(!members.empty(), "ensemble_predict: need at least one member");
    for (const auto& m : members)
        check_arg(m.config == members.front().config, "ensemble_predict: member ModelConfig mismatch");

    Predictions out;
    out.task_type = data.task_type;
    const int64_t n = int64_t(rows.size());
    if (data.task_type == TaskType::regression) {
        std::vector<double> acc(size_t(n), 0.0);
        for (const auto& m : members) {
            const Predictions p = predict(m, data, rows);
            for (int64_t i = 0; i < n; ++i) acc[size_t(i)] += double(p.values.at(i));
        }
        out.values = Tensor({n});
        for (int64_t i = 0; i < n; ++i) out.values.at(i) = float(acc[size_t(i)] / double(members.size()));
        return out;
    }

    const int64_t c_max = members.front().config.max_classes;
    out.active_classes = data.n_classes;
    std::vector<double> acc(size_t(n * c_max), 0.0);
    for (const auto& m : members) {
        const Tensor probs = predict(m, data, rows).probabilities();
        for (int64_t i = 0; i < n * c_max; ++i) acc[size_t(i)] += double(probs.at(i));
    }
    // store ln(mean probability) as the logits so probabilities() and
    // labels() recover the ensemble distribution
    out.logits = Tensor({n, c_max}, -std::numeric_limits<float>::infinity());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < data.n_classes; ++c) {
            const double p = acc[size_t(i * c_max + c)] / double(members.size());
            out.logits.at(i, c) = p > 0.0 ? float(std::log(p)) : -std::numeric_limits<float>::infinity();
        }
    return out;
}

void write_history_jsonl(const std::string& path, const RunHistory& history, uint64_t config_hash) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open history file for writing: " + path);
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx", (unsigned long long)config_hash);
    for (const auto& r : history.records) {
        nlohmann::json line{{"step", r.step}, {"train_loss", r.train_loss}, {"val_metric", r.val_metric}};
        os << line.dump() << "\n";
    }
    nlohmann::json summary{{"best_step", history.best_step},
                           {"best_val_metric", history.best_val_metric},
                           {"config_hash", std::string(hash_hex)}};
    os << summary.dump() << "\n";
}

}  // namespace pfnlab
