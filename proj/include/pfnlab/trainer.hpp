#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pfnlab/metrics.hpp"
#include "pfnlab/model.hpp"
#include "pfnlab/prior.hpp"

namespace pfnlab {

// The five finetuning strategies under comparison.
struct FinetuneStrategy {
    enum class Kind { full, lora, last_layers, emb_ln_head, feature_emb };
    Kind kind = Kind::full;
    int64_t lora_rank = 4;
    float lora_alpha = 4.0f;
    int64_t last_k = 1;
    EmbeddingKind fe_kind = EmbeddingKind::untied_linear;
    bool fe_also_full = false;
    int64_t fe_bins = 8;

    static FinetuneStrategy full_ft() { return {}; }
    static FinetuneStrategy lora(int64_t rank, float alpha) {
        FinetuneStrategy s;
        s.kind = Kind::lora;
        s.lora_rank = rank;
        s.lora_alpha = alpha;
        return s;
    }
    static FinetuneStrategy last_layers(int64_t k) {
        FinetuneStrategy s;
        s.kind = Kind::last_layers;
        s.last_k = k;
        return s;
    }
    static FinetuneStrategy emb_ln_head() {
        FinetuneStrategy s;
        s.kind = Kind::emb_ln_head;
        return s;
    }
    static FinetuneStrategy feature_emb(EmbeddingKind kind, bool also_full, int64_t bins) {
        FinetuneStrategy s;
        s.kind = Kind::feature_emb;
        s.fe_kind = kind;
        s.fe_also_full = also_full;
        s.fe_bins = bins;
        return s;
    }
    std::string name() const;
};
FinetuneStrategy strategy_from_name(const std::string& name);

// The finetuning protocol of the evaluation setup: pred_len loss objects per
// step (rest of train is the prompt), validation every eval_every steps,
// stop after `patience` non-improving evaluations, restore the best
// evaluation's parameters.
struct TrainProtocol {
    float lr = 1e-4f;
    int64_t pred_len = 1024;
    int64_t eval_every = 10;
    int64_t patience = 16;
    int64_t max_steps = 2000;
    uint64_t seed = 0;
};

struct EvalRecord {
    int64_t step = 0;
    double val_metric = 0.0;
    double train_loss = 0.0;
};

struct RunHistory {
    std::vector<EvalRecord> records;
    int64_t best_step = -1;
    double best_val_metric = 0.0;
    double wall_clock_seconds = 0.0;  // logged, never serialized into outputs
};

struct FinetuneResult {
    PFNParams params;
    RunHistory history;
};

struct PretrainConfig {
    int64_t steps = 20000;
    float lr = 3e-4f;
    int64_t warmup_steps = 100;  // linear warmup on the pretraining lr
    uint64_t seed = 1;
    int64_t n_threads = 0;  // parallelism across meta-batch tasks; 0 = hardware
    int64_t log_every = 250;
    bool verbose = false;
};

struct PretrainResult {
    PFNParams params;
    std::vector<EvalRecord> loss_curve;  // {step, 0, train_loss}
};

// Meta-training on the synthetic prior: each step draws a fresh meta-batch
// and takes one Adam step on the mean in-context loss over the batch's test
// splits. Aborts with a diagnostic on NaN loss.
PretrainResult pretrain(const ModelConfig& config, const PriorConfig& prior, const PretrainConfig& cfg);

// Flips trainable flags according to the strategy; everything outside the
// strategy's parameter set is frozen. Piecewise bin edges are data and are
// never trainable.
void build_trainable_mask(PFNParams& params, const FinetuneStrategy& strategy);

// Adds zero-initialized low-rank adapters (alpha/rank * B*A*x) on the four
// attention projections of every layer and freezes the host matrices. The
// adapted forward is output-identical to the base until the first step.
PFNParams inject_lora(const PFNParams& params, int64_t rank, float alpha);

FinetuneResult finetune(const PFNParams& checkpoint, const SupervisedData& data,
                        const FinetuneStrategy& strategy, const TrainProtocol& protocol);

// Same training loop, starting from init_params(config, protocol.seed).
FinetuneResult train_from_scratch(const ModelConfig& config, const SupervisedData& data,
                                  const TrainProtocol& protocol);

// The paper's learning-rate grid: 10 log-uniform values from 5e-6 to 5e-4,
// endpoints exact.
std::vector<double> lr_grid();

struct SweepEntry {
    double lr = 0.0;
    bool diverged = false;
    std::string error;
    FinetuneResult result;
};

struct SweepResult {
    double best_lr = 0.0;
    size_t best_index = 0;
    std::vector<SweepEntry> entries;

    const FinetuneResult& best() const { return entries[best_index].result; }
};

// Runs finetune at each grid value (optionally in parallel); selects the best
// validation metric, ties broken toward the smaller lr.
SweepResult lr_sweep(const PFNParams& checkpoint, const SupervisedData& data,
                     const FinetuneStrategy& strategy, const TrainProtocol& base_protocol,
                     int64_t n_threads = 0, std::span<const double> grid_override = {});

// Mean of member predictions (regression) / member class probabilities
// (classification). Members must share one ModelConfig.
Predictions ensemble_predict(const std::vector<PFNParams>& members, const SupervisedData& data,
                             std::span<const int64_t> rows);

// In-context prediction with the full train split as prompt.
Predictions predict(const PFNParams& params, const SupervisedData& data, std::span<const int64_t> rows);

// Validation-style scalar: accuracy (classification) or RMSE (regression).
double evaluate_metric(const PFNParams& params, const SupervisedData& data,
                       std::span<const int64_t> rows);

// One JSON object per evaluation plus a final summary line. Wall-clock time
// deliberately stays out so identical runs emit identical bytes.
void write_history_jsonl(const std::string& path, const RunHistory& history, uint64_t config_hash);

}  // namespace pfnlab
