#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pfnlab/common.hpp"
#include "pfnlab/rng.hpp"
#include "pfnlab/tensor.hpp"

namespace pfnlab {

// One synthetic task description drawn from the prior.
struct TaskSpec {
    int64_t n_samples = 64;
    int64_t n_features = 4;
    TaskType task_type = TaskType::regression;
    int64_t n_classes = 2;     // classification only
    float noise_scale = 0.1f;  // regression only
    int depth = 2;             // SCM depth, 1..3
};

struct SyntheticTask {
    Tensor X;                    // n_samples x n_features
    std::vector<float> y_reg;    // regression targets (standardized latent + noise)
    std::vector<int64_t> y_cls;  // class labels in [0, n_classes)
    TaskSpec spec;
    uint64_t seed = 0;

    int64_t n() const { return X.rows(); }
    int64_t m() const { return X.cols(); }
};

struct ContextSplit {
    std::vector<int64_t> train_idx;
    std::vector<int64_t> test_idx;
};

// Ranges the meta-training prior draws task specs from. The real TabPFNv2
// prior is unpublished; this random-MLP structural model is a documented
// surrogate.
struct PriorConfig {
    uint64_t base_seed = 1;
    int64_t batch_size = 8;
    int64_t n_samples_min = 24, n_samples_max = 96;
    int64_t n_features_min = 2, n_features_max = 16;
    float classification_ratio = 0.5f;
    int64_t n_classes_min = 2, n_classes_max = 10;
    int depth_min = 1, depth_max = 3;
    float noise_min = 0.0f, noise_max = 0.2f;
    float train_frac_min = 0.3f, train_frac_max = 0.7f;

    std::string canonical_string() const;
    uint64_t hash() const { return hash_str(canonical_string()); }
};

struct MetaBatchItem {
    SyntheticTask task;
    ContextSplit split;
};

// Draws X from a per-task Gaussian mixture and targets from a random-MLP
// structural model: regression = standardized latent + noise, classification
// = rank-quantile binning of the latent into near-balanced classes.
// Deterministic in (spec, seed). Constant latents are resampled up to 8
// times, then reported as a degenerate task.
SyntheticTask sample_task(const TaskSpec& spec, uint64_t seed);

// Disjoint, exhaustive train/test partition; stratified for classification
// when every class has at least two members. Train size is
// round(train_frac * n) and must come out >= 4.
ContextSplit make_context_split(const SyntheticTask& task, float train_frac, uint64_t seed);

// Batch for meta-training step `step`. Slot seeds are derived as
// hash(base_seed, step, slot), so any step regenerates in isolation.
std::vector<MetaBatchItem> sample_meta_batch(const PriorConfig& cfg, int64_t step);

}  // namespace pfnlab
