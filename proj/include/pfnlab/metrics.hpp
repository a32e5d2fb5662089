#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>

#include "pfnlab/common.hpp"
#include "pfnlab/tensor.hpp"

namespace pfnlab {

inline double rmse(std::span<const float> preds, std::span<const float> targets) {
    check_arg(preds.size() == targets.size() && !preds.empty(), "rmse: size mismatch or empty");
    double s = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double d = double(preds[i]) - double(targets[i]);
        s += d * d;
    }
    return std::sqrt(s / double(preds.size()));
}

inline double accuracy(std::span<const int64_t> pred_labels, std::span<const int64_t> targets) {
    check_arg(pred_labels.size() == targets.size() && !pred_labels.empty(), "accuracy: size mismatch or empty");
    int64_t hits = 0;
    for (size_t i = 0; i < targets.size(); ++i)
        if (pred_labels[i] == targets[i]) ++hits;
    return double(hits) / double(targets.size());
}

// R^2 = 1 - SSE/SST with SST taken from the targets; defined as 0 when the
// targets are constant.
inline double r_squared(std::span<const float> preds, std::span<const float> targets) {
    check_arg(preds.size() == targets.size() && !preds.empty(), "r_squared: size mismatch or empty");
    double mean = 0.0;
    for (float t : targets) mean += double(t);
    mean /= double(targets.size());
    double sse = 0.0, sst = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        const double e = double(preds[i]) - double(targets[i]);
        sse += e * e;
        const double d = double(targets[i]) - mean;
        sst += d * d;
    }
    if (sst == 0.0) return 0.0;
    return 1.0 - sse / sst;
}

// Mean negative log-likelihood with probabilities clamped to [1e-7, 1-1e-7].
inline double mean_logloss(const Tensor& probs, std::span<const int64_t> targets) {
    check_arg(probs.rank() == 2 && probs.rows() == int64_t(targets.size()) && !targets.empty(),
              "mean_logloss: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        double p = double(probs.at(int64_t(i), targets[i]));
        p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
        s += -std::log(p);
    }
    return s / double(targets.size());
}

// Direction-aware comparison: greater is better for classification accuracy,
// lower for regression RMSE.
inline bool metric_improves(double candidate, double incumbent, TaskType task) {
    return task == TaskType::classification ? candidate > incumbent : candidate < incumbent;
}

inline double worst_metric(TaskType task) {
    return task == TaskType::classification ? -std::numeric_limits<double>::infinity()
                                            : std::numeric_limits<double>::infinity();
}

}  // namespace pfnlab
