#include "pfnlab/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pfnlab {

namespace {

enum class Act { identity, tanh_fn, relu, sine, abs_fn };

double apply_act(Act a, double x) {
    switch (a) {
        case Act::identity: return x;
        case Act::tanh_fn: return std::tanh(x);
        case Act::relu: return x > 0.0 ? x : 0.0;
        case Act::sine: return std::sin(x);
        case Act::abs_fn: return std::abs(x);
    }
    return x;
}

// Latent scalar per row from a depth-layer random MLP applied to X.
// Returns false when the resulting latent is (numerically) constant.
bool sample_latent(const Tensor& X, int depth, Rng& rng, std::vector<double>& latent) {
    const int64_t n = X.rows(), m = X.cols();
    const int64_t hidden = std::max<int64_t>(4, std::min<int64_t>(16, 2 * m));

    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
    std::vector<Act> acts;
    int64_t in_dim = m;
    for (int l = 0; l < depth; ++l) {
        std::vector<double> w(static_cast<size_t>(in_dim * hidden));
        std::vector<double> b(static_cast<size_t>(hidden));
        const double std_w = std::sqrt(2.0 / double(in_dim));
        for (auto& v : w) v = rng.normal() * std_w;
        for (auto& v : b) v = rng.normal() * 0.1;
        weights.push_back(std::move(w));
        biases.push_back(std::move(b));
        acts.push_back(Act(rng.below(5)));
        in_dim = hidden;
    }
    std::vector<double> w_out(static_cast<size_t>(in_dim));
    const double std_out = std::sqrt(1.0 / double(in_dim));
    for (auto& v : w_out) v = rng.normal() * std_out;

    latent.assign(size_t(n), 0.0);
    std::vector<double> h(static_cast<size_t>(std::max(m, hidden)));
    std::vector<double> h2(static_cast<size_t>(hidden));
    for (int64_t i = 0; i < n; ++i) {
        int64_t cur = m;
        for (int64_t j = 0; j < m; ++j) h[size_t(j)] = double(X.at(i, j));
        for (int l = 0; l < depth; ++l) {
            for (int64_t o = 0; o < hidden; ++o) {
                double s = biases[size_t(l)][size_t(o)];
                for (int64_t j = 0; j < cur; ++j) s += weights[size_t(l)][size_t(j * hidden + o)] * h[size_t(j)];
                h2[size_t(o)] = apply_act(acts[size_t(l)], s);
            }
            std::copy(h2.begin(), h2.begin() + hidden, h.begin());
            cur = hidden;
        }
        double s = 0.0;
        for (int64_t j = 0; j < cur; ++j) s += w_out[size_t(j)] * h[size_t(j)];
        latent[size_t(i)] = s;
    }

    double mean = 0.0;
    for (double v : latent) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : latent) var += (v - mean) * (v - mean);
    var /= double(n);
    if (std::sqrt(var) < 1e-7) return false;
    for (auto& v : latent) v = (v - mean) / std::sqrt(var);
    return true;
}

}  // namespace

std::string PriorConfig::canonical_string() const {
    std::ostringstream os;
    os << "base_seed=" << base_seed << ";batch_size=" << batch_size << ";n_samples=" << n_samples_min
       << ".." << n_samples_max << ";n_features=" << n_features_min << ".." << n_features_max
       << ";classification_ratio=" << classification_ratio << ";n_classes=" << n_classes_min << ".."
       << n_classes_max << ";depth=" << depth_min << ".." << depth_max << ";noise=" << noise_min << ".."
       << noise_max << ";train_frac=" << train_frac_min << ".." << train_frac_max;
    return os.str();
}

SyntheticTask sample_task(const TaskSpec& spec, uint64_t seed) {
    check_arg(spec.n_samples >= 8, "sample_task: n_samples must be >= 8");
    check_arg(spec.n_features >= 1, "sample_task: n_features must be >= 1");
    check_arg(spec.depth >= 1 && spec.depth <= 3, "sample_task: depth must be in 1..3");
    check_arg(spec.noise_scale >= 0.0f, "sample_task: noise_scale must be >= 0");
    if (spec.task_type == TaskType::classification) {
        check_arg(spec.n_classes >= 2, "sample_task: n_classes must be >= 2");
        check_arg(spec.n_classes <= spec.n_samples, "sample_task: n_classes exceeds n_samples");
    }

    const int64_t n = spec.n_samples, m = spec.n_features;
    SyntheticTask task;
    task.spec = spec;
    task.seed = seed;

    // Feature matrix: per-task Gaussian mixture with 1..3 components.
    Rng xrng(seed, hash_str("prior_x"));
    const int64_t n_comp = 1 + xrng.below(3);
    std::vector<double> comp_mean(static_cast<size_t>(n_comp * m));
    std::vector<double> comp_scale(static_cast<size_t>(n_comp * m));
    for (auto& v : comp_mean) v = xrng.uniform(-2.0, 2.0);
    for (auto& v : comp_scale) v = xrng.uniform(0.5, 1.5);
    task.X = Tensor({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const int64_t c = xrng.below(n_comp);
        for (int64_t j = 0; j < m; ++j)
            task.X.at(i, j) =
                float(comp_mean[size_t(c * m + j)] + comp_scale[size_t(c * m + j)] * xrng.normal());
    }

    Rng yrng(seed, hash_str("prior_y"));
    std::vector<double> latent;
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) ok = sample_latent(task.X, spec.depth, yrng, latent);
    if (!ok) throw ContractError("sample_task: task degenerate (constant latent after 8 resamples)");

    if (spec.task_type == TaskType::regression) {
        task.y_reg.resize(size_t(n));
        for (int64_t i = 0; i < n; ++i)
            task.y_reg[size_t(i)] = float(latent[size_t(i)] + double(spec.noise_scale) * yrng.normal());
    } else {
        // Rank-quantile binning into near-balanced classes; ties broken by
        // index order via the stable sort key.
        std::vector<int64_t> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            if (latent[size_t(a)] != latent[size_t(b)]) return latent[size_t(a)] < latent[size_t(b)];
            return a < b;
        });
        task.y_cls.resize(size_t(n));
        for (int64_t r = 0; r < n; ++r) task.y_cls[size_t(order[size_t(r)])] = r * spec.n_classes / n;
    }
    return task;
}

ContextSplit make_context_split(const SyntheticTask& task, float train_frac, uint64_t seed) {
    check_arg(train_frac > 0.0f && train_frac < 1.0f, "make_context_split: train_frac must be in (0,1)");
    const int64_t n = task.n();
    int64_t n_train = llround(double(train_frac) * double(n));
    n_train = std::max<int64_t>(1, std::min<int64_t>(n - 1, n_train));
    if (n_train < 4) throw ContractError("split error: resulting train size " + std::to_string(n_train) + " < 4");

    Rng rng(seed, hash_str("context_split"));
    ContextSplit split;

    const bool is_cls = task.spec.task_type == TaskType::classification;
    bool stratify = is_cls;
    std::vector<std::vector<int64_t>> by_class;
    if (is_cls) {
        by_class.resize(size_t(task.spec.n_classes));
        for (int64_t i = 0; i < n; ++i) by_class[size_t(task.y_cls[size_t(i)])].push_back(i);
        for (const auto& members : by_class)
            if (members.size() < 2) stratify = false;
    }

    if (!stratify) {
        auto perm = rng.permutation(n);
        split.train_idx.assign(perm.begin(), perm.begin() + n_train);
        split.test_idx.assign(perm.begin() + n_train, perm.end());
    } else {
        // Per-class floor counts, remainder distributed by largest fractional
        // share (ties by class index).
        const int64_t n_classes = task.spec.n_classes;
        std::vector<int64_t> take(static_cast<size_t>(n_classes));
        std::vector<double> frac(static_cast<size_t>(n_classes));
        int64_t assigned = 0;
        for (int64_t c = 0; c < n_classes; ++c) {
            const double want = double(train_frac) * double(by_class[size_t(c)].size());
            take[size_t(c)] = int64_t(std::floor(want));
            frac[size_t(c)] = want - std::floor(want);
            assigned += take[size_t(c)];
        }
        std::vector<int64_t> order(static_cast<size_t>(n_classes));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            if (frac[size_t(a)] != frac[size_t(b)]) return frac[size_t(a)] > frac[size_t(b)];
            return a < b;
        });
        // Rounds of one-per-class in remainder order. Rounds that keep one
        // member per class on the test side run first; if the target is
        // still unmet that restriction is lifted (train size always fits
        // because n_train <= n - 1).
        int64_t slack = 1;
        while (assigned < n_train) {
            bool progressed = false;
            for (int64_t i = 0; i < n_classes && assigned < n_train; ++i) {
                const int64_t c = order[size_t(i)];
                if (take[size_t(c)] < int64_t(by_class[size_t(c)].size()) - slack) {
                    ++take[size_t(c)];
                    ++assigned;
                    progressed = true;
                }
            }
            if (!progressed) slack = 0;
        }
        for (int64_t c = 0; c < n_classes; ++c) {
            auto members = by_class[size_t(c)];
            rng.shuffle(members);
            for (size_t i = 0; i < members.size(); ++i) {
                if (int64_t(i) < take[size_t(c)])
                    split.train_idx.push_back(members[i]);
                else
                    split.test_idx.push_back(members[i]);
            }
        }
        std::sort(split.train_idx.begin(), split.train_idx.end());
        std::sort(split.test_idx.begin(), split.test_idx.end());
    }
    return split;
}

std::vector<MetaBatchItem> sample_meta_batch(const PriorConfig& cfg, int64_t step) {
    check_arg(cfg.batch_size >= 1, "sample_meta_batch: batch_size must be >= 1");
    check_arg(cfg.n_samples_min >= 8 && cfg.n_samples_max >= cfg.n_samples_min,
              "sample_meta_batch: bad n_samples range");
    check_arg(cfg.n_features_min >= 1 && cfg.n_features_max >= cfg.n_features_min,
              "sample_meta_batch: bad n_features range");

    std::vector<MetaBatchItem> batch;
    batch.reserve(size_t(cfg.batch_size));
    for (int64_t slot = 0; slot < cfg.batch_size; ++slot) {
        const uint64_t slot_seed = hash_combine(cfg.base_seed, uint64_t(step), uint64_t(slot));
        Rng srng(slot_seed, hash_str("spec"));

        TaskSpec spec;
        spec.task_type =
            srng.uniform() < double(cfg.classification_ratio) ? TaskType::classification : TaskType::regression;
        spec.n_samples = srng.uniform_int(cfg.n_samples_min, cfg.n_samples_max);
        spec.n_features = srng.uniform_int(cfg.n_features_min, cfg.n_features_max);
        spec.depth = int(srng.uniform_int(cfg.depth_min, cfg.depth_max));
        spec.noise_scale = float(srng.uniform(cfg.noise_min, cfg.noise_max));
        if (spec.task_type == TaskType::classification)
            spec.n_classes = srng.uniform_int(cfg.n_classes_min, cfg.n_classes_max);
        const float frac = float(srng.uniform(cfg.train_frac_min, cfg.train_frac_max));

        MetaBatchItem item;
        item.task = sample_task(spec, hash_combine(slot_seed, hash_str("task")));
        item.split = make_context_split(item.task, frac, hash_combine(slot_seed, hash_str("split")));
        batch.push_back(std::move(item));
    }
    return batch;
}

}  // namespace pfnlab
