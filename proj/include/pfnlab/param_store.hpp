#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pfnlab/common.hpp"
#include "pfnlab/tensor.hpp"

namespace pfnlab {

template <typename T>
struct ParamEntryT {
    TensorT<T> tensor;
    bool trainable = true;
    TensorT<T> adam_m;
    TensorT<T> adam_v;
};

// Named parameter collection. Iteration always follows insertion order, which
// makes optimizer updates and checkpoint layout deterministic.
template <typename T>
class ParamStoreT {
public:
    void add(const std::string& name, TensorT<T> tensor, bool trainable = true) {
        check_arg(!has(name), "duplicate parameter name: " + name);
        ParamEntryT<T> e;
        e.adam_m = TensorT<T>(tensor.shape);
        e.adam_v = TensorT<T>(tensor.shape);
        e.tensor = std::move(tensor);
        e.trainable = trainable;
        order_.push_back(name);
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    ParamEntryT<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        check_arg(it != entries_.end(), "unknown parameter: " + name);
        return it->second;
    }
    const ParamEntryT<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        check_arg(it != entries_.end(), "unknown parameter: " + name);
        return it->second;
    }

    const std::vector<std::string>& names() const { return order_; }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& n : order_)
            if (entries_.at(n).trainable) out.push_back(n);
        return out;
    }

    void set_trainable(const std::string& name, bool flag) { at(name).trainable = flag; }

    size_t size() const { return order_.size(); }

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t s) { step_count_ = s; }
    void bump_step_count() { ++step_count_; }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& name : order_) n += entries_.at(name).tensor.numel();
        return n;
    }

    void reset_adam_state() {
        for (const auto& name : order_) {
            auto& e = entries_.at(name);
            e.adam_m = TensorT<T>(e.tensor.shape);
            e.adam_v = TensorT<T>(e.tensor.shape);
        }
        step_count_ = 0;
    }

    template <typename U>
    ParamStoreT<U> cast() const {
        ParamStoreT<U> out;
        for (const auto& name : order_) {
            const auto& e = entries_.at(name);
            out.add(name, e.tensor.template cast<U>(), e.trainable);
        }
        out.set_step_count(step_count_);
        return out;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, ParamEntryT<T>> entries_;
    int64_t step_count_ = 0;
};

using ParamStore = ParamStoreT<float>;

template <typename T>
using GradMapT = std::unordered_map<std::string, TensorT<T>>;
using GradMap = GradMapT<float>;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over the trainable entries, in insertion order. The
// gradient map must cover exactly the trainable set; frozen parameters are
// never touched.
template <typename T>
void adam_step(ParamStoreT<T>& store, const GradMapT<T>& grads, const AdamConfig& cfg) {
    for (const auto& kv : grads) {
        check_arg(store.has(kv.first), "adam_step: gradient for unknown parameter " + kv.first);
        check_arg(store.at(kv.first).trainable, "adam_step: gradient for frozen parameter " + kv.first);
    }
    const auto trainable = store.trainable_names();
    check_arg(grads.size() == trainable.size(), "adam_step: gradient map does not cover the trainable set");

    store.bump_step_count();
    const double t = double(store.step_count());
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);

    for (const auto& name : store.names()) {
        auto& e = store.at(name);
        if (!e.trainable) continue;
        auto git = grads.find(name);
        check_arg(git != grads.end(), "adam_step: missing gradient for trainable parameter " + name);
        const TensorT<T>& g = git->second;
        check_shape(g.same_shape(e.tensor), "adam_step: gradient shape mismatch for " + name);
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double gi = double(g.at(i));
            const double m = cfg.beta1 * double(e.adam_m.at(i)) + (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * double(e.adam_v.at(i)) + (1.0 - cfg.beta2) * gi * gi;
            e.adam_m.at(i) = T(m);
            e.adam_v.at(i) = T(v);
            const double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            e.tensor.at(i) = T(double(e.tensor.at(i)) - update);
        }
    }
}

}  // namespace pfnlab
