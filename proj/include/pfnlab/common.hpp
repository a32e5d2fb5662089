#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pfnlab {

enum class TaskType { regression, classification };

inline const char* task_name(TaskType t) {
    return t == TaskType::regression ? "regression" : "classification";
}

// Shape/dimension mismatches between tensors.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Violated preconditions and API misuse (degenerate masks, double injection, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Problems with external data: CSV parsing, config files, checkpoints.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error("data error: " + msg) {}
};

// Training-time failures (divergence, impossible protocol).
struct TrainError : std::runtime_error {
    explicit TrainError(const std::string& msg) : std::runtime_error("train error: " + msg) {}
};

inline void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace pfnlab
