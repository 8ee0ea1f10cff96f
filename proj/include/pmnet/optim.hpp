#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "pmnet/tensor.hpp"

namespace pmnet {

enum class OptimizerKind { SGD, Adam };

// First-order parameter updates over a fixed parameter set. Adam keeps
// per-parameter moment buffers and a shared step counter.
class Optimizer {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEpsilon = 1e-8;

    Optimizer(OptimizerKind kind, double learning_rate, std::vector<Tensor> params);

    void zero_grad();
    void step();

    OptimizerKind kind() const noexcept { return kind_; }
    double learning_rate() const noexcept { return learning_rate_; }
    std::uint64_t steps_taken() const noexcept { return step_count_; }

private:
    OptimizerKind kind_;
    double learning_rate_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
    std::uint64_t step_count_ = 0;
};

struct GradCheckOptions {
    std::size_t samples_per_tensor = 20;
    double step = 1e-5;
    std::uint64_t seed = 0;
};

// Compares analytic gradients of a deterministic scalar forward pass against
// central finite differences on a sample of coordinates per parameter tensor.
// Returns the max of |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
double grad_check(const std::function<Tensor(Tape*)>& forward, const std::vector<Tensor>& params,
                  const GradCheckOptions& options = {});

}  // namespace pmnet
