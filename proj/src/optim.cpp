#include "pmnet/optim.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "pmnet/error.hpp"
#include "pmnet/rng.hpp"

namespace pmnet {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, std::vector<Tensor> params)
    : kind_(kind), learning_rate_(learning_rate), params_(std::move(params)) {
    if (!(learning_rate > 0.0)) {
        throw UsageError("optimizer: learning rate must be positive");
    }
    for (const Tensor& p : params_) {
        if (!p.requires_grad()) {
            throw UsageError("optimizer: parameter without requires_grad");
        }
    }
    if (kind_ == OptimizerKind::Adam) {
        first_moment_.reserve(params_.size());
        second_moment_.reserve(params_.size());
        for (const Tensor& p : params_) {
            first_moment_.emplace_back(p.size(), 0.0);
            second_moment_.emplace_back(p.size(), 0.0);
        }
    }
}

void Optimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void Optimizer::step() {
    if (kind_ == OptimizerKind::SGD) {
        for (Tensor& p : params_) {
            double* theta = p.data().data();
            const double* g = p.grad().data();
            for (std::size_t i = 0; i < p.size(); ++i) theta[i] -= learning_rate_ * g[i];
        }
        ++step_count_;
        return;
    }

    ++step_count_;
    const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_count_));
    const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_count_));
    for (std::size_t t = 0; t < params_.size(); ++t) {
        double* theta = params_[t].data().data();
        const double* g = params_[t].grad().data();
        double* m = first_moment_[t].data();
        double* v = second_moment_[t].data();
        for (std::size_t i = 0; i < params_[t].size(); ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            theta[i] -= learning_rate_ * m_hat / (std::sqrt(v_hat) + kEpsilon);
        }
    }
}

double grad_check(const std::function<Tensor(Tape*)>& forward, const std::vector<Tensor>& params,
                  const GradCheckOptions& options) {
    for (const Tensor& p : params) {
        if (!p.requires_grad()) throw UsageError("grad_check: parameter without requires_grad");
    }

    for (Tensor p : params) p.zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = forward(&tape);
        tape.backward(loss);
        analytic.reserve(params.size());
        for (const Tensor& p : params) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        }
    }

    Rng rng(options.seed);
    const double h = options.step;
    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor p = params[t];
        std::vector<std::size_t> coords;
        if (p.size() <= options.samples_per_tensor) {
            coords.resize(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) coords[i] = i;
        } else {
            std::unordered_set<std::size_t> seen;
            while (seen.size() < options.samples_per_tensor) {
                seen.insert(rng.uniform_index(p.size()));
            }
            coords.assign(seen.begin(), seen.end());
            std::sort(coords.begin(), coords.end());
        }

        for (std::size_t i : coords) {
            const double original = p.data()[i];
            p.data()[i] = original + h;
            const double up = forward(nullptr).value();
            p.data()[i] = original - h;
            const double down = forward(nullptr).value();
            p.data()[i] = original;

            const double numeric = (up - down) / (2.0 * h);
            const double exact = analytic[t][i];
            const double scale = std::max(1e-8, std::abs(exact) + std::abs(numeric));
            worst = std::max(worst, std::abs(exact - numeric) / scale);
        }
    }
    return worst;
}

}  // namespace pmnet
