#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pmnet {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);  // "2x3x4"

// Probabilities are clamped to [kLogClampFloor, 1] before any log.
inline constexpr double kLogClampFloor = 1e-12;

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data iff requires_grad
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major f64 tensor. Copying a Tensor copies a handle to shared
// storage; ops below return fresh storage. A tensor with requires_grad keeps
// a same-shape gradient buffer that backward() accumulates into.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;

    // The handle is what's const: storage is shared, so both spans allow
    // element writes (backward rules accumulate through captured handles).
    std::span<double> data() const;
    std::span<double> grad() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    void zero_grad() const;

    double value() const;  // scalar tensors only

    double& operator[](std::size_t i) const { return data()[i]; }

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
    detail::TensorImpl& impl() const;
};

// Ordered record of executed operations. Each op that sees a grad-requiring
// input appends its reverse rule; execution order is a topological order of
// the dataflow, so backward() replays the rules back to front.
class Tape {
public:
    void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
    void backward(const Tensor& loss);

    std::size_t size() const noexcept { return rules_.size(); }
    void clear() noexcept { rules_.clear(); }

private:
    std::vector<std::function<void()>> rules_;
};

// Differentiable ops. Passing tape == nullptr runs pure inference: nothing is
// recorded and outputs do not require grad.

// C[i][j] = sum_t A[i][t] * B[t][j]
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Valid (no padding) convolution over the first axis with full-height filters:
// x is L x H x C, w is n x H x C x F, bias is F; output is (L-n+1) x F.
Tensor conv_valid(const Tensor& x, const Tensor& w, const Tensor& bias, Tape* tape = nullptr);

// Elementwise max(0, x); subgradient at 0 is 0.
Tensor relu(const Tensor& x, Tape* tape = nullptr);

// Column-wise max over the first axis of a T x F map; gradient flows to the
// first occurrence of each column's maximum.
Tensor max_over_time(const Tensor& y, Tape* tape = nullptr);

// Max-subtracted softmax over a rank-1 tensor.
Tensor softmax(const Tensor& z, Tape* tape = nullptr);

// -(1/B) * sum_i log(probs[i][labels[i]]) with the clamp above; probs is B x k.
Tensor cross_entropy(const Tensor& probs, const std::vector<std::int32_t>& labels,
                     Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sum(const Tensor& x, Tape* tape = nullptr);
Tensor reshape(const Tensor& x, Shape target, Tape* tape = nullptr);

// Concatenation of rank-1 tensors into one rank-1 tensor.
Tensor concat(const std::vector<Tensor>& parts, Tape* tape = nullptr);

// Stacks rank-1 tensors of equal length k into a B x k matrix.
Tensor stack_rows(const std::vector<Tensor>& rows, Tape* tape = nullptr);

// Stacks two L x H matrices into an L x H x 2 tensor (last axis = channel).
Tensor stack_channels(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// out[p][:] = table[ids[p]][:]; backward scatter-adds into the table rows.
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids,
                        Tape* tape = nullptr);

}  // namespace pmnet
