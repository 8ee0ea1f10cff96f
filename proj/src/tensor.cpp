#include "pmnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "pmnet/error.hpp"

namespace pmnet {

std::string shape_str(const Shape& shape) {
    if (shape.empty()) return "scalar";
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

namespace {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

detail::TensorImpl& Tensor::impl() const {
    if (!impl_) throw UsageError("tensor: use of an empty tensor");
    return *impl_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor: zero dimension in shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_size(t.impl_->shape), value);
    t.impl_->requires_grad = requires_grad;
    if (requires_grad) t.impl_->grad.assign(t.impl_->data.size(), 0.0);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::size() const { return impl().data.size(); }

std::span<double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::grad() const {
    auto& t = impl();
    if (!t.requires_grad) throw UsageError("tensor: grad() on a tensor without requires_grad");
    return t.grad;
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool on) {
    auto& t = impl();
    if (on == t.requires_grad) return;
    t.requires_grad = on;
    if (on) {
        t.grad.assign(t.data.size(), 0.0);
    } else {
        t.grad.clear();
        t.grad.shrink_to_fit();
    }
}

void Tensor::zero_grad() const {
    auto& t = impl();
    std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

double Tensor::value() const {
    if (size() != 1) throw UsageError("tensor: value() on non-scalar shape " + shape_str(shape()));
    return data()[0];
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw UsageError("backward: loss does not depend on any grad-requiring tensor");
    }
    loss.grad()[0] = 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

namespace {

bool wants_grad(std::initializer_list<const Tensor*> inputs, Tape* tape) {
    if (!tape) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = Tensor::zeros({m, n}, wants_grad({&a, &b}, tape));

    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += pa[i * k + t] * pb[t * n + j];
            po[i * n + j] = acc;
        }
    }

    if (out.requires_grad()) {
        tape->record([a, b, out, m, k, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb = b.data().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[t * n + j];
                        ga[i * k + t] += acc;
                    }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa = a.data().data();
                for (std::size_t t = 0; t < k; ++t)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += pa[i * k + t] * g[i * n + j];
                        gb[t * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

Tensor conv_valid(const Tensor& x, const Tensor& w, const Tensor& bias, Tape* tape) {
    if (x.rank() != 3 || w.rank() != 4 || bias.rank() != 1) {
        throw ShapeError("conv_valid: expected input LxHxC, weight nxHxCxF, bias F; got " +
                         shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                         shape_str(bias.shape()));
    }
    const std::size_t len = x.shape()[0], height = x.shape()[1], channels = x.shape()[2];
    const std::size_t width = w.shape()[0], filters = w.shape()[3];
    if (w.shape()[1] != height || w.shape()[2] != channels || bias.shape()[0] != filters) {
        throw ShapeError("conv_valid: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
    }
    if (width > len) {
        throw ShapeError("conv_valid: filter width " + std::to_string(width) +
                         " exceeds input length " + std::to_string(len));
    }

    const std::size_t steps = len - width + 1;
    Tensor out = Tensor::zeros({steps, filters}, wants_grad({&x, &w, &bias}, tape));

    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pbias = bias.data().data();
    double* po = out.data().data();
    for (std::size_t p = 0; p < steps; ++p) {
        double* orow = po + p * filters;
        for (std::size_t f = 0; f < filters; ++f) orow[f] = pbias[f];
        for (std::size_t i = 0; i < width; ++i)
            for (std::size_t h = 0; h < height; ++h)
                for (std::size_t c = 0; c < channels; ++c) {
                    const double xv = px[((p + i) * height + h) * channels + c];
                    const double* wrow = pw + ((i * height + h) * channels + c) * filters;
                    for (std::size_t f = 0; f < filters; ++f) orow[f] += xv * wrow[f];
                }
    }

    if (out.requires_grad()) {
        tape->record([x, w, bias, out, steps, width, height, channels, filters]() mutable {
            const double* g = out.grad().data();
            if (bias.requires_grad()) {
                double* gb = bias.grad().data();
                for (std::size_t p = 0; p < steps; ++p)
                    for (std::size_t f = 0; f < filters; ++f) gb[f] += g[p * filters + f];
            }
            if (w.requires_grad()) {
                double* gw = w.grad().data();
                const double* px = x.data().data();
                for (std::size_t p = 0; p < steps; ++p) {
                    const double* grow = g + p * filters;
                    for (std::size_t i = 0; i < width; ++i)
                        for (std::size_t h = 0; h < height; ++h)
                            for (std::size_t c = 0; c < channels; ++c) {
                                const double xv = px[((p + i) * height + h) * channels + c];
                                double* gwrow = gw + ((i * height + h) * channels + c) * filters;
                                for (std::size_t f = 0; f < filters; ++f) gwrow[f] += xv * grow[f];
                            }
                }
            }
            if (x.requires_grad()) {
                double* gx = x.grad().data();
                const double* pw = w.data().data();
                for (std::size_t p = 0; p < steps; ++p) {
                    const double* grow = g + p * filters;
                    for (std::size_t i = 0; i < width; ++i)
                        for (std::size_t h = 0; h < height; ++h)
                            for (std::size_t c = 0; c < channels; ++c) {
                                const double* wrow = pw + ((i * height + h) * channels + c) * filters;
                                double acc = 0.0;
                                for (std::size_t f = 0; f < filters; ++f) acc += wrow[f] * grow[f];
                                gx[((p + i) * height + h) * channels + c] += acc;
                            }
                }
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x, Tape* tape) {
    Tensor out = Tensor::zeros(x.shape(), wants_grad({&x}, tape));
    const double* px = x.data().data();
    double* po = out.data().data();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;

    if (out.requires_grad()) {
        tape->record([x, out, n]() mutable {
            double* gx = x.grad().data();
            const double* px = x.data().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < n; ++i)
                if (px[i] > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

Tensor max_over_time(const Tensor& y, Tape* tape) {
    if (y.rank() != 2) {
        throw ShapeError("max_over_time: expected TxF map, got " + shape_str(y.shape()));
    }
    const std::size_t steps = y.shape()[0], filters = y.shape()[1];
    Tensor out = Tensor::zeros({filters}, wants_grad({&y}, tape));

    const double* py = y.data().data();
    double* po = out.data().data();
    std::vector<std::size_t> argmax(filters, 0);
    for (std::size_t f = 0; f < filters; ++f) {
        double best = py[f];
        std::size_t best_p = 0;
        for (std::size_t p = 1; p < steps; ++p) {
            if (py[p * filters + f] > best) {  // ties keep the first occurrence
                best = py[p * filters + f];
                best_p = p;
            }
        }
        po[f] = best;
        argmax[f] = best_p;
    }

    if (out.requires_grad()) {
        tape->record([y, out, argmax = std::move(argmax), filters]() mutable {
            double* gy = y.grad().data();
            const double* g = out.grad().data();
            for (std::size_t f = 0; f < filters; ++f) gy[argmax[f] * filters + f] += g[f];
        });
    }
    return out;
}

Tensor softmax(const Tensor& z, Tape* tape) {
    if (z.rank() != 1) {
        throw ShapeError("softmax: expected rank-1 input, got " + shape_str(z.shape()));
    }
    const std::size_t k = z.size();
    Tensor out = Tensor::zeros({k}, wants_grad({&z}, tape));

    const double* pz = z.data().data();
    double* po = out.data().data();
    double peak = pz[0];
    for (std::size_t i = 1; i < k; ++i) peak = std::max(peak, pz[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        po[i] = std::exp(pz[i] - peak);
        total += po[i];
    }
    for (std::size_t i = 0; i < k; ++i) po[i] /= total;

    if (out.requires_grad()) {
        tape->record([z, out, k]() mutable {
            double* gz = z.grad().data();
            const double* p = out.data().data();
            const double* g = out.grad().data();
            double dot = 0.0;
            for (std::size_t i = 0; i < k; ++i) dot += g[i] * p[i];
            for (std::size_t i = 0; i < k; ++i) gz[i] += p[i] * (g[i] - dot);
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& probs, const std::vector<std::int32_t>& labels, Tape* tape) {
    if (probs.rank() != 2) {
        throw ShapeError("cross_entropy: expected BxK probabilities, got " +
                         shape_str(probs.shape()));
    }
    const std::size_t batch = probs.shape()[0], k = probs.shape()[1];
    if (labels.size() != batch) {
        throw UsageError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    }
    for (std::int32_t y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw UsageError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                             std::to_string(k) + ")");
        }
    }

    Tensor out = Tensor::zeros({1}, wants_grad({&probs}, tape));
    const double* pp = probs.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double p = std::clamp(pp[i * k + labels[i]], kLogClampFloor, 1.0);
        acc -= std::log(p);
    }
    out.data()[0] = acc / static_cast<double>(batch);

    if (out.requires_grad()) {
        tape->record([probs, labels, out, batch, k]() mutable {
            double* gp = probs.grad().data();
            const double* pp = probs.data().data();
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < batch; ++i) {
                const double p = pp[i * k + labels[i]];
                if (p < kLogClampFloor) continue;  // loss is flat below the clamp floor
                gp[i * k + labels[i]] -= g / (std::min(p, 1.0) * static_cast<double>(batch));
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: mismatched shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape(), wants_grad({&a, &b}, tape));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

    if (out.requires_grad()) {
        tape->record([a, b, out, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: mismatched shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape(), wants_grad({&a, &b}, tape));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

    if (out.requires_grad()) {
        tape->record([a, b, out, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb = b.data().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa = a.data().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x, Tape* tape) {
    Tensor out = Tensor::zeros({1}, wants_grad({&x}, tape));
    const double* px = x.data().data();
    double acc = 0.0;
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;

    if (out.requires_grad()) {
        tape->record([x, out, n]() mutable {
            double* gx = x.grad().data();
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape target, Tape* tape) {
    std::size_t n = 1;
    for (std::size_t d : target) n *= d;
    if (n != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(target));
    }
    Tensor out = Tensor::zeros(std::move(target), wants_grad({&x}, tape));
    std::copy(x.data().begin(), x.data().end(), out.data().begin());

    if (out.requires_grad()) {
        tape->record([x, out, n]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, Tape* tape) {
    if (parts.empty()) throw UsageError("concat: no tensors given");
    std::size_t total = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 1) {
            throw ShapeError("concat: expected rank-1 parts, got " + shape_str(p.shape()));
        }
        total += p.size();
        grad = grad || (tape && p.requires_grad());
    }
    Tensor out = Tensor::zeros({total}, grad);
    double* po = out.data().data();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), po + offset);
        offset += p.size();
    }

    if (out.requires_grad()) {
        tape->record([parts, out]() mutable {
            const double* g = out.grad().data();
            std::size_t offset = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[offset + i];
                }
                offset += p.size();
            }
        });
    }
    return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows, Tape* tape) {
    if (rows.empty()) throw UsageError("stack_rows: no tensors given");
    const std::size_t k = rows.front().size();
    bool grad = false;
    for (const Tensor& r : rows) {
        if (r.rank() != 1 || r.size() != k) {
            throw ShapeError("stack_rows: expected rank-1 rows of length " + std::to_string(k) +
                             ", got " + shape_str(r.shape()));
        }
        grad = grad || (tape && r.requires_grad());
    }
    Tensor out = Tensor::zeros({rows.size(), k}, grad);
    double* po = out.data().data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy(rows[i].data().begin(), rows[i].data().end(), po + i * k);
    }

    if (out.requires_grad()) {
        tape->record([rows, out, k]() mutable {
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (!rows[i].requires_grad()) continue;
                double* gr = rows[i].grad().data();
                for (std::size_t j = 0; j < k; ++j) gr[j] += g[i * k + j];
            }
        });
    }
    return out;
}

Tensor stack_channels(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw ShapeError("stack_channels: expected two equal LxH matrices, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t len = a.shape()[0], height = a.shape()[1];
    Tensor out = Tensor::zeros({len, height, 2}, wants_grad({&a, &b}, tape));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    const std::size_t n = len * height;
    for (std::size_t i = 0; i < n; ++i) {
        po[2 * i] = pa[i];
        po[2 * i + 1] = pb[i];
    }

    if (out.requires_grad()) {
        tape->record([a, b, out, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[2 * i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[2 * i + 1];
            }
        });
    }
    return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids, Tape* tape) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: expected VxH table, got " + shape_str(table.shape()));
    }
    if (ids.empty()) throw UsageError("embedding_lookup: empty id sequence");
    const std::size_t rows = table.shape()[0], dim = table.shape()[1];
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw UsageError("embedding_lookup: id " + std::to_string(id) +
                             " outside table with " + std::to_string(rows) + " rows");
        }
    }

    Tensor out = Tensor::zeros({ids.size(), dim}, wants_grad({&table}, tape));
    const double* pt = table.data().data();
    double* po = out.data().data();
    for (std::size_t p = 0; p < ids.size(); ++p) {
        std::copy(pt + static_cast<std::size_t>(ids[p]) * dim,
                  pt + (static_cast<std::size_t>(ids[p]) + 1) * dim, po + p * dim);
    }

    if (out.requires_grad()) {
        std::vector<std::int32_t> owned(ids.begin(), ids.end());
        tape->record([table, out, owned = std::move(owned), dim]() mutable {
            double* gt = table.grad().data();
            const double* g = out.grad().data();
            for (std::size_t p = 0; p < owned.size(); ++p) {
                double* row = gt + static_cast<std::size_t>(owned[p]) * dim;
                for (std::size_t j = 0; j < dim; ++j) row[j] += g[p * dim + j];
            }
        });
    }
    return out;
}

}  // namespace pmnet
