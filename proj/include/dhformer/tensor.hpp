#pragma once
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dhformer/errors.hpp"

namespace dhformer {

// Dense row-major tensor, 1..4 dims, double storage. Reverse-mode autodiff
// is recorded per node: every op output keeps its parents and a backward
// rule; backward() replays the rules in reverse creation order, which is a
// valid topological order of the graph.

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized on first backward touch
    bool requires_grad = false;
    uint64_t seq = 0;  // creation order; parents always have smaller seq
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backprop;  // reads this->grad, accumulates into parents
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_vector(const Shape& shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    bool requires_grad() const { return impl_->requires_grad; }

    const std::vector<double>& values() const { return impl_->data; }
    // Mutable access for initialization and I/O boundaries; never used on
    // tensors that already participate in a recorded graph.
    std::vector<double>& raw() { return impl_->data; }

    double item() const;
    double at(const std::vector<int>& index) const;

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    // Same values, fresh leaf (no graph, no grad).
    Tensor detached() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

enum class EwKind { add, sub, mul, div };

// b may broadcast against a: shapes right-aligned, every b extent equal to
// a's or 1. Only a's shape is produced.
Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// 2-D [m,k]x[k,n] or batched 3-D [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x [N,C,H,W], w [F,C,kh,kw], bias [F]; cross-correlation convention.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
// Elementwise max; ties route gradient to a.
Tensor maximum(const Tensor& a, const Tensor& b);

// Per-channel over (N,H,W). running_mean/running_var are state buffers
// updated in place during training (not part of the autodiff graph).
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var, bool training,
                   double momentum, double eps);
// Over the last dim.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

enum class PoolKind { max, avg };
// max routes gradient to the first argmax in row-major window scan order;
// avg means over the valid (non-padding) window elements.
Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int pad);

Tensor softmax(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, const Shape& target);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor narrow(const Tensor& x, int axis, int start, int count);
Tensor slice_channels(const Tensor& x, int from, int count);
// align_corners sampling; corners map to corners exactly.
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
// Integer-factor nearest-neighbour upsample.
Tensor upsample_nearest(const Tensor& x, int factor);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor reduce_sum(const Tensor& x, int axis);   // keeps the reduced dim as 1
Tensor reduce_mean(const Tensor& x, int axis);  // keeps the reduced dim as 1
Tensor reduce_max(const Tensor& x, int axis);   // keeps dim; first-argmax routing

// root must be scalar; gradient accumulates additively into every
// requires_grad leaf reachable from root.
void backward(const Tensor& root);

// Max over coordinates of |analytic - central difference| relative error,
// |a-n| / max(1e-8, |a|+|n|). f must be scalar-valued; eps in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

}  // namespace dhformer
