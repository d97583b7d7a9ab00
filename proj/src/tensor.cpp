#include "dhformer/tensor.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace dhformer {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& s) {
    if (s.empty() || s.size() > 4)
        throw DimensionError("tensor shape must have 1..4 dims, got " + shape_str(s));
    for (int d : s)
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
}

std::shared_ptr<TensorImpl> make_leaf(const Shape& shape, std::vector<double> data,
                                      bool requires_grad) {
    check_shape(shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    impl->seq = g_seq.fetch_add(1);
    return impl;
}

using Parents = std::vector<std::shared_ptr<TensorImpl>>;

bool any_requires_grad(const Parents& ps) {
    for (const auto& p : ps)
        if (p->requires_grad) return true;
    return false;
}

// Creates an op output node. backprop is installed only when the result
// participates in the graph.
Tensor make_op(const Shape& shape, std::vector<double> data, Parents parents,
               const std::function<std::function<void()>(TensorImpl*)>& make_backprop) {
    auto impl = make_leaf(shape, std::move(data), false);
    if (grad_enabled() && any_requires_grad(parents)) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backprop = make_backprop(impl.get());
    }
    return Tensor(impl);
}

void ensure_grad(TensorImpl* t) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
}

// 4-D normalized view: shape padded with leading 1s.
std::array<int64_t, 4> pad4(const Shape& s) {
    std::array<int64_t, 4> r{1, 1, 1, 1};
    size_t off = 4 - s.size();
    for (size_t i = 0; i < s.size(); ++i) r[off + i] = s[i];
    return r;
}

std::array<int64_t, 4> strides4(const std::array<int64_t, 4>& dims) {
    std::array<int64_t, 4> st{};
    st[3] = 1;
    for (int i = 2; i >= 0; --i) st[i] = st[i + 1] * dims[i + 1];
    return st;
}

struct BroadcastPlan {
    std::array<int64_t, 4> adims;
    std::array<int64_t, 4> bstride;  // 0 where b broadcasts
    bool same_shape;
};

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
    if (b.size() > a.size())
        throw DimensionError("cannot broadcast " + shape_str(b) + " against " + shape_str(a));
    auto ad = pad4(a);
    auto bd = pad4(b);
    auto bst = strides4(bd);
    BroadcastPlan plan{};
    plan.adims = ad;
    plan.same_shape = true;
    for (int i = 0; i < 4; ++i) {
        if (bd[i] == ad[i]) {
            plan.bstride[i] = bst[i];
        } else if (bd[i] == 1) {
            plan.bstride[i] = 0;
            plan.same_shape = false;
        } else {
            throw DimensionError("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
        }
    }
    return plan;
}

template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
    const auto& d = p.adims;
    int64_t ai = 0;
    for (int64_t i0 = 0; i0 < d[0]; ++i0)
        for (int64_t i1 = 0; i1 < d[1]; ++i1)
            for (int64_t i2 = 0; i2 < d[2]; ++i2) {
                int64_t bbase = i0 * p.bstride[0] + i1 * p.bstride[1] + i2 * p.bstride[2];
                for (int64_t i3 = 0; i3 < d[3]; ++i3, ++ai)
                    fn(ai, bbase + i3 * p.bstride[3]);
            }
}

int64_t stride_of(const Shape& s, int axis) {
    int64_t st = 1;
    for (size_t i = axis + 1; i < s.size(); ++i) st *= s[i];
    return st;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_leaf({1}, {value}, requires_grad));
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(const std::vector<int>& index) const {
    if (static_cast<int>(index.size()) != ndim())
        throw DimensionError("index rank mismatch");
    int64_t flat = 0;
    for (size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= impl_->shape[i]) throw DimensionError("index out of range");
        flat = flat * impl_->shape[i] + index[i];
    }
    return impl_->data[flat];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) throw ContractError("gradient not populated");
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detached() const {
    return Tensor(make_leaf(impl_->shape, impl_->data, false));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---------------------------------------------------------------- elementwise

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
    BroadcastPlan plan = broadcast_plan(a.shape(), b.shape());
    const auto& av = a.values();
    const auto& bv = b.values();

    if (kind == EwKind::div) {
        for (double v : bv)
            if (std::fabs(v) < 1e-12)
                throw DomainError("division by near-zero value " + std::to_string(v));
    }

    std::vector<double> out(av.size());
    if (plan.same_shape) {
        switch (kind) {
            case EwKind::add: for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i]; break;
            case EwKind::sub: for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i]; break;
            case EwKind::mul: for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i]; break;
            case EwKind::div: for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i]; break;
        }
    } else {
        for_each_broadcast(plan, [&](int64_t ai, int64_t bi) {
            switch (kind) {
                case EwKind::add: out[ai] = av[ai] + bv[bi]; break;
                case EwKind::sub: out[ai] = av[ai] - bv[bi]; break;
                case EwKind::mul: out[ai] = av[ai] * bv[bi]; break;
                case EwKind::div: out[ai] = av[ai] / bv[bi]; break;
            }
        });
    }

    auto pa = a.impl();
    auto pb = b.impl();
    return make_op(a.shape(), std::move(out), {pa, pb}, [=](TensorImpl* self) {
        return [self, pa, pb, plan, kind]() {
            const auto& dy = self->grad;
            const auto& av2 = pa->data;
            const auto& bv2 = pb->data;
            if (pa->requires_grad) ensure_grad(pa.get());
            if (pb->requires_grad) ensure_grad(pb.get());
            for_each_broadcast(plan, [&](int64_t ai, int64_t bi) {
                double g = dy[ai];
                switch (kind) {
                    case EwKind::add:
                        if (pa->requires_grad) pa->grad[ai] += g;
                        if (pb->requires_grad) pb->grad[bi] += g;
                        break;
                    case EwKind::sub:
                        if (pa->requires_grad) pa->grad[ai] += g;
                        if (pb->requires_grad) pb->grad[bi] -= g;
                        break;
                    case EwKind::mul:
                        if (pa->requires_grad) pa->grad[ai] += g * bv2[bi];
                        if (pb->requires_grad) pb->grad[bi] += g * av2[ai];
                        break;
                    case EwKind::div:
                        if (pa->requires_grad) pa->grad[ai] += g / bv2[bi];
                        if (pb->requires_grad)
                            pb->grad[bi] -= g * av2[ai] / (bv2[bi] * bv2[bi]);
                        break;
                }
            });
        };
    });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::div); }

Tensor add_scalar(const Tensor& a, double s) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    auto pa = a.impl();
    return make_op(a.shape(), std::move(out), {pa}, [=](TensorImpl* self) {
        return [self, pa]() {
            if (!pa->requires_grad) return;
            ensure_grad(pa.get());
            for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self->grad[i];
        };
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    auto pa = a.impl();
    return make_op(a.shape(), std::move(out), {pa}, [=](TensorImpl* self) {
        return [self, pa, s]() {
            if (!pa->requires_grad) return;
            ensure_grad(pa.get());
            for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += self->grad[i] * s;
        };
    });
}

// -------------------------------------------------------------------- matmul

namespace {

// C[m,n] += A[m,k] * B[k,n], optional transposes on A/B views.
void gemm_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n,
              bool ta, bool tb) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t l = 0; l < k; ++l) {
            double a = ta ? A[l * m + i] : A[i * k + l];
            if (a == 0.0) continue;
            const double* brow = tb ? nullptr : B + l * n;
            double* crow = C + i * n;
            if (!tb) {
                for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
            } else {
                for (int64_t j = 0; j < n; ++j) crow[j] += a * B[j * k + l];
            }
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != b.ndim() || (a.ndim() != 2 && a.ndim() != 3))
        throw DimensionError("matmul expects two 2-D or two 3-D tensors, got " +
                             shape_str(a.shape()) + " and " + shape_str(b.shape()));
    int64_t batch = a.ndim() == 3 ? a.dim(0) : 1;
    if (a.ndim() == 3 && b.dim(0) != batch)
        throw DimensionError("matmul batch mismatch");
    int64_t m = a.dim(a.ndim() - 2), k = a.dim(a.ndim() - 1);
    int64_t k2 = b.dim(b.ndim() - 2), n = b.dim(b.ndim() - 1);
    if (k != k2)
        throw DimensionError("matmul inner dimension mismatch: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));

    Shape out_shape = a.ndim() == 3 ? Shape{static_cast<int>(batch), static_cast<int>(m),
                                            static_cast<int>(n)}
                                    : Shape{static_cast<int>(m), static_cast<int>(n)};
    std::vector<double> out(batch * m * n, 0.0);
    const double* A = a.values().data();
    const double* B = b.values().data();
    for (int64_t t = 0; t < batch; ++t)
        gemm_acc(A + t * m * k, B + t * k * n, out.data() + t * m * n, m, k, n, false, false);

    auto pa = a.impl();
    auto pb = b.impl();
    return make_op(out_shape, std::move(out), {pa, pb}, [=](TensorImpl* self) {
        return [self, pa, pb, batch, m, k, n]() {
            const double* dC = self->grad.data();
            if (pa->requires_grad) {
                ensure_grad(pa.get());
                // dA = dC * B^T
                for (int64_t t = 0; t < batch; ++t)
                    gemm_acc(dC + t * m * n, pb->data.data() + t * k * n,
                             pa->grad.data() + t * m * k, m, n, k, false, true);
            }
            if (pb->requires_grad) {
                ensure_grad(pb.get());
                // dB = A^T * dC
                for (int64_t t = 0; t < batch; ++t)
                    gemm_acc(pa->data.data() + t * m * k, dC + t * m * n,
                             pb->grad.data() + t * k * n, k, m, n, true, false);
            }
        };
    });
}

// -------------------------------------------------------------------- conv2d

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv2d expects 4-D input and weight");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                             " weight " + shape_str(w.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError("conv2d kernel extents must be odd");
    if (bias.ndim() != 1 || bias.dim(0) != F) throw DimensionError("conv2d bias must be [F]");
    if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw DimensionError("conv2d window larger than padded input");
    int64_t OH = (H + 2 * pad - kh) / stride + 1;
    int64_t OW = (W + 2 * pad - kw) / stride + 1;
    if (OH <= 0 || OW <= 0) throw DimensionError("conv2d non-positive output extent");

    std::vector<double> out(N * F * OH * OW, 0.0);
    const double* xd = x.values().data();
    const double* wd = w.values().data();
    const double* bd = bias.values().data();

    for (int64_t n = 0; n < N; ++n) {
        for (int64_t f = 0; f < F; ++f) {
            double* yplane = out.data() + (n * F + f) * OH * OW;
            double bv = bd[f];
            for (int64_t i = 0; i < OH * OW; ++i) yplane[i] = bv;
            for (int64_t c = 0; c < C; ++c) {
                const double* xplane = xd + (n * C + c) * H * W;
                const double* wk = wd + (f * C + c) * kh * kw;
                for (int64_t r = 0; r < kh; ++r) {
                    for (int64_t s = 0; s < kw; ++s) {
                        double wv = wk[r * kw + s];
                        if (wv == 0.0) continue;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            int64_t ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            const double* xrow = xplane + ih * W;
                            double* yrow = yplane + oh * OW;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                int64_t iw = ow * stride - pad + s;
                                if (iw < 0 || iw >= W) continue;
                                yrow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }

    Shape out_shape{static_cast<int>(N), static_cast<int>(F), static_cast<int>(OH),
                    static_cast<int>(OW)};
    auto px = x.impl();
    auto pw = w.impl();
    auto pb = bias.impl();
    return make_op(out_shape, std::move(out), {px, pw, pb}, [=](TensorImpl* self) {
        return [self, px, pw, pb, N, C, H, W, F, kh, kw, OH, OW, stride, pad]() {
            const double* dy = self->grad.data();
            bool gx = px->requires_grad, gw = pw->requires_grad, gb = pb->requires_grad;
            if (gx) ensure_grad(px.get());
            if (gw) ensure_grad(pw.get());
            if (gb) ensure_grad(pb.get());
            for (int64_t n = 0; n < N; ++n) {
                for (int64_t f = 0; f < F; ++f) {
                    const double* dyplane = dy + (n * F + f) * OH * OW;
                    if (gb) {
                        double s = 0;
                        for (int64_t i = 0; i < OH * OW; ++i) s += dyplane[i];
                        pb->grad[f] += s;
                    }
                    for (int64_t c = 0; c < C; ++c) {
                        const double* xplane = px->data.data() + (n * C + c) * H * W;
                        double* dxplane = gx ? px->grad.data() + (n * C + c) * H * W : nullptr;
                        const double* wk = pw->data.data() + (f * C + c) * kh * kw;
                        double* dwk = gw ? pw->grad.data() + (f * C + c) * kh * kw : nullptr;
                        for (int64_t r = 0; r < kh; ++r) {
                            for (int64_t s = 0; s < kw; ++s) {
                                double wv = wk[r * kw + s];
                                double dwacc = 0;
                                for (int64_t oh = 0; oh < OH; ++oh) {
                                    int64_t ih = oh * stride - pad + r;
                                    if (ih < 0 || ih >= H) continue;
                                    const double* xrow = xplane + ih * W;
                                    double* dxrow = gx ? dxplane + ih * W : nullptr;
                                    const double* dyrow = dyplane + oh * OW;
                                    for (int64_t ow = 0; ow < OW; ++ow) {
                                        int64_t iw = ow * stride - pad + s;
                                        if (iw < 0 || iw >= W) continue;
                                        double g = dyrow[ow];
                                        if (gx) dxrow[iw] += g * wv;
                                        if (gw) dwacc += g * xrow[iw];
                                    }
                                }
                                if (gw) dwk[r * kw + s] += dwacc;
                            }
                        }
                    }
                }
            }
        };
    });
}

// --------------------------------------------------------------- activations

Tensor relu(const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    auto px = x.impl();
    return make_op(x.shape(), std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            // relu' at exactly 0 is 0
            for (size_t i = 0; i < px->grad.size(); ++i)
                if (px->data[i] > 0.0) px->grad[i] += self->grad[i];
        };
    });
}

Tensor sigmoid(const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    auto px = x.impl();
    return make_op(x.shape(), std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < px->grad.size(); ++i) {
                double y = self->data[i];
                px->grad[i] += self->grad[i] * y * (1.0 - y);
            }
        };
    });
}

Tensor exp(const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
    auto px = x.impl();
    return make_op(x.shape(), std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < px->grad.size(); ++i)
                px->grad[i] += self->grad[i] * self->data[i];
        };
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw ContractError("clamp bounds inverted");
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, xv[i]));
    auto px = x.impl();
    return make_op(x.shape(), std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, lo, hi]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < px->grad.size(); ++i) {
                double v = px->data[i];
                if (v >= lo && v <= hi) px->grad[i] += self->grad[i];
            }
        };
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("maximum expects equal shapes");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
    auto pa = a.impl();
    auto pb = b.impl();
    return make_op(a.shape(), std::move(out), {pa, pb}, [=](TensorImpl* self) {
        return [self, pa, pb]() {
            if (pa->requires_grad) ensure_grad(pa.get());
            if (pb->requires_grad) ensure_grad(pb.get());
            for (size_t i = 0; i < self->grad.size(); ++i) {
                if (pa->data[i] >= pb->data[i]) {
                    if (pa->requires_grad) pa->grad[i] += self->grad[i];
                } else if (pb->requires_grad) {
                    pb->grad[i] += self->grad[i];
                }
            }
        };
    });
}

// ------------------------------------------------------------- normalization

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var, bool training, double momentum,
                   double eps) {
    if (x.ndim() != 4) throw DimensionError("batchnorm2d expects 4-D input");
    if (eps <= 0) throw ContractError("batchnorm2d eps must be > 0");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw DimensionError("batchnorm2d parameter size mismatch");

    const auto& xv = x.values();
    int64_t M = N * H * W;
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    if (training) {
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double* p = xv.data() + (n * C + c) * H * W;
                double s = 0;
                for (int64_t i = 0; i < H * W; ++i) s += p[i];
                mean[c] += s;
            }
        for (int64_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(M);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                const double* p = xv.data() + (n * C + c) * H * W;
                double s = 0;
                for (int64_t i = 0; i < H * W; ++i) {
                    double d = p[i] - mean[c];
                    s += d * d;
                }
                var[c] += s;
            }
        for (int64_t c = 0; c < C; ++c) var[c] /= static_cast<double>(M);
        // state buffers, biased variance, outside the graph
        auto& rm = running_mean.raw();
        auto& rv = running_var.raw();
        for (int64_t c = 0; c < C; ++c) {
            rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c];
        }
    } else {
        mean.assign(running_mean.values().begin(), running_mean.values().end());
        var.assign(running_var.values().begin(), running_var.values().end());
    }

    std::vector<double> inv_std(C);
    for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<double> out(xv.size());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* p = xv.data() + (n * C + c) * H * W;
            double* q = out.data() + (n * C + c) * H * W;
            double mu = mean[c], is = inv_std[c], g = gv[c], b = bv[c];
            for (int64_t i = 0; i < H * W; ++i) q[i] = g * (p[i] - mu) * is + b;
        }

    auto px = x.impl();
    auto pg = gamma.impl();
    auto pbt = beta.impl();
    return make_op(x.shape(), std::move(out), {px, pg, pbt}, [=](TensorImpl* self) {
        return [self, px, pg, pbt, mean, inv_std, N, C, H, W, M, training]() {
            const auto& dy = self->grad;
            bool gx = px->requires_grad;
            if (gx) ensure_grad(px.get());
            if (pg->requires_grad) ensure_grad(pg.get());
            if (pbt->requires_grad) ensure_grad(pbt.get());
            for (int64_t c = 0; c < C; ++c) {
                double mu = mean[c], is = inv_std[c], g = pg->data[c];
                double sum_dy = 0, sum_dy_xhat = 0;
                for (int64_t n = 0; n < N; ++n) {
                    const double* p = px->data.data() + (n * C + c) * H * W;
                    const double* d = dy.data() + (n * C + c) * H * W;
                    for (int64_t i = 0; i < H * W; ++i) {
                        sum_dy += d[i];
                        sum_dy_xhat += d[i] * (p[i] - mu) * is;
                    }
                }
                if (pg->requires_grad) pg->grad[c] += sum_dy_xhat;
                if (pbt->requires_grad) pbt->grad[c] += sum_dy;
                if (!gx) continue;
                double inv_m = 1.0 / static_cast<double>(M);
                for (int64_t n = 0; n < N; ++n) {
                    const double* p = px->data.data() + (n * C + c) * H * W;
                    const double* d = dy.data() + (n * C + c) * H * W;
                    double* dx = px->grad.data() + (n * C + c) * H * W;
                    for (int64_t i = 0; i < H * W; ++i) {
                        double xhat = (p[i] - mu) * is;
                        if (training) {
                            dx[i] += g * is *
                                     (d[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
                        } else {
                            dx[i] += g * is * d[i];
                        }
                    }
                }
            }
        };
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0) throw ContractError("layernorm eps must be > 0");
    int64_t D = x.dim(x.ndim() - 1);
    if (gamma.numel() != D || beta.numel() != D)
        throw DimensionError("layernorm parameter size mismatch");
    int64_t rows = x.numel() / D;

    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    std::vector<double> out(xv.size());
    std::vector<double> mean(rows), inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = xv.data() + r * D;
        double mu = 0;
        for (int64_t i = 0; i < D; ++i) mu += p[i];
        mu /= static_cast<double>(D);
        double v = 0;
        for (int64_t i = 0; i < D; ++i) {
            double d = p[i] - mu;
            v += d * d;
        }
        v /= static_cast<double>(D);
        double is = 1.0 / std::sqrt(v + eps);
        mean[r] = mu;
        inv_std[r] = is;
        double* q = out.data() + r * D;
        for (int64_t i = 0; i < D; ++i) q[i] = gv[i] * (p[i] - mu) * is + bv[i];
    }

    auto px = x.impl();
    auto pg = gamma.impl();
    auto pb = beta.impl();
    return make_op(x.shape(), std::move(out), {px, pg, pb}, [=](TensorImpl* self) {
        return [self, px, pg, pb, mean, inv_std, rows, D]() {
            const auto& dy = self->grad;
            bool gx = px->requires_grad;
            if (gx) ensure_grad(px.get());
            if (pg->requires_grad) ensure_grad(pg.get());
            if (pb->requires_grad) ensure_grad(pb.get());
            for (int64_t r = 0; r < rows; ++r) {
                const double* p = px->data.data() + r * D;
                const double* d = dy.data() + r * D;
                double mu = mean[r], is = inv_std[r];
                double sum_gdy = 0, sum_gdy_xhat = 0;
                for (int64_t i = 0; i < D; ++i) {
                    double xhat = (p[i] - mu) * is;
                    double gd = pg->data[i] * d[i];
                    sum_gdy += gd;
                    sum_gdy_xhat += gd * xhat;
                    if (pg->requires_grad) pg->grad[i] += d[i] * xhat;
                    if (pb->requires_grad) pb->grad[i] += d[i];
                }
                if (!gx) continue;
                double inv_d = 1.0 / static_cast<double>(D);
                double* dx = px->grad.data() + r * D;
                for (int64_t i = 0; i < D; ++i) {
                    double xhat = (p[i] - mu) * is;
                    double gd = pg->data[i] * d[i];
                    dx[i] += is * (gd - inv_d * sum_gdy - xhat * inv_d * sum_gdy_xhat);
                }
            }
        };
    });
}

// ------------------------------------------------------------------- pooling

Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int pad) {
    if (x.ndim() != 4) throw DimensionError("pool2d expects 4-D input");
    if (k < 1 || stride < 1 || pad < 0) throw DimensionError("pool2d bad window parameters");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H + 2 * pad < k || W + 2 * pad < k)
        throw DimensionError("pool2d window larger than padded input");
    int64_t OH = (H + 2 * pad - k) / stride + 1;
    int64_t OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0) throw DimensionError("pool2d non-positive output extent");

    const auto& xv = x.values();
    std::vector<double> out(N * C * OH * OW);
    std::vector<int64_t> argmax;
    std::vector<double> counts;
    if (kind == PoolKind::max) argmax.assign(out.size(), -1);
    else counts.assign(out.size(), 0.0);

    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = xv.data() + (n * C + c) * H * W;
            int64_t obase = (n * C + c) * OH * OW;
            for (int64_t oh = 0; oh < OH; ++oh)
                for (int64_t ow = 0; ow < OW; ++ow) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t besti = -1;
                    double sum = 0;
                    int64_t cnt = 0;
                    for (int64_t r = 0; r < k; ++r) {
                        int64_t ih = oh * stride - pad + r;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t s = 0; s < k; ++s) {
                            int64_t iw = ow * stride - pad + s;
                            if (iw < 0 || iw >= W) continue;
                            double v = plane[ih * W + iw];
                            if (kind == PoolKind::max) {
                                if (v > best) {
                                    best = v;
                                    besti = ih * W + iw;
                                }
                            } else {
                                sum += v;
                                ++cnt;
                            }
                        }
                    }
                    int64_t oi = obase + oh * OW + ow;
                    if (kind == PoolKind::max) {
                        out[oi] = best;
                        argmax[oi] = (n * C + c) * H * W + besti;
                    } else {
                        out[oi] = sum / static_cast<double>(cnt);
                        counts[oi] = static_cast<double>(cnt);
                    }
                }
        }

    Shape out_shape{static_cast<int>(N), static_cast<int>(C), static_cast<int>(OH),
                    static_cast<int>(OW)};
    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, kind, argmax, counts, N, C, H, W, OH, OW, k, stride, pad]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            if (kind == PoolKind::max) {
                for (size_t i = 0; i < self->grad.size(); ++i)
                    px->grad[argmax[i]] += self->grad[i];
                return;
            }
            for (int64_t nc = 0; nc < N * C; ++nc) {
                double* dplane = px->grad.data() + nc * H * W;
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        int64_t oi = nc * OH * OW + oh * OW + ow;
                        double share = self->grad[oi] / counts[oi];
                        for (int64_t r = 0; r < k; ++r) {
                            int64_t ih = oh * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t s = 0; s < k; ++s) {
                                int64_t iw = ow * stride - pad + s;
                                if (iw < 0 || iw >= W) continue;
                                dplane[ih * W + iw] += share;
                            }
                        }
                    }
            }
        };
    });
}

// ------------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw DimensionError("softmax axis out of range");
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    int64_t L = x.dim(axis);
    int64_t inner = stride_of(x.shape(), axis);
    int64_t outer = x.numel() / (L * inner);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = o * L * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t l = 0; l < L; ++l) mx = std::max(mx, xv[base + l * inner]);
            double sum = 0;
            for (int64_t l = 0; l < L; ++l) {
                double e = std::exp(xv[base + l * inner] - mx);
                out[base + l * inner] = e;
                sum += e;
            }
            for (int64_t l = 0; l < L; ++l) out[base + l * inner] /= sum;
        }

    auto px = x.impl();
    return make_op(x.shape(), std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, L, inner, outer]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * L * inner + in;
                    double dot = 0;
                    for (int64_t l = 0; l < L; ++l) {
                        int64_t i = base + l * inner;
                        dot += self->grad[i] * self->data[i];
                    }
                    for (int64_t l = 0; l < L; ++l) {
                        int64_t i = base + l * inner;
                        px->grad[i] += self->data[i] * (self->grad[i] - dot);
                    }
                }
        };
    });
}

// ----------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& x, const Shape& target) {
    check_shape(target);
    if (shape_numel(target) != x.numel())
        throw DimensionError("reshape element count mismatch: " + shape_str(x.shape()) +
                             " -> " + shape_str(target));
    auto px = x.impl();
    return make_op(target, x.values(), {px}, [=](TensorImpl* self) {
        return [self, px]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self->grad[i];
        };
    });
}

namespace {

std::vector<int64_t> full_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
    int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw DimensionError("transpose perm rank mismatch");
    std::vector<bool> used(nd, false);
    for (int p : perm) {
        if (p < 0 || p >= nd || used[p]) throw DimensionError("transpose perm invalid");
        used[p] = true;
    }
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);
    auto in_st = full_strides(x.shape());
    auto out_st = full_strides(out_shape);

    // out[idx] = in[perm(idx)]; build flat map once, reuse in backward
    std::vector<int64_t> src_index(x.numel());
    std::vector<int> idx(nd, 0);
    for (int64_t oi = 0; oi < x.numel(); ++oi) {
        int64_t si = 0;
        for (int d = 0; d < nd; ++d) si += static_cast<int64_t>(idx[d]) * in_st[perm[d]];
        src_index[oi] = si;
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }

    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = xv[src_index[i]];

    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, src_index]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < src_index.size(); ++i)
                px->grad[src_index[i]] += self->grad[i];
        };
    });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw DimensionError("concat of nothing");
    int nd = xs[0].ndim();
    if (axis < 0 || axis >= nd) throw DimensionError("concat axis out of range");
    Shape out_shape = xs[0].shape();
    int total = 0;
    for (const auto& t : xs) {
        if (t.ndim() != nd) throw DimensionError("concat rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != axis && t.dim(d) != out_shape[d])
                throw DimensionError("concat extent mismatch on dim " + std::to_string(d));
        total += t.dim(axis);
    }
    out_shape[axis] = total;

    int64_t inner = stride_of(out_shape, axis);
    int64_t outer = shape_numel(out_shape) / (static_cast<int64_t>(total) * inner);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<int64_t> offsets;  // start along axis per input
    int64_t off = 0;
    for (const auto& t : xs) {
        offsets.push_back(off);
        int64_t len = t.dim(axis);
        const auto& tv = t.values();
        for (int64_t o = 0; o < outer; ++o) {
            const double* src = tv.data() + o * len * inner;
            double* dst = out.data() + (o * total + off) * inner;
            std::memcpy(dst, src, sizeof(double) * len * inner);
        }
        off += len;
    }

    Parents parents;
    for (const auto& t : xs) parents.push_back(t.impl());
    return make_op(out_shape, std::move(out), parents, [=](TensorImpl* self) {
        return [self, offsets, inner, outer, total]() {
            for (size_t pi = 0; pi < self->parents.size(); ++pi) {
                auto& p = self->parents[pi];
                if (!p->requires_grad) continue;
                ensure_grad(p.get());
                int64_t len = static_cast<int64_t>(p->data.size()) / (outer * inner);
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = self->grad.data() + (o * total + offsets[pi]) * inner;
                    double* dst = p->grad.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
        };
    });
}

Tensor concat_channels(const std::vector<Tensor>& xs) { return concat(xs, 1); }

Tensor narrow(const Tensor& x, int axis, int start, int count) {
    if (axis < 0 || axis >= x.ndim()) throw DimensionError("narrow axis out of range");
    int len = x.dim(axis);
    if (start < 0 || count <= 0 || start + count > len)
        throw DimensionError("narrow range out of bounds");
    Shape out_shape = x.shape();
    out_shape[axis] = count;
    int64_t inner = stride_of(x.shape(), axis);
    int64_t outer = x.numel() / (static_cast<int64_t>(len) * inner);

    const auto& xv = x.values();
    std::vector<double> out(shape_numel(out_shape));
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * count * inner, xv.data() + (o * len + start) * inner,
                    sizeof(double) * count * inner);

    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, inner, outer, len, start, count]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = self->grad.data() + o * count * inner;
                double* dst = px->grad.data() + (o * len + start) * inner;
                for (int64_t i = 0; i < count * inner; ++i) dst[i] += src[i];
            }
        };
    });
}

Tensor slice_channels(const Tensor& x, int from, int count) { return narrow(x, 1, from, count); }

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4) throw DimensionError("upsample_bilinear expects 4-D input");
    if (out_h < 1 || out_w < 1) throw DimensionError("upsample_bilinear bad target size");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    struct Tap {
        int64_t i0, i1;
        double w1;  // weight of i1; i0 gets 1-w1
    };
    auto make_taps = [](int64_t in, int64_t out) {
        std::vector<Tap> taps(out);
        for (int64_t o = 0; o < out; ++o) {
            double src = (out == 1 || in == 1)
                             ? 0.0
                             : static_cast<double>(o * (in - 1)) / static_cast<double>(out - 1);
            int64_t i0 = static_cast<int64_t>(std::floor(src));
            if (i0 > in - 1) i0 = in - 1;
            int64_t i1 = std::min(i0 + 1, in - 1);
            taps[o] = {i0, i1, src - static_cast<double>(i0)};
        }
        return taps;
    };
    auto th = make_taps(H, out_h);
    auto tw = make_taps(W, out_w);

    const auto& xv = x.values();
    std::vector<double> out(N * C * out_h * out_w);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = xv.data() + (n * C + c) * H * W;
            double* q = out.data() + (n * C + c) * out_h * out_w;
            for (int64_t oh = 0; oh < out_h; ++oh) {
                const Tap& a = th[oh];
                for (int64_t ow = 0; ow < out_w; ++ow) {
                    const Tap& b = tw[ow];
                    double v00 = plane[a.i0 * W + b.i0];
                    double v01 = plane[a.i0 * W + b.i1];
                    double v10 = plane[a.i1 * W + b.i0];
                    double v11 = plane[a.i1 * W + b.i1];
                    double top = v00 + (v01 - v00) * b.w1;
                    double bot = v10 + (v11 - v10) * b.w1;
                    q[oh * out_w + ow] = top + (bot - top) * a.w1;
                }
            }
        }

    Shape out_shape{static_cast<int>(N), static_cast<int>(C), out_h, out_w};
    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, th, tw, N, C, H, W, out_h, out_w]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    double* dplane = px->grad.data() + (n * C + c) * H * W;
                    const double* dq = self->grad.data() + (n * C + c) * out_h * out_w;
                    for (int64_t oh = 0; oh < out_h; ++oh) {
                        const Tap& a = th[oh];
                        for (int64_t ow = 0; ow < out_w; ++ow) {
                            const Tap& b = tw[ow];
                            double g = dq[oh * out_w + ow];
                            dplane[a.i0 * W + b.i0] += g * (1 - a.w1) * (1 - b.w1);
                            dplane[a.i0 * W + b.i1] += g * (1 - a.w1) * b.w1;
                            dplane[a.i1 * W + b.i0] += g * a.w1 * (1 - b.w1);
                            dplane[a.i1 * W + b.i1] += g * a.w1 * b.w1;
                        }
                    }
                }
        };
    });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
    if (x.ndim() != 4) throw DimensionError("upsample_nearest expects 4-D input");
    if (factor < 1) throw DimensionError("upsample_nearest factor must be >= 1");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t OH = H * factor, OW = W * factor;
    const auto& xv = x.values();
    std::vector<double> out(N * C * OH * OW);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* plane = xv.data() + nc * H * W;
        double* q = out.data() + nc * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
                q[oh * OW + ow] = plane[(oh / factor) * W + (ow / factor)];
    }
    Shape out_shape{static_cast<int>(N), static_cast<int>(C), static_cast<int>(OH),
                    static_cast<int>(OW)};
    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, N, C, H, W, OH, OW, factor]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (int64_t nc = 0; nc < N * C; ++nc) {
                double* dplane = px->grad.data() + nc * H * W;
                const double* dq = self->grad.data() + nc * OH * OW;
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow)
                        dplane[(oh / factor) * W + (ow / factor)] += dq[oh * OW + ow];
            }
        };
    });
}

// ---------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& x) {
    double s = 0;
    for (double v : x.values()) s += v;
    auto px = x.impl();
    return make_op({1}, {s}, {px}, [=](TensorImpl* self) {
        return [self, px]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            double g = self->grad[0];
            for (auto& v : px->grad) v += g;
        };
    });
}

Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

// shared scaffolding for single-axis keepdim reductions
struct AxisGeom {
    int64_t L, inner, outer;
};

AxisGeom axis_geom(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.ndim()) throw DimensionError("reduction axis out of range");
    AxisGeom g{};
    g.L = x.dim(axis);
    g.inner = stride_of(x.shape(), axis);
    g.outer = x.numel() / (g.L * g.inner);
    return g;
}

}  // namespace

Tensor reduce_sum(const Tensor& x, int axis) {
    AxisGeom g = axis_geom(x, axis);
    Shape out_shape = x.shape();
    out_shape[axis] = 1;
    const auto& xv = x.values();
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (int64_t o = 0; o < g.outer; ++o)
        for (int64_t l = 0; l < g.L; ++l)
            for (int64_t in = 0; in < g.inner; ++in)
                out[o * g.inner + in] += xv[(o * g.L + l) * g.inner + in];
    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, g]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (int64_t o = 0; o < g.outer; ++o)
                for (int64_t l = 0; l < g.L; ++l)
                    for (int64_t in = 0; in < g.inner; ++in)
                        px->grad[(o * g.L + l) * g.inner + in] += self->grad[o * g.inner + in];
        };
    });
}

Tensor reduce_mean(const Tensor& x, int axis) {
    return mul_scalar(reduce_sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor reduce_max(const Tensor& x, int axis) {
    AxisGeom g = axis_geom(x, axis);
    Shape out_shape = x.shape();
    out_shape[axis] = 1;
    const auto& xv = x.values();
    std::vector<double> out(shape_numel(out_shape));
    std::vector<int64_t> arg(out.size());
    for (int64_t o = 0; o < g.outer; ++o)
        for (int64_t in = 0; in < g.inner; ++in) {
            double best = -std::numeric_limits<double>::infinity();
            int64_t bi = -1;
            for (int64_t l = 0; l < g.L; ++l) {
                int64_t i = (o * g.L + l) * g.inner + in;
                if (xv[i] > best) {
                    best = xv[i];
                    bi = i;
                }
            }
            out[o * g.inner + in] = best;
            arg[o * g.inner + in] = bi;
        }
    auto px = x.impl();
    return make_op(out_shape, std::move(out), {px}, [=](TensorImpl* self) {
        return [self, px, arg]() {
            if (!px->requires_grad) return;
            ensure_grad(px.get());
            for (size_t i = 0; i < arg.size(); ++i) px->grad[arg[i]] += self->grad[i];
        };
    });
}

// ------------------------------------------------------------------ backward

void backward(const Tensor& root) {
    if (root.numel() != 1) throw ContractError("backward root must be scalar");
    auto rimpl = root.impl();
    if (!rimpl->requires_grad)
        throw ContractError("backward root does not depend on any gradient-requiring tensor");

    // collect reachable graph nodes, then replay backward rules in reverse
    // creation order (a topological order; each node visited once)
    std::vector<TensorImpl*> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack{rimpl.get()};
    seen.insert(rimpl.get());
    while (!stack.empty()) {
        TensorImpl* t = stack.back();
        stack.pop_back();
        nodes.push_back(t);
        for (const auto& p : t->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->seq > b->seq; });

    ensure_grad(rimpl.get());
    rimpl->grad[0] += 1.0;
    for (TensorImpl* t : nodes)
        if (t->backprop) t->backprop();
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
    if (eps < 1e-7 || eps > 1e-3) throw ContractError("grad_check eps outside [1e-7, 1e-3]");
    x.impl()->requires_grad = true;
    x.zero_grad();
    {
        Tensor y = f(x);
        if (y.numel() != 1) throw ContractError("grad_check target must be scalar-valued");
        backward(y);
    }
    std::vector<double> analytic = x.grad();
    x.zero_grad();

    NoGradGuard ng;
    auto& data = x.raw();
    double max_err = 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
        double orig = data[i];
        data[i] = orig + eps;
        double fp = f(x).item();
        data[i] = orig - eps;
        double fm = f(x).item();
        data[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::fabs(analytic[i] - numeric) /
                     std::max(1e-8, std::fabs(analytic[i]) + std::fabs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace dhformer
