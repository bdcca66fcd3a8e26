#include "vlmo/numerics/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vlmo {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const Buffer<T>& v, std::size_t r, std::size_t c) {
    return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
MatMap<T> as_matrix(std::span<T> v, std::size_t r, std::size_t c) {
    return MatMap<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
void require_rank2(const Tensor<T>& x, const char* op) {
    if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Grad buffer of parent i if it participates in differentiation.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    if (!p->requires_grad) return nullptr;
    return p->ensure_grad().data();
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto node = detail::make_result<T>("matmul", {m, n}, {&a, &b});
    as_matrix<T>(std::span<T>(node->data), m, n).noalias() =
        as_matrix(a.node()->data, m, k) * as_matrix(b.node()->data, k, n);
    node->backward_fn = [m, k, n](Node<T>& self) {
        auto dc = as_matrix(self.grad, m, n);
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        if (T* ga = parent_grad(self, 0)) {
            as_matrix(std::span<T>(ga, m * k), m, k).noalias() += dc * as_matrix(B, k, n).transpose();
        }
        if (T* gb = parent_grad(self, 1)) {
            as_matrix(std::span<T>(gb, k * n), k, n).noalias() += as_matrix(A, m, k).transpose() * dc;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    require_rank2(w, "linear");
    const std::size_t in = w.dim(0), out = w.dim(1);
    if (x.cols() != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && bias.numel() != out) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(w.shape()));
    }
    const std::size_t r = x.rows();
    Shape shape = x.shape();
    shape.back() = out;
    auto node = has_bias ? detail::make_result<T>("linear", shape, {&x, &w, &bias})
                         : detail::make_result<T>("linear", shape, {&x, &w});
    auto y = as_matrix<T>(std::span<T>(node->data), r, out);
    y.noalias() = as_matrix(x.node()->data, r, in) * as_matrix(w.node()->data, in, out);
    if (has_bias) {
        y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.node()->data.data(),
                                                                           static_cast<Eigen::Index>(out));
    }
    node->backward_fn = [r, in, out, has_bias](Node<T>& self) {
        auto dy = as_matrix(self.grad, r, out);
        if (T* gx = parent_grad(self, 0)) {
            as_matrix(std::span<T>(gx, r * in), r, in).noalias() +=
                dy * as_matrix(self.parents[1]->data, in, out).transpose();
        }
        if (T* gw = parent_grad(self, 1)) {
            as_matrix(std::span<T>(gw, in * out), in, out).noalias() +=
                as_matrix(self.parents[0]->data, r, in).transpose() * dy;
        }
        if (has_bias) {
            if (T* gb = parent_grad(self, 2)) {
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, static_cast<Eigen::Index>(out)) +=
                    dy.colwise().sum();
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    auto node = detail::make_result<T>("add", a.shape(), {&a, &b});
    const auto& da = a.node()->data;
    const auto& db = b.node()->data;
    for (std::size_t i = 0; i < da.size(); ++i) node->data[i] = da[i] + db[i];
    node->backward_fn = [](Node<T>& self) {
        const std::size_t n = self.grad.size();
        for (std::size_t p = 0; p < 2; ++p) {
            if (T* g = parent_grad(self, p)) {
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto node = detail::make_result<T>("sub", a.shape(), {&a, &b});
    const auto& da = a.node()->data;
    const auto& db = b.node()->data;
    for (std::size_t i = 0; i < da.size(); ++i) node->data[i] = da[i] - db[i];
    node->backward_fn = [](Node<T>& self) {
        const std::size_t n = self.grad.size();
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (T* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto node = detail::make_result<T>("mul", a.shape(), {&a, &b});
    const auto& da = a.node()->data;
    const auto& db = b.node()->data;
    for (std::size_t i = 0; i < da.size(); ++i) node->data[i] = da[i] * db[i];
    node->backward_fn = [](Node<T>& self) {
        const std::size_t n = self.grad.size();
        const auto& va = self.parents[0]->data;
        const auto& vb = self.parents[1]->data;
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * vb[i];
        }
        if (T* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * va[i];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    auto node = detail::make_result<T>("scale", x.shape(), {&x});
    const auto& dx = x.node()->data;
    for (std::size_t i = 0; i < dx.size(); ++i) node->data[i] = dx[i] * factor;
    node->backward_fn = [factor](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& y) {
    const std::size_t c = x.cols();
    if (y.cols() != c || x.rows() % y.rows() != 0) {
        throw DimensionError("add_rows: cannot tile " + shape_str(y.shape()) + " over " + shape_str(x.shape()));
    }
    const std::size_t r = x.rows(), period = y.rows();
    auto node = detail::make_result<T>("add_rows", x.shape(), {&x, &y});
    const auto& dx = x.node()->data;
    const auto& dy = y.node()->data;
    for (std::size_t i = 0; i < r; ++i) {
        const T* src = dx.data() + i * c;
        const T* tile = dy.data() + (i % period) * c;
        T* dst = node->data.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] = src[j] + tile[j];
    }
    node->backward_fn = [r, c, period](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < r * c; ++i) g[i] += self.grad[i];
        }
        if (T* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < r; ++i) {
                T* dst = g + (i % period) * c;
                const T* src = self.grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    require_rank2(x, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    auto node = detail::make_result<T>("transpose", {c, r}, {&x});
    as_matrix<T>(std::span<T>(node->data), c, r) = as_matrix(x.node()->data, r, c).transpose();
    node->backward_fn = [r, c](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            as_matrix(std::span<T>(g, r * c), r, c) += as_matrix(self.grad, c, r).transpose();
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    if (!x.all_finite()) throw NumericError("softmax: non-finite input");
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t extent = shape[axis];
    auto node = detail::make_result<T>("softmax", shape, {&x});
    const auto& in = x.node()->data;
    auto& out = node->data;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < inner; ++s) {
            const std::size_t base = o * extent * inner + s;
            T peak = in[base];
            for (std::size_t j = 1; j < extent; ++j) peak = std::max(peak, in[base + j * inner]);
            T total = 0;
            for (std::size_t j = 0; j < extent; ++j) {
                out[base + j * inner] = std::exp(in[base + j * inner] - peak);
                total += out[base + j * inner];
            }
            for (std::size_t j = 0; j < extent; ++j) out[base + j * inner] /= total;
        }
    }
    node->backward_fn = [outer, inner, extent](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        const auto& y = self.data;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t s = 0; s < inner; ++s) {
                const std::size_t base = o * extent * inner + s;
                T dot = 0;
                for (std::size_t j = 0; j < extent; ++j) dot += y[base + j * inner] * self.grad[base + j * inner];
                for (std::size_t j = 0; j < extent; ++j) {
                    const std::size_t idx = base + j * inner;
                    g[idx] += y[idx] * (self.grad[idx] - dot);
                }
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
    const std::size_t d = x.cols();
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                             " do not match " + shape_str(x.shape()));
    }
    const std::size_t r = x.rows();
    auto node = detail::make_result<T>("layer_norm", x.shape(), {&x, &gamma, &beta});
    // Normalized activations and inverse std are kept for the backward pass.
    auto xhat = std::make_shared<Buffer<T>>(r * d);
    auto rstd = std::make_shared<Buffer<T>>(r);
    const auto& in = x.node()->data;
    const auto& gm = gamma.node()->data;
    const auto& bt = beta.node()->data;
    for (std::size_t i = 0; i < r; ++i) {
        const T* row = in.data() + i * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        (*rstd)[i] = inv;
        T* xh = xhat->data() + i * d;
        T* out = node->data.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * inv;
            out[j] = xh[j] * gm[j] + bt[j];
        }
    }
    node->backward_fn = [r, d, xhat, rstd](Node<T>& self) {
        const auto& gm = self.parents[1]->data;
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        Buffer<T> dxhat(d);
        for (std::size_t i = 0; i < r; ++i) {
            const T* dy = self.grad.data() + i * d;
            const T* xh = xhat->data() + i * d;
            if (gg) {
                for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xh[j];
            }
            if (gb) {
                for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
            }
            if (!gx) continue;
            T mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
                dxhat[j] = dy[j] * gm[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat /= T(d);
            mean_dxhat_xhat /= T(d);
            T* g = gx + i * d;
            const T inv = (*rstd)[i];
            for (std::size_t j = 0; j < d; ++j) g[j] += inv * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
    auto node = detail::make_result<T>("gelu", x.shape(), {&x});
    const auto n = static_cast<Eigen::Index>(x.numel());
    Eigen::Map<const Array> in(x.node()->data.data(), n);
    Eigen::Map<Array>(node->data.data(), n) = in * (T(0.5) * (T(1) + (in * T(0.70710678118654752440)).erf()));
    // Phi(x) is recomputed in backward: cheaper than storing it for
    // activations this large.
    node->backward_fn = [n](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        Eigen::Map<const Array> v(self.parents[0]->data.data(), n);
        Eigen::Map<const Array> dy(self.grad.data(), n);
        Eigen::Map<Array>(g, n) += dy * (T(0.5) * (T(1) + (v * T(0.70710678118654752440)).erf()) +
                                         v * T(0.39894228040143267794) * (T(-0.5) * v * v).exp());
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
    require_rank2(logits, "cross_entropy");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (targets.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    std::size_t counted = 0;
    for (auto t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= k) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
        }
        ++counted;
    }
    auto node = detail::make_result<T>("cross_entropy", {1}, {&logits});
    auto probs = std::make_shared<Buffer<T>>(n * k, T(0));
    const auto& in = logits.node()->data;
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == ignore_index) continue;
        const T* row = in.data() + i * k;
        T* p = probs->data() + i * k;
        const T peak = *std::max_element(row, row + k);
        T z = 0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(row[j] - peak);
            z += p[j];
        }
        for (std::size_t j = 0; j < k; ++j) p[j] /= z;
        total += -(row[targets[i]] - peak - std::log(z));
    }
    node->data[0] = counted ? total / T(counted) : T(0);
    if (!std::isfinite(node->data[0])) throw NumericError("cross_entropy: non-finite loss");
    std::vector<std::int64_t> kept(targets.begin(), targets.end());
    node->backward_fn = [n, k, counted, probs, kept = std::move(kept), ignore_index](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g || counted == 0) return;
        const T upstream = self.grad[0] / T(counted);
        for (std::size_t i = 0; i < n; ++i) {
            if (kept[i] == ignore_index) continue;
            const T* p = probs->data() + i * k;
            T* gi = g + i * k;
            for (std::size_t j = 0; j < k; ++j) gi[j] += upstream * p[j];
            gi[kept[i]] -= upstream;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
    const std::size_t d = x.cols(), r = x.rows();
    auto node = detail::make_result<T>("l2_normalize", x.shape(), {&x});
    auto norms = std::make_shared<Buffer<T>>(r);
    const auto& in = x.node()->data;
    for (std::size_t i = 0; i < r; ++i) {
        const T* row = in.data() + i * d;
        T sq = 0;
        for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
        const T denom = std::max(std::sqrt(sq), eps);
        (*norms)[i] = denom;
        for (std::size_t j = 0; j < d; ++j) node->data[i * d + j] = row[j] / denom;
    }
    node->backward_fn = [r, d, norms, eps](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        const auto& y = self.data;
        for (std::size_t i = 0; i < r; ++i) {
            const T denom = (*norms)[i];
            const T* dy = self.grad.data() + i * d;
            const T* yi = y.data() + i * d;
            T* gi = g + i * d;
            if (denom <= eps) {
                for (std::size_t j = 0; j < d; ++j) gi[j] += dy[j] / denom;
                continue;
            }
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += dy[j] * yi[j];
            for (std::size_t j = 0; j < d; ++j) gi[j] += (dy[j] - yi[j] * dot) / denom;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t batch, std::size_t seq, std::size_t heads,
                    std::span<const std::uint8_t> key_valid) {
    require_rank2(qkv, "attention");
    if (qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0 || heads == 0 || (qkv.dim(1) / 3) % heads != 0) {
        throw DimensionError("attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch=" +
                             std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" +
                             std::to_string(heads));
    }
    if (!key_valid.empty() && key_valid.size() != batch * seq) {
        throw DimensionError("attention: key mask length " + std::to_string(key_valid.size()) + " != " +
                             std::to_string(batch * seq));
    }
    using Strided = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;
    using MutStrided = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
    const std::size_t d = qkv.dim(1) / 3, dh = d / heads, stride = 3 * d;
    const auto s_ = static_cast<Eigen::Index>(seq), dh_ = static_cast<Eigen::Index>(dh);
    const T scale_factor = T(1) / std::sqrt(T(dh));
    auto node = detail::make_result<T>("attention", {batch * seq, d}, {&qkv});
    // Attention probabilities per (example, head), kept for backward.
    auto probs = std::make_shared<Buffer<T>>(batch * heads * seq * seq, T(0));
    const T* base = qkv.node()->data.data();
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::uint8_t* valid = key_valid.empty() ? nullptr : key_valid.data() + b * seq;
        for (std::size_t h = 0; h < heads; ++h) {
            const T* row0 = base + b * seq * stride + h * dh;
            Strided q(row0, s_, dh_, Eigen::OuterStride<>(stride));
            Strided k(row0 + d, s_, dh_, Eigen::OuterStride<>(stride));
            T* pbase = probs->data() + (b * heads + h) * seq * seq;
            auto p = as_matrix(std::span<T>(pbase, seq * seq), seq, seq);
            p.noalias() = (q * k.transpose()) * scale_factor;
            for (std::size_t i = 0; i < seq; ++i) {
                T* row = pbase + i * seq;
                if (valid) {
                    for (std::size_t j = 0; j < seq; ++j) {
                        if (!valid[j]) row[j] = kNegInf;
                    }
                }
                T peak = kNegInf;
                for (std::size_t j = 0; j < seq; ++j) peak = std::max(peak, row[j]);
                // A row without valid keys stays all -inf and exponentiates to zeros.
                if (peak == kNegInf) continue;
                for (std::size_t j = 0; j < seq; ++j) row[j] -= peak;
            }
        }
    }
    // One vectorized pass over every score.
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> all(probs->data(), static_cast<Eigen::Index>(probs->size()));
    all = all.exp();
    for (std::size_t r = 0; r < batch * heads * seq; ++r) {
        T* row = probs->data() + r * seq;
        T z = 0;
        for (std::size_t j = 0; j < seq; ++j) z += row[j];
        if (z == T(0)) continue;
        const T inv = T(1) / z;
        for (std::size_t j = 0; j < seq; ++j) row[j] *= inv;
    }
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            Strided v(base + b * seq * stride + h * dh + 2 * d, s_, dh_, Eigen::OuterStride<>(stride));
            ConstMatMap<T> p(probs->data() + (b * heads + h) * seq * seq, s_, s_);
            MutStrided out(node->data.data() + b * seq * d + h * dh, s_, dh_, Eigen::OuterStride<>(d));
            out.noalias() = p * v;
        }
    }
    node->backward_fn = [batch, seq, heads, d, dh, stride, scale_factor, probs](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        const auto s_ = static_cast<Eigen::Index>(seq), dh_ = static_cast<Eigen::Index>(dh);
        const T* base = self.parents[0]->data.data();
        RowMatrix<T> dp(s_, s_);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = b * seq * stride + h * dh;
                Strided q(base + off, s_, dh_, Eigen::OuterStride<>(stride));
                Strided k(base + off + d, s_, dh_, Eigen::OuterStride<>(stride));
                Strided v(base + off + 2 * d, s_, dh_, Eigen::OuterStride<>(stride));
                MutStrided gq(g + off, s_, dh_, Eigen::OuterStride<>(stride));
                MutStrided gk(g + off + d, s_, dh_, Eigen::OuterStride<>(stride));
                MutStrided gv(g + off + 2 * d, s_, dh_, Eigen::OuterStride<>(stride));
                Strided dout(self.grad.data() + b * seq * d + h * dh, s_, dh_, Eigen::OuterStride<>(d));
                ConstMatMap<T> p(probs->data() + (b * heads + h) * seq * seq, s_, s_);
                gv.noalias() += p.transpose() * dout;
                dp.noalias() = dout * v.transpose();
                const Eigen::Matrix<T, Eigen::Dynamic, 1> weighted = p.cwiseProduct(dp).rowwise().sum();
                dp = (p.array() * (dp.colwise() - weighted).array()) * scale_factor;
                gq.noalias() += dp * k;
                gk.noalias() += dp.transpose() * q;
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> index) {
    const std::size_t c = table.cols(), r = table.rows();
    if (index.empty()) throw DimensionError("gather_rows: empty index");
    for (auto i : index) {
        if (i >= r) throw IndexError("gather_rows: row " + std::to_string(i) + " outside table of " + std::to_string(r));
    }
    auto node = detail::make_result<T>("gather_rows", {index.size(), c}, {&table});
    const auto& src = table.node()->data;
    for (std::size_t i = 0; i < index.size(); ++i) {
        std::copy_n(src.data() + index[i] * c, c, node->data.data() + i * c);
    }
    std::vector<std::size_t> kept(index.begin(), index.end());
    node->backward_fn = [c, kept = std::move(kept)](Node<T>& self) {
        T* g = parent_grad(self, 0);
        if (!g) return;
        for (std::size_t i = 0; i < kept.size(); ++i) {
            T* dst = g + kept[i] * c;
            const T* src = self.grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    const std::size_t c = parts.front().cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) {
            throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.rows();
    }
    auto node = detail::make_result<T>("concat_rows", {total, c}, parts);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.node()->data.begin(), p.node()->data.end(), node->data.begin() + offset);
        offset += p.numel();
    }
    node->backward_fn = [](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            const std::size_t n = self.parents[i]->data.size();
            if (T* g = parent_grad(self, i)) {
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[offset + j];
            }
            offset += n;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    const std::size_t r = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rows() != r) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
    }
    auto node = detail::make_result<T>("concat_cols", {r, total}, parts);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].node()->data;
        for (std::size_t i = 0; i < r; ++i) {
            std::copy_n(src.data() + i * widths[k], widths[k], node->data.data() + i * total + offset);
        }
        offset += widths[k];
    }
    node->backward_fn = [r, total, widths](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (T* g = parent_grad(self, k)) {
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + offset + j];
                }
            }
            offset += widths[k];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    auto node = detail::make_result<T>("sum", {1}, {&x});
    node->data[0] = std::accumulate(x.node()->data.begin(), x.node()->data.end(), T(0));
    node->backward_fn = [](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->data.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    auto node = detail::make_result<T>("exp", x.shape(), {&x});
    const auto& in = x.node()->data;
    for (std::size_t i = 0; i < in.size(); ++i) node->data[i] = std::exp(in[i]);
    node->backward_fn = [](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.data[i];
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    auto node = detail::make_result<T>("clamp", x.shape(), {&x});
    const auto& in = x.node()->data;
    for (std::size_t i = 0; i < in.size(); ++i) node->data[i] = std::clamp(in[i], lo, hi);
    node->backward_fn = [lo, hi](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            const auto& in = self.parents[0]->data;
            for (std::size_t i = 0; i < in.size(); ++i) {
                if (in[i] > lo && in[i] < hi) g[i] += self.grad[i];
            }
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) throw DimensionError("div_scalar: divisor must have one element, got " + shape_str(s.shape()));
    const T divisor = s.item();
    if (divisor == T(0)) throw NumericError("div_scalar: division by zero");
    auto node = detail::make_result<T>("div_scalar", x.shape(), {&x, &s});
    const auto& in = x.node()->data;
    for (std::size_t i = 0; i < in.size(); ++i) node->data[i] = in[i] / divisor;
    node->backward_fn = [divisor](Node<T>& self) {
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / divisor;
        }
        if (T* g = parent_grad(self, 1)) {
            // d(x/s)/ds = -x/s^2 = -y/s
            T acc = 0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.data[i];
            g[0] -= acc / divisor;
        }
    };
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
    require_same_shape(prediction, target, "mse_loss");
    auto node = detail::make_result<T>("mse_loss", {1}, {&prediction, &target});
    const auto& p = prediction.node()->data;
    const auto& t = target.node()->data;
    T total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
    node->data[0] = total / T(p.size());
    node->backward_fn = [](Node<T>& self) {
        const auto& p = self.parents[0]->data;
        const auto& t = self.parents[1]->data;
        const T factor = T(2) * self.grad[0] / T(p.size());
        if (T* g = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < p.size(); ++i) g[i] += factor * (p[i] - t[i]);
        }
        if (T* g = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < p.size(); ++i) g[i] -= factor * (p[i] - t[i]);
        }
    };
    return Tensor<T>(std::move(node));
}

#define VLMO_INSTANTIATE_OPS(T)                                                                               \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                            \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
    template Tensor<T> scale(const Tensor<T>&, T);                                                            \
    template Tensor<T> add_rows(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> transpose(const Tensor<T>&);                                                           \
    template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                   \
    template Tensor<T> gelu(const Tensor<T>&);                                                                \
    template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int64_t>, std::int64_t);          \
    template Tensor<T> l2_normalize(const Tensor<T>&, T);                                                     \
    template Tensor<T> attention(const Tensor<T>&, std::size_t, std::size_t, std::size_t,                     \
                                 std::span<const std::uint8_t>);                                              \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                           \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                            \
    template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                            \
    template Tensor<T> sum(const Tensor<T>&);                                                                 \
    template Tensor<T> mean(const Tensor<T>&);                                                                \
    template Tensor<T> exp(const Tensor<T>&);                                                                 \
    template Tensor<T> clamp(const Tensor<T>&, T, T);                                                         \
    template Tensor<T> div_scalar(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);

VLMO_INSTANTIATE_OPS(float)
VLMO_INSTANTIATE_OPS(double)

#undef VLMO_INSTANTIATE_OPS

}  // namespace vlmo
