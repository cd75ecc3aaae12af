#include "lpa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace lpa {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
MatMap<T> mat(T* p, std::size_t rows, std::size_t cols) {
    return MatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
ConstMatMap<T> cmat(const T* p, std::size_t rows, std::size_t cols) {
    return ConstMatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_to_string(t.shape()));
    }
}

template <class T>
T* grad_ptr(const Tensor& t) {
    return const_cast<Tensor&>(t).grad_data<T>().data();
}

template <class T>
const T* out_grad(detail::TensorImpl& out) {
    return std::get<std::vector<T>>(out.grad).data();
}

template <class T>
const T* out_values(detail::TensorImpl& out) {
    return std::get<std::vector<T>>(out.values).data();
}

// C[m×n] (+)= A[m×k]·op(B), op(B) = B or Bᵀ; transposes handled through maps.
template <class T>
void gemm(const T* a, bool ta, const T* b, bool tb, T* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
    auto C = mat(c, m, n);
    auto run = [&](const auto& A, const auto& B) {
        if (accumulate) {
            C.noalias() += A * B;
        } else {
            C.noalias() = A * B;
        }
    };
    if (!ta && !tb) {
        run(cmat(a, m, k), cmat(b, k, n));
    } else if (!ta && tb) {
        run(cmat(a, m, k), cmat(b, n, k).transpose());
    } else if (ta && !tb) {
        run(cmat(a, k, m).transpose(), cmat(b, k, n));
    } else {
        run(cmat(a, k, m).transpose(), cmat(b, n, k).transpose());
    }
}

// Shared implementation of matmul/matmul_nt/bmm/bmm_nt.
Tensor batched_product(const Tensor& a, const Tensor& b, bool batched, bool transpose_b,
                       const char* op) {
    const DType dtype = common_dtype({&a, &b}, op);
    const std::size_t base = batched ? 1 : 0;
    require_rank(a, base + 2, op);
    require_rank(b, base + 2, op);
    const std::size_t batch = batched ? a.dim(0) : 1;
    if (batched && b.dim(0) != batch) {
        shape_error(op, a, b);
    }
    const std::size_t m = a.dim(base);
    const std::size_t k = a.dim(base + 1);
    const std::size_t kb = transpose_b ? b.dim(base + 1) : b.dim(base);
    const std::size_t n = transpose_b ? b.dim(base) : b.dim(base + 1);
    if (k != kb) {
        shape_error(op, a, b);
    }
    Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};

    Tensor out = make_result(out_shape, dtype, op, {a, b}, [a, b, batch, m, k, n, transpose_b](
                                                               detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = out_grad<T>(o);
            const T* av = a.data<T>().data();
            const T* bv = b.data<T>().data();
            for (std::size_t i = 0; i < batch; ++i) {
                const T* gi = g + i * m * n;
                const T* ai = av + i * m * k;
                const T* bi = bv + i * k * n;
                if (a.requires_grad()) {
                    // dA = G·op(B)ᵀ
                    T* ga = grad_ptr<T>(a) + i * m * k;
                    gemm(gi, false, bi, !transpose_b, ga, m, n, k, true);
                }
                if (b.requires_grad()) {
                    T* gb = grad_ptr<T>(b) + i * k * n;
                    if (transpose_b) {
                        // B is [n×k]: dB = Gᵀ·A
                        gemm(gi, true, ai, false, gb, n, m, k, true);
                    } else {
                        gemm(ai, true, gi, false, gb, k, m, n, true);
                    }
                }
            }
        });
    });

    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        const T* av = a.data<T>().data();
        const T* bv = b.data<T>().data();
        T* cv = out.data<T>().data();
        for (std::size_t i = 0; i < batch; ++i) {
            gemm(av + i * m * k, false, bv + i * k * n, transpose_b, cv + i * m * n, m, k, n,
                 false);
        }
    });
    FlopCounter::add(static_cast<std::uint64_t>(batch) * m * k * n);
    return out;
}

template <class T>
void accumulate_scaled(const Tensor& target, const T* g, std::size_t n, T factor = T(1)) {
    T* dst = grad_ptr<T>(target);
    for (std::size_t i = 0; i < n; ++i) {
        dst[i] += factor * g[i];
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    return batched_product(a, b, false, false, "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    return batched_product(a, b, false, true, "matmul_nt");
}

Tensor bmm(const Tensor& a, const Tensor& b) { return batched_product(a, b, true, false, "bmm"); }

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    return batched_product(a, b, true, true, "bmm_nt");
}

Tensor add(const Tensor& a, const Tensor& b) {
    const DType dtype = common_dtype({&a, &b}, "add");
    if (a.shape() != b.shape()) {
        shape_error("add", a, b);
    }
    const std::size_t n = a.numel();
    Tensor out = make_result(a.shape(), dtype, "add", {a, b}, [a, b, n](detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = out_grad<T>(o);
            if (a.requires_grad()) {
                accumulate_scaled<T>(a, g, n);
            }
            if (b.requires_grad()) {
                accumulate_scaled<T>(b, g, n);
            }
        });
    });
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < n; ++i) {
            ov[i] = av[i] + bv[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const DType dtype = common_dtype({&a, &b}, "mul");
    if (a.shape() != b.shape()) {
        shape_error("mul", a, b);
    }
    const std::size_t n = a.numel();
    Tensor out = make_result(a.shape(), dtype, "mul", {a, b}, [a, b, n](detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = out_grad<T>(o);
            auto av = a.data<T>();
            auto bv = b.data<T>();
            if (a.requires_grad()) {
                T* ga = grad_ptr<T>(a);
                for (std::size_t i = 0; i < n; ++i) {
                    ga[i] += g[i] * bv[i];
                }
            }
            if (b.requires_grad()) {
                T* gb = grad_ptr<T>(b);
                for (std::size_t i = 0; i < n; ++i) {
                    gb[i] += g[i] * av[i];
                }
            }
        });
    });
    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < n; ++i) {
            ov[i] = av[i] * bv[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& x, double factor) {
    const std::size_t n = x.numel();
    Tensor out =
        make_result(x.shape(), x.dtype(), "scale", {x}, [x, n, factor](detail::TensorImpl& o) {
            visit_dtype(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                accumulate_scaled<T>(x, out_grad<T>(o), n, static_cast<T>(factor));
            });
        });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        const T f = static_cast<T>(factor);
        for (std::size_t i = 0; i < n; ++i) {
            ov[i] = xv[i] * f;
        }
    });
    return out;
}

Tensor relu(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = make_result(x.shape(), x.dtype(), "relu", {x}, [x, n](detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = out_grad<T>(o);
            auto xv = x.data<T>();
            T* gx = grad_ptr<T>(x);
            for (std::size_t i = 0; i < n; ++i) {
                // subgradient 0 at 0
                if (xv[i] > T(0)) {
                    gx[i] += g[i];
                }
            }
        });
    });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < n; ++i) {
            ov[i] = xv[i] > T(0) ? xv[i] : T(0);
        }
    });
    return out;
}

namespace {

template <class T>
T sigmoid(T v) {
    if (v >= T(0)) {
        return T(1) / (T(1) + std::exp(-v));
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
}

}  // namespace

Tensor silu(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = make_result(x.shape(), x.dtype(), "silu", {x}, [x, n](detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T* g = out_grad<T>(o);
            auto xv = x.data<T>();
            T* gx = grad_ptr<T>(x);
            for (std::size_t i = 0; i < n; ++i) {
                const T s = sigmoid(xv[i]);
                gx[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
            }
        });
    });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < n; ++i) {
            ov[i] = xv[i] * sigmoid(xv[i]);
        }
    });
    return out;
}

Tensor masked_softmax(const Tensor& scores, bool causal) {
    if (scores.rank() < 2 || scores.dim(scores.rank() - 1) != scores.dim(scores.rank() - 2)) {
        throw DimensionError("masked_softmax: expected [...xLxL] scores, got " +
                             shape_to_string(scores.shape()));
    }
    const std::size_t len = scores.dim(scores.rank() - 1);
    const std::size_t planes = scores.numel() / (len * len);

    Tensor out = make_result(
        scores.shape(), scores.dtype(), "masked_softmax", {scores},
        [scores, len, planes, causal](detail::TensorImpl& o) {
            visit_dtype(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = out_grad<T>(o);
                const T* y = out_values<T>(o);
                T* gx = grad_ptr<T>(scores);
                for (std::size_t row = 0; row < planes * len; ++row) {
                    const std::size_t i = causal ? row % len : len - 1;
                    const std::size_t off = row * len;
                    T dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        dot += g[off + j] * y[off + j];
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        gx[off + j] += y[off + j] * (g[off + j] - dot);
                    }
                }
            });
        });

    visit_dtype(scores.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = scores.data<T>();
        auto y = out.data<T>();
        for (std::size_t row = 0; row < planes * len; ++row) {
            const std::size_t i = causal ? row % len : len - 1;
            const std::size_t off = row * len;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                mx = std::max(mx, x[off + j]);
            }
            T total = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                const T e = std::exp(x[off + j] - mx);
                y[off + j] = e;
                total += e;
            }
            if (!(total > T(0))) {
                throw ContractError("masked_softmax: row " + std::to_string(i) +
                                    " has no finite unmasked entries");
            }
            for (std::size_t j = 0; j <= i; ++j) {
                y[off + j] /= total;
            }
            for (std::size_t j = i + 1; j < len; ++j) {
                y[off + j] = T(0);
            }
        }
    });
    return out;
}

namespace {

void check_norm_params(const Tensor& x, const Tensor& gain, const Tensor* bias, const char* op) {
    if (x.rank() < 1 || gain.rank() != 1 || gain.dim(0) != x.dim(x.rank() - 1)) {
        shape_error(op, x, gain);
    }
    if (bias && bias->shape() != gain.shape()) {
        shape_error(op, x, *bias);
    }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const DType dtype = common_dtype({&x, &gain, &bias}, "layer_norm");
    check_norm_params(x, gain, &bias, "layer_norm");
    if (!(eps > 0)) {
        throw ContractError("layer_norm: eps must be positive");
    }
    const std::size_t d = gain.dim(0);
    const std::size_t rows = x.numel() / d;
    // Cached per-row 1/std for backward.
    auto rstd = std::make_shared<std::vector<double>>(rows);

    Tensor out = make_result(
        x.shape(), dtype, "layer_norm", {x, gain, bias},
        [x, gain, bias, d, rows, rstd](detail::TensorImpl& o) {
            visit_dtype(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = out_grad<T>(o);
                auto xv = x.data<T>();
                auto gv = gain.data<T>();
                std::vector<T> xhat(d);
                std::vector<T> dxhat(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = xv.data() + r * d;
                    const T* gr = g + r * d;
                    T mu = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        mu += xr[j];
                    }
                    mu /= static_cast<T>(d);
                    const T rs = static_cast<T>((*rstd)[r]);
                    T mean_dxhat = 0;
                    T mean_dxhat_xhat = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= static_cast<T>(d);
                    mean_dxhat_xhat /= static_cast<T>(d);
                    if (x.requires_grad()) {
                        T* gx = grad_ptr<T>(x) + r * d;
                        for (std::size_t j = 0; j < d; ++j) {
                            gx[j] += rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    if (gain.requires_grad()) {
                        T* gg = grad_ptr<T>(gain);
                        for (std::size_t j = 0; j < d; ++j) {
                            gg[j] += gr[j] * xhat[j];
                        }
                    }
                    if (bias.requires_grad()) {
                        T* gb = grad_ptr<T>(bias);
                        for (std::size_t j = 0; j < d; ++j) {
                            gb[j] += gr[j];
                        }
                    }
                }
            });
        });

    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto gv = gain.data<T>();
        auto bv = bias.data<T>();
        auto ov = out.data<T>();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * d;
            T mu = 0;
            for (std::size_t j = 0; j < d; ++j) {
                mu += xr[j];
            }
            mu /= static_cast<T>(d);
            T var = 0;
            for (std::size_t j = 0; j < d; ++j) {
                var += (xr[j] - mu) * (xr[j] - mu);
            }
            var /= static_cast<T>(d);
            const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*rstd)[r] = static_cast<double>(rs);
            for (std::size_t j = 0; j < d; ++j) {
                ov[r * d + j] = (xr[j] - mu) * rs * gv[j] + bv[j];
            }
        }
    });
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    const DType dtype = common_dtype({&x, &gain}, "rms_norm");
    check_norm_params(x, gain, nullptr, "rms_norm");
    if (!(eps > 0)) {
        throw ContractError("rms_norm: eps must be positive");
    }
    const std::size_t d = gain.dim(0);
    const std::size_t rows = x.numel() / d;
    auto inv_rms = std::make_shared<std::vector<double>>(rows);

    Tensor out = make_result(
        x.shape(), dtype, "rms_norm", {x, gain}, [x, gain, d, rows, inv_rms](detail::TensorImpl& o) {
            visit_dtype(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* g = out_grad<T>(o);
                auto xv = x.data<T>();
                auto gv = gain.data<T>();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* xr = xv.data() + r * d;
                    const T* gr = g + r * d;
                    const T ir = static_cast<T>((*inv_rms)[r]);
                    if (x.requires_grad()) {
                        T mean_dot = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                            mean_dot += gr[j] * gv[j] * xr[j];
                        }
                        mean_dot /= static_cast<T>(d);
                        T* gx = grad_ptr<T>(x) + r * d;
                        for (std::size_t j = 0; j < d; ++j) {
                            gx[j] += ir * (gr[j] * gv[j] - xr[j] * ir * ir * mean_dot);
                        }
                    }
                    if (gain.requires_grad()) {
                        T* gg = grad_ptr<T>(gain);
                        for (std::size_t j = 0; j < d; ++j) {
                            gg[j] += gr[j] * xr[j] * ir;
                        }
                    }
                }
            });
        });

    visit_dtype(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto gv = gain.data<T>();
        auto ov = out.data<T>();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * d;
            T ms = 0;
            for (std::size_t j = 0; j < d; ++j) {
                ms += xr[j] * xr[j];
            }
            ms /= static_cast<T>(d);
            const T ir = T(1) / std::sqrt(ms + static_cast<T>(eps));
            (*inv_rms)[r] = static_cast<double>(ir);
            for (std::size_t j = 0; j < d; ++j) {
                ov[r * d + j] = xr[j] * ir * gv[j];
            }
        }
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t rows = logits.dim(0);
    const std::size_t vocab = logits.dim(1);
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for logits " + shape_to_string(logits.shape()));
    }
    for (auto t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
    }
    auto tgt = std::make_shared<std::vector<TokenId>>(targets.begin(), targets.end());
    // Row log-sum-exp, cached for backward.
    auto lse = std::make_shared<std::vector<double>>(rows);

    Tensor out = make_result(
        {1}, logits.dtype(), "cross_entropy", {logits},
        [logits, tgt, lse, rows, vocab](detail::TensorImpl& o) {
            visit_dtype(o.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T g = out_grad<T>(o)[0] / static_cast<T>(rows);
                auto x = logits.data<T>();
                T* gx = grad_ptr<T>(logits);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T l = static_cast<T>((*lse)[r]);
                    for (std::size_t c = 0; c < vocab; ++c) {
                        gx[r * vocab + c] += g * std::exp(x[r * vocab + c] - l);
                    }
                    gx[r * vocab + static_cast<std::size_t>((*tgt)[r])] -= g;
                }
            });
        });

    visit_dtype(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto x = logits.data<T>();
        // Accumulate the loss in double regardless of storage precision.
        double total = 0;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = x.data() + r * vocab;
            T mx = xr[0];
            for (std::size_t c = 1; c < vocab; ++c) {
                mx = std::max(mx, xr[c]);
            }
            T s = 0;
            for (std::size_t c = 0; c < vocab; ++c) {
                s += std::exp(xr[c] - mx);
            }
            const T l = mx + std::log(s);
            (*lse)[r] = static_cast<double>(l);
            total += static_cast<double>(l - xr[static_cast<std::size_t>((*tgt)[r])]);
        }
        out.data<T>()[0] = static_cast<T>(total / static_cast<double>(rows));
    });
    return out;
}

Tensor embedding(const Tensor& weight, std::span<const TokenId> ids) {
    require_rank(weight, 2, "embedding");
    const std::size_t vocab = weight.dim(0);
    const std::size_t d = weight.dim(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw IndexError("embedding: token " + std::to_string(id) +
                             " outside vocabulary of " + std::to_string(vocab));
        }
    }
    if (ids.empty()) {
        throw DimensionError("embedding: empty id list");
    }
    auto idx = std::make_shared<std::vector<TokenId>>(ids.begin(), ids.end());
    Tensor out = make_result({ids.size(), d}, weight.dtype(), "embedding", {weight},
                             [weight, idx, d](detail::TensorImpl& o) {
                                 visit_dtype(o.dtype, [&](auto tag) {
                                     using T = decltype(tag);
                                     const T* g = out_grad<T>(o);
                                     T* gw = grad_ptr<T>(weight);
                                     for (std::size_t i = 0; i < idx->size(); ++i) {
                                         T* row = gw + static_cast<std::size_t>((*idx)[i]) * d;
                                         for (std::size_t j = 0; j < d; ++j) {
                                             row[j] += g[i * d + j];
                                         }
                                     }
                                 });
                             });
    visit_dtype(weight.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto w = weight.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy_n(w.data() + static_cast<std::size_t>(ids[i]) * d, d, ov.data() + i * d);
        }
    });
    return out;
}

namespace {

// Permutes between [B·T × H·dh] (merged) and [B·H × T × dh] (split).
template <class T>
void permute_heads(const T* src, T* dst, std::size_t batch, std::size_t seq, std::size_t heads,
                   std::size_t head_dim, bool to_split, bool accumulate) {
    const std::size_t width = heads * head_dim;
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < seq; ++t) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t merged = (b * seq + t) * width + h * head_dim;
                const std::size_t split = ((b * heads + h) * seq + t) * head_dim;
                const T* s = src + (to_split ? merged : split);
                T* d = dst + (to_split ? split : merged);
                for (std::size_t j = 0; j < head_dim; ++j) {
                    d[j] = accumulate ? d[j] + s[j] : s[j];
                }
            }
        }
    }
}

}  // namespace

Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    require_rank(x, 2, "split_heads");
    if (heads == 0 || x.dim(0) != batch * seq || x.dim(1) % heads != 0) {
        throw DimensionError("split_heads: shape " + shape_to_string(x.shape()) +
                             " does not split into batch " + std::to_string(batch) + ", seq " +
                             std::to_string(seq) + ", heads " + std::to_string(heads));
    }
    const std::size_t head_dim = x.dim(1) / heads;
    Tensor out = make_result({batch * heads, seq, head_dim}, x.dtype(), "split_heads", {x},
                             [x, batch, seq, heads, head_dim](detail::TensorImpl& o) {
                                 visit_dtype(o.dtype, [&](auto tag) {
                                     using T = decltype(tag);
                                     permute_heads(out_grad<T>(o), grad_ptr<T>(x), batch, seq,
                                                   heads, head_dim, false, true);
                                 });
                             });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_heads(x.data<T>().data(), out.data<T>().data(), batch, seq, heads, head_dim, true,
                      false);
    });
    return out;
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    require_rank(x, 3, "merge_heads");
    if (heads == 0 || x.dim(0) != batch * heads) {
        throw DimensionError("merge_heads: shape " + shape_to_string(x.shape()) +
                             " does not merge with batch " + std::to_string(batch) + ", heads " +
                             std::to_string(heads));
    }
    const std::size_t seq = x.dim(1);
    const std::size_t head_dim = x.dim(2);
    Tensor out = make_result({batch * seq, heads * head_dim}, x.dtype(), "merge_heads", {x},
                             [x, batch, seq, heads, head_dim](detail::TensorImpl& o) {
                                 visit_dtype(o.dtype, [&](auto tag) {
                                     using T = decltype(tag);
                                     permute_heads(out_grad<T>(o), grad_ptr<T>(x), batch, seq,
                                                   heads, head_dim, true, true);
                                 });
                             });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_heads(x.data<T>().data(), out.data<T>().data(), batch, seq, heads, head_dim,
                      false, false);
    });
    return out;
}

namespace {

template <class T>
void rotate_pairs(const T* src, T* dst, std::size_t planes, std::size_t seq, std::size_t head_dim,
                  double base, double direction, bool accumulate) {
    const std::size_t pairs = head_dim / 2;
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t p = 0; p < pairs; ++p) {
            const double freq =
                std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
            const double angle = direction * static_cast<double>(t) * freq;
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            for (std::size_t n = 0; n < planes; ++n) {
                const std::size_t off = (n * seq + t) * head_dim + 2 * p;
                const T x0 = src[off];
                const T x1 = src[off + 1];
                const T y0 = x0 * c - x1 * s;
                const T y1 = x0 * s + x1 * c;
                if (accumulate) {
                    dst[off] += y0;
                    dst[off + 1] += y1;
                } else {
                    dst[off] = y0;
                    dst[off + 1] = y1;
                }
            }
        }
    }
}

}  // namespace

Tensor rotary(const Tensor& x, double base) {
    require_rank(x, 3, "rotary");
    const std::size_t planes = x.dim(0);
    const std::size_t seq = x.dim(1);
    const std::size_t head_dim = x.dim(2);
    if (head_dim % 2 != 0) {
        throw DimensionError("rotary: head dim must be even, got " + std::to_string(head_dim));
    }
    Tensor out = make_result(x.shape(), x.dtype(), "rotary", {x},
                             [x, planes, seq, head_dim, base](detail::TensorImpl& o) {
                                 visit_dtype(o.dtype, [&](auto tag) {
                                     using T = decltype(tag);
                                     // Inverse rotation of the incoming grad.
                                     rotate_pairs(out_grad<T>(o), grad_ptr<T>(x), planes, seq,
                                                  head_dim, base, -1.0, true);
                                 });
                             });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        rotate_pairs(x.data<T>().data(), out.data<T>().data(), planes, seq, head_dim, base, 1.0,
                     false);
    });
    return out;
}

Tensor sum(const Tensor& x) {
    const std::size_t n = x.numel();
    Tensor out = make_result({1}, x.dtype(), "sum", {x}, [x, n](detail::TensorImpl& o) {
        visit_dtype(o.dtype, [&](auto tag) {
            using T = decltype(tag);
            const T g = out_grad<T>(o)[0];
            T* gx = grad_ptr<T>(x);
            for (std::size_t i = 0; i < n; ++i) {
                gx[i] += g;
            }
        });
    });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        double total = 0;
        for (T v : x.data<T>()) {
            total += static_cast<double>(v);
        }
        out.data<T>()[0] = static_cast<T>(total);
    });
    return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                             shape_to_string(shape));
    }
    const std::size_t n = x.numel();
    Tensor out = make_result(std::move(shape), x.dtype(), "reshape", {x},
                             [x, n](detail::TensorImpl& o) {
                                 visit_dtype(o.dtype, [&](auto tag) {
                                     using T = decltype(tag);
                                     accumulate_scaled<T>(x, out_grad<T>(o), n);
                                 });
                             });
    visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto src = x.data<T>();
        std::copy(src.begin(), src.end(), out.data<T>().begin());
    });
    return out;
}

}  // namespace lpa
