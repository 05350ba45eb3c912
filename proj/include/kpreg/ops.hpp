// Differentiable building blocks for the feature networks.
//
// Activations are laid out N x C x spatial..., row-major, with one or two
// (2D) or three (3D) spatial axes. Convolutions use zero "same" padding
// (k / 2 per side) so output extents are ceil(input / stride).
#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include "kpreg/tensor.hpp"

namespace kpreg {

enum class Dimensionality { two_d = 2, three_d = 3 };

inline std::size_t spatial_rank(Dimensionality d) { return static_cast<std::size_t>(d); }

namespace detail {

// Spatial extents padded to three axes (depth 1 for 2D).
struct Extents3 {
    std::array<std::size_t, 3> e{1, 1, 1};
    std::size_t numel() const { return e[0] * e[1] * e[2]; }
};

inline Extents3 spatial_extents(const Shape &dims, Dimensionality d) {
    Extents3 out;
    const std::size_t r = spatial_rank(d);
    for (std::size_t a = 0; a < r; ++a) {
        out.e[3 - r + a] = dims[2 + a];
    }
    return out;
}

inline Shape with_spatial(std::size_t n, std::size_t c, const Extents3 &sp, Dimensionality d) {
    Shape s{n, c};
    const std::size_t r = spatial_rank(d);
    for (std::size_t a = 0; a < r; ++a) {
        s.push_back(sp.e[3 - r + a]);
    }
    return s;
}

struct ConvGeometry {
    std::size_t batch = 0, c_in = 0, c_out = 0;
    Extents3 in, out, kernel, stride, pad;

    std::size_t patch() const { return c_in * kernel.numel(); }
};

inline ConvGeometry conv_geometry(const Shape &x, const Shape &w, std::size_t stride, Dimensionality d) {
    const std::size_t r = spatial_rank(d);
    static const char *axis_names[] = {"batch", "channel", "spatial-0", "spatial-1", "spatial-2"};
    if (x.size() != r + 2) {
        throw ShapeError("conv input must have " + std::to_string(r + 2) + " axes, got " + shape_str(x));
    }
    if (w.size() != r + 2) {
        throw ShapeError("conv weights must have " + std::to_string(r + 2) + " axes, got " + shape_str(w));
    }
    if (stride != 1 && stride != 2) {
        throw std::invalid_argument("conv stride must be 1 or 2, got " + std::to_string(stride));
    }
    if (w[1] != x[1]) {
        throw ShapeError(std::string("conv mismatch on axis 1 (") + axis_names[1] + "): weights expect " +
                         std::to_string(w[1]) + " input channels, input has " + std::to_string(x[1]));
    }
    for (std::size_t a = 0; a < r; ++a) {
        if (w[2 + a] % 2 == 0) {
            throw ShapeError(std::string("conv kernel extent on axis ") + std::to_string(2 + a) + " (" +
                             axis_names[2 + a] + ") must be odd, got " + std::to_string(w[2 + a]));
        }
    }
    ConvGeometry g;
    g.batch = x[0];
    g.c_in = x[1];
    g.c_out = w[0];
    g.in = spatial_extents(x, d);
    g.kernel = spatial_extents(w, d);
    for (std::size_t a = 0; a < 3; ++a) {
        const bool active = a >= 3 - r;
        g.stride.e[a] = active ? stride : 1;
        g.pad.e[a] = g.kernel.e[a] / 2;
        g.out.e[a] = (g.in.e[a] + g.stride.e[a] - 1) / g.stride.e[a];
    }
    return g;
}

// cols is (c_in * kernel) x (out spatial), row-major.
template <typename T> void im2col(const T *x, const ConvGeometry &g, T *cols) {
    const std::size_t P = g.out.numel();
    const auto [kd, kh, kw] = g.kernel.e;
    const auto [id, ih, iw] = g.in.e;
    const auto [od, oh, ow] = g.out.e;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.c_in; ++c) {
        const T *xc = x + c * g.in.numel();
        for (std::size_t kz = 0; kz < kd; ++kz) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
                    T *dst = cols + row * P;
                    for (std::size_t oz = 0; oz < od; ++oz) {
                        const long iz = static_cast<long>(oz * g.stride.e[0] + kz) - static_cast<long>(g.pad.e[0]);
                        for (std::size_t oy = 0; oy < oh; ++oy, dst += ow) {
                            const long iy =
                                static_cast<long>(oy * g.stride.e[1] + ky) - static_cast<long>(g.pad.e[1]);
                            if (iz < 0 || iz >= static_cast<long>(id) || iy < 0 || iy >= static_cast<long>(ih)) {
                                std::fill(dst, dst + ow, T(0));
                                continue;
                            }
                            const T *src = xc + (static_cast<std::size_t>(iz) * ih + static_cast<std::size_t>(iy)) * iw;
                            const std::size_t sx = g.stride.e[2];
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long ix = static_cast<long>(ox * sx + kx) - static_cast<long>(g.pad.e[2]);
                                dst[ox] = (ix < 0 || ix >= static_cast<long>(iw)) ? T(0) : src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T> void col2im_add(const T *cols, const ConvGeometry &g, T *dx) {
    const std::size_t P = g.out.numel();
    const auto [kd, kh, kw] = g.kernel.e;
    const auto [id, ih, iw] = g.in.e;
    const auto [od, oh, ow] = g.out.e;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.c_in; ++c) {
        T *xc = dx + c * g.in.numel();
        for (std::size_t kz = 0; kz < kd; ++kz) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx, ++row) {
                    const T *src = cols + row * P;
                    for (std::size_t oz = 0; oz < od; ++oz) {
                        const long iz = static_cast<long>(oz * g.stride.e[0] + kz) - static_cast<long>(g.pad.e[0]);
                        for (std::size_t oy = 0; oy < oh; ++oy, src += ow) {
                            const long iy =
                                static_cast<long>(oy * g.stride.e[1] + ky) - static_cast<long>(g.pad.e[1]);
                            if (iz < 0 || iz >= static_cast<long>(id) || iy < 0 || iy >= static_cast<long>(ih)) {
                                continue;
                            }
                            T *dst = xc + (static_cast<std::size_t>(iz) * ih + static_cast<std::size_t>(iy)) * iw;
                            const std::size_t sx = g.stride.e[2];
                            for (std::size_t ox = 0; ox < ow; ++ox) {
                                const long ix = static_cast<long>(ox * sx + kx) - static_cast<long>(g.pad.e[2]);
                                if (ix >= 0 && ix < static_cast<long>(iw)) {
                                    dst[ix] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T> using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T> using MapRowMat = Eigen::Map<RowMat<T>>;
template <typename T> using CMapRowMat = Eigen::Map<const RowMat<T>>;

} // namespace detail

template <typename T>
BasicTensor<T> conv_forward(const BasicTensor<T> &input, const BasicTensor<T> &weights, std::size_t stride,
                            Dimensionality d) {
    const auto g = detail::conv_geometry(input.shape(), weights.shape(), stride, d);
    BasicTensor<T> out(detail::with_spatial(g.batch, g.c_out, g.out, d));
    const std::size_t K = g.patch(), P = g.out.numel();
    std::vector<T> cols(K * P);
    detail::CMapRowMat<T> W(weights.data(), static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < g.batch; ++n) {
        detail::im2col(input.data() + n * g.c_in * g.in.numel(), g, cols.data());
        detail::CMapRowMat<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        detail::MapRowMat<T> Y(out.data() + n * g.c_out * P, static_cast<Eigen::Index>(g.c_out),
                               static_cast<Eigen::Index>(P));
        Y.noalias() = W * C;
    }
    return out;
}

template <typename T> Var<T> conv(const Var<T> &x, const Var<T> &w, std::size_t stride, Dimensionality d) {
    auto out = conv_forward(x.value(), w.value(), stride, d);
    auto xn = x.node();
    auto wn = w.node();
    return Var<T>::make_result(std::move(out), {x, w}, [xn, wn, stride, d](detail::Node<T> &self) {
        const auto g = detail::conv_geometry(xn->value.shape(), wn->value.shape(), stride, d);
        const std::size_t K = g.patch(), P = g.out.numel();
        std::vector<T> cols(K * P);
        detail::CMapRowMat<T> W(wn->value.data(), static_cast<Eigen::Index>(g.c_out), static_cast<Eigen::Index>(K));
        for (std::size_t n = 0; n < g.batch; ++n) {
            detail::CMapRowMat<T> dY(self.grad.data() + n * g.c_out * P, static_cast<Eigen::Index>(g.c_out),
                                     static_cast<Eigen::Index>(P));
            if (wn->requires_grad) {
                detail::im2col(xn->value.data() + n * g.c_in * g.in.numel(), g, cols.data());
                detail::CMapRowMat<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                detail::MapRowMat<T> dW(wn->ensure_grad().data(), static_cast<Eigen::Index>(g.c_out),
                                        static_cast<Eigen::Index>(K));
                dW.noalias() += dY * C.transpose();
            }
            if (xn->requires_grad) {
                detail::MapRowMat<T> dC(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                dC.noalias() = W.transpose() * dY;
                detail::col2im_add(cols.data(), g, xn->ensure_grad().data() + n * g.c_in * g.in.numel());
            }
        }
    });
}

namespace detail {

// Per-(instance, channel) statistics over all spatial positions.
template <typename T> struct NormStats {
    std::size_t groups = 0, count = 0;
    std::vector<T> inv_std;
};

template <typename T>
BasicTensor<T> instance_norm_impl(const BasicTensor<T> &x, T epsilon, NormStats<T> &stats) {
    if (x.ndim() < 3) {
        throw ShapeError("instance norm needs N x C x spatial input, got " + shape_str(x.shape()));
    }
    stats.groups = x.dim(0) * x.dim(1);
    stats.count = x.size() / stats.groups;
    stats.inv_std.assign(stats.groups, T(0));
    BasicTensor<T> y(x.shape());
    for (std::size_t gi = 0; gi < stats.groups; ++gi) {
        const T *src = x.data() + gi * stats.count;
        T *dst = y.data() + gi * stats.count;
        double mean = 0.0;
        for (std::size_t k = 0; k < stats.count; ++k) {
            mean += static_cast<double>(src[k]);
        }
        mean /= static_cast<double>(stats.count);
        double var = 0.0;
        for (std::size_t k = 0; k < stats.count; ++k) {
            const double c = static_cast<double>(src[k]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(stats.count);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
        stats.inv_std[gi] = static_cast<T>(inv);
        for (std::size_t k = 0; k < stats.count; ++k) {
            dst[k] = static_cast<T>((static_cast<double>(src[k]) - mean) * inv);
        }
    }
    return y;
}

} // namespace detail

template <typename T> BasicTensor<T> instance_norm_forward(const BasicTensor<T> &x, T epsilon) {
    detail::NormStats<T> stats;
    return detail::instance_norm_impl(x, epsilon, stats);
}

template <typename T> Var<T> instance_norm(const Var<T> &x, T epsilon) {
    auto stats = std::make_shared<detail::NormStats<T>>();
    auto y = detail::instance_norm_impl(x.value(), epsilon, *stats);
    auto xn = x.node();
    auto out = Var<T>::make_result(std::move(y), {x}, nullptr);
    if (out.requires_grad()) {
        // The node's own value is xhat, so the closure needs only the input and stats.
        out.node()->backward_fn = [xn, stats](detail::Node<T> &self) {
            auto &dx = xn->ensure_grad();
            const std::size_t n = stats->count;
            for (std::size_t gi = 0; gi < stats->groups; ++gi) {
                const T *dy = self.grad.data() + gi * n;
                const T *xh = self.value.data() + gi * n;
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    sum_dy += static_cast<double>(dy[k]);
                    sum_dy_xh += static_cast<double>(dy[k]) * static_cast<double>(xh[k]);
                }
                const double inv = static_cast<double>(stats->inv_std[gi]);
                const double nn = static_cast<double>(n);
                T *g = dx.data() + gi * n;
                for (std::size_t k = 0; k < n; ++k) {
                    g[k] += static_cast<T>(inv / nn *
                                           (nn * static_cast<double>(dy[k]) - sum_dy -
                                            static_cast<double>(xh[k]) * sum_dy_xh));
                }
            }
        };
    }
    return out;
}

template <typename T> BasicTensor<T> leaky_relu_forward(const BasicTensor<T> &x, T slope) {
    BasicTensor<T> y = x;
    for (auto &v : y.values()) {
        v = v >= T(0) ? v : slope * v;
    }
    return y;
}

template <typename T> Var<T> leaky_relu(const Var<T> &x, T slope) {
    auto xn = x.node();
    return Var<T>::make_result(leaky_relu_forward(x.value(), slope), {x}, [xn, slope](detail::Node<T> &self) {
        auto &dx = xn->ensure_grad();
        const auto &xv = xn->value;
        for (std::size_t k = 0; k < xv.size(); ++k) {
            dx[k] += xv[k] >= T(0) ? self.grad[k] : slope * self.grad[k];
        }
    });
}

template <typename T> Var<T> add(const Var<T> &a, const Var<T> &b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    BasicTensor<T> y = a.value();
    for (std::size_t k = 0; k < y.size(); ++k) {
        y[k] += b.value()[k];
    }
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::make_result(std::move(y), {a, b}, [an, bn](detail::Node<T> &self) {
        for (auto *n : {an.get(), bn.get()}) {
            if (n->requires_grad) {
                auto &g = n->ensure_grad();
                for (std::size_t k = 0; k < g.size(); ++k) {
                    g[k] += self.grad[k];
                }
            }
        }
    });
}

// Sum of all entries as a 1-element tensor.
template <typename T> Var<T> sum(const Var<T> &x) {
    double s = 0.0;
    for (T v : x.value().values()) {
        s += static_cast<double>(v);
    }
    auto xn = x.node();
    return Var<T>::make_result(BasicTensor<T>({1}, {static_cast<T>(s)}), {x}, [xn](detail::Node<T> &self) {
        auto &g = xn->ensure_grad();
        for (auto &v : g.values()) {
            v += self.grad[0];
        }
    });
}

// Sum of elementwise products with a constant tensor; handy for scalarizing in tests.
template <typename T> Var<T> dot_const(const Var<T> &x, const BasicTensor<T> &c) {
    if (x.shape() != c.shape()) {
        throw ShapeError("dot_const: shapes differ " + shape_str(x.shape()) + " vs " + shape_str(c.shape()));
    }
    double s = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
        s += static_cast<double>(x.value()[k]) * static_cast<double>(c[k]);
    }
    auto xn = x.node();
    return Var<T>::make_result(BasicTensor<T>({1}, {static_cast<T>(s)}), {x}, [xn, c](detail::Node<T> &self) {
        auto &g = xn->ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) {
            g[k] += self.grad[0] * c[k];
        }
    });
}

// Concatenate along the channel axis.
template <typename T> Var<T> concat_channels(const Var<T> &a, const Var<T> &b) {
    const auto &sa = a.shape();
    const auto &sb = b.shape();
    if (sa.size() != sb.size() || sa[0] != sb[0] || !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2)) {
        throw ShapeError("concat: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    Shape so = sa;
    so[1] = sa[1] + sb[1];
    const std::size_t batch = sa[0];
    const std::size_t na = a.value().size() / batch, nb = b.value().size() / batch;
    BasicTensor<T> y(so);
    for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(a.value().data() + n * na, na, y.data() + n * (na + nb));
        std::copy_n(b.value().data() + n * nb, nb, y.data() + n * (na + nb) + na);
    }
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::make_result(std::move(y), {a, b}, [an, bn, batch, na, nb](detail::Node<T> &self) {
        for (std::size_t n = 0; n < batch; ++n) {
            const T *g = self.grad.data() + n * (na + nb);
            if (an->requires_grad) {
                T *ga = an->ensure_grad().data() + n * na;
                for (std::size_t k = 0; k < na; ++k) {
                    ga[k] += g[k];
                }
            }
            if (bn->requires_grad) {
                T *gb = bn->ensure_grad().data() + n * nb;
                for (std::size_t k = 0; k < nb; ++k) {
                    gb[k] += g[na + k];
                }
            }
        }
    });
}

// 2x average pooling over the spatial axes. Extents must be even.
template <typename T> Var<T> avg_pool2(const Var<T> &x, Dimensionality d) {
    const auto &s = x.shape();
    const auto in = detail::spatial_extents(s, d);
    const std::size_t r = spatial_rank(d);
    detail::Extents3 out = in;
    for (std::size_t a = 3 - r; a < 3; ++a) {
        if (in.e[a] % 2 != 0) {
            throw ShapeError("avg_pool2: odd extent on axis " + std::to_string(2 + a - (3 - r)));
        }
        out.e[a] = in.e[a] / 2;
    }
    const std::size_t fz = 3 - r == 0 ? 2 : 1;
    const std::size_t groups = s[0] * s[1];
    const T scale = T(1) / static_cast<T>(fz * 4);
    BasicTensor<T> y(detail::with_spatial(s[0], s[1], out, d));
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const T *src = x.value().data() + gi * in.numel();
        T *dst = y.data() + gi * out.numel();
        for (std::size_t z = 0; z < out.e[0]; ++z) {
            for (std::size_t yy = 0; yy < out.e[1]; ++yy) {
                for (std::size_t xx = 0; xx < out.e[2]; ++xx) {
                    T acc = 0;
                    for (std::size_t dz = 0; dz < fz; ++dz) {
                        for (std::size_t dy = 0; dy < 2; ++dy) {
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                acc += src[((z * fz + dz) * in.e[1] + yy * 2 + dy) * in.e[2] + xx * 2 + dx];
                            }
                        }
                    }
                    dst[(z * out.e[1] + yy) * out.e[2] + xx] = acc * scale;
                }
            }
        }
    }
    auto xn = x.node();
    return Var<T>::make_result(std::move(y), {x}, [xn, in, out, fz, groups, scale](detail::Node<T> &self) {
        auto &g = xn->ensure_grad();
        for (std::size_t gi = 0; gi < groups; ++gi) {
            T *dst = g.data() + gi * in.numel();
            const T *src = self.grad.data() + gi * out.numel();
            for (std::size_t z = 0; z < out.e[0]; ++z) {
                for (std::size_t yy = 0; yy < out.e[1]; ++yy) {
                    for (std::size_t xx = 0; xx < out.e[2]; ++xx) {
                        const T v = src[(z * out.e[1] + yy) * out.e[2] + xx] * scale;
                        for (std::size_t dz = 0; dz < fz; ++dz) {
                            for (std::size_t dy = 0; dy < 2; ++dy) {
                                for (std::size_t dx = 0; dx < 2; ++dx) {
                                    dst[((z * fz + dz) * in.e[1] + yy * 2 + dy) * in.e[2] + xx * 2 + dx] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

// Keeps the leading `keep` extents of each spatial axis (drops trailing cells).
template <typename T> Var<T> crop_spatial(const Var<T> &x, const std::vector<std::size_t> &keep, Dimensionality d) {
    const auto &s = x.shape();
    const auto in = detail::spatial_extents(s, d);
    const std::size_t r = spatial_rank(d);
    if (keep.size() != r) {
        throw ShapeError("crop_spatial: expected " + std::to_string(r) + " extents");
    }
    detail::Extents3 out = in;
    for (std::size_t a = 0; a < r; ++a) {
        if (keep[a] == 0 || keep[a] > in.e[3 - r + a]) {
            throw ShapeError("crop_spatial: extent " + std::to_string(keep[a]) + " invalid on axis " +
                             std::to_string(2 + a));
        }
        out.e[3 - r + a] = keep[a];
    }
    if (out.e == in.e) {
        return x;
    }
    const std::size_t groups = s[0] * s[1];
    BasicTensor<T> y(detail::with_spatial(s[0], s[1], out, d));
    auto for_each = [in, out, groups](auto &&fn) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            for (std::size_t z = 0; z < out.e[0]; ++z) {
                for (std::size_t yy = 0; yy < out.e[1]; ++yy) {
                    for (std::size_t xx = 0; xx < out.e[2]; ++xx) {
                        fn(gi * in.numel() + (z * in.e[1] + yy) * in.e[2] + xx,
                           gi * out.numel() + (z * out.e[1] + yy) * out.e[2] + xx);
                    }
                }
            }
        }
    };
    for_each([&](std::size_t si, std::size_t di) { y[di] = x.value()[si]; });
    auto xn = x.node();
    return Var<T>::make_result(std::move(y), {x}, [xn, for_each](detail::Node<T> &self) {
        auto &g = xn->ensure_grad();
        for_each([&](std::size_t si, std::size_t di) { g[si] += self.grad[di]; });
    });
}

} // namespace kpreg
