#include "ehrgan/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "ehrgan/error.hpp"

namespace ehrgan {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using RowVec = Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>;
using CRowVec = Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

struct ConvDims {
    std::size_t batch, length, in_ch, width, maps, stride, out_len;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride) {
    require(x.rank() == 3, "conv1d input must be [batch,time,channels], got " + shape_string(x.shape()));
    require(k.rank() == 3, "conv1d kernel must be [width,channels,maps], got " + shape_string(k.shape()));
    require(stride >= 1, "conv1d stride must be >= 1");
    ConvDims d{x.dim(0), x.dim(1), x.dim(2), k.dim(0), k.dim(2), stride, 0};
    require(k.dim(1) == d.in_ch, "conv1d kernel depth " + std::to_string(k.dim(1)) +
                                     " does not match input channels " + std::to_string(d.in_ch));
    require(d.length >= d.width, "conv1d needs at least " + std::to_string(d.width) + " time steps, got " +
                                     std::to_string(d.length));
    require(b.size() == d.maps, "conv1d bias length " + std::to_string(b.size()) + " does not match " +
                                    std::to_string(d.maps) + " maps");
    d.out_len = (d.length - d.width) / stride + 1;
    return d;
}

struct DeconvDims {
    std::size_t batch, in_len, in_ch, width, out_ch, stride, out_len;
};

DeconvDims deconv_dims(const Tensor& y, const Tensor& k, const Tensor& b, std::size_t stride) {
    require(y.rank() == 3, "deconv1d input must be [batch,time,channels], got " + shape_string(y.shape()));
    require(k.rank() == 3, "deconv1d kernel must be [width,out_channels,in_channels], got " + shape_string(k.shape()));
    require(stride >= 1, "deconv1d stride must be >= 1");
    DeconvDims d{y.dim(0), y.dim(1), y.dim(2), k.dim(0), k.dim(1), stride, 0};
    require(k.dim(2) == d.in_ch, "deconv1d kernel depth " + std::to_string(k.dim(2)) +
                                     " does not match input channels " + std::to_string(d.in_ch));
    require(b.size() == d.out_ch, "deconv1d bias length " + std::to_string(b.size()) + " does not match " +
                                      std::to_string(d.out_ch) + " output channels");
    d.out_len = (d.in_len - 1) * stride + d.width;
    return d;
}

// Patch view of one sequence: row t is the flattened window starting at t*stride.
CStridedMap patches(const Real* seq, std::size_t rows, std::size_t width, std::size_t ch, std::size_t stride) {
    return CStridedMap(seq, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width * ch),
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(stride * ch)));
}

// out[t*stride + j, :] += in[t, :] * kernel_j^T for every tap j; kernel_j is [ch, maps].
void scatter_taps(Real* out, const Real* in, const Real* kernel, std::size_t rows, std::size_t width,
                  std::size_t ch, std::size_t maps, std::size_t stride) {
    CMapMat src(in, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(maps));
    for (std::size_t j = 0; j < width; ++j) {
        CMapMat kj(kernel + j * ch * maps, static_cast<Eigen::Index>(ch), static_cast<Eigen::Index>(maps));
        StridedMap dst(out + j * ch, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(ch),
                       Eigen::OuterStride<>(static_cast<Eigen::Index>(stride * ch)));
        dst.noalias() += src * kj.transpose();
    }
}

void conv_forward(const ConvDims& d, const Real* x, const Real* k, const Real* b, Real* y) {
    CMapMat kernel(k, static_cast<Eigen::Index>(d.width * d.in_ch), static_cast<Eigen::Index>(d.maps));
    CRowVec bias(b, static_cast<Eigen::Index>(d.maps));
    for (std::size_t n = 0; n < d.batch; ++n) {
        MapMat out(y + n * d.out_len * d.maps, static_cast<Eigen::Index>(d.out_len), static_cast<Eigen::Index>(d.maps));
        out.noalias() = patches(x + n * d.length * d.in_ch, d.out_len, d.width, d.in_ch, d.stride) * kernel;
        out.rowwise() += bias;
    }
}

void deconv_forward(const DeconvDims& d, const Real* y, const Real* k, const Real* b, Real* x) {
    CRowVec bias(b, static_cast<Eigen::Index>(d.out_ch));
    for (std::size_t n = 0; n < d.batch; ++n) {
        Real* out = x + n * d.out_len * d.out_ch;
        MapMat(out, static_cast<Eigen::Index>(d.out_len), static_cast<Eigen::Index>(d.out_ch)).rowwise() = bias;
        scatter_taps(out, y + n * d.in_len * d.in_ch, k, d.in_len, d.width, d.out_ch, d.in_ch, d.stride);
    }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
    const ConvDims d = conv_dims(x, kernel, bias, stride);
    Tensor y({d.batch, d.out_len, d.maps});
    conv_forward(d, x.data(), kernel.data(), bias.data(), y.data());
    return y;
}

Tensor deconv1d(const Tensor& y, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
    const DeconvDims d = deconv_dims(y, kernel, bias, stride);
    Tensor x({d.batch, d.out_len, d.out_ch});
    deconv_forward(d, y.data(), kernel.data(), bias.data(), x.data());
    return x;
}

PoolResult max_over_time(const Tensor& x) {
    require(x.rank() == 3, "max_over_time input must be [batch,time,features], got " + shape_string(x.shape()));
    const std::size_t B = x.dim(0), T = x.dim(1), F = x.dim(2);
    PoolResult r{Tensor({B, F}), std::vector<std::size_t>(B * F, 0)};
    for (std::size_t b = 0; b < B; ++b) {
        const Real* base = x.data() + b * T * F;
        for (std::size_t f = 0; f < F; ++f) {
            Real best = base[f];
            std::size_t arg = 0;
            for (std::size_t t = 1; t < T; ++t) {
                if (base[t * F + f] > best) {
                    best = base[t * F + f];
                    arg = t;
                }
            }
            r.values[b * F + f] = best;
            r.argmax[b * F + f] = arg;
        }
    }
    return r;
}

Tensor mix_latent(const Tensor& h, const Tensor& z, const Tensor& mask) {
    if (h.shape() != z.shape() || h.shape() != mask.shape())
        throw ShapeError("mix_latent shapes differ: h " + shape_string(h.shape()) + ", z " + shape_string(z.shape()) +
                         ", mask " + shape_string(mask.shape()));
    Tensor out(h.shape());
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (mask[i] == 1) out[i] = z[i];
        else if (mask[i] == 0) out[i] = h[i];
        else throw InvalidArgument("mix_latent mask must be binary, found " + std::to_string(mask[i]));
    }
    return out;
}

std::vector<Real> softmax_row(std::span<const Real> logits) {
    std::vector<Real> p(logits.begin(), logits.end());
    const Real mx = *std::max_element(p.begin(), p.end());
    Real z = 0;
    for (auto& v : p) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : p) v /= z;
    return p;
}

namespace nn {

namespace {

bool any_grad(std::initializer_list<Var> vs) {
    for (const auto& v : vs)
        if (v.graph().needs_grad(v)) return true;
    return false;
}

void accumulate(Tensor& dst, const Tensor& src) {
    Real* d = dst.data();
    const Real* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Var conv1d(Var x, Var kernel, Var bias, std::size_t stride) {
    Graph& g = x.graph();
    const ConvDims d = conv_dims(x.value(), kernel.value(), bias.value(), stride);
    Tensor y({d.batch, d.out_len, d.maps});
    conv_forward(d, x.value().data(), kernel.value().data(), bias.value().data(), y.data());
    const auto xi = x.id(), ki = kernel.id(), bi = bias.id();
    return g.node(std::move(y), any_grad({x, kernel, bias}), [d, xi, ki, bi](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        const Real* X = g.value(xi).data();
        const Real* K = g.value(ki).data();
        const auto rows = static_cast<Eigen::Index>(d.out_len), maps = static_cast<Eigen::Index>(d.maps);
        if (g.needs_grad(ki)) {
            MapMat dk(g.grad(ki).data(), static_cast<Eigen::Index>(d.width * d.in_ch), maps);
            for (std::size_t n = 0; n < d.batch; ++n)
                dk.noalias() += patches(X + n * d.length * d.in_ch, d.out_len, d.width, d.in_ch, d.stride).transpose() *
                                CMapMat(dy.data() + n * d.out_len * d.maps, rows, maps);
        }
        if (g.needs_grad(bi)) {
            RowVec db(g.grad(bi).data(), maps);
            for (std::size_t n = 0; n < d.batch; ++n)
                db += CMapMat(dy.data() + n * d.out_len * d.maps, rows, maps).colwise().sum();
        }
        if (g.needs_grad(xi)) {
            Real* dx = g.grad(xi).data();
            for (std::size_t n = 0; n < d.batch; ++n)
                scatter_taps(dx + n * d.length * d.in_ch, dy.data() + n * d.out_len * d.maps, K, d.out_len, d.width,
                             d.in_ch, d.maps, d.stride);
        }
    });
}

Var deconv1d(Var y, Var kernel, Var bias, std::size_t stride) {
    Graph& g = y.graph();
    const DeconvDims d = deconv_dims(y.value(), kernel.value(), bias.value(), stride);
    Tensor x({d.batch, d.out_len, d.out_ch});
    deconv_forward(d, y.value().data(), kernel.value().data(), bias.value().data(), x.data());
    const auto yi = y.id(), ki = kernel.id(), bi = bias.id();
    return g.node(std::move(x), any_grad({y, kernel, bias}), [d, yi, ki, bi](Graph& g, std::uint32_t self) {
        const Tensor& dx = g.grad(self);
        const Real* Y = g.value(yi).data();
        const Real* K = g.value(ki).data();
        const auto in_len = static_cast<Eigen::Index>(d.in_len), in_ch = static_cast<Eigen::Index>(d.in_ch);
        const auto taps = static_cast<Eigen::Index>(d.width * d.out_ch);
        if (g.needs_grad(ki)) {
            MapMat dk(g.grad(ki).data(), taps, in_ch);
            for (std::size_t n = 0; n < d.batch; ++n)
                dk.noalias() += patches(dx.data() + n * d.out_len * d.out_ch, d.in_len, d.width, d.out_ch, d.stride)
                                    .transpose() *
                                CMapMat(Y + n * d.in_len * d.in_ch, in_len, in_ch);
        }
        if (g.needs_grad(bi)) {
            RowVec db(g.grad(bi).data(), static_cast<Eigen::Index>(d.out_ch));
            for (std::size_t n = 0; n < d.batch; ++n)
                db += CMapMat(dx.data() + n * d.out_len * d.out_ch, static_cast<Eigen::Index>(d.out_len),
                              static_cast<Eigen::Index>(d.out_ch))
                          .colwise()
                          .sum();
        }
        if (g.needs_grad(yi)) {
            CMapMat kernel(K, taps, in_ch);
            Real* dy = g.grad(yi).data();
            for (std::size_t n = 0; n < d.batch; ++n)
                MapMat(dy + n * d.in_len * d.in_ch, in_len, in_ch).noalias() +=
                    patches(dx.data() + n * d.out_len * d.out_ch, d.in_len, d.width, d.out_ch, d.stride) * kernel;
        }
    });
}

Var segment_max(Var x, std::size_t segments) {
    Graph& g = x.graph();
    const Tensor& xv = x.value();
    require(xv.rank() == 3, "time pooling input must be [batch,time,features], got " + shape_string(xv.shape()));
    const std::size_t B = xv.dim(0), T = xv.dim(1), F = xv.dim(2);
    require(segments >= 1, "time pooling needs at least one segment");
    require(T >= segments, "time pooling over " + std::to_string(segments) + " segments needs at least that many steps, got " +
                               std::to_string(T));
    Tensor out({B, segments * F});
    std::vector<std::size_t> arg(B * segments * F);
    for (std::size_t b = 0; b < B; ++b) {
        const Real* base = xv.data() + b * T * F;
        for (std::size_t s = 0; s < segments; ++s) {
            const std::size_t lo = s * T / segments, hi = (s + 1) * T / segments;
            for (std::size_t f = 0; f < F; ++f) {
                Real best = base[lo * F + f];
                std::size_t a = lo;
                for (std::size_t t = lo + 1; t < hi; ++t) {
                    if (base[t * F + f] > best) {
                        best = base[t * F + f];
                        a = t;
                    }
                }
                const std::size_t o = (b * segments + s) * F + f;
                out[o] = best;
                arg[o] = (b * T + a) * F + f;
            }
        }
    }
    const auto xi = x.id();
    return g.node(std::move(out), g.needs_grad(x), [xi, arg = std::move(arg)](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        Tensor& dx = g.grad(xi);
        for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += dy[o];
    });
}

Var max_over_time(Var x) { return segment_max(x, 1); }

Var dense(Var x, Var w, Var b) {
    Graph& g = x.graph();
    const Tensor &xv = x.value(), &wv = w.value(), &bv = b.value();
    require(xv.rank() == 2, "dense input must be [batch,features], got " + shape_string(xv.shape()));
    require(wv.rank() == 2 && wv.dim(0) == xv.dim(1),
            "dense weight " + shape_string(wv.shape()) + " does not fit input " + shape_string(xv.shape()));
    require(bv.size() == wv.dim(1), "dense bias length does not match output width");
    const auto B = static_cast<Eigen::Index>(xv.dim(0)), K = static_cast<Eigen::Index>(wv.dim(0)),
               N = static_cast<Eigen::Index>(wv.dim(1));
    Tensor y({xv.dim(0), wv.dim(1)});
    MapMat ym(y.data(), B, N);
    ym.noalias() = CMapMat(xv.data(), B, K) * CMapMat(wv.data(), K, N);
    ym.rowwise() += CRowVec(bv.data(), N);
    const auto xi = x.id(), wi = w.id(), bi = b.id();
    return g.node(std::move(y), any_grad({x, w, b}), [=](Graph& g, std::uint32_t self) {
        CMapMat dy(g.grad(self).data(), B, N);
        if (g.needs_grad(wi))
            MapMat(g.grad(wi).data(), K, N).noalias() += CMapMat(g.value(xi).data(), B, K).transpose() * dy;
        if (g.needs_grad(bi)) RowVec(g.grad(bi).data(), N) += dy.colwise().sum();
        if (g.needs_grad(xi))
            MapMat(g.grad(xi).data(), B, K).noalias() += dy * CMapMat(g.value(wi).data(), K, N).transpose();
    });
}

namespace {

template <typename Fwd, typename Deriv>
Var elementwise(Var x, Fwd fwd, Deriv deriv) {
    Graph& g = x.graph();
    Tensor y(x.value().shape());
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
    const auto xi = x.id();
    return g.node(std::move(y), g.needs_grad(x), [xi, deriv](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        const Tensor& yv = g.value(self);
        const Tensor& xv = g.value(xi);
        Tensor& dx = g.grad(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * deriv(xv[i], yv[i]);
    });
}

Real stable_sigmoid(Real v) {
    if (v >= 0) return 1 / (1 + std::exp(-v));
    const Real e = std::exp(v);
    return e / (1 + e);
}

Real softplus(Real v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

}  // namespace

Var relu(Var x) {
    return elementwise(
        x, [](Real v) { return v > 0 ? v : Real{0}; }, [](Real v, Real) { return v > 0 ? Real{1} : Real{0}; });
}

Var tanh(Var x) {
    return elementwise(
        x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return 1 - y * y; });
}

Var sigmoid(Var x) {
    return elementwise(x, stable_sigmoid, [](Real, Real y) { return y * (1 - y); });
}

Var scale_channels(Var x, const Tensor& scale) {
    Graph& g = x.graph();
    const Tensor& xv = x.value();
    const std::size_t C = xv.shape().back();
    require(scale.size() == C, "scale_channels expects " + std::to_string(C) + " factors, got " +
                                   std::to_string(scale.size()));
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * scale[i % C];
    const auto xi = x.id();
    return g.node(std::move(y), g.needs_grad(x), [xi, scale, C](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        Tensor& dx = g.grad(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * scale[i % C];
    });
}

Var reshape(Var x, Shape shape) {
    Graph& g = x.graph();
    Tensor y = x.value().reshaped(std::move(shape));
    const auto xi = x.id();
    return g.node(std::move(y), g.needs_grad(x), [xi](Graph& g, std::uint32_t self) {
        accumulate(g.grad(xi), g.grad(self));
    });
}

Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat of zero tensors");
    Graph& g = parts.front().graph();
    const std::size_t B = parts.front().value().dim(0);
    std::size_t total = 0;
    bool needs = false;
    std::vector<std::uint32_t> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        require(v.rank() == 2 && v.dim(0) == B, "concat parts must be [batch,features] with equal batch");
        widths.push_back(v.dim(1));
        total += v.dim(1);
        ids.push_back(p.id());
        needs = needs || g.needs_grad(p);
    }
    Tensor y({B, total});
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Tensor& v = parts[i].value();
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(v.data() + b * widths[i], widths[i], y.data() + b * total + off);
        off += widths[i];
    }
    return g.node(std::move(y), needs, [ids, widths, B, total](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        std::size_t off = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (g.needs_grad(ids[i])) {
                Tensor& dx = g.grad(ids[i]);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < widths[i]; ++j) dx[b * widths[i] + j] += dy[b * total + off + j];
            }
            off += widths[i];
        }
    });
}

Var stack(const std::vector<Var>& rows) {
    require(!rows.empty(), "stack of zero tensors");
    Graph& g = rows.front().graph();
    const Shape& first = rows.front().value().shape();
    require(first[0] == 1, "stack parts must have batch extent 1");
    const std::size_t n = rows.front().value().size();
    Shape out_shape = first;
    out_shape[0] = rows.size();
    Tensor y(out_shape);
    std::vector<std::uint32_t> ids;
    bool needs = false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].value().shape() == first, "stack parts must share a shape");
        std::copy_n(rows[i].value().data(), n, y.data() + i * n);
        ids.push_back(rows[i].id());
        needs = needs || g.needs_grad(rows[i]);
    }
    return g.node(std::move(y), needs, [ids, n](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!g.needs_grad(ids[i])) continue;
            Tensor& dx = g.grad(ids[i]);
            for (std::size_t j = 0; j < n; ++j) dx[j] += dy[i * n + j];
        }
    });
}

Var crop_time(Var x, std::size_t length) {
    Graph& g = x.graph();
    const Tensor& xv = x.value();
    require(xv.rank() == 3, "crop_time input must be [batch,time,channels]");
    const std::size_t B = xv.dim(0), T = xv.dim(1), C = xv.dim(2);
    require(length >= 1 && length <= T, "crop_time length " + std::to_string(length) + " outside [1," +
                                            std::to_string(T) + "]");
    Tensor y({B, length, C});
    for (std::size_t b = 0; b < B; ++b) std::copy_n(xv.data() + b * T * C, length * C, y.data() + b * length * C);
    const auto xi = x.id();
    return g.node(std::move(y), g.needs_grad(x), [xi, B, T, C, length](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        Tensor& dx = g.grad(xi);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < length * C; ++i) dx[b * T * C + i] += dy[b * length * C + i];
    });
}

Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opt) {
    Graph& g = x.graph();
    const Tensor& xv = x.value();
    const std::size_t C = xv.shape().back();
    const std::size_t N = xv.size() / C;
    require(gamma.value().size() == C && beta.value().size() == C, "batch_norm scale/shift must have one entry per channel");
    require(running_mean.size() == C && running_var.size() == C, "batch_norm running statistics must have one entry per channel");
    if (opt.training && N < 2) throw InvalidArgument("batch_norm in training mode needs at least two rows per channel");

    std::vector<Real> mean(C, 0), inv_std(C, 0);
    if (opt.training) {
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) mean[c] += xv[i * C + c];
        for (auto& m : mean) m /= static_cast<Real>(N);
        std::vector<Real> var(C, 0);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                const Real d = xv[i * C + c] - mean[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) {
            var[c] /= static_cast<Real>(N);
            inv_std[c] = 1 / std::sqrt(var[c] + opt.eps);
            running_mean[c] = (1 - opt.momentum) * running_mean[c] + opt.momentum * mean[c];
            running_var[c] = (1 - opt.momentum) * running_var[c] + opt.momentum * var[c];
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = 1 / std::sqrt(running_var[c] + opt.eps);
        }
    }

    Tensor xhat(xv.shape()), y(xv.shape());
    const Tensor &gv = gamma.value(), &bv = beta.value();
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const Real h = (xv[i * C + c] - mean[c]) * inv_std[c];
            xhat[i * C + c] = h;
            y[i * C + c] = gv[c] * h + bv[c];
        }
    const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
    const bool training = opt.training;
    return g.node(std::move(y), any_grad({x, gamma, beta}),
                  [xi, gi, bi, C, N, training, xhat = std::move(xhat), inv_std](Graph& g, std::uint32_t self) {
                      const Tensor& dy = g.grad(self);
                      std::vector<Real> sum_dy(C, 0), sum_dy_xhat(C, 0);
                      for (std::size_t i = 0; i < N; ++i)
                          for (std::size_t c = 0; c < C; ++c) {
                              sum_dy[c] += dy[i * C + c];
                              sum_dy_xhat[c] += dy[i * C + c] * xhat[i * C + c];
                          }
                      if (g.needs_grad(gi)) {
                          Tensor& dg = g.grad(gi);
                          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
                      }
                      if (g.needs_grad(bi)) {
                          Tensor& db = g.grad(bi);
                          for (std::size_t c = 0; c < C; ++c) db[c] += sum_dy[c];
                      }
                      if (g.needs_grad(xi)) {
                          const Tensor& gv = g.value(gi);
                          Tensor& dx = g.grad(xi);
                          const Real n = static_cast<Real>(N);
                          for (std::size_t i = 0; i < N; ++i)
                              for (std::size_t c = 0; c < C; ++c) {
                                  const std::size_t k = i * C + c;
                                  if (training)
                                      dx[k] += gv[c] * inv_std[c] / n *
                                               (n * dy[k] - sum_dy[c] - xhat[k] * sum_dy_xhat[c]);
                                  else
                                      dx[k] += gv[c] * inv_std[c] * dy[k];
                              }
                      }
                  });
}

Var mix_latent(Var h, const Tensor& z, const Tensor& mask) {
    Graph& g = h.graph();
    Tensor y = ehrgan::mix_latent(h.value(), z, mask);
    const auto hi = h.id();
    return g.node(std::move(y), g.needs_grad(h), [hi, mask](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        Tensor& dh = g.grad(hi);
        for (std::size_t i = 0; i < dh.size(); ++i)
            if (mask[i] == 0) dh[i] += dy[i];
    });
}

Var add(Var a, Var b) {
    Graph& g = a.graph();
    require(a.value().shape() == b.value().shape(),
            "add shapes differ: " + shape_string(a.value().shape()) + " vs " + shape_string(b.value().shape()));
    Tensor y = a.value();
    accumulate(y, b.value());
    const auto ai = a.id(), bi = b.id();
    return g.node(std::move(y), any_grad({a, b}), [ai, bi](Graph& g, std::uint32_t self) {
        if (g.needs_grad(ai)) accumulate(g.grad(ai), g.grad(self));
        if (g.needs_grad(bi)) accumulate(g.grad(bi), g.grad(self));
    });
}

Var scale(Var a, Real s) {
    Graph& g = a.graph();
    Tensor y = a.value();
    for (auto& v : y.values()) v *= s;
    const auto ai = a.id();
    return g.node(std::move(y), g.needs_grad(a), [ai, s](Graph& g, std::uint32_t self) {
        const Tensor& dy = g.grad(self);
        Tensor& dx = g.grad(ai);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dy[i];
    });
}

Var sum(Var a) {
    Graph& g = a.graph();
    Real s = 0;
    for (Real v : a.value().values()) s += v;
    const auto ai = a.id();
    return g.node(Tensor::scalar(s), g.needs_grad(a), [ai](Graph& g, std::uint32_t self) {
        const Real d = g.grad(self)[0];
        for (auto& v : g.grad(ai).values()) v += d;
    });
}

Var sum_squares(Var a) {
    Graph& g = a.graph();
    const Real s = squared_norm(a.value());
    const auto ai = a.id();
    return g.node(Tensor::scalar(s), g.needs_grad(a), [ai](Graph& g, std::uint32_t self) {
        const Real d = g.grad(self)[0];
        const Tensor& x = g.value(ai);
        Tensor& dx = g.grad(ai);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2 * d * x[i];
    });
}

Var squared_error(Var a, Var b) {
    Graph& g = a.graph();
    const Tensor &av = a.value(), &bv = b.value();
    require(av.shape() == bv.shape(),
            "squared_error shapes differ: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
    const Real batch = static_cast<Real>(av.dim(0));
    Real s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const Real d = av[i] - bv[i];
        s += d * d;
    }
    const auto ai = a.id(), bi = b.id();
    return g.node(Tensor::scalar(s / batch), any_grad({a, b}), [ai, bi, batch](Graph& g, std::uint32_t self) {
        const Real d = g.grad(self)[0] * 2 / batch;
        const Tensor &av = g.value(ai), &bv = g.value(bi);
        if (g.needs_grad(ai)) {
            Tensor& da = g.grad(ai);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += d * (av[i] - bv[i]);
        }
        if (g.needs_grad(bi)) {
            Tensor& db = g.grad(bi);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] -= d * (av[i] - bv[i]);
        }
    });
}

Tensor softmax(const Tensor& logits) {
    require(logits.rank() == 2, "softmax expects [batch,classes]");
    const std::size_t B = logits.dim(0), K = logits.dim(1);
    Tensor p(logits.shape());
    for (std::size_t b = 0; b < B; ++b) {
        auto row = softmax_row(std::span<const Real>(logits.data() + b * K, K));
        std::copy(row.begin(), row.end(), p.data() + b * K);
    }
    return p;
}

Var softmax_xent(Var logits, const std::vector<int>& labels) {
    Graph& g = logits.graph();
    const Tensor& lv = logits.value();
    require(lv.rank() == 2, "softmax_xent expects [batch,classes] logits");
    const std::size_t B = lv.dim(0), K = lv.dim(1);
    require(labels.size() == B, "softmax_xent label count does not match batch");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= K) throw InvalidArgument("softmax_xent label out of range");
    Tensor p = softmax(lv);
    Real loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const Real* row = lv.data() + b * K;
        const Real mx = *std::max_element(row, row + K);
        Real z = 0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        loss += mx + std::log(z) - row[labels[b]];
    }
    loss /= static_cast<Real>(B);
    const auto li = logits.id();
    return g.node(Tensor::scalar(loss), g.needs_grad(logits),
                  [li, labels, p = std::move(p), B, K](Graph& g, std::uint32_t self) {
                      const Real d = g.grad(self)[0] / static_cast<Real>(B);
                      Tensor& dl = g.grad(li);
                      for (std::size_t b = 0; b < B; ++b)
                          for (std::size_t k = 0; k < K; ++k)
                              dl[b * K + k] += d * (p[b * K + k] - (static_cast<int>(k) == labels[b] ? 1 : 0));
                  });
}

Var binary_xent(Var prob, const std::vector<Real>& targets) {
    Graph& g = prob.graph();
    const Tensor& pv = prob.value();
    require(pv.size() == targets.size(), "binary_xent target count does not match probabilities");
    const std::size_t n = pv.size();
    Real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real t = targets[i];
        if (!(t >= 0 && t <= 1)) throw InvalidArgument("binary_xent target outside [0,1]");
        const Real p = std::clamp(pv[i], kProbClamp, 1 - kProbClamp);
        if (!(p > 0 && p < 1)) throw InvalidArgument("binary_xent probability outside (0,1) after clamping");
        loss -= t * std::log(p) + (1 - t) * std::log(1 - p);
    }
    loss /= static_cast<Real>(n);
    const auto pi = prob.id();
    return g.node(Tensor::scalar(loss), g.needs_grad(prob), [pi, targets, n](Graph& g, std::uint32_t self) {
        const Real d = g.grad(self)[0] / static_cast<Real>(n);
        const Tensor& pv = g.value(pi);
        Tensor& dp = g.grad(pi);
        for (std::size_t i = 0; i < n; ++i) {
            if (pv[i] < kProbClamp || pv[i] > 1 - kProbClamp) continue;
            const Real p = pv[i], t = targets[i];
            dp[i] += d * (-t / p + (1 - t) / (1 - p));
        }
    });
}

Var sigmoid_xent(Var logits, const std::vector<Real>& targets) {
    Graph& g = logits.graph();
    const Tensor& lv = logits.value();
    require(lv.size() == targets.size(), "sigmoid_xent target count does not match logits");
    const std::size_t n = lv.size();
    Real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real t = targets[i];
        if (!(t >= 0 && t <= 1)) throw InvalidArgument("sigmoid_xent target outside [0,1]");
        if (!std::isfinite(lv[i])) throw NonFiniteError("sigmoid_xent received a non-finite logit");
        // -t log s(l) - (1-t) log(1-s(l)) = softplus(l) - t l
        loss += softplus(lv[i]) - t * lv[i];
    }
    loss /= static_cast<Real>(n);
    const auto li = logits.id();
    return g.node(Tensor::scalar(loss), g.needs_grad(logits), [li, targets, n](Graph& g, std::uint32_t self) {
        const Real d = g.grad(self)[0] / static_cast<Real>(n);
        const Tensor& lv = g.value(li);
        Tensor& dl = g.grad(li);
        for (std::size_t i = 0; i < n; ++i) dl[i] += d * (stable_sigmoid(lv[i]) - targets[i]);
    });
}

}  // namespace nn
}  // namespace ehrgan
