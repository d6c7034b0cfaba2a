#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "ckan/fft.hpp"
#include "ckan/tensor.hpp"

namespace ckan {

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return cdf + x * pdf;
}

// Binary keep/drop mask over an rFFT spectrum (bins x C, row-major).
struct SpectralMask {
    std::size_t bins = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;
};

// Reverse-mode tape. Nodes are recorded in creation order, which is a
// topological order by construction; backward() walks it once in reverse.
// One tape per forward pass; parameters enter as leaves that view external
// tensors, so distinct tapes can share read-only parameter storage.
class GradTape {
  public:
    struct Var {
        std::size_t i = static_cast<std::size_t>(-1);
        bool valid() const { return i != static_cast<std::size_t>(-1); }
    };

    Var constant(Tensor v) { return push_leaf(std::move(v), nullptr, false); }

    // Tracked leaf viewing caller-owned storage. The pointer must outlive
    // the tape.
    Var param(const Tensor* p) {
        if (p == nullptr) throw Error("GradTape::param: null tensor");
        return push_leaf(Tensor(), p, true);
    }

    const Tensor& value(Var v) const { return node_value(v.i); }

    bool tracked(Var v) const { return nodes_[v.i].requires_grad; }

    // Gradient of the last backward() w.r.t. v. Untracked nodes have no
    // gradient and yield nullptr; tracked nodes unreached by the loss get
    // zeros.
    const Tensor* gradient(Var v) {
        Node& n = nodes_[v.i];
        if (!n.requires_grad) return nullptr;
        if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
        if (grads_[v.i].numel() == 0) grads_[v.i] = Tensor(node_value(v.i).shape());
        return &grads_[v.i];
    }

    std::size_t size() const { return nodes_.size(); }

    // ---- primitives ----

    Var add(Var a, Var b) {
        const Tensor &va = value(a), &vb = value(b);
        check_same(va, vb, "add");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return push_op(std::move(out), {a.i, b.i}, [ai = a.i, bi = b.i](GradTape& t, const Tensor& g) {
            t.accumulate(ai, g);
            t.accumulate(bi, g);
        });
    }

    Var sub(Var a, Var b) {
        const Tensor &va = value(a), &vb = value(b);
        check_same(va, vb, "sub");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
        return push_op(std::move(out), {a.i, b.i}, [ai = a.i, bi = b.i](GradTape& t, const Tensor& g) {
            t.accumulate(ai, g);
            t.accumulate_scaled(bi, g, -1.0);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor &va = value(a), &vb = value(b);
        check_same(va, vb, "mul");
        Tensor out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return push_op(std::move(out), {a.i, b.i}, [ai = a.i, bi = b.i](GradTape& t, const Tensor& g) {
            t.accumulate_product(ai, g, t.node_value(bi));
            t.accumulate_product(bi, g, t.node_value(ai));
        });
    }

    Var scale(Var a, double c) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
        return push_op(std::move(out), {a.i}, [ai = a.i, c](GradTape& t, const Tensor& g) {
            t.accumulate_scaled(ai, g, c);
        });
    }

    Var tanh(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
        const std::size_t self = nodes_.size();
        return push_op(std::move(out), {a.i}, [ai = a.i, self](GradTape& t, const Tensor& g) {
            const Tensor& y = t.node_value(self);
            Tensor d(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) d[i] = g[i] * (1.0 - y[i] * y[i]);
            t.accumulate(ai, d);
        });
    }

    Var gelu(Var a) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = gelu_scalar(out[i]);
        return push_op(std::move(out), {a.i}, [ai = a.i](GradTape& t, const Tensor& g) {
            const Tensor& x = t.node_value(ai);
            Tensor d(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) d[i] = g[i] * gelu_grad_scalar(x[i]);
            t.accumulate(ai, d);
        });
    }

    Var sum(Var a) {
        double s = 0.0;
        const Tensor& va = value(a);
        for (std::size_t i = 0; i < va.numel(); ++i) s += va[i];
        return push_op(Tensor(Shape{1}, {s}), {a.i}, [ai = a.i](GradTape& t, const Tensor& g) {
            Tensor d(t.node_value(ai).shape());
            for (std::size_t i = 0; i < d.numel(); ++i) d[i] = g[0];
            t.accumulate(ai, d);
        });
    }

    Var reshape(Var a, Shape shape) {
        Tensor out = value(a).reshaped(std::move(shape));
        return push_op(std::move(out), {a.i}, [ai = a.i](GradTape& t, const Tensor& g) {
            t.accumulate_flat(ai, g);
        });
    }

    Var concat_cols(Var a, Var b) {
        const Tensor &va = value(a), &vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0))
            throw DimensionError("concat_cols: " + shape_str(va.shape()) + " vs " +
                                 shape_str(vb.shape()));
        const std::size_t rows = va.dim(0), ca = va.dim(1), cb = vb.dim(1);
        Tensor out(Shape{rows, ca + cb});
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < ca; ++c) out.at2(r, c) = va.at2(r, c);
            for (std::size_t c = 0; c < cb; ++c) out.at2(r, ca + c) = vb.at2(r, c);
        }
        return push_op(std::move(out), {a.i, b.i},
                       [ai = a.i, bi = b.i, rows, ca, cb](GradTape& t, const Tensor& g) {
                           Tensor ga(Shape{rows, ca}), gb(Shape{rows, cb});
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < ca; ++c) ga.at2(r, c) = g.at2(r, c);
                               for (std::size_t c = 0; c < cb; ++c) gb.at2(r, c) = g.at2(r, ca + c);
                           }
                           t.accumulate(ai, ga);
                           t.accumulate(bi, gb);
                       });
    }

    // y = x . W + b with x flat [n], W [n x m] row-major, b [m].
    Var dense(Var x, Var w, Var b) {
        const Tensor &vx = value(x), &vw = value(w), &vb = value(b);
        if (vw.rank() != 2 || vx.numel() != vw.dim(0) || vb.numel() != vw.dim(1))
            throw DimensionError("dense: x" + shape_str(vx.shape()) + " W" + shape_str(vw.shape()) +
                                 " b" + shape_str(vb.shape()));
        const std::size_t n = vw.dim(0), m = vw.dim(1);
        Tensor out = vb.reshaped(Shape{m});
        const double* wp = vw.data();
        for (std::size_t i = 0; i < n; ++i) {
            const double xi = vx[i];
            if (xi == 0.0) continue;
            const double* row = wp + i * m;
            double* op = out.data();
            for (std::size_t j = 0; j < m; ++j) op[j] += xi * row[j];
        }
        return push_op(std::move(out), {x.i, w.i, b.i},
                       [xi_ = x.i, wi = w.i, bi = b.i, n, m](GradTape& t, const Tensor& g) {
                           const Tensor& vx = t.node_value(xi_);
                           const Tensor& vw = t.node_value(wi);
                           t.accumulate(bi, g);
                           if (t.nodes_[wi].requires_grad) {
                               Tensor gw(Shape{n, m});
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double xi = vx[i];
                                   if (xi == 0.0) continue;
                                   double* row = gw.data() + i * m;
                                   for (std::size_t j = 0; j < m; ++j) row[j] = xi * g[j];
                               }
                               t.accumulate(wi, gw);
                           }
                           if (t.nodes_[xi_].requires_grad) {
                               Tensor gx(vx.shape());
                               for (std::size_t i = 0; i < n; ++i) {
                                   const double* row = vw.data() + i * m;
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < m; ++j) acc += row[j] * g[j];
                                   gx[i] = acc;
                               }
                               t.accumulate(xi_, gx);
                           }
                       });
    }

    // 1-D convolution along the position axis, applied independently per
    // row of x. Layout is channel-fastest: x [rows, positions*in_ch],
    // kernel [out_ch, in_ch, ksize] flat, bias [out_ch]. Zero padding keeps
    // the position count ("same" convolution, odd ksize).
    Var conv1d(Var x, Var k, Var b, std::size_t in_ch, std::size_t out_ch, std::size_t ksize) {
        const Tensor &vx = value(x), &vk = value(k), &vb = value(b);
        if (vx.rank() != 2 || vx.dim(1) % in_ch != 0)
            throw DimensionError("conv1d: input " + shape_str(vx.shape()) + " not divisible by " +
                                 std::to_string(in_ch) + " channels");
        if (ksize % 2 == 0) throw ConfigError("conv1d: kernel size must be odd");
        if (vk.numel() != out_ch * in_ch * ksize || vb.numel() != out_ch)
            throw DimensionError("conv1d: kernel/bias size mismatch");
        const std::size_t rows = vx.dim(0), pos = vx.dim(1) / in_ch;
        const std::size_t half = ksize / 2;
        Tensor out(Shape{rows, pos * out_ch});
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = vx.data() + r * pos * in_ch;
            double* yr = out.data() + r * pos * out_ch;
            for (std::size_t p = 0; p < pos; ++p) {
                for (std::size_t o = 0; o < out_ch; ++o) {
                    double acc = vb[o];
                    const double* kw = vk.data() + o * in_ch * ksize;
                    for (std::size_t ic = 0; ic < in_ch; ++ic) {
                        for (std::size_t d = 0; d < ksize; ++d) {
                            const std::ptrdiff_t q =
                                static_cast<std::ptrdiff_t>(p + d) - static_cast<std::ptrdiff_t>(half);
                            if (q < 0 || q >= static_cast<std::ptrdiff_t>(pos)) continue;
                            acc += kw[ic * ksize + d] * xr[static_cast<std::size_t>(q) * in_ch + ic];
                        }
                    }
                    yr[p * out_ch + o] = acc;
                }
            }
        }
        return push_op(
            std::move(out), {x.i, k.i, b.i},
            [xi = x.i, ki = k.i, bi = b.i, in_ch, out_ch, ksize, rows, pos, half](GradTape& t,
                                                                                  const Tensor& g) {
                const Tensor& vx = t.node_value(xi);
                const Tensor& vk = t.node_value(ki);
                if (t.nodes_[bi].requires_grad) {
                    Tensor gb(Shape{out_ch});
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t p = 0; p < pos; ++p)
                            for (std::size_t o = 0; o < out_ch; ++o)
                                gb[o] += g.data()[(r * pos + p) * out_ch + o];
                    t.accumulate(bi, gb);
                }
                if (t.nodes_[ki].requires_grad) {
                    Tensor gk(Shape{out_ch, in_ch, ksize});
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* xr = vx.data() + r * pos * in_ch;
                        const double* gr = g.data() + r * pos * out_ch;
                        for (std::size_t p = 0; p < pos; ++p)
                            for (std::size_t o = 0; o < out_ch; ++o) {
                                const double go = gr[p * out_ch + o];
                                if (go == 0.0) continue;
                                for (std::size_t ic = 0; ic < in_ch; ++ic)
                                    for (std::size_t d = 0; d < ksize; ++d) {
                                        const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + d) -
                                                                 static_cast<std::ptrdiff_t>(half);
                                        if (q < 0 || q >= static_cast<std::ptrdiff_t>(pos)) continue;
                                        gk[(o * in_ch + ic) * ksize + d] +=
                                            go * xr[static_cast<std::size_t>(q) * in_ch + ic];
                                    }
                            }
                    }
                    t.accumulate(ki, gk);
                }
                if (t.nodes_[xi].requires_grad) {
                    Tensor gx(vx.shape());
                    for (std::size_t r = 0; r < rows; ++r) {
                        double* gxr = gx.data() + r * pos * in_ch;
                        const double* gr = g.data() + r * pos * out_ch;
                        for (std::size_t p = 0; p < pos; ++p)
                            for (std::size_t o = 0; o < out_ch; ++o) {
                                const double go = gr[p * out_ch + o];
                                if (go == 0.0) continue;
                                const double* kw = vk.data() + o * in_ch * ksize;
                                for (std::size_t ic = 0; ic < in_ch; ++ic)
                                    for (std::size_t d = 0; d < ksize; ++d) {
                                        const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + d) -
                                                                 static_cast<std::ptrdiff_t>(half);
                                        if (q < 0 || q >= static_cast<std::ptrdiff_t>(pos)) continue;
                                        gxr[static_cast<std::size_t>(q) * in_ch + ic] +=
                                            go * kw[ic * ksize + d];
                                    }
                            }
                    }
                    t.accumulate(xi, gx);
                }
            });
    }

    // Keep-masked band filter: rFFT along rows, zero the dropped bins,
    // irFFT back. With a fixed mask this is a symmetric projection, so the
    // backward pass applies the identical filter to the gradient.
    Var spectral_filter(Var x, std::shared_ptr<const SpectralMask> mask) {
        const Tensor& vx = value(x);
        if (vx.rank() != 2) throw DimensionError("spectral_filter: expected T x C input");
        const std::size_t t_len = vx.dim(0), cols = vx.dim(1);
        if (mask->bins != t_len / 2 + 1 || mask->cols != cols)
            throw DimensionError("spectral_filter: mask " + std::to_string(mask->bins) + "x" +
                                 std::to_string(mask->cols) + " vs input " + shape_str(vx.shape()));
        Tensor out = apply_mask_filter(vx, *mask);
        return push_op(std::move(out), {x.i}, [ai = x.i, mask](GradTape& t, const Tensor& g) {
            t.accumulate(ai, apply_mask_filter(g, *mask));
        });
    }

    static Tensor apply_mask_filter(const Tensor& z, const SpectralMask& mask) {
        ComplexTensor s = rfft_t(z);
        for (std::size_t i = 0; i < s.numel(); ++i) {
            if (!mask.keep[i]) {
                s.re()[i] = 0.0;
                s.im()[i] = 0.0;
            }
        }
        return irfft_t(s, z.dim(0));
    }

    // Reverse sweep from a scalar loss. Gradients accumulate into every
    // tracked node; query them with gradient().
    void backward(Var loss) {
        if (!loss.valid() || loss.i >= nodes_.size()) throw Error("backward: invalid loss node");
        if (node_value(loss.i).numel() != 1)
            throw Error("backward: loss must be scalar, got " +
                        shape_str(node_value(loss.i).shape()));
        grads_.assign(nodes_.size(), Tensor());
        grads_[loss.i] = Tensor(Shape{1}, {1.0});
        for (std::size_t i = loss.i + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || grads_[i].numel() == 0 || !n.backward) continue;
            n.backward(*this, grads_[i]);
        }
    }

  private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        bool requires_grad = false;
        std::function<void(GradTape&, const Tensor&)> backward;
    };

    const Tensor& node_value(std::size_t i) const {
        const Node& n = nodes_[i];
        return n.external ? *n.external : n.owned;
    }

    static void check_same(const Tensor& a, const Tensor& b, const char* op) {
        if (!a.same_shape(b))
            throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                 " vs " + shape_str(b.shape()));
    }

    Var push_leaf(Tensor v, const Tensor* ext, bool tracked) {
        Node n;
        n.owned = std::move(v);
        n.external = ext;
        n.requires_grad = tracked;
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    Var push_op(Tensor out, std::initializer_list<std::size_t> parents,
                std::function<void(GradTape&, const Tensor&)> bwd) {
        Node n;
        n.owned = std::move(out);
        for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
        if (n.requires_grad) n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    void accumulate(std::size_t i, const Tensor& g) {
        if (!nodes_[i].requires_grad) return;
        Tensor& buf = grads_[i];
        if (buf.numel() == 0) {
            buf = g;
            return;
        }
        for (std::size_t j = 0; j < buf.numel(); ++j) buf[j] += g[j];
    }

    void accumulate_scaled(std::size_t i, const Tensor& g, double c) {
        if (!nodes_[i].requires_grad) return;
        Tensor& buf = grads_[i];
        if (buf.numel() == 0) buf = Tensor(g.shape());
        for (std::size_t j = 0; j < buf.numel(); ++j) buf[j] += c * g[j];
    }

    void accumulate_product(std::size_t i, const Tensor& g, const Tensor& other) {
        if (!nodes_[i].requires_grad) return;
        Tensor& buf = grads_[i];
        if (buf.numel() == 0) buf = Tensor(g.shape());
        for (std::size_t j = 0; j < buf.numel(); ++j) buf[j] += g[j] * other[j];
    }

    void accumulate_flat(std::size_t i, const Tensor& g) {
        if (!nodes_[i].requires_grad) return;
        Tensor& buf = grads_[i];
        if (buf.numel() == 0) buf = Tensor(node_value(i).shape());
        for (std::size_t j = 0; j < buf.numel(); ++j) buf[j] += g[j];
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

}  // namespace ckan
