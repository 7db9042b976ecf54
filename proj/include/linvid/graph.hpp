#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "linvid/common.hpp"
#include "linvid/phase_pool.hpp"
#include "linvid/tensor.hpp"

namespace linvid {

using NodeId = std::uint32_t;

// Reverse-mode tape. Forward values are computed at insertion time; backward
// walks the nodes in exact reverse insertion order, which is a topological
// order by construction. One Graph instance is single-threaded.
template <typename T>
class Graph {
public:
    struct Node {
        const char* op;
        std::vector<NodeId> inputs;
        Tensor<T> value;
        std::function<void(const Graph&, const Node&, const Tensor<T>&, std::vector<Tensor<T>>&)> back;
    };

    NodeId input(Tensor<T> v, const char* what = "input") {
        v.require_finite(what);
        return push(what, {}, std::move(v), nullptr);
    }

    const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
    std::size_t node_count() const { return nodes_.size(); }

    // Smallest observed distance to any piecewise kink (relu zero, clamp
    // bounds, unpool cell boundaries, sqrt/div singular points) across every
    // forward evaluation recorded on this tape.
    double kink_distance() const { return kink_; }

    // ---- elementwise ----

    NodeId add(NodeId a, NodeId b) {
        const auto& x = value(a);
        const auto& y = value(b);
        require_same(x, y, "add");
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
        return push("add", {a, b}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        g.accum(grads, n.inputs[0], gout, 1.0);
                        g.accum(grads, n.inputs[1], gout, 1.0);
                    });
    }

    NodeId sub(NodeId a, NodeId b) {
        const auto& x = value(a);
        const auto& y = value(b);
        require_same(x, y, "sub");
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
        return push("sub", {a, b}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        g.accum(grads, n.inputs[0], gout, 1.0);
                        g.accum(grads, n.inputs[1], gout, -1.0);
                    });
    }

    NodeId mul(NodeId a, NodeId b) {
        const auto& x = value(a);
        const auto& y = value(b);
        require_same(x, y, "mul");
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
        return push("mul", {a, b}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const auto& yv = g.value(n.inputs[1]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        Tensor<T>& db = g.slot(grads, n.inputs[1], yv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                            da[i] += gout[i] * yv[i];
                            db[i] += gout[i] * xv[i];
                        }
                    });
    }

    NodeId div(NodeId a, NodeId b) {
        const auto& x = value(a);
        const auto& y = value(b);
        require_same(x, y, "div");
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            note_kink(std::abs(static_cast<double>(y[i])));
            out[i] = x[i] / y[i];
        }
        return push("div", {a, b}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const auto& yv = g.value(n.inputs[1]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        Tensor<T>& db = g.slot(grads, n.inputs[1], yv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                            da[i] += gout[i] / yv[i];
                            db[i] -= gout[i] * xv[i] / (yv[i] * yv[i]);
                        }
                    });
    }

    NodeId scale(NodeId a, double c) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(c * static_cast<double>(x[i]));
        return push("scale", {a}, std::move(out),
                    [c](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        g.accum(grads, n.inputs[0], gout, c);
                    });
    }

    NodeId relu(NodeId a) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            note_kink(std::abs(static_cast<double>(x[i])));
            out[i] = x[i] > T(0) ? x[i] : T(0);
        }
        return push("relu", {a}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            if (xv[i] > T(0)) da[i] += gout[i];
                    });
    }

    NodeId sqrt_(NodeId a) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            note_kink(static_cast<double>(x[i]));
            out[i] = static_cast<T>(std::sqrt(static_cast<double>(x[i])));
        }
        return push("sqrt", {a}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                            const double s = std::sqrt(static_cast<double>(xv[i]));
                            if (s > 0.0) da[i] += static_cast<T>(static_cast<double>(gout[i]) / (2.0 * s));
                        }
                    });
    }

    NodeId clamp_min(NodeId a, double lo) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            note_kink(std::abs(static_cast<double>(x[i]) - lo));
            out[i] = x[i] < static_cast<T>(lo) ? static_cast<T>(lo) : x[i];
        }
        return push("clamp_min", {a}, std::move(out),
                    [lo](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            if (static_cast<double>(xv[i]) >= lo) da[i] += gout[i];
                    });
    }

    NodeId clamp(NodeId a, double lo, double hi) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = static_cast<double>(x[i]);
            note_kink(std::abs(v - lo));
            note_kink(std::abs(v - hi));
            out[i] = static_cast<T>(std::min(hi, std::max(lo, v)));
        }
        return push("clamp", {a}, std::move(out),
                    [lo, hi](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                            const double v = static_cast<double>(xv[i]);
                            if (v >= lo && v <= hi) da[i] += gout[i];
                        }
                    });
    }

    // ---- reductions / shape ----

    NodeId sum(NodeId a) {
        const auto& x = value(a);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]);
        return push("sum", {a}, Tensor<T>::scalar(static_cast<T>(acc)),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gout[0];
                    });
    }

    NodeId reshape(NodeId a, Shape s) {
        const auto& x = value(a);
        Tensor<T> out = x.reshaped(s);
        return push("reshape", {a}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t i = 0; i < gout.size(); ++i) da[i] += gout[i];
                    });
    }

    NodeId concat(NodeId a, NodeId b) {
        const auto& x = value(a);
        const auto& y = value(b);
        if (x.rank() != 1 || y.rank() != 1)
            throw ShapeError("concat expects rank-1 tensors, got " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
        Tensor<T> out({x.size() + y.size()});
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i];
        for (std::size_t i = 0; i < y.size(); ++i) out[x.size() + i] = y[i];
        return push("concat", {a, b}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const auto& yv = g.value(n.inputs[1]);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        Tensor<T>& db = g.slot(grads, n.inputs[1], yv.shape());
                        for (std::size_t i = 0; i < xv.size(); ++i) da[i] += gout[i];
                        for (std::size_t i = 0; i < yv.size(); ++i) db[i] += gout[xv.size() + i];
                    });
    }

    // ---- dense / conv ----

    // out = W x + b with x:[n], W:[m,n], b:[m]
    NodeId fc(NodeId x_id, NodeId w_id, NodeId b_id) {
        const auto& x = value(x_id);
        const auto& w = value(w_id);
        const auto& b = value(b_id);
        if (x.rank() != 1) throw ShapeError("fc input must be rank-1, got " + shape_str(x.shape()));
        if (w.rank() != 2) throw ShapeError("fc weights must be rank-2, got " + shape_str(w.shape()));
        const std::size_t m = w.dim(0), n = w.dim(1);
        if (x.size() != n)
            throw ShapeError("fc inner dimension mismatch: weights " + shape_str(w.shape()) +
                             " vs input " + shape_str(x.shape()));
        if (b.size() != m)
            throw ShapeError("fc bias " + shape_str(b.shape()) + " vs output dim " + std::to_string(m));
        Tensor<T> out({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = static_cast<double>(b[i]);
            const T* row = w.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(x[j]);
            out[i] = static_cast<T>(acc);
        }
        return push("fc", {x_id, w_id, b_id}, std::move(out),
                    [](const Graph& g, const Node& n_, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n_.inputs[0]);
                        const auto& wv = g.value(n_.inputs[1]);
                        const std::size_t m = wv.dim(0), n = wv.dim(1);
                        Tensor<T>& dx = g.slot(grads, n_.inputs[0], xv.shape());
                        Tensor<T>& dw = g.slot(grads, n_.inputs[1], wv.shape());
                        Tensor<T>& db = g.slot(grads, n_.inputs[2], Shape{m});
                        for (std::size_t i = 0; i < m; ++i) {
                            const T gi = gout[i];
                            db[i] += gi;
                            const T* row = wv.data() + i * n;
                            T* drow = dw.data() + i * n;
                            for (std::size_t j = 0; j < n; ++j) {
                                dx[j] += gi * row[j];
                                drow[j] += gi * xv[j];
                            }
                        }
                    });
    }

    // out = W x (no bias), used for the delta correction W1*delta
    NodeId matvec(NodeId w_id, NodeId x_id) {
        const auto& w = value(w_id);
        const auto& x = value(x_id);
        if (w.rank() != 2 || x.rank() != 1)
            throw ShapeError("matvec expects W:[m,n], x:[n], got " + shape_str(w.shape()) + " and " + shape_str(x.shape()));
        const std::size_t m = w.dim(0), n = w.dim(1);
        if (x.size() != n)
            throw ShapeError("matvec inner dimension mismatch: " + shape_str(w.shape()) + " vs " + shape_str(x.shape()));
        Tensor<T> out({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            const T* row = w.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(x[j]);
            out[i] = static_cast<T>(acc);
        }
        return push("matvec", {w_id, x_id}, std::move(out),
                    [](const Graph& g, const Node& n_, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& wv = g.value(n_.inputs[0]);
                        const auto& xv = g.value(n_.inputs[1]);
                        const std::size_t m = wv.dim(0), n = wv.dim(1);
                        Tensor<T>& dw = g.slot(grads, n_.inputs[0], wv.shape());
                        Tensor<T>& dx = g.slot(grads, n_.inputs[1], xv.shape());
                        for (std::size_t i = 0; i < m; ++i) {
                            const T gi = gout[i];
                            const T* row = wv.data() + i * n;
                            T* drow = dw.data() + i * n;
                            for (std::size_t j = 0; j < n; ++j) {
                                dx[j] += gi * row[j];
                                drow[j] += gi * xv[j];
                            }
                        }
                    });
    }

    // Zero-pad the spatial dims of [C,H,W] by (ph, pw) on each side.
    NodeId pad2d(NodeId a, int pad_h, int pad_w) {
        const auto& x = value(a);
        if (x.rank() != 3) throw ShapeError("pad2d expects [C,H,W], got " + shape_str(x.shape()));
        if (pad_h < 0 || pad_w < 0) throw ConfigError("pad2d: negative padding");
        const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
        const std::size_t Ph = static_cast<std::size_t>(pad_h), Pw = static_cast<std::size_t>(pad_w);
        Tensor<T> out({C, H + 2 * Ph, W + 2 * Pw});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out[(c * (H + 2 * Ph) + i + Ph) * (W + 2 * Pw) + j + Pw] = x[(c * H + i) * W + j];
        return push("pad2d", {a}, std::move(out),
                    [Ph, Pw](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
                        Tensor<T>& da = g.slot(grads, n.inputs[0], xv.shape());
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t i = 0; i < H; ++i)
                                for (std::size_t j = 0; j < W; ++j)
                                    da[(c * H + i) * W + j] +=
                                        gout[(c * (H + 2 * Ph) + i + Ph) * (W + 2 * Pw) + j + Pw];
                    });
    }

    // Valid cross-correlation over the zero-padded input.
    // x:[Cin,H,W], k:[Cout,Cin,kh,kw] -> [Cout, H+2p-kh+1, W+2p-kw+1]
    NodeId conv2d(NodeId x_id, NodeId k_id, int padding) {
        const auto& x = value(x_id);
        const auto& k = value(k_id);
        if (x.rank() != 3) throw ShapeError("conv2d input must be [Cin,H,W], got " + shape_str(x.shape()));
        if (k.rank() != 4) throw ShapeError("conv2d kernels must be [Cout,Cin,kh,kw], got " + shape_str(k.shape()));
        if (padding < 0) throw ConfigError("conv2d: negative padding");
        const std::size_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
        const std::size_t Cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
        if (k.dim(1) != Cin)
            throw ShapeError("conv2d channel axis mismatch: input Cin=" + std::to_string(Cin) +
                             ", kernel Cin=" + std::to_string(k.dim(1)));
        const std::size_t P = static_cast<std::size_t>(padding);
        if (kh > H + 2 * P)
            throw ShapeError("conv2d kernel height " + std::to_string(kh) + " exceeds padded input height " +
                             std::to_string(H + 2 * P));
        if (kw > W + 2 * P)
            throw ShapeError("conv2d kernel width " + std::to_string(kw) + " exceeds padded input width " +
                             std::to_string(W + 2 * P));
        const std::size_t Ho = H + 2 * P - kh + 1, Wo = W + 2 * P - kw + 1;
        Tensor<T> out({Cout, Ho, Wo});
        const int pi = padding;
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double acc = 0.0;
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t a = 0; a < kh; ++a) {
                            const long y = static_cast<long>(i + a) - pi;
                            if (y < 0 || y >= static_cast<long>(H)) continue;
                            const T* xrow = x.data() + (ci * H + static_cast<std::size_t>(y)) * W;
                            const T* krow = k.data() + ((co * Cin + ci) * kh + a) * kw;
                            for (std::size_t b = 0; b < kw; ++b) {
                                const long xx = static_cast<long>(j + b) - pi;
                                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                                acc += static_cast<double>(xrow[xx]) * static_cast<double>(krow[b]);
                            }
                        }
                    out[(co * Ho + i) * Wo + j] = static_cast<T>(acc);
                }
        return push("conv2d", {x_id, k_id}, std::move(out),
                    [pi](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const auto& kv = g.value(n.inputs[1]);
                        const std::size_t Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
                        const std::size_t Cout = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
                        const std::size_t Ho = gout.dim(1), Wo = gout.dim(2);
                        Tensor<T>& dx = g.slot(grads, n.inputs[0], xv.shape());
                        Tensor<T>& dk = g.slot(grads, n.inputs[1], kv.shape());
                        for (std::size_t co = 0; co < Cout; ++co)
                            for (std::size_t i = 0; i < Ho; ++i)
                                for (std::size_t j = 0; j < Wo; ++j) {
                                    const double gv = static_cast<double>(gout[(co * Ho + i) * Wo + j]);
                                    if (gv == 0.0) continue;
                                    for (std::size_t ci = 0; ci < Cin; ++ci)
                                        for (std::size_t a = 0; a < kh; ++a) {
                                            const long y = static_cast<long>(i + a) - pi;
                                            if (y < 0 || y >= static_cast<long>(H)) continue;
                                            const T* xrow = xv.data() + (ci * H + static_cast<std::size_t>(y)) * W;
                                            T* dxrow = dx.data() + (ci * H + static_cast<std::size_t>(y)) * W;
                                            const T* krow = kv.data() + ((co * Cin + ci) * kh + a) * kw;
                                            T* dkrow = dk.data() + ((co * Cin + ci) * kh + a) * kw;
                                            for (std::size_t b = 0; b < kw; ++b) {
                                                const long xx = static_cast<long>(j + b) - pi;
                                                if (xx < 0 || xx >= static_cast<long>(W)) continue;
                                                dxrow[xx] += static_cast<T>(gv * static_cast<double>(krow[b]));
                                                dkrow[b] += static_cast<T>(gv * static_cast<double>(xrow[xx]));
                                            }
                                        }
                                }
                    });
    }

    // Adds bias[c] to every spatial position of channel c.
    NodeId bias_channels(NodeId x_id, NodeId b_id) {
        const auto& x = value(x_id);
        const auto& b = value(b_id);
        if (x.rank() != 3) throw ShapeError("bias_channels expects [C,H,W], got " + shape_str(x.shape()));
        if (b.size() != x.dim(0))
            throw ShapeError("bias_channels: bias " + shape_str(b.shape()) + " vs channels " + std::to_string(x.dim(0)));
        const std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
        Tensor<T> out(x.shape());
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) out[c * HW + i] = x[c * HW + i] + b[c];
        return push("bias_channels", {x_id, b_id}, std::move(out),
                    [](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        const auto& xv = g.value(n.inputs[0]);
                        const std::size_t C = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
                        Tensor<T>& dx = g.slot(grads, n.inputs[0], xv.shape());
                        Tensor<T>& db = g.slot(grads, n.inputs[1], Shape{C});
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t i = 0; i < HW; ++i) {
                                dx[c * HW + i] += gout[c * HW + i];
                                db[c] += gout[c * HW + i];
                            }
                    });
    }

    // ---- pooling ----

    NodeId soft_max_pool_op(NodeId z_id, PoolSpec spec) {
        Tensor<T> out = soft_max_pool(value(z_id), spec);
        return push("soft_max_pool", {z_id}, std::move(out),
                    [spec](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        Tensor<T>& dz = g.slot(grads, n.inputs[0], g.value(n.inputs[0]).shape());
                        soft_max_pool_backward(g.value(n.inputs[0]), spec, gout, dz);
                    });
    }

    NodeId soft_argmax_pool_op(NodeId z_id, PoolSpec spec) {
        Tensor<T> out = soft_argmax_pool(value(z_id), spec);
        return push("soft_argmax_pool", {z_id}, std::move(out),
                    [spec](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        Tensor<T>& dz = g.slot(grads, n.inputs[0], g.value(n.inputs[0]).shape());
                        soft_argmax_pool_backward(g.value(n.inputs[0]), spec, gout, dz);
                    });
    }

    NodeId unpool_op(NodeId m_id, NodeId p_id, PoolSpec spec, Shape out_shape) {
        note_kink(unpool_kink_distance(value(p_id), spec));
        Tensor<T> out = unpool(value(m_id), value(p_id), spec, out_shape);
        return push("unpool", {m_id, p_id}, std::move(out),
                    [spec, out_shape](const Graph& g, const Node& n, const Tensor<T>& gout, std::vector<Tensor<T>>& grads) {
                        Tensor<T>& dm = g.slot(grads, n.inputs[0], g.value(n.inputs[0]).shape());
                        Tensor<T>& dp = g.slot(grads, n.inputs[1], g.value(n.inputs[1]).shape());
                        unpool_backward(g.value(n.inputs[0]), g.value(n.inputs[1]), spec, out_shape, gout, dm, dp);
                    });
    }

    // ---- backward ----

    // Gradient map node id -> tensor (empty where no gradient flowed).
    // Accumulation over fan-out is by summation in reverse insertion order.
    std::vector<Tensor<T>> backward(NodeId loss) const {
        if (loss >= nodes_.size()) throw ContractError("backward: unknown node id");
        if (value(loss).size() != 1) {
            throw ContractError("backward: loss node must be scalar, has shape " + shape_str(value(loss).shape()));
        }
        std::vector<Tensor<T>> grads(nodes_.size());
        grads[loss] = Tensor<T>::scalar(T(1));
        for (std::size_t i = loss + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (grads[i].empty() || !n.back) continue;
            n.back(*this, n, grads[i], grads);
        }
        return grads;
    }

private:
    NodeId push(const char* op, std::vector<NodeId> inputs, Tensor<T> value,
                std::function<void(const Graph&, const Node&, const Tensor<T>&, std::vector<Tensor<T>>&)> back) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(back)});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    static void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
        if (!a.same_shape(b)) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
        }
    }

    Tensor<T>& slot(std::vector<Tensor<T>>& grads, NodeId id, const Shape& shape) const {
        if (grads[id].empty()) grads[id] = Tensor<T>(shape);
        return grads[id];
    }

    void accum(std::vector<Tensor<T>>& grads, NodeId id, const Tensor<T>& gout, double c) const {
        Tensor<T>& dst = slot(grads, id, gout.shape());
        for (std::size_t i = 0; i < gout.size(); ++i)
            dst[i] += static_cast<T>(c * static_cast<double>(gout[i]));
    }

    void note_kink(double d) { kink_ = std::min(kink_, d); }

    std::vector<Node> nodes_;
    double kink_ = std::numeric_limits<double>::infinity();
};

}  // namespace linvid
