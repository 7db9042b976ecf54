#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "linvid/common.hpp"
#include "linvid/tensor.hpp"

namespace linvid {

// Volumetric pooling neighborhoods over a [F,X,Y] activation map. Overlap is
// allowed (stride < extent); partial edge groups are not.
struct PoolSpec {
    std::array<int, 3> group{1, 1, 1};   // extents (gf, gx, gy)
    std::array<int, 3> stride{1, 1, 1};  // (sf, sx, sy)
    double beta = 5.0;                   // softmax sharpness; 0 = average pooling

    void validate() const {
        for (int i = 0; i < 3; ++i) {
            if (group[i] < 1) throw ConfigError("pool group extent must be positive");
            if (stride[i] < 1) throw ConfigError("pool stride must be positive");
        }
        if (beta < 0) throw ConfigError("pool beta must be >= 0");
    }

    // Axes (of f,x,y) that carry a phase coordinate: extent > 1.
    std::vector<int> phase_axes() const {
        std::vector<int> axes;
        for (int i = 0; i < 3; ++i)
            if (group[i] > 1) axes.push_back(i);
        return axes;
    }

    std::array<std::size_t, 3> group_counts(const Shape& in) const {
        validate();
        if (in.size() != 3) throw ShapeError("pooling expects a rank-3 [F,X,Y] tensor, got " + shape_str(in));
        std::array<std::size_t, 3> counts{};
        for (int i = 0; i < 3; ++i) {
            const std::size_t extent = in[static_cast<std::size_t>(i)];
            const std::size_t g = static_cast<std::size_t>(group[i]);
            const std::size_t s = static_cast<std::size_t>(stride[i]);
            if (g > extent || (extent - g) % s != 0) {
                throw ShapeError("pool group/stride (" + std::to_string(g) + "," + std::to_string(s) +
                                 ") does not tile axis " + std::to_string(i) + " of extent " +
                                 std::to_string(extent));
            }
            counts[static_cast<std::size_t>(i)] = (extent - g) / s + 1;
        }
        return counts;
    }

    bool operator==(const PoolSpec& o) const {
        return group == o.group && stride == o.stride && beta == o.beta;
    }
};

// Local coordinate of cell i on an axis of extent g: equally spaced -1..+1,
// single-cell axes sit at 0.
inline double grid_coord(int i, int g) {
    if (g <= 1) return 0.0;
    return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(g - 1);
}

// Softmax weights over one flattened group; numerically shifted by the max.
template <typename T>
std::vector<double> softmax_weights(const std::vector<T>& z, double beta) {
    double zmax = -1e300;
    for (const T& v : z) zmax = std::max(zmax, static_cast<double>(v));
    std::vector<double> w(z.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        w[i] = std::exp(beta * (static_cast<double>(z[i]) - zmax));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

// Factorized code: magnitudes m [Gf,Gx,Gy] and phases p [A,Gf,Gx,Gy] where A
// is the number of pooled axes with extent > 1.
template <typename T>
struct Code {
    Tensor<T> m;
    Tensor<T> p;
    PoolSpec spec;

    std::size_t flat_dim() const { return m.size() + p.size(); }
};

namespace detail {

// Visits every group of `spec` over `in_shape` in row-major group order and
// every cell inside the group in (f,x,y) row-major order. Deterministic.
template <typename Fn>
void for_each_group(const Shape& in_shape, const PoolSpec& spec, Fn&& fn) {
    const auto counts = spec.group_counts(in_shape);
    for (std::size_t kf = 0; kf < counts[0]; ++kf)
        for (std::size_t kx = 0; kx < counts[1]; ++kx)
            for (std::size_t ky = 0; ky < counts[2]; ++ky) {
                const std::size_t group_index = (kf * counts[1] + kx) * counts[2] + ky;
                const std::size_t of = kf * static_cast<std::size_t>(spec.stride[0]);
                const std::size_t ox = kx * static_cast<std::size_t>(spec.stride[1]);
                const std::size_t oy = ky * static_cast<std::size_t>(spec.stride[2]);
                fn(group_index, of, ox, oy);
            }
}

inline std::size_t cell_offset(const Shape& s, std::size_t f, std::size_t x, std::size_t y) {
    return (f * s[1] + x) * s[2] + y;
}

template <typename T>
void gather_group(const Tensor<T>& z, const PoolSpec& spec, std::size_t of, std::size_t ox,
                  std::size_t oy, std::vector<T>& out) {
    out.clear();
    for (int a = 0; a < spec.group[0]; ++a)
        for (int b = 0; b < spec.group[1]; ++b)
            for (int c = 0; c < spec.group[2]; ++c)
                out.push_back(z[cell_offset(z.shape(), of + static_cast<std::size_t>(a),
                                               ox + static_cast<std::size_t>(b),
                                               oy + static_cast<std::size_t>(c))]);
}

template <typename T>
void require_nonnegative(const Tensor<T>& z, const char* op) {
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (static_cast<double>(z[i]) < 0.0) {
            throw ContractError(std::string(op) + ": negative activation at flat index " +
                                std::to_string(i));
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> soft_max_pool(const Tensor<T>& z, const PoolSpec& spec) {
    detail::require_nonnegative(z, "soft_max_pool");
    const auto counts = spec.group_counts(z.shape());
    Tensor<T> m({counts[0], counts[1], counts[2]});
    std::vector<T> group;
    detail::for_each_group(z.shape(), spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        detail::gather_group(z, spec, of, ox, oy, group);
        const auto w = softmax_weights(group, spec.beta);
        double acc = 0.0;
        for (std::size_t i = 0; i < group.size(); ++i) acc += w[i] * static_cast<double>(group[i]);
        m[k] = static_cast<T>(acc);
    });
    return m;
}

template <typename T>
Tensor<T> soft_argmax_pool(const Tensor<T>& z, const PoolSpec& spec) {
    detail::require_nonnegative(z, "soft_argmax_pool");
    const auto counts = spec.group_counts(z.shape());
    const auto axes = spec.phase_axes();
    const std::size_t A = axes.size();
    Tensor<T> p({A, counts[0], counts[1], counts[2]});
    const std::size_t groups_total = counts[0] * counts[1] * counts[2];
    std::vector<T> group;
    detail::for_each_group(z.shape(), spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        detail::gather_group(z, spec, of, ox, oy, group);
        const auto w = softmax_weights(group, spec.beta);
        std::size_t i = 0;
        std::array<double, 3> acc{0.0, 0.0, 0.0};
        for (int a = 0; a < spec.group[0]; ++a)
            for (int b = 0; b < spec.group[1]; ++b)
                for (int c = 0; c < spec.group[2]; ++c, ++i) {
                    acc[0] += w[i] * grid_coord(a, spec.group[0]);
                    acc[1] += w[i] * grid_coord(b, spec.group[1]);
                    acc[2] += w[i] * grid_coord(c, spec.group[2]);
                }
        for (std::size_t ai = 0; ai < A; ++ai) {
            // convex combination of grid coords; clamp rounding spill to [-1,1]
            double v = acc[static_cast<std::size_t>(axes[ai])];
            v = std::min(1.0, std::max(-1.0, v));
            p[ai * groups_total + k] = static_cast<T>(v);
        }
    });
    return p;
}

template <typename T>
Code<T> phase_pool(const Tensor<T>& z, const PoolSpec& spec) {
    return Code<T>{soft_max_pool(z, spec), soft_argmax_pool(z, spec), spec};
}

namespace detail {

// Per-axis deposition cells and weights for a continuous phase coordinate.
// u = (p+1)/2*(g-1); cells (i0, i0+1) get weights (1-f, f). At the upper
// boundary i0 is pulled back one cell so the gradient stays the interior rule.
struct AxisDeposit {
    int i0 = 0;
    int i1 = 0;
    double f = 0.0;    // weight of i1
    double dscale = 0.0;  // du/dp = (g-1)/2
};

inline AxisDeposit axis_deposit(double phase, int g) {
    AxisDeposit d;
    if (g <= 1) return d;
    const double u = (phase + 1.0) * 0.5 * static_cast<double>(g - 1);
    int i0 = static_cast<int>(std::floor(u));
    if (i0 > g - 2) i0 = g - 2;
    if (i0 < 0) i0 = 0;
    d.i0 = i0;
    d.i1 = i0 + 1;
    d.f = u - static_cast<double>(i0);
    d.dscale = 0.5 * static_cast<double>(g - 1);
    return d;
}

}  // namespace detail

// Places each group's magnitude at the continuous location named by its
// phases, splitting mass multilinearly over the bracketing grid cells.
// Overlapping groups sum their deposits.
template <typename T>
Tensor<T> unpool(const Tensor<T>& m, const Tensor<T>& p, const PoolSpec& spec, const Shape& out_shape) {
    const auto counts = spec.group_counts(out_shape);
    const auto axes = spec.phase_axes();
    const std::size_t groups_total = counts[0] * counts[1] * counts[2];
    if (m.size() != groups_total) {
        throw ShapeError("unpool magnitude count " + std::to_string(m.size()) +
                         " does not match group count " + std::to_string(groups_total));
    }
    if (p.size() != axes.size() * groups_total) {
        throw ShapeError("unpool phase tensor " + shape_str(p.shape()) + " does not match " +
                         std::to_string(axes.size()) + " axes x " + std::to_string(groups_total) + " groups");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double v = static_cast<double>(p[i]);
        if (v < -1.0 - 1e-9 || v > 1.0 + 1e-9) {
            throw ContractError("unpool: phase " + std::to_string(v) + " outside [-1,1]");
        }
    }

    Tensor<T> out(out_shape);
    detail::for_each_group(out_shape, spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        std::array<detail::AxisDeposit, 3> dep;  // per f,x,y axis
        for (std::size_t ai = 0; ai < axes.size(); ++ai) {
            const double phase = static_cast<double>(p[ai * groups_total + k]);
            dep[static_cast<std::size_t>(axes[ai])] = detail::axis_deposit(phase, spec.group[static_cast<std::size_t>(axes[ai])]);
        }
        const double mk = static_cast<double>(m[k]);
        const std::array<std::size_t, 3> origin{of, ox, oy};
        // corners: low/high per axis (single-cell axes collapse to index 0)
        for (int cf = 0; cf < 2; ++cf)
            for (int cx = 0; cx < 2; ++cx)
                for (int cy = 0; cy < 2; ++cy) {
                    const std::array<int, 3> pick{cf, cx, cy};
                    double w = 1.0;
                    std::array<std::size_t, 3> idx{};
                    bool skip = false;
                    for (int axis = 0; axis < 3; ++axis) {
                        if (spec.group[static_cast<std::size_t>(axis)] <= 1) {
                            if (pick[static_cast<std::size_t>(axis)] == 1) { skip = true; break; }
                            idx[static_cast<std::size_t>(axis)] = origin[static_cast<std::size_t>(axis)];
                        } else {
                            const auto& d = dep[static_cast<std::size_t>(axis)];
                            const int cell = pick[static_cast<std::size_t>(axis)] ? d.i1 : d.i0;
                            w *= pick[static_cast<std::size_t>(axis)] ? d.f : (1.0 - d.f);
                            idx[static_cast<std::size_t>(axis)] = origin[static_cast<std::size_t>(axis)] + static_cast<std::size_t>(cell);
                        }
                    }
                    if (skip || w == 0.0) continue;
                    out[detail::cell_offset(out_shape, idx[0], idx[1], idx[2])] += static_cast<T>(mk * w);
                }
    });
    return out;
}

// ---- backward helpers (recompute softmax weights; inputs are small) ----

template <typename T>
void soft_max_pool_backward(const Tensor<T>& z, const PoolSpec& spec, const Tensor<T>& gout, Tensor<T>& dz) {
    if (dz.empty()) dz = Tensor<T>(z.shape());
    std::vector<T> group;
    detail::for_each_group(z.shape(), spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        detail::gather_group(z, spec, of, ox, oy, group);
        const auto w = softmax_weights(group, spec.beta);
        double mk = 0.0;
        for (std::size_t i = 0; i < group.size(); ++i) mk += w[i] * static_cast<double>(group[i]);
        const double g = static_cast<double>(gout[k]);
        std::size_t i = 0;
        for (int a = 0; a < spec.group[0]; ++a)
            for (int b = 0; b < spec.group[1]; ++b)
                for (int c = 0; c < spec.group[2]; ++c, ++i) {
                    const double dmdz = w[i] * (1.0 + spec.beta * (static_cast<double>(group[i]) - mk));
                    dz[detail::cell_offset(z.shape(), of + static_cast<std::size_t>(a),
                                              ox + static_cast<std::size_t>(b),
                                              oy + static_cast<std::size_t>(c))] += static_cast<T>(g * dmdz);
                }
    });
}

template <typename T>
void soft_argmax_pool_backward(const Tensor<T>& z, const PoolSpec& spec, const Tensor<T>& gout, Tensor<T>& dz) {
    if (dz.empty()) dz = Tensor<T>(z.shape());
    const auto counts = spec.group_counts(z.shape());
    const auto axes = spec.phase_axes();
    const std::size_t groups_total = counts[0] * counts[1] * counts[2];
    std::vector<T> group;
    detail::for_each_group(z.shape(), spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        detail::gather_group(z, spec, of, ox, oy, group);
        const auto w = softmax_weights(group, spec.beta);
        // expected coordinate per axis
        std::array<double, 3> pk{0.0, 0.0, 0.0};
        {
            std::size_t i = 0;
            for (int a = 0; a < spec.group[0]; ++a)
                for (int b = 0; b < spec.group[1]; ++b)
                    for (int c = 0; c < spec.group[2]; ++c, ++i) {
                        pk[0] += w[i] * grid_coord(a, spec.group[0]);
                        pk[1] += w[i] * grid_coord(b, spec.group[1]);
                        pk[2] += w[i] * grid_coord(c, spec.group[2]);
                    }
        }
        std::size_t i = 0;
        for (int a = 0; a < spec.group[0]; ++a)
            for (int b = 0; b < spec.group[1]; ++b)
                for (int c = 0; c < spec.group[2]; ++c, ++i) {
                    double acc = 0.0;
                    const std::array<double, 3> coord{grid_coord(a, spec.group[0]),
                                                      grid_coord(b, spec.group[1]),
                                                      grid_coord(c, spec.group[2])};
                    for (std::size_t ai = 0; ai < axes.size(); ++ai) {
                        const int axis = axes[ai];
                        const double g = static_cast<double>(gout[ai * groups_total + k]);
                        acc += g * spec.beta * w[i] *
                               (coord[static_cast<std::size_t>(axis)] - pk[static_cast<std::size_t>(axis)]);
                    }
                    dz[detail::cell_offset(z.shape(), of + static_cast<std::size_t>(a),
                                              ox + static_cast<std::size_t>(b),
                                              oy + static_cast<std::size_t>(c))] += static_cast<T>(acc);
                }
    });
}

template <typename T>
void unpool_backward(const Tensor<T>& m, const Tensor<T>& p, const PoolSpec& spec, const Shape& out_shape,
                     const Tensor<T>& gout, Tensor<T>& dm, Tensor<T>& dp) {
    const auto counts = spec.group_counts(out_shape);
    const auto axes = spec.phase_axes();
    const std::size_t groups_total = counts[0] * counts[1] * counts[2];
    if (dm.empty()) dm = Tensor<T>(m.shape());
    if (dp.empty()) dp = Tensor<T>(p.shape());
    detail::for_each_group(out_shape, spec, [&](std::size_t k, std::size_t of, std::size_t ox, std::size_t oy) {
        std::array<detail::AxisDeposit, 3> dep;
        for (std::size_t ai = 0; ai < axes.size(); ++ai) {
            const double phase = static_cast<double>(p[ai * groups_total + k]);
            dep[static_cast<std::size_t>(axes[ai])] = detail::axis_deposit(phase, spec.group[static_cast<std::size_t>(axes[ai])]);
        }
        const double mk = static_cast<double>(m[k]);
        const std::array<std::size_t, 3> origin{of, ox, oy};
        double dm_acc = 0.0;
        std::array<double, 3> dphase{0.0, 0.0, 0.0};
        for (int cf = 0; cf < 2; ++cf)
            for (int cx = 0; cx < 2; ++cx)
                for (int cy = 0; cy < 2; ++cy) {
                    const std::array<int, 3> pick{cf, cx, cy};
                    double w = 1.0;
                    std::array<double, 3> dw{0.0, 0.0, 0.0};  // d(corner weight)/du per axis
                    std::array<std::size_t, 3> idx{};
                    bool skip = false;
                    for (int axis = 0; axis < 3; ++axis) {
                        const std::size_t a = static_cast<std::size_t>(axis);
                        if (spec.group[a] <= 1) {
                            if (pick[a] == 1) { skip = true; break; }
                            idx[a] = origin[a];
                            dw[a] = 0.0;
                        } else {
                            const auto& d = dep[a];
                            const int cell = pick[a] ? d.i1 : d.i0;
                            const double wa = pick[a] ? d.f : (1.0 - d.f);
                            w *= wa;
                            dw[a] = pick[a] ? 1.0 : -1.0;
                            idx[a] = origin[a] + static_cast<std::size_t>(cell);
                        }
                    }
                    if (skip) continue;
                    const double g = static_cast<double>(gout[detail::cell_offset(out_shape, idx[0], idx[1], idx[2])]);
                    if (g == 0.0) continue;
                    dm_acc += g * w;
                    for (int axis = 0; axis < 3; ++axis) {
                        const std::size_t a = static_cast<std::size_t>(axis);
                        if (spec.group[a] <= 1) continue;
                        // product of the other axes' weights
                        double others = 1.0;
                        for (int o = 0; o < 3; ++o) {
                            const std::size_t ob = static_cast<std::size_t>(o);
                            if (o == axis || spec.group[ob] <= 1) continue;
                            others *= pick[ob] ? dep[ob].f : (1.0 - dep[ob].f);
                        }
                        dphase[a] += g * mk * dw[a] * others * dep[a].dscale;
                    }
                }
        dm[k] += static_cast<T>(dm_acc);
        for (std::size_t ai = 0; ai < axes.size(); ++ai) {
            dp[ai * groups_total + k] += static_cast<T>(dphase[static_cast<std::size_t>(axes[ai])]);
        }
    });
}

// Smallest distance (in cell-fraction units) of any deposit location to a
// cell boundary; gradient checks reject cases that sit on a kink.
template <typename T>
double unpool_kink_distance(const Tensor<T>& p, const PoolSpec& spec) {
    const auto axes = spec.phase_axes();
    double dist = 1e300;
    if (axes.empty()) return dist;
    const std::size_t groups_total = p.size() / axes.size();
    for (std::size_t ai = 0; ai < axes.size(); ++ai) {
        const int g = spec.group[static_cast<std::size_t>(axes[ai])];
        for (std::size_t k = 0; k < groups_total; ++k) {
            const auto d = detail::axis_deposit(static_cast<double>(p[ai * groups_total + k]), g);
            dist = std::min(dist, std::min(d.f, 1.0 - d.f));
        }
    }
    return dist;
}

}  // namespace linvid
