#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "linvid/common.hpp"
#include "linvid/graph.hpp"
#include "linvid/phase_pool.hpp"
#include "linvid/tensor.hpp"

namespace linvid {

// How the code of the third frame is predicted from the first two.
enum class Predictor {
    None,      // decoder sees both codes concatenated (learned prediction)
    FixedA,    // fixed linear extrapolation a0*z_t + a1*z_tm1
    MagPhase,  // magnitude averaging + phase extrapolation on factorized codes
};

struct ConvStage {
    int out_ch;
    int kh, kw;
    int pad;    // symmetric zero padding fed to conv2d
    bool relu;
};
struct FcStage {
    int out_dim;
    bool relu;
};
struct PadStage {
    int pad_h, pad_w;  // zero padding per side, per spatial axis
};
struct ReshapeStage {
    std::array<int, 3> shape;  // target [F,X,Y]
};
struct PoolStage {};    // phase pooling; spec taken from ModelConfig::pool
struct UnpoolStage {};  // inverse; output shape is the encoder's pool input shape

using Stage = std::variant<ConvStage, FcStage, PadStage, ReshapeStage, PoolStage, UnpoolStage>;

struct ModelConfig {
    std::string arch;
    std::array<std::size_t, 3> input_shape{1, 16, 16};  // C,H,W
    std::vector<Stage> encoder;
    std::vector<Stage> decoder;
    PoolSpec pool;  // meaningful iff some encoder stage is PoolStage
    Predictor predictor = Predictor::FixedA;
    std::array<double, 2> a{2.0, -1.0};
    double lambda = 0.1;
    double eps_curv = 1e-6;

    bool pooled() const {
        for (const auto& s : encoder)
            if (std::holds_alternative<PoolStage>(s)) return true;
        return false;
    }
};

// Static shape analysis of a config; throws ConfigError/ShapeError on an
// inconsistent architecture. Used for validation and parameter layout.
struct ModelDims {
    bool pooled = false;
    Shape pool_in;       // activation shape entering the pool / leaving unpool
    Shape m_shape;       // [Gf,Gx,Gy]
    Shape p_shape;       // [A,Gf,Gx,Gy]
    std::size_t code_dim = 0;        // flat code length (m+p when pooled)
    std::size_t decoder_in_dim = 0;  // flat length expected by a non-pooled decoder
    Shape output_shape;
    std::size_t param_tensor_count = 0;
};

namespace detail {

inline Shape walk_stage(const Stage& stage, const Shape& in, const ModelConfig& cfg, ModelDims& dims,
                        bool encoder_side) {
    if (const auto* c = std::get_if<ConvStage>(&stage)) {
        if (in.size() != 3) throw ConfigError("conv stage requires a [C,H,W] activation, got " + shape_str(in));
        const long ho = static_cast<long>(in[1]) + 2 * c->pad - c->kh + 1;
        const long wo = static_cast<long>(in[2]) + 2 * c->pad - c->kw + 1;
        if (ho < 1 || wo < 1)
            throw ConfigError("conv stage output collapses: " + shape_str(in) + " with kernel " +
                              std::to_string(c->kh) + "x" + std::to_string(c->kw));
        return Shape{static_cast<std::size_t>(c->out_ch), static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)};
    }
    if (const auto* f = std::get_if<FcStage>(&stage)) {
        return Shape{static_cast<std::size_t>(f->out_dim)};
    }
    if (const auto* p = std::get_if<PadStage>(&stage)) {
        if (in.size() != 3) throw ConfigError("pad stage requires a [C,H,W] activation");
        return Shape{in[0], in[1] + 2 * static_cast<std::size_t>(p->pad_h), in[2] + 2 * static_cast<std::size_t>(p->pad_w)};
    }
    if (const auto* r = std::get_if<ReshapeStage>(&stage)) {
        const std::size_t want = static_cast<std::size_t>(r->shape[0]) * static_cast<std::size_t>(r->shape[1]) *
                                 static_cast<std::size_t>(r->shape[2]);
        if (want != shape_numel(in))
            throw ConfigError("reshape stage " + std::to_string(want) + " elements vs activation " + shape_str(in));
        return Shape{static_cast<std::size_t>(r->shape[0]), static_cast<std::size_t>(r->shape[1]),
                     static_cast<std::size_t>(r->shape[2])};
    }
    if (std::holds_alternative<PoolStage>(stage)) {
        if (!encoder_side) throw ConfigError("pool stage only valid in the encoder");
        const auto counts = cfg.pool.group_counts(in);
        dims.pool_in = in;
        dims.m_shape = Shape{counts[0], counts[1], counts[2]};
        dims.p_shape = Shape{cfg.pool.phase_axes().size(), counts[0], counts[1], counts[2]};
        dims.pooled = true;
        // downstream sees the factorized code; no single activation shape
        return Shape{shape_numel(dims.m_shape) + shape_numel(dims.p_shape)};
    }
    if (std::holds_alternative<UnpoolStage>(stage)) {
        if (encoder_side) throw ConfigError("unpool stage only valid in the decoder");
        if (!dims.pooled) throw ConfigError("unpool stage requires a pooled encoder");
        return dims.pool_in;
    }
    throw ConfigError("unhandled stage kind");
}

}  // namespace detail

inline ModelDims analyze(const ModelConfig& cfg) {
    ModelDims dims;
    Shape cur{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
    std::size_t params = 0;
    for (const auto& s : cfg.encoder) {
        if (std::holds_alternative<ConvStage>(s) || std::holds_alternative<FcStage>(s)) params += 2;
        cur = detail::walk_stage(s, cur, cfg, dims, true);
    }
    dims.code_dim = shape_numel(cur);
    if (dims.pooled && cfg.predictor != Predictor::MagPhase)
        throw ConfigError("pooled encoders require the mag/phase predictor");
    if (!dims.pooled && cfg.predictor == Predictor::MagPhase)
        throw ConfigError("mag/phase predictor requires a pooled encoder");

    dims.decoder_in_dim = cfg.predictor == Predictor::None ? 2 * dims.code_dim : dims.code_dim;
    Shape dcur = dims.pooled ? Shape{dims.code_dim} : Shape{dims.decoder_in_dim};
    for (const auto& s : cfg.decoder) {
        if (std::holds_alternative<ConvStage>(s) || std::holds_alternative<FcStage>(s)) params += 2;
        dcur = detail::walk_stage(s, dcur, cfg, dims, false);
    }
    dims.output_shape = dcur;
    const Shape want{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
    if (dims.output_shape != want)
        throw ConfigError("decoder produces " + shape_str(dims.output_shape) + ", input frames are " + shape_str(want));
    dims.param_tensor_count = params;
    return dims;
}

// All trainable weights, in stage walk order (encoder then decoder). Both
// frame encodings share these tensors; the Siamese tie is structural.
template <typename T>
struct ModelParams {
    std::vector<Tensor<T>> tensors;
    std::vector<std::string> names;

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }
};

namespace detail {

template <typename T>
void init_stage_params(const Stage& stage, const Shape& in, const std::string& prefix, Rng& rng,
                       ModelParams<T>& out) {
    if (const auto* c = std::get_if<ConvStage>(&stage)) {
        const std::size_t cin = in[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * static_cast<std::size_t>(c->kh) *
                                                                 static_cast<std::size_t>(c->kw)));
        out.tensors.push_back(random_uniform<T>({static_cast<std::size_t>(c->out_ch), cin,
                                                 static_cast<std::size_t>(c->kh), static_cast<std::size_t>(c->kw)},
                                                rng, -bound, bound));
        out.names.push_back(prefix + "_conv_kernel");
        out.tensors.push_back(Tensor<T>({static_cast<std::size_t>(c->out_ch)}));
        out.names.push_back(prefix + "_conv_bias");
    } else if (const auto* f = std::get_if<FcStage>(&stage)) {
        const std::size_t n = shape_numel(in);
        const double bound = 1.0 / std::sqrt(static_cast<double>(n));
        out.tensors.push_back(random_uniform<T>({static_cast<std::size_t>(f->out_dim), n}, rng, -bound, bound));
        out.names.push_back(prefix + "_fc_weight");
        out.tensors.push_back(Tensor<T>({static_cast<std::size_t>(f->out_dim)}));
        out.names.push_back(prefix + "_fc_bias");
    }
}

}  // namespace detail

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    ModelDims dims = analyze(cfg);
    ModelParams<T> params;
    Rng rng(seed);
    Shape cur{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]};
    std::size_t i = 0;
    for (const auto& s : cfg.encoder) {
        detail::init_stage_params(s, cur, "enc" + std::to_string(i++), rng, params);
        cur = detail::walk_stage(s, cur, cfg, dims, true);
    }
    Shape dcur = dims.pooled ? Shape{dims.code_dim} : Shape{dims.decoder_in_dim};
    i = 0;
    for (const auto& s : cfg.decoder) {
        detail::init_stage_params(s, dcur, "dec" + std::to_string(i++), rng, params);
        dcur = detail::walk_stage(s, dcur, cfg, dims, false);
    }
    return params;
}

// Code node pair (or flat vector when the encoder has no pooling).
struct GraphCode {
    bool pooled = false;
    NodeId flat = 0;  // valid when !pooled
    NodeId m = 0, p = 0;
};

namespace detail {

// Shared cursor so builders consume parameter node ids in walk order.
struct ParamCursor {
    const std::vector<NodeId>* ids;
    std::size_t next = 0;
    NodeId take() {
        if (next >= ids->size()) throw ContractError("parameter cursor exhausted");
        return (*ids)[next++];
    }
};

template <typename T>
NodeId apply_dense_stages(Graph<T>& g, NodeId cur, const std::vector<Stage>& stages, const ModelConfig& cfg,
                          ParamCursor& pc, const ModelDims& dims, GraphCode* code_out) {
    for (const auto& s : stages) {
        if (const auto* c = std::get_if<ConvStage>(&s)) {
            NodeId k = pc.take();
            NodeId b = pc.take();
            cur = g.conv2d(cur, k, c->pad);
            cur = g.bias_channels(cur, b);
            if (c->relu) cur = g.relu(cur);
        } else if (const auto* f = std::get_if<FcStage>(&s)) {
            if (g.value(cur).rank() != 1) cur = g.reshape(cur, {g.value(cur).size()});
            NodeId w = pc.take();
            NodeId b = pc.take();
            cur = g.fc(cur, w, b);
            if (f->relu) cur = g.relu(cur);
        } else if (const auto* p = std::get_if<PadStage>(&s)) {
            cur = g.pad2d(cur, p->pad_h, p->pad_w);
        } else if (const auto* r = std::get_if<ReshapeStage>(&s)) {
            cur = g.reshape(cur, {static_cast<std::size_t>(r->shape[0]), static_cast<std::size_t>(r->shape[1]),
                                  static_cast<std::size_t>(r->shape[2])});
        } else if (std::holds_alternative<PoolStage>(s)) {
            if (!code_out) throw ContractError("pool stage encountered in decoder walk");
            code_out->pooled = true;
            code_out->m = g.soft_max_pool_op(cur, cfg.pool);
            code_out->p = g.soft_argmax_pool_op(cur, cfg.pool);
            return cur;  // pooling is the last encoding step
        } else if (std::holds_alternative<UnpoolStage>(s)) {
            throw ContractError("unpool stage encountered outside build_decoder");
        }
    }
    return cur;
}

}  // namespace detail

// Runs the encoder stages on a frame node. `param_ids` must be the graph ids
// of ModelParams::tensors in order; the cursor advances past encoder params.
template <typename T>
GraphCode build_encoder(Graph<T>& g, NodeId frame, const ModelConfig& cfg, const ModelDims& dims,
                        const std::vector<NodeId>& param_ids, std::size_t* param_cursor = nullptr) {
    if (g.value(frame).shape() != Shape{cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]})
        throw ShapeError("encoder input " + shape_str(g.value(frame).shape()) + ", config expects " +
                         shape_str({cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]}));
    detail::ParamCursor pc{&param_ids, param_cursor ? *param_cursor : 0};
    GraphCode code;
    NodeId cur = detail::apply_dense_stages(g, frame, cfg.encoder, cfg, pc, dims, &code);
    if (!code.pooled) {
        if (g.value(cur).rank() != 1) cur = g.reshape(cur, {g.value(cur).size()});
        code.flat = cur;
    }
    if (param_cursor) *param_cursor = pc.next;
    return code;
}

// Runs the decoder stages on a predicted code. The cursor must point at the
// first decoder parameter (i.e. past all encoder params).
template <typename T>
NodeId build_decoder(Graph<T>& g, const GraphCode& code, const ModelConfig& cfg, const ModelDims& dims,
                     const std::vector<NodeId>& param_ids, std::size_t param_cursor) {
    detail::ParamCursor pc{&param_ids, param_cursor};
    NodeId cur;
    std::vector<Stage> rest;
    if (dims.pooled) {
        if (!code.pooled) throw ContractError("pooled decoder fed a flat code");
        if (cfg.decoder.empty() || !std::holds_alternative<UnpoolStage>(cfg.decoder.front()))
            throw ConfigError("pooled decoder must begin with an unpool stage");
        cur = g.unpool_op(code.m, code.p, cfg.pool, dims.pool_in);
        rest.assign(cfg.decoder.begin() + 1, cfg.decoder.end());
    } else {
        cur = code.flat;
        rest = cfg.decoder;
    }
    cur = detail::apply_dense_stages(g, cur, rest, cfg, pc, dims, nullptr);
    return cur;
}

// cos angle((b-a), (c-b)) with norms floored at eps; all nodes rank-1.
template <typename T>
NodeId build_curvature_cosine(Graph<T>& g, NodeId a, NodeId b, NodeId c, double eps) {
    NodeId u = g.sub(b, a);
    NodeId v = g.sub(c, b);
    NodeId uv = g.sum(g.mul(u, v));
    NodeId nu = g.clamp_min(g.sqrt_(g.sum(g.mul(u, u))), eps);
    NodeId nv = g.clamp_min(g.sqrt_(g.sum(g.mul(v, v))), eps);
    return g.div(uv, g.mul(nu, nv));
}

// 0.5 * ||pred - target||^2 as a scalar node.
template <typename T>
NodeId build_l2_half(Graph<T>& g, NodeId pred, NodeId target) {
    NodeId d = g.sub(g.reshape(pred, {g.value(pred).size()}), g.reshape(target, {g.value(target).size()}));
    return g.scale(g.sum(g.mul(d, d)), 0.5);
}

template <typename T>
NodeId flatten_node(Graph<T>& g, NodeId n) {
    return g.value(n).rank() == 1 ? n : g.reshape(n, {g.value(n).size()});
}

// Predicted code node(s) from the two input codes, per cfg.predictor.
// MagPhase: m averaged, p extrapolated and clamped to [-1,1].
template <typename T>
GraphCode build_prediction(Graph<T>& g, const GraphCode& code_t, const GraphCode& code_tm1, const ModelConfig& cfg) {
    GraphCode pred;
    switch (cfg.predictor) {
        case Predictor::None:
            pred.flat = g.concat(flatten_node(g, code_t.flat), flatten_node(g, code_tm1.flat));
            return pred;
        case Predictor::FixedA:
            pred.flat = g.add(g.scale(code_t.flat, cfg.a[0]), g.scale(code_tm1.flat, cfg.a[1]));
            return pred;
        case Predictor::MagPhase:
            pred.pooled = true;
            pred.m = g.scale(g.add(code_t.m, code_tm1.m), 0.5);
            pred.p = g.clamp(g.sub(g.scale(code_t.p, 2.0), code_tm1.p), -1.0, 1.0);
            return pred;
    }
    throw ContractError("unknown predictor");
}

struct LossBreakdown {
    double prediction = 0.0;  // 0.5 * L2^2 term
    double cosine = 0.0;      // curvature cosine in [-1, 1]
    double lambda = 0.0;
    double total = 0.0;       // prediction - lambda * cosine
};

// Fully wired Eq-style training graph for one triplet.
template <typename T>
struct LossGraph {
    Graph<T> g;
    std::vector<NodeId> param_ids;
    NodeId frame_tm1 = 0, frame_t = 0, frame_tp1 = 0;
    GraphCode code_tm1, code_t, code_tp1;
    GraphCode predicted_code;
    NodeId predicted_frame = 0;
    NodeId pred_term = 0, cos_term = 0, loss = 0;

    LossBreakdown breakdown(double lambda) const {
        LossBreakdown b;
        b.prediction = static_cast<double>(g.value(pred_term)[0]);
        b.cosine = static_cast<double>(g.value(cos_term)[0]);
        b.lambda = lambda;
        b.total = static_cast<double>(g.value(loss)[0]);
        return b;
    }
};

template <typename T>
void register_params(Graph<T>& g, const ModelParams<T>& params, std::vector<NodeId>& ids) {
    ids.clear();
    ids.reserve(params.tensors.size());
    for (const auto& t : params.tensors) ids.push_back(g.input(t, "param"));
}

// Builds the complete prediction + curvature loss on a fresh tape. The
// curvature arguments are the phase vectors when pooling is active, else the
// flat codes; the third-frame encoding participates in the gradient.
template <typename T>
LossGraph<T> build_loss_eq1(const Tensor<T>& x_tm1, const Tensor<T>& x_t, const Tensor<T>& x_tp1,
                            const ModelParams<T>& params, const ModelConfig& cfg) {
    const ModelDims dims = analyze(cfg);
    LossGraph<T> lg;
    Graph<T>& g = lg.g;
    register_params(g, params, lg.param_ids);
    lg.frame_tm1 = g.input(x_tm1, "frame");
    lg.frame_t = g.input(x_t, "frame");
    lg.frame_tp1 = g.input(x_tp1, "frame");

    std::size_t cursor_after_encoder = 0;
    lg.code_tm1 = build_encoder(g, lg.frame_tm1, cfg, dims, lg.param_ids, &cursor_after_encoder);
    std::size_t c2 = 0;
    lg.code_t = build_encoder(g, lg.frame_t, cfg, dims, lg.param_ids, &c2);
    std::size_t c3 = 0;
    lg.code_tp1 = build_encoder(g, lg.frame_tp1, cfg, dims, lg.param_ids, &c3);

    lg.predicted_code = build_prediction(g, lg.code_t, lg.code_tm1, cfg);
    lg.predicted_frame = build_decoder(g, lg.predicted_code, cfg, dims, lg.param_ids, cursor_after_encoder);

    lg.pred_term = build_l2_half(g, lg.predicted_frame, lg.frame_tp1);
    if (dims.pooled) {
        lg.cos_term = build_curvature_cosine(g, flatten_node(g, lg.code_tm1.p), flatten_node(g, lg.code_t.p),
                                             flatten_node(g, lg.code_tp1.p), cfg.eps_curv);
    } else {
        lg.cos_term = build_curvature_cosine(g, lg.code_tm1.flat, lg.code_t.flat, lg.code_tp1.flat, cfg.eps_curv);
    }
    lg.loss = g.add(lg.pred_term, g.scale(lg.cos_term, -cfg.lambda));
    return lg;
}

// ---- spec-surface conveniences (pure, value in / value out) ----

template <typename T>
struct Encoded {
    bool pooled = false;
    Tensor<T> flat;  // valid when !pooled
    Code<T> code;    // valid when pooled

    std::size_t dim() const { return pooled ? code.flat_dim() : flat.size(); }
};

template <typename T>
Encoded<T> encode(const Tensor<T>& frame, const ModelParams<T>& params, const ModelConfig& cfg) {
    const ModelDims dims = analyze(cfg);
    Graph<T> g;
    std::vector<NodeId> ids;
    register_params(g, params, ids);
    NodeId f = g.input(frame, "frame");
    GraphCode code = build_encoder(g, f, cfg, dims, ids);
    Encoded<T> out;
    out.pooled = code.pooled;
    if (code.pooled) {
        out.code = Code<T>{g.value(code.m), g.value(code.p), cfg.pool};
    } else {
        out.flat = g.value(code.flat);
    }
    return out;
}

template <typename T>
Tensor<T> decode(const Encoded<T>& code, const ModelParams<T>& params, const ModelConfig& cfg) {
    const ModelDims dims = analyze(cfg);
    Graph<T> g;
    std::vector<NodeId> ids;
    register_params(g, params, ids);
    std::size_t cursor = 0;
    // advance the cursor past encoder parameters without building encoder ops
    for (const auto& s : cfg.encoder)
        if (std::holds_alternative<ConvStage>(s) || std::holds_alternative<FcStage>(s)) cursor += 2;
    GraphCode gc;
    if (code.pooled) {
        gc.pooled = true;
        gc.m = g.input(code.code.m, "code.m");
        gc.p = g.input(code.code.p, "code.p");
    } else {
        gc.flat = g.input(code.flat, "code");
    }
    NodeId out = build_decoder(g, gc, cfg, dims, ids, cursor);
    return g.value(out);
}

// z_hat = a0 * z_t + a1 * z_tm1 on flat codes.
template <typename T>
Tensor<T> extrapolate_code(const Tensor<T>& z_t, const Tensor<T>& z_tm1, const std::array<double, 2>& a) {
    if (!z_t.same_shape(z_tm1))
        throw ShapeError("extrapolate_code: " + shape_str(z_t.shape()) + " vs " + shape_str(z_tm1.shape()));
    Tensor<T> out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(a[0] * static_cast<double>(z_t[i]) + a[1] * static_cast<double>(z_tm1[i]));
    return out;
}

// m averaged, p extrapolated at constant speed and clamped to [-1,1].
template <typename T>
Code<T> predict_mag_phase(const Code<T>& code_t, const Code<T>& code_tm1) {
    if (!(code_t.spec == code_tm1.spec)) throw ShapeError("predict_mag_phase: pool specs differ");
    if (!code_t.m.same_shape(code_tm1.m) || !code_t.p.same_shape(code_tm1.p))
        throw ShapeError("predict_mag_phase: code shapes differ");
    Code<T> out;
    out.spec = code_t.spec;
    out.m = Tensor<T>(code_t.m.shape());
    for (std::size_t i = 0; i < out.m.size(); ++i)
        out.m[i] = static_cast<T>(0.5 * (static_cast<double>(code_t.m[i]) + static_cast<double>(code_tm1.m[i])));
    out.p = Tensor<T>(code_t.p.shape());
    for (std::size_t i = 0; i < out.p.size(); ++i) {
        const double raw = 2.0 * static_cast<double>(code_t.p[i]) - static_cast<double>(code_tm1.p[i]);
        out.p[i] = static_cast<T>(std::min(1.0, std::max(-1.0, raw)));
    }
    return out;
}

// Scale-invariant local curvature measure on three rank-1 codes.
template <typename T>
double curvature_cosine(const Tensor<T>& z_tm1, const Tensor<T>& z_t, const Tensor<T>& z_tp1, double eps) {
    if (!z_tm1.same_shape(z_t) || !z_t.same_shape(z_tp1))
        throw ShapeError("curvature_cosine: shapes differ");
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double u = static_cast<double>(z_t[i]) - static_cast<double>(z_tm1[i]);
        const double v = static_cast<double>(z_tp1[i]) - static_cast<double>(z_t[i]);
        uv += u * v;
        uu += u * u;
        vv += v * v;
    }
    return uv / (std::max(std::sqrt(uu), eps) * std::max(std::sqrt(vv), eps));
}

template <typename T>
LossBreakdown loss_eq1(const Tensor<T>& x_tm1, const Tensor<T>& x_t, const Tensor<T>& x_tp1,
                       const ModelParams<T>& params, const ModelConfig& cfg) {
    LossGraph<T> lg = build_loss_eq1(x_tm1, x_t, x_tp1, params, cfg);
    return lg.breakdown(cfg.lambda);
}

}  // namespace linvid
