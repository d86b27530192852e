#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fedcctr/layers.hpp"

namespace fedcctr::nn {

// Central finite-difference verification of analytic gradients. The layer under
// test is reduced to a scalar by weighting its output with a fixed random
// matrix, so the upstream gradient is known exactly.

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst;  // "name[i]" of the worst slot
    bool passed(double tol) const { return max_rel_error < tol; }
};

constexpr double kGradCheckStep = 1e-5;

namespace detail {
inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({1e-8, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}
}  // namespace detail

// slots: named mutable matrices that feed `loss`; analytic: matching gradients.
inline GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                         std::vector<std::pair<std::string, Matrix*>> slots,
                                         const std::vector<Matrix>& analytic, double step = kGradCheckStep) {
    GradCheckReport rep;
    for (size_t s = 0; s < slots.size(); ++s) {
        Matrix* m = slots[s].second;
        for (size_t i = 0; i < m->size(); ++i) {
            const double saved = m->data[i];
            m->data[i] = saved + step;
            const double lp = loss();
            m->data[i] = saved - step;
            const double lm = loss();
            m->data[i] = saved;
            const double numeric = (lp - lm) / (2.0 * step);
            const double err = detail::rel_error(analytic[s].data[i], numeric);
            if (err > rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst = slots[s].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

inline Matrix random_weighting(int rows, int cols, uint64_t seed) {
    Rng rng(seed);
    Matrix c(rows, cols);
    for (double& v : c.data) v = rng.uniform() * 2.0 - 1.0;
    return c;
}

// --- per-layer checkers -----------------------------------------------------

inline GradCheckReport grad_check_linear(Linear& layer, Matrix input, uint64_t seed = 7) {
    Matrix out0 = linear_forward(input, layer);
    const Matrix c = random_weighting(out0.rows, out0.cols, seed);
    auto loss = [&]() { return dot(linear_forward(input, layer), c); };
    LinearGrads g = linear_backward(input, layer, c);
    return finite_diff_check(loss, {{"w", &layer.w}, {"b", &layer.b}, {"input", &input}}, {g.dw, g.db, g.dx});
}

inline GradCheckReport grad_check_attention(Matrix q, Matrix k, Matrix v, uint64_t seed = 7) {
    AttentionCache cache;
    Matrix out0 = attention(q, k, v, nullptr, &cache);
    const Matrix c = random_weighting(out0.rows, out0.cols, seed);
    auto loss = [&]() { return dot(attention(q, k, v), c); };
    AttentionGrads g = attention_backward(q, k, v, cache, c);
    return finite_diff_check(loss, {{"q", &q}, {"k", &k}, {"v", &v}}, {g.dq, g.dk, g.dv});
}

inline GradCheckReport grad_check_mha(MultiHeadAttention& layer, Matrix e, const ValidMask* mask = nullptr,
                                      uint64_t seed = 7) {
    MhaCache cache;
    Matrix out0 = multi_head_attention(e, layer, mask, &cache);
    const Matrix c = random_weighting(out0.rows, out0.cols, seed);
    auto loss = [&]() { return dot(multi_head_attention(e, layer, mask), c); };
    MhaGrads g = multi_head_attention_backward(e, layer, cache, c);
    return finite_diff_check(
        loss, {{"wq", &layer.wq}, {"wk", &layer.wk}, {"wv", &layer.wv}, {"wo", &layer.wo}, {"e", &e}},
        {g.dwq, g.dwk, g.dwv, g.dwo, g.de});
}

inline GradCheckReport grad_check_ffn(FeedForward& layer, Matrix s, uint64_t seed = 7) {
    FfnCache cache;
    Matrix out0 = ffn(s, layer, &cache);
    const Matrix c = random_weighting(out0.rows, out0.cols, seed);
    auto loss = [&]() { return dot(ffn(s, layer), c); };
    FfnGrads g = ffn_backward(s, layer, cache, c);
    return finite_diff_check(loss, {{"w1", &layer.w1}, {"b1", &layer.b1}, {"w2", &layer.w2}, {"b2", &layer.b2}, {"s", &s}},
                             {g.dw1, g.db1, g.dw2, g.db2, g.ds});
}

inline GradCheckReport grad_check_layer_norm(Matrix x, Matrix sub, Matrix gain, Matrix bias, uint64_t seed = 7) {
    LayerNormCache cache;
    Matrix out0 = residual_layer_norm(x, sub, gain, bias, &cache);
    const Matrix c = random_weighting(out0.rows, out0.cols, seed);
    auto loss = [&]() { return dot(residual_layer_norm(x, sub, gain, bias), c); };
    LayerNormGrads g = residual_layer_norm_backward(gain, cache, c);
    return finite_diff_check(loss, {{"x", &x}, {"sub", &sub}, {"gain", &gain}, {"bias", &bias}},
                             {g.dz, g.dz, g.dgain, g.dbias});
}

}  // namespace fedcctr::nn
