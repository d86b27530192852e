#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedcctr/matrix.hpp"

namespace fedcctr::nn {

// Validity mask over sequence positions. Bit i set means row i is a real event,
// clear means padding. Attention scores at padded keys are forced to zero
// probability and mean_pool skips padded rows.
using ValidMask = std::vector<uint8_t>;

inline int count_valid(const ValidMask& m) {
    int n = 0;
    for (uint8_t b : m) n += b ? 1 : 0;
    return n;
}

// ---------------------------------------------------------------------------
// scaled dot-product attention
// ---------------------------------------------------------------------------

struct AttentionCache {
    Matrix probs;  // softmax(QK^T/sqrt(dk)), padded keys carry zero probability
};

// softmax(Q K^T / sqrt(d_k)) V. If key_valid is given, padded keys are excluded
// from the softmax (score -> -inf). Queries are not masked here; callers ignore
// padded query rows downstream.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const ValidMask* key_valid = nullptr, AttentionCache* cache = nullptr) {
    check_shape(q.cols == k.cols, "attention: Q/K column mismatch");
    check_shape(k.rows == v.rows, "attention: K/V row mismatch");
    if (key_valid) {
        check_shape(int(key_valid->size()) == k.rows, "attention: mask length");
        if (count_valid(*key_valid) == 0) throw EmptySequenceError("attention over zero valid keys");
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(double(q.cols));
    Matrix scores = matmul_nt(q, k);
    for (double& s : scores.data) s *= inv_sqrt_dk;

    Matrix probs(scores.rows, scores.cols);
    for (int i = 0; i < scores.rows; ++i) {
        const double* sr = scores.row(i);
        double* pr = probs.row(i);
        double mx = -HUGE_VAL;
        for (int j = 0; j < scores.cols; ++j)
            if (!key_valid || (*key_valid)[j]) mx = std::max(mx, sr[j]);
        double denom = 0.0;
        for (int j = 0; j < scores.cols; ++j) {
            if (key_valid && !(*key_valid)[j]) {
                pr[j] = 0.0;
            } else {
                pr[j] = std::exp(sr[j] - mx);
                denom += pr[j];
            }
        }
        for (int j = 0; j < scores.cols; ++j) pr[j] /= denom;
    }
    Matrix out = matmul(probs, v);
    if (cache) cache->probs = std::move(probs);
    return out;
}

struct AttentionGrads {
    Matrix dq, dk, dv;
};

inline AttentionGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const AttentionCache& cache, const Matrix& dout) {
    const Matrix& p = cache.probs;
    const double inv_sqrt_dk = 1.0 / std::sqrt(double(q.cols));

    AttentionGrads g;
    g.dv = matmul_tn(p, dout);
    Matrix dp = matmul_nt(dout, v);

    // softmax backward per row: ds = p .* (dp - sum(dp .* p)); padded keys have
    // p == 0, so their score gradient vanishes automatically.
    Matrix ds(p.rows, p.cols);
    for (int i = 0; i < p.rows; ++i) {
        const double* pr = p.row(i);
        const double* dpr = dp.row(i);
        double* dsr = ds.row(i);
        double inner = 0.0;
        for (int j = 0; j < p.cols; ++j) inner += dpr[j] * pr[j];
        for (int j = 0; j < p.cols; ++j) dsr[j] = pr[j] * (dpr[j] - inner);
    }
    for (double& x : ds.data) x *= inv_sqrt_dk;

    g.dq = matmul(ds, k);
    g.dk = matmul_tn(ds, q);
    return g;
}

// ---------------------------------------------------------------------------
// multi-head attention with learned Q/K/V/O projections
// ---------------------------------------------------------------------------

struct MultiHeadAttention {
    int heads = 1;
    Matrix wq, wk, wv, wo;  // all d x d

    MultiHeadAttention() = default;
    MultiHeadAttention(int dim, int n_heads) : heads(n_heads), wq(dim, dim), wk(dim, dim), wv(dim, dim), wo(dim, dim) {
        if (n_heads <= 0 || dim % n_heads != 0)
            throw ConfigError("embedding dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(n_heads));
    }

    int dim() const { return wq.rows; }
};

struct MhaCache {
    Matrix q, k, v;                      // full projections
    std::vector<AttentionCache> head;    // per-head softmax caches
    Matrix concat;                       // concatenated head outputs
};

namespace detail {
inline Matrix col_slice(const Matrix& m, int c0, int c1) {
    Matrix out(m.rows, c1 - c0);
    for (int i = 0; i < m.rows; ++i)
        for (int j = c0; j < c1; ++j) out(i, j - c0) = m(i, j);
    return out;
}
inline void col_slice_add(Matrix& dst, const Matrix& src, int c0) {
    for (int i = 0; i < src.rows; ++i)
        for (int j = 0; j < src.cols; ++j) dst(i, c0 + j) += src(i, j);
}
}  // namespace detail

inline Matrix multi_head_attention(const Matrix& e, const MultiHeadAttention& p, const ValidMask* key_valid = nullptr,
                                   MhaCache* cache = nullptr) {
    check_shape(e.cols == p.dim(), "mha: input dim vs projections");
    const int d = p.dim();
    const int hd = d / p.heads;
    Matrix q = matmul(e, p.wq);
    Matrix k = matmul(e, p.wk);
    Matrix v = matmul(e, p.wv);

    Matrix concat(e.rows, d);
    std::vector<AttentionCache> caches(p.heads);
    for (int h = 0; h < p.heads; ++h) {
        Matrix qh = detail::col_slice(q, h * hd, (h + 1) * hd);
        Matrix kh = detail::col_slice(k, h * hd, (h + 1) * hd);
        Matrix vh = detail::col_slice(v, h * hd, (h + 1) * hd);
        Matrix oh = attention(qh, kh, vh, key_valid, &caches[h]);
        detail::col_slice_add(concat, oh, h * hd);
    }
    Matrix out = matmul(concat, p.wo);
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->head = std::move(caches);
        cache->concat = std::move(concat);
    }
    return out;
}

struct MhaGrads {
    Matrix de;
    Matrix dwq, dwk, dwv, dwo;
};

inline MhaGrads multi_head_attention_backward(const Matrix& e, const MultiHeadAttention& p, const MhaCache& cache,
                                              const Matrix& dout) {
    const int d = p.dim();
    const int hd = d / p.heads;

    MhaGrads g;
    g.dwo = matmul_tn(cache.concat, dout);
    Matrix dconcat = matmul_nt(dout, p.wo);

    Matrix dq(e.rows, d), dk(e.rows, d), dv(e.rows, d);
    for (int h = 0; h < p.heads; ++h) {
        Matrix qh = detail::col_slice(cache.q, h * hd, (h + 1) * hd);
        Matrix kh = detail::col_slice(cache.k, h * hd, (h + 1) * hd);
        Matrix vh = detail::col_slice(cache.v, h * hd, (h + 1) * hd);
        Matrix doh = detail::col_slice(dconcat, h * hd, (h + 1) * hd);
        AttentionGrads ag = attention_backward(qh, kh, vh, cache.head[h], doh);
        detail::col_slice_add(dq, ag.dq, h * hd);
        detail::col_slice_add(dk, ag.dk, h * hd);
        detail::col_slice_add(dv, ag.dv, h * hd);
    }
    g.dwq = matmul_tn(e, dq);
    g.dwk = matmul_tn(e, dk);
    g.dwv = matmul_tn(e, dv);
    g.de = matmul_nt(dq, p.wq);
    add_inplace(g.de, matmul_nt(dk, p.wk));
    add_inplace(g.de, matmul_nt(dv, p.wv));
    return g;
}

// ---------------------------------------------------------------------------
// position-wise feed-forward: ReLU(S W1 + b1) W2 + b2
// ---------------------------------------------------------------------------

struct FeedForward {
    Matrix w1, b1, w2, b2;  // b as 1 x n

    FeedForward() = default;
    FeedForward(int dim, int inner) : w1(dim, inner), b1(1, inner), w2(inner, dim), b2(1, dim) {}
};

struct FfnCache {
    Matrix hidden;  // post-ReLU activations
};

inline Matrix ffn(const Matrix& s, const FeedForward& p, FfnCache* cache = nullptr) {
    check_shape(s.cols == p.w1.rows, "ffn: input vs W1");
    Matrix h = matmul(s, p.w1);
    for (int i = 0; i < h.rows; ++i)
        for (int j = 0; j < h.cols; ++j) {
            double v = h(i, j) + p.b1.data[j];
            h(i, j) = v > 0.0 ? v : 0.0;
        }
    Matrix out = matmul(h, p.w2);
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += p.b2.data[j];
    if (cache) cache->hidden = std::move(h);
    return out;
}

struct FfnGrads {
    Matrix ds, dw1, db1, dw2, db2;
};

inline FfnGrads ffn_backward(const Matrix& s, const FeedForward& p, const FfnCache& cache, const Matrix& dout) {
    FfnGrads g;
    g.dw2 = matmul_tn(cache.hidden, dout);
    g.db2 = colsum(dout);
    Matrix dh = matmul_nt(dout, p.w2);
    // ReLU: post-activation zero means the pre-activation was clamped
    for (int i = 0; i < dh.rows; ++i)
        for (int j = 0; j < dh.cols; ++j)
            if (cache.hidden(i, j) == 0.0) dh(i, j) = 0.0;
    g.dw1 = matmul_tn(s, dh);
    g.db1 = colsum(dh);
    g.ds = matmul_nt(dh, p.w1);
    return g;
}

// ---------------------------------------------------------------------------
// residual connection + per-row layer normalization with affine gain/bias
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Matrix normed;             // (z - mu) * inv_std
    std::vector<double> inv_std;
};

inline Matrix residual_layer_norm(const Matrix& x, const Matrix& sub, const Matrix& gain, const Matrix& bias,
                                  LayerNormCache* cache = nullptr) {
    check_shape(x.same_shape(sub), "residual_layer_norm: x vs sublayer");
    check_shape(gain.cols == x.cols && bias.cols == x.cols, "residual_layer_norm: affine dims");
    const int d = x.cols;
    Matrix out(x.rows, d);
    Matrix normed(x.rows, d);
    std::vector<double> inv_std(x.rows);
    for (int i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x(i, j) + sub(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x(i, j) + sub(i, j) - mu;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[i] = inv;
        for (int j = 0; j < d; ++j) {
            const double n = (x(i, j) + sub(i, j) - mu) * inv;
            normed(i, j) = n;
            out(i, j) = gain.data[j] * n + bias.data[j];
        }
    }
    if (cache) {
        cache->normed = std::move(normed);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

struct LayerNormGrads {
    Matrix dz;  // gradient w.r.t. (x + sub); both inputs receive it
    Matrix dgain, dbias;
};

inline LayerNormGrads residual_layer_norm_backward(const Matrix& gain, const LayerNormCache& cache,
                                                   const Matrix& dout) {
    const int d = dout.cols;
    LayerNormGrads g;
    g.dgain = Matrix(1, d);
    g.dbias = Matrix(1, d);
    g.dz = Matrix(dout.rows, d);
    for (int i = 0; i < dout.rows; ++i) {
        const double* n = cache.normed.row(i);
        const double* dy = dout.row(i);
        double* dz = g.dz.row(i);
        double sum_dn = 0.0, sum_dn_n = 0.0;
        for (int j = 0; j < d; ++j) {
            g.dgain.data[j] += dy[j] * n[j];
            g.dbias.data[j] += dy[j];
            const double dn = dy[j] * gain.data[j];
            sum_dn += dn;
            sum_dn_n += dn * n[j];
        }
        const double inv = cache.inv_std[i];
        for (int j = 0; j < d; ++j) {
            const double dn = dy[j] * gain.data[j];
            dz[j] = inv * (dn - sum_dn / d - n[j] * sum_dn_n / d);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// masked mean pooling over valid rows
// ---------------------------------------------------------------------------

inline Matrix mean_pool(const Matrix& f, const ValidMask* valid = nullptr) {
    const int n = valid ? count_valid(*valid) : f.rows;
    if (n == 0) throw EmptySequenceError("mean_pool over zero valid rows");
    if (valid) check_shape(int(valid->size()) == f.rows, "mean_pool: mask length");
    Matrix out(1, f.cols);
    for (int i = 0; i < f.rows; ++i) {
        if (valid && !(*valid)[i]) continue;
        const double* fr = f.row(i);
        for (int j = 0; j < f.cols; ++j) out.data[j] += fr[j];
    }
    for (double& v : out.data) v /= n;
    return out;
}

inline Matrix mean_pool_backward(int rows, const Matrix& dh, const ValidMask* valid = nullptr) {
    const int n = valid ? count_valid(*valid) : rows;
    Matrix df(rows, dh.cols);
    for (int i = 0; i < rows; ++i) {
        if (valid && !(*valid)[i]) continue;
        for (int j = 0; j < dh.cols; ++j) df(i, j) = dh.data[j] / n;
    }
    return df;
}

// ---------------------------------------------------------------------------
// cosine similarity
// ---------------------------------------------------------------------------

constexpr double kDegenerateNorm = 1e-12;

inline double cosine_sim(const Matrix& a, const Matrix& b) {
    check_shape(a.size() == b.size(), "cosine_sim lengths");
    const double na = norm2(a), nb = norm2(b);
    if (na < kDegenerateNorm || nb < kDegenerateNorm)
        throw DegenerateVectorError("cosine_sim on near-zero vector");
    return dot(a, b) / (na * nb);
}

// d sim / d a and d sim / d b, each scaled by the upstream scalar
struct CosineGrads {
    Matrix da, db;
};

inline CosineGrads cosine_sim_backward(const Matrix& a, const Matrix& b, double upstream) {
    const double na = norm2(a), nb = norm2(b);
    const double s = dot(a, b) / (na * nb);
    CosineGrads g;
    g.da = Matrix(a.rows, a.cols);
    g.db = Matrix(b.rows, b.cols);
    for (size_t i = 0; i < a.size(); ++i) {
        g.da.data[i] = upstream * (b.data[i] / (na * nb) - s * a.data[i] / (na * na));
        g.db.data[i] = upstream * (a.data[i] / (na * nb) - s * b.data[i] / (nb * nb));
    }
    return g;
}

// ---------------------------------------------------------------------------
// linear layer (MLP building block)
// ---------------------------------------------------------------------------

struct Linear {
    Matrix w, b;  // w: in x out, b: 1 x out
    Linear() = default;
    Linear(int in, int out) : w(in, out), b(1, out) {}
};

inline Matrix linear_forward(const Matrix& x, const Linear& p) {
    check_shape(x.cols == p.w.rows, "linear: input vs weight");
    Matrix out = matmul(x, p.w);
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j) out(i, j) += p.b.data[j];
    return out;
}

struct LinearGrads {
    Matrix dx, dw, db;
};

inline LinearGrads linear_backward(const Matrix& x, const Linear& p, const Matrix& dout) {
    LinearGrads g;
    g.dw = matmul_tn(x, dout);
    g.db = colsum(dout);
    g.dx = matmul_nt(dout, p.w);
    return g;
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling); rate 0 is the identity
// ---------------------------------------------------------------------------

struct DropoutMask {
    Matrix keep;  // 0/1 entries pre-divided by keep probability
    bool active = false;
};

inline Matrix dropout(const Matrix& x, double rate, Rng* rng, DropoutMask* mask = nullptr) {
    if (rate <= 0.0 || rng == nullptr) {
        if (mask) mask->active = false;
        return x;
    }
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const double keep = 1.0 - rate;
    Matrix m(x.rows, x.cols);
    Matrix out(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) {
        const double k = rng->uniform() < rate ? 0.0 : 1.0 / keep;
        m.data[i] = k;
        out.data[i] = x.data[i] * k;
    }
    if (mask) {
        mask->keep = std::move(m);
        mask->active = true;
    }
    return out;
}

inline Matrix dropout_backward(const Matrix& dout, const DropoutMask& mask) {
    if (!mask.active) return dout;
    return hadamard(dout, mask.keep);
}

}  // namespace fedcctr::nn
