#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedcctr/layers.hpp"
#include "fedcctr/matrix.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::model {

using nn::Matrix;

// ---------------------------------------------------------------------------
// configuration and parameters
// ---------------------------------------------------------------------------

struct ModelConfig {
    int vocab_a = 0, vocab_b = 0;            // item vocabularies
    int feat_vocab_a = 0, feat_vocab_b = 0;  // augmented-feature vocabularies
    int side_vocab = 0;                      // user-profile attribute vocabulary
    int d_id = 16, d_feat = 8, d_pos = 8;    // item embedding parts, d_v = sum
    int d_o = 8;                             // side-information embedding dim
    int heads = 8;
    int d_ff = 0;  // FFN inner dim; 0 means 4 * d_v
    int max_len = 20;
    std::vector<int> mlp_dims{512, 256, 128};
    double dropout = 0.1;

    int d_v() const { return d_id + d_feat + d_pos; }
    int ffn_inner() const { return d_ff > 0 ? d_ff : 4 * d_v(); }
    int head_input_dim() const { return 2 * d_v() + d_o; }

    void validate() const {
        if (vocab_a <= 0 || vocab_b <= 0) throw ConfigError("item vocabularies must be nonempty");
        if (d_id <= 0 || d_feat <= 0 || d_pos <= 0 || d_o <= 0) throw ConfigError("embedding dims must be positive");
        if (heads <= 0 || d_v() % heads != 0)
            throw ConfigError("d_v " + std::to_string(d_v()) + " not divisible by heads " + std::to_string(heads));
        if (max_len <= 0) throw ConfigError("max_len must be positive");
        if (mlp_dims.empty()) throw ConfigError("mlp_dims must be nonempty");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
    }
};

struct TransformerStack {
    nn::MultiHeadAttention mha;
    Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    nn::FeedForward ffn;

    TransformerStack() = default;
    TransformerStack(int d, int heads, int inner)
        : mha(d, heads), ln1_gain(1, d, 1.0), ln1_bias(1, d), ln2_gain(1, d, 1.0), ln2_bias(1, d), ffn(d, inner) {}
};

struct MlpHead {
    std::vector<nn::Linear> layers;  // hidden layers with ReLU, then a scalar output layer

    MlpHead() = default;
    MlpHead(int input_dim, const std::vector<int>& dims) {
        int in = input_dim;
        for (int d : dims) {
            layers.emplace_back(in, d);
            in = d;
        }
        layers.emplace_back(in, 1);
    }
};

// The complete parameter set: embedding tables, three transformer stacks and
// two prediction heads. flatten()/unflatten() round-trip in visit order.
struct ModelParams {
    ModelConfig cfg;
    Matrix item_a, item_b;  // |V| x d_id, shared with the mixed domain
    Matrix feat_a, feat_b;  // |F| x d_feat
    Matrix pos_a, pos_b, pos_m;
    Matrix side_a, side_b;  // |S| x d_o
    TransformerStack t_a, t_b, t_m;
    MlpHead f_a, f_b;

    static ModelParams zeros(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams p;
        p.cfg = cfg;
        const int dv = cfg.d_v();
        p.item_a = Matrix(cfg.vocab_a, cfg.d_id);
        p.item_b = Matrix(cfg.vocab_b, cfg.d_id);
        p.feat_a = Matrix(cfg.feat_vocab_a, cfg.d_feat);
        p.feat_b = Matrix(cfg.feat_vocab_b, cfg.d_feat);
        p.pos_a = Matrix(cfg.max_len, cfg.d_pos);
        p.pos_b = Matrix(cfg.max_len, cfg.d_pos);
        p.pos_m = Matrix(cfg.max_len, cfg.d_pos);
        p.side_a = Matrix(cfg.side_vocab, cfg.d_o);
        p.side_b = Matrix(cfg.side_vocab, cfg.d_o);
        p.t_a = TransformerStack(dv, cfg.heads, cfg.ffn_inner());
        p.t_b = TransformerStack(dv, cfg.heads, cfg.ffn_inner());
        p.t_m = TransformerStack(dv, cfg.heads, cfg.ffn_inner());
        // layer-norm gains start at zero here; init() and zeros-as-gradient both want that
        p.t_a.ln1_gain.fill(0.0);
        p.t_a.ln2_gain.fill(0.0);
        p.t_b.ln1_gain.fill(0.0);
        p.t_b.ln2_gain.fill(0.0);
        p.t_m.ln1_gain.fill(0.0);
        p.t_m.ln2_gain.fill(0.0);
        p.f_a = MlpHead(cfg.head_input_dim(), cfg.mlp_dims);
        p.f_b = MlpHead(cfg.head_input_dim(), cfg.mlp_dims);
        return p;
    }

    // Xavier initialization for all weights; layer-norm gains one, biases zero.
    static ModelParams init(const ModelConfig& cfg, Rng& rng) {
        ModelParams p = zeros(cfg);
        auto xavier = [&rng](Matrix& m) {
            if (!m.empty()) m.init_xavier(rng);
        };
        xavier(p.item_a);
        xavier(p.item_b);
        xavier(p.feat_a);
        xavier(p.feat_b);
        xavier(p.pos_a);
        xavier(p.pos_b);
        xavier(p.pos_m);
        xavier(p.side_a);
        xavier(p.side_b);
        for (TransformerStack* t : {&p.t_a, &p.t_b, &p.t_m}) {
            xavier(t->mha.wq);
            xavier(t->mha.wk);
            xavier(t->mha.wv);
            xavier(t->mha.wo);
            t->ln1_gain.fill(1.0);
            t->ln2_gain.fill(1.0);
            xavier(t->ffn.w1);
            xavier(t->ffn.w2);
        }
        for (MlpHead* h : {&p.f_a, &p.f_b})
            for (nn::Linear& l : h->layers) xavier(l.w);
        return p;
    }

    template <class Self, class F>
    static void visit_impl(Self& self, F&& fn) {
        fn("item_a", self.item_a);
        fn("item_b", self.item_b);
        fn("feat_a", self.feat_a);
        fn("feat_b", self.feat_b);
        fn("pos_a", self.pos_a);
        fn("pos_b", self.pos_b);
        fn("pos_m", self.pos_m);
        fn("side_a", self.side_a);
        fn("side_b", self.side_b);
        const char* stack_names[3] = {"t_a", "t_b", "t_m"};
        auto stacks = {&self.t_a, &self.t_b, &self.t_m};
        int si = 0;
        for (auto* t : stacks) {
            const std::string base = stack_names[si++];
            fn(base + ".wq", t->mha.wq);
            fn(base + ".wk", t->mha.wk);
            fn(base + ".wv", t->mha.wv);
            fn(base + ".wo", t->mha.wo);
            fn(base + ".ln1_gain", t->ln1_gain);
            fn(base + ".ln1_bias", t->ln1_bias);
            fn(base + ".ffn_w1", t->ffn.w1);
            fn(base + ".ffn_b1", t->ffn.b1);
            fn(base + ".ffn_w2", t->ffn.w2);
            fn(base + ".ffn_b2", t->ffn.b2);
            fn(base + ".ln2_gain", t->ln2_gain);
            fn(base + ".ln2_bias", t->ln2_bias);
        }
        const char* head_names[2] = {"f_a", "f_b"};
        auto heads = {&self.f_a, &self.f_b};
        int hi = 0;
        for (auto* h : heads) {
            const std::string base = head_names[hi++];
            for (size_t i = 0; i < h->layers.size(); ++i) {
                fn(base + ".w" + std::to_string(i), h->layers[i].w);
                fn(base + ".b" + std::to_string(i), h->layers[i].b);
            }
        }
    }

    template <class F>
    void visit(F&& fn) {
        visit_impl(*this, fn);
    }
    template <class F>
    void visit(F&& fn) const {
        visit_impl(*this, fn);
    }

    size_t param_count() const {
        size_t n = 0;
        visit([&](const std::string&, const Matrix& m) { n += m.size(); });
        return n;
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(param_count());
        visit([&](const std::string&, const Matrix& m) { out.insert(out.end(), m.data.begin(), m.data.end()); });
        return out;
    }

    void unflatten(std::span<const double> flat) {
        size_t off = 0;
        visit([&](const std::string&, Matrix& m) {
            if (off + m.size() > flat.size()) throw DimensionError("unflatten: vector too short");
            std::copy(flat.begin() + off, flat.begin() + off + m.size(), m.data.begin());
            off += m.size();
        });
        if (off != flat.size()) throw DimensionError("unflatten: vector length mismatch");
    }

    void axpy(double alpha, const ModelParams& other) {
        std::vector<const Matrix*> theirs;
        other.visit([&](const std::string&, const Matrix& m) { theirs.push_back(&m); });
        size_t i = 0;
        visit([&](const std::string&, Matrix& m) { nn::axpy(m, alpha, *theirs[i++]); });
    }

    // Parameter count as a pure function of the configuration.
    static size_t expected_param_count(const ModelConfig& cfg) {
        const size_t dv = cfg.d_v();
        const size_t inner = cfg.ffn_inner();
        size_t n = 0;
        n += size_t(cfg.vocab_a) * cfg.d_id + size_t(cfg.vocab_b) * cfg.d_id;
        n += size_t(cfg.feat_vocab_a) * cfg.d_feat + size_t(cfg.feat_vocab_b) * cfg.d_feat;
        n += 3 * size_t(cfg.max_len) * cfg.d_pos;
        n += 2 * size_t(cfg.side_vocab) * cfg.d_o;
        n += 3 * (4 * dv * dv + 4 * dv + dv * inner + inner + inner * dv + dv);
        size_t in = cfg.head_input_dim();
        size_t head = 0;
        for (int d : cfg.mlp_dims) {
            head += in * d + d;
            in = d;
        }
        head += in + 1;
        n += 2 * head;
        return n;
    }
};

inline const TransformerStack& stack_for(const ModelParams& p, char enc_domain) {
    switch (enc_domain) {
        case 'A': return p.t_a;
        case 'B': return p.t_b;
        default: return p.t_m;
    }
}
inline TransformerStack& stack_for(ModelParams& p, char enc_domain) {
    return const_cast<TransformerStack&>(stack_for(const_cast<const ModelParams&>(p), enc_domain));
}

// ---------------------------------------------------------------------------
// sequence embedding: [id-part | feature-part | position-part] per event
// ---------------------------------------------------------------------------

struct Token {
    int item = -1;
    char domain = 'A';       // which item/feature table the token uses
    std::vector<int> feats;  // augmented-feature vocabulary indices
};

struct SeqInput {
    std::vector<Token> toks;
};

struct EmbedCache {
    std::vector<Token> toks;  // post-truncation view used by the forward pass
    char enc_domain = 'A';
};

inline Matrix embed_sequence(const SeqInput& seq, char enc_domain, const ModelParams& p, nn::ValidMask* valid,
                             EmbedCache* cache = nullptr) {
    const ModelConfig& cfg = p.cfg;
    // keep the most recent max_len events
    const size_t n_all = seq.toks.size();
    const size_t start = n_all > size_t(cfg.max_len) ? n_all - cfg.max_len : 0;
    std::vector<Token> toks(seq.toks.begin() + start, seq.toks.end());
    const int n = int(toks.size());

    const Matrix& pos_table = enc_domain == 'A' ? p.pos_a : (enc_domain == 'B' ? p.pos_b : p.pos_m);
    Matrix e(n, cfg.d_v());
    for (int i = 0; i < n; ++i) {
        const Token& t = toks[i];
        const Matrix& items = t.domain == 'A' ? p.item_a : p.item_b;
        const Matrix& feats = t.domain == 'A' ? p.feat_a : p.feat_b;
        if (t.item < 0 || t.item >= items.rows)
            throw VocabularyError("item index " + std::to_string(t.item) + " outside domain " +
                                  std::string(1, t.domain) + " vocabulary");
        double* row = e.row(i);
        const double* id_row = items.row(t.item);
        for (int j = 0; j < cfg.d_id; ++j) row[j] = id_row[j];
        if (!t.feats.empty()) {
            const double inv = 1.0 / double(t.feats.size());
            for (int f : t.feats) {
                if (f < 0 || f >= feats.rows) throw VocabularyError("feature index outside vocabulary");
                const double* frow = feats.row(f);
                for (int j = 0; j < cfg.d_feat; ++j) row[cfg.d_id + j] += frow[j] * inv;
            }
        }
        const double* prow = pos_table.row(i);
        for (int j = 0; j < cfg.d_pos; ++j) row[cfg.d_id + cfg.d_feat + j] = prow[j];
    }
    if (valid) valid->assign(n, 1);
    if (cache) {
        cache->toks = std::move(toks);
        cache->enc_domain = enc_domain;
    }
    return e;
}

inline void embed_backward(const EmbedCache& cache, const Matrix& de, ModelParams& grads) {
    const ModelConfig& cfg = grads.cfg;
    Matrix& pos_table = cache.enc_domain == 'A' ? grads.pos_a : (cache.enc_domain == 'B' ? grads.pos_b : grads.pos_m);
    for (int i = 0; i < int(cache.toks.size()); ++i) {
        const Token& t = cache.toks[i];
        Matrix& items = t.domain == 'A' ? grads.item_a : grads.item_b;
        Matrix& feats = t.domain == 'A' ? grads.feat_a : grads.feat_b;
        const double* row = de.row(i);
        double* id_row = items.row(t.item);
        for (int j = 0; j < cfg.d_id; ++j) id_row[j] += row[j];
        if (!t.feats.empty()) {
            const double inv = 1.0 / double(t.feats.size());
            for (int f : t.feats) {
                double* frow = feats.row(f);
                for (int j = 0; j < cfg.d_feat; ++j) frow[j] += row[cfg.d_id + j] * inv;
            }
        }
        double* prow = pos_table.row(i);
        for (int j = 0; j < cfg.d_pos; ++j) prow[j] += row[cfg.d_id + cfg.d_feat + j];
    }
}

// ---------------------------------------------------------------------------
// domain encoder: MHA -> residual+LN -> FFN -> residual+LN -> masked mean pool
// ---------------------------------------------------------------------------

struct EncodeCache {
    Matrix e;
    nn::ValidMask valid;
    nn::MhaCache mha;
    nn::DropoutMask drop1, drop2;
    Matrix s_drop;
    nn::LayerNormCache ln1;
    Matrix z1;
    nn::FfnCache ffn;
    Matrix f_drop;
    nn::LayerNormCache ln2;
};

inline Matrix encode_embedded(const Matrix& e, const nn::ValidMask& valid, const TransformerStack& stack,
                              double dropout_rate, Rng* drop_rng, EncodeCache* cache) {
    if (nn::count_valid(valid) == 0) throw EmptySequenceError("encode over an empty sequence");
    EncodeCache local;
    EncodeCache& c = cache ? *cache : local;
    c.e = e;
    c.valid = valid;
    Matrix s = nn::multi_head_attention(e, stack.mha, &valid, &c.mha);
    c.s_drop = nn::dropout(s, dropout_rate, drop_rng, &c.drop1);
    c.z1 = nn::residual_layer_norm(e, c.s_drop, stack.ln1_gain, stack.ln1_bias, &c.ln1);
    Matrix f = nn::ffn(c.z1, stack.ffn, &c.ffn);
    c.f_drop = nn::dropout(f, dropout_rate, drop_rng, &c.drop2);
    Matrix z2 = nn::residual_layer_norm(c.z1, c.f_drop, stack.ln2_gain, stack.ln2_bias, &c.ln2);
    return nn::mean_pool(z2, &valid);
}

// Convenience wrapper: embed then encode with the domain's own stack.
inline Matrix encode_domain(const SeqInput& seq, char enc_domain, const ModelParams& p, double dropout_rate = 0.0,
                            Rng* drop_rng = nullptr, EncodeCache* enc_cache = nullptr,
                            EmbedCache* emb_cache = nullptr) {
    nn::ValidMask valid;
    Matrix e = embed_sequence(seq, enc_domain, p, &valid, emb_cache);
    return encode_embedded(e, valid, stack_for(p, enc_domain), dropout_rate, drop_rng, enc_cache);
}

// Backward through the encoder; returns the embedding gradient and accumulates
// stack gradients.
inline Matrix encode_backward(const TransformerStack& stack, const EncodeCache& c, const Matrix& dh,
                              TransformerStack& gstack) {
    Matrix dz2 = nn::mean_pool_backward(c.e.rows, dh, &c.valid);
    nn::LayerNormGrads ln2 = nn::residual_layer_norm_backward(stack.ln2_gain, c.ln2, dz2);
    nn::add_inplace(gstack.ln2_gain, ln2.dgain);
    nn::add_inplace(gstack.ln2_bias, ln2.dbias);
    Matrix dz1 = ln2.dz;
    Matrix df = nn::dropout_backward(ln2.dz, c.drop2);
    nn::FfnGrads fg = nn::ffn_backward(c.z1, stack.ffn, c.ffn, df);
    nn::add_inplace(gstack.ffn.w1, fg.dw1);
    nn::add_inplace(gstack.ffn.b1, fg.db1);
    nn::add_inplace(gstack.ffn.w2, fg.dw2);
    nn::add_inplace(gstack.ffn.b2, fg.db2);
    nn::add_inplace(dz1, fg.ds);
    nn::LayerNormGrads ln1 = nn::residual_layer_norm_backward(stack.ln1_gain, c.ln1, dz1);
    nn::add_inplace(gstack.ln1_gain, ln1.dgain);
    nn::add_inplace(gstack.ln1_bias, ln1.dbias);
    Matrix de = ln1.dz;
    Matrix ds = nn::dropout_backward(ln1.dz, c.drop1);
    nn::MhaGrads mg = nn::multi_head_attention_backward(c.e, stack.mha, c.mha, ds);
    nn::add_inplace(gstack.mha.wq, mg.dwq);
    nn::add_inplace(gstack.mha.wk, mg.dwk);
    nn::add_inplace(gstack.mha.wv, mg.dwv);
    nn::add_inplace(gstack.mha.wo, mg.dwo);
    nn::add_inplace(de, mg.de);
    return de;
}

// ---------------------------------------------------------------------------
// side-information embedding: mean over the user's profile attribute rows
// ---------------------------------------------------------------------------

inline Matrix side_embedding(std::span<const int> tokens, const Matrix& table, int d_o) {
    Matrix out(1, d_o);
    if (tokens.empty()) return out;
    const double inv = 1.0 / double(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= table.rows) throw VocabularyError("side token outside vocabulary");
        const double* row = table.row(t);
        for (int j = 0; j < d_o; ++j) out.data[j] += row[j] * inv;
    }
    return out;
}

inline void side_embedding_backward(std::span<const int> tokens, const Matrix& dout, Matrix& table_grad) {
    if (tokens.empty()) return;
    const double inv = 1.0 / double(tokens.size());
    for (int t : tokens) {
        double* row = table_grad.row(t);
        for (size_t j = 0; j < dout.size(); ++j) row[j] += dout.data[j] * inv;
    }
}

// ---------------------------------------------------------------------------
// prediction heads
// ---------------------------------------------------------------------------

struct HeadCache {
    std::vector<Matrix> acts;  // acts[0] = input, acts[i] = post-ReLU hidden i
};

inline double head_forward(const Matrix& x, const MlpHead& head, HeadCache* cache = nullptr) {
    HeadCache local;
    HeadCache& c = cache ? *cache : local;
    c.acts.clear();
    c.acts.push_back(x);
    for (size_t i = 0; i + 1 < head.layers.size(); ++i) {
        Matrix z = nn::linear_forward(c.acts.back(), head.layers[i]);
        for (double& v : z.data) v = v > 0.0 ? v : 0.0;
        c.acts.push_back(std::move(z));
    }
    Matrix logit = nn::linear_forward(c.acts.back(), head.layers.back());
    return logit.data[0];
}

inline Matrix head_backward(const MlpHead& head, const HeadCache& cache, double dlogit, MlpHead& ghead) {
    Matrix d(1, 1, dlogit);
    for (size_t li = head.layers.size(); li-- > 0;) {
        const Matrix& input = cache.acts[li];
        nn::LinearGrads g = nn::linear_backward(input, head.layers[li], d);
        nn::add_inplace(ghead.layers[li].w, g.dw);
        nn::add_inplace(ghead.layers[li].b, g.db);
        d = std::move(g.dx);
        if (li > 0) {  // through the ReLU that produced this input
            for (size_t j = 0; j < d.size(); ++j)
                if (input.data[j] == 0.0) d.data[j] = 0.0;
        }
    }
    return d;
}

inline double sigmoid(double z) {
    if (z >= 0.0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// CTR head over [h_domain | h_M | e_side]; output strictly inside (0,1).
inline double predict_ctr(const Matrix& h_domain, const Matrix& h_m, const Matrix& e_side, const MlpHead& head,
                          HeadCache* cache = nullptr) {
    const size_t in = h_domain.size() + h_m.size() + e_side.size();
    if (head.layers.empty() || size_t(head.layers.front().w.rows) != in)
        throw DimensionError("prediction head input dim " + std::to_string(head.layers.front().w.rows) +
                             " vs concatenated parts " + std::to_string(in));
    Matrix x(1, int(in));
    size_t off = 0;
    for (const Matrix* part : {&h_domain, &h_m, &e_side}) {
        std::copy(part->data.begin(), part->data.end(), x.data.begin() + off);
        off += part->size();
    }
    const double p = sigmoid(head_forward(x, head, cache));
    const double lo = 1e-15;
    return std::min(1.0 - lo, std::max(lo, p));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct DomainRepresentations {
    Matrix h_a, h_b, h_m;      // encodings of the augmented sequences
    Matrix h_a_orig, h_b_orig; // encodings of the original sequences
};

// hinge alignment: (1/N) sum_i [max(0, a - sim(hA,hA')) + max(0, a - sim(hB,hB'))]
inline double loss_idra(std::span<const DomainRepresentations> reps, double alpha) {
    if (reps.empty()) throw EmptySequenceError("loss_idra on empty batch");
    double total = 0.0;
    for (const auto& r : reps) {
        total += std::max(0.0, alpha - nn::cosine_sim(r.h_a, r.h_a_orig));
        total += std::max(0.0, alpha - nn::cosine_sim(r.h_b, r.h_b_orig));
    }
    return total / double(reps.size());
}

namespace detail {
// log(exp(a) + exp(b)) with max-subtraction
inline double lse2(double a, double b) {
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}
}  // namespace detail

struct CdrdGrads {
    double value = 0.0;
    std::vector<double> d_sim_am, d_sim_bm, d_sim_ab;
};

// -(1/N) sum_i log[(e^{sim(hM,hA)/tau} + e^{sim(hM,hB)/tau}) / sum_j e^{sim(hA_j,hB_j)/tau}]
// evaluated with max-subtracted exponents.
inline CdrdGrads cdrd_from_sims(std::span<const double> sim_am, std::span<const double> sim_bm,
                                std::span<const double> sim_ab, double tau) {
    if (tau <= 0.0) throw ConfigError("temperature tau must be > 0");
    const size_t n = sim_am.size();
    if (n == 0) throw EmptySequenceError("loss_cdrd on empty batch");
    CdrdGrads out;
    out.d_sim_am.assign(n, 0.0);
    out.d_sim_bm.assign(n, 0.0);
    out.d_sim_ab.assign(n, 0.0);

    double den_max = -HUGE_VAL;
    for (size_t j = 0; j < n; ++j) den_max = std::max(den_max, sim_ab[j] / tau);
    double den_sum = 0.0;
    for (size_t j = 0; j < n; ++j) den_sum += std::exp(sim_ab[j] / tau - den_max);
    const double log_den = den_max + std::log(den_sum);

    double value = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double xa = sim_am[i] / tau, xb = sim_bm[i] / tau;
        const double log_num = detail::lse2(xa, xb);
        value += log_num - log_den;
        const double wa = std::exp(xa - log_num);
        const double wb = std::exp(xb - log_num);
        out.d_sim_am[i] = -wa / (tau * double(n));
        out.d_sim_bm[i] = -wb / (tau * double(n));
    }
    // the denominator is shared by all N numerator terms, so its softmax weight
    // enters the gradient unscaled by N
    for (size_t j = 0; j < n; ++j) {
        const double wj = std::exp(sim_ab[j] / tau - log_den);
        out.d_sim_ab[j] = wj / tau;
    }
    out.value = -value / double(n);
    return out;
}

inline double loss_cdrd(std::span<const DomainRepresentations> reps, double tau) {
    std::vector<double> am(reps.size()), bm(reps.size()), ab(reps.size());
    for (size_t i = 0; i < reps.size(); ++i) {
        am[i] = nn::cosine_sim(reps[i].h_m, reps[i].h_a);
        bm[i] = nn::cosine_sim(reps[i].h_m, reps[i].h_b);
        ab[i] = nn::cosine_sim(reps[i].h_a, reps[i].h_b);
    }
    return cdrd_from_sims(am, bm, ab, tau).value;
}

constexpr double kBceClamp = 1e-7;

inline double loss_bce(std::span<const double> predictions, std::span<const double> labels) {
    if (predictions.empty()) throw EmptySequenceError("loss_bce on empty batch");
    if (predictions.size() != labels.size()) throw DimensionError("loss_bce lengths");
    double total = 0.0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        const double p = std::min(1.0 - kBceClamp, std::max(kBceClamp, predictions[i]));
        total += labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    return -total / double(predictions.size());
}

inline double loss_total(double l_a, double l_b, double l_idra, double l_cdrd, double lambda1, double lambda2) {
    if (lambda1 < 0.0 || lambda1 > 1.0 || lambda2 < 0.0 || lambda2 > 1.0)
        throw ConfigError("lambda weights must be in [0,1]");
    return l_a + l_b + lambda1 * l_idra + lambda2 * l_cdrd;
}

// ---------------------------------------------------------------------------
// training batches and the full backward pass
// ---------------------------------------------------------------------------

struct Instance {
    char domain = 'A';
    double label = 1.0;
    int target_item = -1;
    SeqInput target_seq;  // domain history with the target appended as the final event
};

struct UserBatch {
    SeqInput aug_a, aug_b, mixed, orig_a, orig_b;
    std::vector<int> side_tokens;
    std::vector<Instance> instances;
};

struct LossHyper {
    double lambda1 = 0.3;
    double lambda2 = 0.5;
    double alpha = 0.5;
    double tau = 0.1;
};

struct LossBreakdown {
    double total = 0.0;
    double bce_a = 0.0, bce_b = 0.0;
    double idra = 0.0, cdrd = 0.0;
    int n_a = 0, n_b = 0;
};

namespace detail {

struct EncodeSlot {
    Matrix h;
    EncodeCache enc;
    EmbedCache emb;
    Matrix dh;
    bool computed = false;

    void compute(const SeqInput& seq, char enc_domain, const ModelParams& p, double dropout_rate, Rng* rng) {
        if (computed) return;
        nn::ValidMask valid;
        Matrix e = embed_sequence(seq, enc_domain, p, &valid, &emb);
        h = encode_embedded(e, valid, stack_for(p, enc_domain), dropout_rate, rng, &enc);
        dh = Matrix(1, h.cols);
        computed = true;
    }

    void backprop(char enc_domain, const ModelParams& p, ModelParams* grads) {
        if (!computed || !grads) return;
        Matrix de = encode_backward(stack_for(p, enc_domain), enc, dh, stack_for(*grads, enc_domain));
        embed_backward(emb, de, *grads);
    }
};

}  // namespace detail

// Forward pass over a multi-user batch; when `grads` is non-null the analytic
// gradient of the batch loss (mean of per-user losses) is accumulated into it.
// Dropout streams derive from (dropout_seed, user, slot) so the loss value is
// reproducible for a fixed seed.
inline LossBreakdown model_loss_and_grad(std::span<const UserBatch> batch, const ModelParams& p,
                                         const LossHyper& hy, double dropout_rate, uint64_t dropout_seed,
                                         ModelParams* grads) {
    if (batch.empty()) throw EmptySequenceError("model batch with no users");
    if (hy.lambda1 < 0.0 || hy.lambda1 > 1.0 || hy.lambda2 < 0.0 || hy.lambda2 > 1.0)
        throw ConfigError("lambda weights must be in [0,1]");
    if (hy.tau <= 0.0) throw ConfigError("temperature tau must be > 0");

    const double user_w = 1.0 / double(batch.size());
    LossBreakdown agg;
    double total = 0.0;

    for (size_t ui = 0; ui < batch.size(); ++ui) {
        const UserBatch& user = batch[ui];
        const size_t n = user.instances.size();
        if (n == 0) throw EmptySequenceError("user batch with no instances");

        auto drop_rng_for = [&](uint64_t slot) {
            return Rng(derive_stream(dropout_seed, "dropout", ui, slot));
        };
        const bool want_orig = hy.lambda1 != 0.0;

        detail::EncodeSlot aug_a, aug_b, mixed, orig_a, orig_b;
        std::vector<detail::EncodeSlot> tgt(n);

        {
            Rng r = drop_rng_for(0);
            mixed.compute(user.mixed, 'M', p, dropout_rate, &r);
        }
        // plain per-domain encodes back every instance whose target lives in the
        // other domain; instances in their own domain use the target encode
        bool need_plain_a = false, need_plain_b = false;
        for (const Instance& ins : user.instances) {
            if (ins.domain != 'A') need_plain_a = true;
            if (ins.domain != 'B') need_plain_b = true;
        }
        if (need_plain_a) {
            Rng r = drop_rng_for(1);
            aug_a.compute(user.aug_a, 'A', p, dropout_rate, &r);
        }
        if (need_plain_b) {
            Rng r = drop_rng_for(2);
            aug_b.compute(user.aug_b, 'B', p, dropout_rate, &r);
        }
        if (want_orig) {
            Rng ra = drop_rng_for(3), rb = drop_rng_for(4);
            orig_a.compute(user.orig_a, 'A', p, dropout_rate, &ra);
            orig_b.compute(user.orig_b, 'B', p, dropout_rate, &rb);
        }
        for (size_t i = 0; i < n; ++i) {
            Rng r = drop_rng_for(8 + i);
            tgt[i].compute(user.instances[i].target_seq, user.instances[i].domain, p, dropout_rate, &r);
        }

        const Matrix e_side_a = side_embedding(user.side_tokens, p.side_a, p.cfg.d_o);
        const Matrix e_side_b = side_embedding(user.side_tokens, p.side_b, p.cfg.d_o);

        auto h_a_of = [&](size_t i) -> const Matrix& {
            return user.instances[i].domain == 'A' ? tgt[i].h : aug_a.h;
        };
        auto h_b_of = [&](size_t i) -> const Matrix& {
            return user.instances[i].domain == 'B' ? tgt[i].h : aug_b.h;
        };
        auto dh_a_of = [&](size_t i) -> Matrix& { return user.instances[i].domain == 'A' ? tgt[i].dh : aug_a.dh; };
        auto dh_b_of = [&](size_t i) -> Matrix& { return user.instances[i].domain == 'B' ? tgt[i].dh : aug_b.dh; };

        // predictions + BCE
        std::vector<HeadCache> head_caches(n);
        std::vector<double> preds(n);
        int n_a = 0, n_b = 0;
        for (size_t i = 0; i < n; ++i) {
            const Instance& ins = user.instances[i];
            const bool is_a = ins.domain == 'A';
            preds[i] = predict_ctr(is_a ? h_a_of(i) : h_b_of(i), mixed.h, is_a ? e_side_a : e_side_b,
                                   is_a ? p.f_a : p.f_b, &head_caches[i]);
            (is_a ? n_a : n_b)++;
        }
        double l_a = 0.0, l_b = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double pc = std::min(1.0 - kBceClamp, std::max(kBceClamp, preds[i]));
            const double term = -(user.instances[i].label * std::log(pc) +
                                  (1.0 - user.instances[i].label) * std::log(1.0 - pc));
            (user.instances[i].domain == 'A' ? l_a : l_b) += term;
        }
        if (n_a > 0) l_a /= n_a;
        if (n_b > 0) l_b /= n_b;

        // IDRA
        double l_idra = 0.0;
        std::vector<double> sim_a(n, 0.0), sim_b(n, 0.0);
        if (want_orig) {
            for (size_t i = 0; i < n; ++i) {
                sim_a[i] = nn::cosine_sim(h_a_of(i), orig_a.h);
                sim_b[i] = nn::cosine_sim(h_b_of(i), orig_b.h);
                l_idra += std::max(0.0, hy.alpha - sim_a[i]) + std::max(0.0, hy.alpha - sim_b[i]);
            }
            l_idra /= double(n);
        }

        // CDRD
        double l_cdrd = 0.0;
        CdrdGrads cg;
        if (hy.lambda2 != 0.0) {
            std::vector<double> am(n), bm(n), ab(n);
            for (size_t i = 0; i < n; ++i) {
                am[i] = nn::cosine_sim(mixed.h, h_a_of(i));
                bm[i] = nn::cosine_sim(mixed.h, h_b_of(i));
                ab[i] = nn::cosine_sim(h_a_of(i), h_b_of(i));
            }
            cg = cdrd_from_sims(am, bm, ab, hy.tau);
            l_cdrd = cg.value;
        }

        const double user_loss = l_a + l_b + hy.lambda1 * l_idra + hy.lambda2 * l_cdrd;
        total += user_w * user_loss;
        agg.bce_a += user_w * l_a;
        agg.bce_b += user_w * l_b;
        agg.idra += user_w * l_idra;
        agg.cdrd += user_w * l_cdrd;
        agg.n_a += n_a;
        agg.n_b += n_b;

        if (!grads) continue;

        // ---- backward ----
        for (size_t i = 0; i < n; ++i) {
            const Instance& ins = user.instances[i];
            const bool is_a = ins.domain == 'A';
            const double pc = std::min(1.0 - kBceClamp, std::max(kBceClamp, preds[i]));
            double dlogit = 0.0;
            if (preds[i] > kBceClamp && preds[i] < 1.0 - kBceClamp)
                dlogit = user_w * (pc - ins.label) / double(is_a ? n_a : n_b);
            if (dlogit != 0.0) {
                Matrix dx = head_backward(is_a ? p.f_a : p.f_b, head_caches[i], dlogit,
                                          is_a ? grads->f_a : grads->f_b);
                const int dv = p.cfg.d_v();
                Matrix dh_dom(1, dv), dh_m(1, dv), dside(1, p.cfg.d_o);
                std::copy(dx.data.begin(), dx.data.begin() + dv, dh_dom.data.begin());
                std::copy(dx.data.begin() + dv, dx.data.begin() + 2 * dv, dh_m.data.begin());
                std::copy(dx.data.begin() + 2 * dv, dx.data.end(), dside.data.begin());
                nn::add_inplace(is_a ? dh_a_of(i) : dh_b_of(i), dh_dom);
                nn::add_inplace(mixed.dh, dh_m);
                side_embedding_backward(user.side_tokens, dside, is_a ? grads->side_a : grads->side_b);
            }
        }

        if (want_orig && hy.lambda1 != 0.0) {
            const double up = -user_w * hy.lambda1 / double(n);  // d hinge/d sim = -1 when active
            for (size_t i = 0; i < n; ++i) {
                if (sim_a[i] < hy.alpha) {
                    nn::CosineGrads g = nn::cosine_sim_backward(h_a_of(i), orig_a.h, up);
                    nn::add_inplace(dh_a_of(i), g.da);
                    nn::add_inplace(orig_a.dh, g.db);
                }
                if (sim_b[i] < hy.alpha) {
                    nn::CosineGrads g = nn::cosine_sim_backward(h_b_of(i), orig_b.h, up);
                    nn::add_inplace(dh_b_of(i), g.da);
                    nn::add_inplace(orig_b.dh, g.db);
                }
            }
        }

        if (hy.lambda2 != 0.0) {
            const double lw = user_w * hy.lambda2;
            for (size_t i = 0; i < n; ++i) {
                {
                    nn::CosineGrads g = nn::cosine_sim_backward(mixed.h, h_a_of(i), lw * cg.d_sim_am[i]);
                    nn::add_inplace(mixed.dh, g.da);
                    nn::add_inplace(dh_a_of(i), g.db);
                }
                {
                    nn::CosineGrads g = nn::cosine_sim_backward(mixed.h, h_b_of(i), lw * cg.d_sim_bm[i]);
                    nn::add_inplace(mixed.dh, g.da);
                    nn::add_inplace(dh_b_of(i), g.db);
                }
                {
                    nn::CosineGrads g = nn::cosine_sim_backward(h_a_of(i), h_b_of(i), lw * cg.d_sim_ab[i]);
                    nn::add_inplace(dh_a_of(i), g.da);
                    nn::add_inplace(dh_b_of(i), g.db);
                }
            }
        }

        for (size_t i = 0; i < n; ++i) tgt[i].backprop(user.instances[i].domain, p, grads);
        aug_a.backprop('A', p, grads);
        aug_b.backprop('B', p, grads);
        mixed.backprop('M', p, grads);
        orig_a.backprop('A', p, grads);
        orig_b.backprop('B', p, grads);
    }

    agg.total = total;
    return agg;
}

inline LossBreakdown model_loss(std::span<const UserBatch> batch, const ModelParams& p, const LossHyper& hy,
                                double dropout_rate = 0.0, uint64_t dropout_seed = 0) {
    return model_loss_and_grad(batch, p, hy, dropout_rate, dropout_seed, nullptr);
}

// Gradient of the batch loss w.r.t. every parameter, flattened in visit order.
inline std::vector<double> model_backward(std::span<const UserBatch> batch, const ModelParams& p,
                                          const LossHyper& hy, double dropout_rate = 0.0, uint64_t dropout_seed = 0,
                                          LossBreakdown* breakdown = nullptr) {
    ModelParams grads = ModelParams::zeros(p.cfg);
    LossBreakdown b = model_loss_and_grad(batch, p, hy, dropout_rate, dropout_seed, &grads);
    if (breakdown) *breakdown = b;
    return grads.flatten();
}

// Scores one candidate-terminated sequence against precomputed user context.
inline double score_instance(const ModelParams& p, const SeqInput& target_seq, char domain, const Matrix& h_m,
                             const Matrix& e_side) {
    Matrix h = encode_domain(target_seq, domain, p);
    return predict_ctr(h, h_m, e_side, domain == 'A' ? p.f_a : p.f_b);
}

}  // namespace fedcctr::model
