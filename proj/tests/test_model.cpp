#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fedcctr/grad_check.hpp"
#include "fedcctr/model.hpp"
#include "test_support.hpp"

using namespace fedcctr;
using namespace fedcctr::model;
using fedcctr::nn::Matrix;
using testsupport::toy_batch;
using testsupport::toy_config;

namespace {

Matrix vec(std::initializer_list<double> vals) {
    Matrix m(1, int(vals.size()));
    int j = 0;
    for (double v : vals) m.data[j++] = v;
    return m;
}

Matrix random_vec(int n, uint64_t seed) {
    Rng rng(seed);
    Matrix m(1, n);
    for (double& v : m.data) v = rng.gaussian();
    return m;
}

// naive CDRD evaluation straight off the formula, no stabilization
double cdrd_naive(std::span<const DomainRepresentations> reps, double tau) {
    const size_t n = reps.size();
    double den = 0.0;
    for (size_t j = 0; j < n; ++j) den += std::exp(nn::cosine_sim(reps[j].h_a, reps[j].h_b) / tau);
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double num = std::exp(nn::cosine_sim(reps[i].h_m, reps[i].h_a) / tau) +
                           std::exp(nn::cosine_sim(reps[i].h_m, reps[i].h_b) / tau);
        total += std::log(num / den);
    }
    return -total / double(n);
}

}  // namespace

// --- parameters --------------------------------------------------------------------

TEST_CASE("flatten/unflatten round-trips and the count is a pure function of config") {
    ModelConfig cfg = toy_config();
    Rng rng(1);
    ModelParams p = ModelParams::init(cfg, rng);
    auto flat = p.flatten();
    CHECK(flat.size() == p.param_count());
    CHECK(flat.size() == ModelParams::expected_param_count(cfg));

    ModelParams q = ModelParams::zeros(cfg);
    q.unflatten(flat);
    auto flat2 = q.flatten();
    CHECK(flat == flat2);

    flat.pop_back();
    CHECK_THROWS_AS(q.unflatten(flat), DimensionError);
}

TEST_CASE("paper-default head is 512x256x128 into a scalar") {
    ModelConfig cfg = toy_config();
    CHECK(cfg.mlp_dims != std::vector<int>{512, 256, 128});  // toy overrides it
    ModelConfig full = ModelConfig{};
    full.vocab_a = full.vocab_b = 4;
    full.feat_vocab_a = full.feat_vocab_b = 2;
    full.side_vocab = 2;
    CHECK(full.mlp_dims == std::vector<int>{512, 256, 128});
    MlpHead head(full.head_input_dim(), full.mlp_dims);
    REQUIRE(head.layers.size() == 4);
    CHECK(head.layers[0].w.cols == 512);
    CHECK(head.layers[1].w.cols == 256);
    CHECK(head.layers[2].w.cols == 128);
    CHECK(head.layers[3].w.cols == 1);
}

// --- embedding -----------------------------------------------------------------------

TEST_CASE("embedding keeps the most recent max_len events") {
    ModelConfig cfg = toy_config();  // max_len = 4
    Rng rng(2);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput six = testsupport::seq_of('A', {0, 1, 2, 3, 4, 5});
    nn::ValidMask valid;
    EmbedCache cache;
    Matrix e = embed_sequence(six, 'A', p, &valid, &cache);
    CHECK(e.rows == 4);
    CHECK(e.cols == cfg.d_v());
    CHECK(cache.toks.front().item == 2);  // first two dropped
    CHECK(cache.toks.back().item == 5);
}

TEST_CASE("empty sequences embed to zero valid rows and the encoder rejects them") {
    ModelConfig cfg = toy_config();
    Rng rng(3);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput empty;
    nn::ValidMask valid;
    Matrix e = embed_sequence(empty, 'A', p, &valid);
    CHECK(e.rows == 0);
    CHECK(nn::count_valid(valid) == 0);
    CHECK_THROWS_AS(encode_domain(empty, 'A', p), EmptySequenceError);
}

TEST_CASE("unknown item ids raise a vocabulary error") {
    ModelConfig cfg = toy_config();
    Rng rng(4);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput bad = testsupport::seq_of('A', {0, 99});
    nn::ValidMask valid;
    CHECK_THROWS_AS(embed_sequence(bad, 'A', p, &valid), VocabularyError);
}

// --- encoder ---------------------------------------------------------------------------

TEST_CASE("a single-item sequence encodes deterministically with dropout off") {
    ModelConfig cfg = toy_config();
    Rng rng(5);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput one = testsupport::seq_of('A', {3});
    Matrix h1 = encode_domain(one, 'A', p);
    Matrix h2 = encode_domain(one, 'A', p);
    CHECK(nn::max_abs_diff(h1, h2) == 0.0);
    CHECK(h1.cols == cfg.d_v());
}

TEST_CASE("domain stacks are independent parameter sets") {
    ModelConfig cfg = toy_config();
    Rng rng(6);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput seq = testsupport::seq_of('A', {0, 1, 2});
    Matrix through_a = encode_domain(seq, 'A', p);
    Matrix through_b = encode_domain(seq, 'B', p);
    CHECK(nn::max_abs_diff(through_a, through_b) > 1e-6);

    // zeroing T^B changes h_B but not h_A or h_M
    SeqInput seq_b = testsupport::seq_of('B', {1, 2});
    SeqInput mixed = testsupport::mix(seq, seq_b);
    Matrix ha_before = encode_domain(seq, 'A', p);
    Matrix hm_before = encode_domain(mixed, 'M', p);
    Matrix hb_before = encode_domain(seq_b, 'B', p);
    p.t_b = TransformerStack(cfg.d_v(), cfg.heads, cfg.ffn_inner());
    Matrix ha_after = encode_domain(seq, 'A', p);
    Matrix hm_after = encode_domain(mixed, 'M', p);
    Matrix hb_after = encode_domain(seq_b, 'B', p);
    CHECK(nn::max_abs_diff(ha_before, ha_after) == 0.0);
    CHECK(nn::max_abs_diff(hm_before, hm_after) == 0.0);
    CHECK(nn::max_abs_diff(hb_before, hb_after) > 1e-6);
}

TEST_CASE("encoder output matches the composed layer oracle on a 3-item sequence") {
    ModelConfig cfg = toy_config();
    Rng rng(7);
    ModelParams p = ModelParams::init(cfg, rng);
    SeqInput seq = testsupport::seq_of('A', {1, 4, 2});

    Matrix h = encode_domain(seq, 'A', p);

    // independent composition of the public layer operations
    nn::ValidMask valid;
    Matrix e = embed_sequence(seq, 'A', p, &valid);
    Matrix s = nn::multi_head_attention(e, p.t_a.mha, &valid);
    Matrix z1 = nn::residual_layer_norm(e, s, p.t_a.ln1_gain, p.t_a.ln1_bias);
    Matrix f = nn::ffn(z1, p.t_a.ffn);
    Matrix z2 = nn::residual_layer_norm(z1, f, p.t_a.ln2_gain, p.t_a.ln2_bias);
    Matrix expect = nn::mean_pool(z2, &valid);
    CHECK(nn::max_abs_diff(h, expect) < 1e-14);
}

// --- losses -------------------------------------------------------------------------------

TEST_CASE("idra is zero when similarities clear the margin") {
    DomainRepresentations r;
    r.h_a = r.h_a_orig = vec({1, 2, 3});
    r.h_b = r.h_b_orig = vec({-1, 0.5, 2});
    CHECK(loss_idra(std::vector{r}, 0.5) == 0.0);
}

TEST_CASE("idra on orthogonal pairs equals the margin sum") {
    DomainRepresentations r;
    r.h_a = vec({1, 0});
    r.h_a_orig = vec({0, 1});
    r.h_b = vec({0, 2});
    r.h_b_orig = vec({3, 0});
    CHECK(loss_idra(std::vector{r}, 0.5) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("idra matches a scalar reference on random batches and stays nonnegative") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<DomainRepresentations> reps(4);
        for (auto& r : reps) {
            r.h_a = random_vec(5, rng.next_u64());
            r.h_a_orig = random_vec(5, rng.next_u64());
            r.h_b = random_vec(5, rng.next_u64());
            r.h_b_orig = random_vec(5, rng.next_u64());
        }
        const double alpha = rng.uniform() * 2.0;
        double expect = 0.0;
        for (const auto& r : reps) {
            expect += std::max(0.0, alpha - nn::cosine_sim(r.h_a, r.h_a_orig));
            expect += std::max(0.0, alpha - nn::cosine_sim(r.h_b, r.h_b_orig));
        }
        expect /= 4.0;
        const double got = loss_idra(reps, alpha);
        CHECK(std::fabs(got - expect) < 1e-12);
        CHECK(got >= 0.0);
    }
}

TEST_CASE("idra and cdrd are invariant under positive rescaling of representations") {
    Rng rng(9);
    std::vector<DomainRepresentations> reps(3), scaled(3);
    for (int i = 0; i < 3; ++i) {
        reps[i].h_a = random_vec(6, rng.next_u64());
        reps[i].h_a_orig = random_vec(6, rng.next_u64());
        reps[i].h_b = random_vec(6, rng.next_u64());
        reps[i].h_b_orig = random_vec(6, rng.next_u64());
        reps[i].h_m = random_vec(6, rng.next_u64());
        scaled[i] = reps[i];
        scaled[i].h_a = nn::scale(reps[i].h_a, 3.0);
        scaled[i].h_b = nn::scale(reps[i].h_b, 3.0);
        scaled[i].h_m = nn::scale(reps[i].h_m, 3.0);
    }
    CHECK(std::fabs(loss_idra(reps, 0.7) - loss_idra(scaled, 0.7)) < 1e-12);
    CHECK(std::fabs(loss_cdrd(reps, 0.1) - loss_cdrd(scaled, 0.1)) < 1e-10);
}

TEST_CASE("idra propagates degenerate-vector errors") {
    DomainRepresentations r;
    r.h_a = vec({0, 0, 0});
    r.h_a_orig = vec({1, 2, 3});
    r.h_b = r.h_b_orig = vec({1, 1, 1});
    CHECK_THROWS_AS(loss_idra(std::vector{r}, 0.5), DegenerateVectorError);
}

TEST_CASE("cdrd with identical vectors equals minus log 2") {
    DomainRepresentations r;
    r.h_a = r.h_b = r.h_m = vec({0.5, -1.5, 2.0});
    r.h_a_orig = r.h_b_orig = r.h_a;
    CHECK(loss_cdrd(std::vector{r}, 0.1) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cdrd with h_M orthogonal to identical domain vectors") {
    DomainRepresentations r;
    r.h_a = r.h_b = vec({1, 0});
    r.h_m = vec({0, 1});
    CHECK(loss_cdrd(std::vector{r}, 0.1) == doctest::Approx(10.0 - std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cdrd matches the naive formula when the naive formula is finite") {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<DomainRepresentations> reps(4);
        for (auto& r : reps) {
            r.h_a = random_vec(6, rng.next_u64());
            r.h_b = random_vec(6, rng.next_u64());
            r.h_m = random_vec(6, rng.next_u64());
        }
        const double tau = 0.05 + rng.uniform() * 0.5;
        CHECK(std::fabs(loss_cdrd(reps, tau) - cdrd_naive(reps, tau)) < 1e-10);
    }
}

TEST_CASE("cdrd rejects non-positive temperature") {
    DomainRepresentations r;
    r.h_a = r.h_b = r.h_m = vec({1, 1});
    CHECK_THROWS_AS(loss_cdrd(std::vector{r}, 0.0), ConfigError);
    CHECK_THROWS_AS(loss_cdrd(std::vector{r}, -0.1), ConfigError);
}

TEST_CASE("cdrd similarity gradients match finite differences") {
    Rng rng(11);
    const int n = 3;
    std::vector<double> am(n), bm(n), ab(n);
    for (int i = 0; i < n; ++i) {
        am[i] = rng.uniform() * 2 - 1;
        bm[i] = rng.uniform() * 2 - 1;
        ab[i] = rng.uniform() * 2 - 1;
    }
    CdrdGrads g = cdrd_from_sims(am, bm, ab, 0.1);
    const double h = 1e-6;
    for (int i = 0; i < n; ++i) {
        for (auto [arr, grad] : {std::pair{&am, &g.d_sim_am}, {&bm, &g.d_sim_bm}, {&ab, &g.d_sim_ab}}) {
            const double saved = (*arr)[i];
            (*arr)[i] = saved + h;
            const double up = cdrd_from_sims(am, bm, ab, 0.1).value;
            (*arr)[i] = saved - h;
            const double dn = cdrd_from_sims(am, bm, ab, 0.1).value;
            (*arr)[i] = saved;
            CHECK((*grad)[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-5));
        }
    }
}

TEST_CASE("bce closed-form examples") {
    CHECK(loss_bce(std::vector{0.5}, std::vector{1.0}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss_bce(std::vector{1.0 - 1e-7}, std::vector{1.0}) == doctest::Approx(1e-7).epsilon(1e-3));
    CHECK_THROWS_AS(loss_bce(std::vector<double>{}, std::vector<double>{}), EmptySequenceError);
}

TEST_CASE("bce matches a scalar reference on mixed batches") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(6), y(6);
        for (int i = 0; i < 6; ++i) {
            p[i] = 0.01 + rng.uniform() * 0.98;
            y[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
        }
        double expect = 0.0;
        for (int i = 0; i < 6; ++i) expect -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
        expect /= 6.0;
        CHECK(std::fabs(loss_bce(p, y) - expect) < 1e-12);
    }
}

TEST_CASE("total loss is the exact weighted sum") {
    CHECK(loss_total(0.3, 0.4, 9.0, 9.0, 0.0, 0.0) == doctest::Approx(0.7));
    CHECK(loss_total(1, 1, 1, 1, 1, 1) == 4.0);
    CHECK(loss_total(0.5, 0.25, 2.0, 4.0, 0.3, 0.5) == doctest::Approx(0.5 + 0.25 + 0.6 + 2.0).epsilon(1e-12));
    CHECK_THROWS_AS(loss_total(1, 1, 1, 1, -0.1, 0.5), ConfigError);
    CHECK_THROWS_AS(loss_total(1, 1, 1, 1, 0.5, 1.5), ConfigError);
}

// --- prediction head ------------------------------------------------------------------------

TEST_CASE("all-zero head weights predict one half") {
    ModelConfig cfg = toy_config();
    MlpHead head(cfg.head_input_dim(), cfg.mlp_dims);  // zero weights
    Matrix h = random_vec(cfg.d_v(), 20);
    Matrix hm = random_vec(cfg.d_v(), 21);
    Matrix es = random_vec(cfg.d_o, 22);
    CHECK(predict_ctr(h, hm, es, head) == 0.5);
}

TEST_CASE("prediction matches a layer-composition oracle and stays in (0,1)") {
    ModelConfig cfg = toy_config();
    Rng rng(23);
    ModelParams p = ModelParams::init(cfg, rng);
    Matrix h = random_vec(cfg.d_v(), 24);
    Matrix hm = random_vec(cfg.d_v(), 25);
    Matrix es = random_vec(cfg.d_o, 26);
    const double got = predict_ctr(h, hm, es, p.f_a);

    Matrix x(1, cfg.head_input_dim());
    int off = 0;
    for (const Matrix* part : {&h, &hm, &es})
        for (double v : part->data) x.data[off++] = v;
    Matrix cur = x;
    for (size_t i = 0; i + 1 < p.f_a.layers.size(); ++i) {
        cur = nn::linear_forward(cur, p.f_a.layers[i]);
        for (double& v : cur.data) v = std::max(0.0, v);
    }
    const double logit = nn::linear_forward(cur, p.f_a.layers.back()).data[0];
    CHECK(got == doctest::Approx(1.0 / (1.0 + std::exp(-logit))).epsilon(1e-12));
    CHECK(got > 0.0);
    CHECK(got < 1.0);
}

TEST_CASE("prediction rejects mismatched input dims") {
    ModelConfig cfg = toy_config();
    MlpHead head(cfg.head_input_dim(), cfg.mlp_dims);
    Matrix h = random_vec(cfg.d_v() + 1, 27);
    Matrix hm = random_vec(cfg.d_v(), 28);
    Matrix es = random_vec(cfg.d_o, 29);
    CHECK_THROWS_AS(predict_ctr(h, hm, es, head), DimensionError);
}

// --- full model backward ----------------------------------------------------------------------

TEST_CASE("full-model analytic gradient matches central finite differences") {
    ModelConfig cfg = toy_config();
    Rng rng(30);
    ModelParams p = ModelParams::init(cfg, rng);
    auto batch = toy_batch();
    LossHyper hy;  // lambda1 0.3, lambda2 0.5, alpha 0.5, tau 0.1

    ModelParams grads = ModelParams::zeros(cfg);
    model_loss_and_grad(batch, p, hy, 0.0, 0, &grads);

    std::vector<std::pair<std::string, Matrix*>> slots;
    p.visit([&](const std::string& name, Matrix& m) {
        if (!m.empty()) slots.push_back({name, &m});
    });
    std::vector<Matrix> analytic;
    grads.visit([&](const std::string&, Matrix& m) {
        if (!m.empty()) analytic.push_back(m);
    });

    auto loss = [&]() { return model_loss(batch, p, hy).total; };
    auto rep = nn::finite_diff_check(loss, slots, analytic);
    INFO("worst slot: " << rep.worst);
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("contrastive terms vanish exactly when lambdas are zero") {
    ModelConfig cfg = toy_config();
    Rng rng(31);
    ModelParams p = ModelParams::init(cfg, rng);
    auto batch = toy_batch();
    LossHyper hy;
    hy.lambda1 = 0.0;
    hy.lambda2 = 0.0;
    LossBreakdown b;
    model_backward(batch, p, hy, 0.0, 0, &b);
    CHECK(b.idra == 0.0);
    CHECK(b.cdrd == 0.0);
    CHECK(b.total == doctest::Approx(b.bce_a + b.bce_b).epsilon(1e-15));
}

TEST_CASE("duplicating every instance leaves the gradient unchanged") {
    ModelConfig cfg = toy_config();
    Rng rng(32);
    ModelParams p = ModelParams::init(cfg, rng);
    auto batch = toy_batch();
    LossHyper hy;
    auto g1 = model_backward(batch, p, hy);

    auto doubled = batch;
    for (auto& u : doubled) {
        auto copy = u.instances;
        u.instances.insert(u.instances.end(), copy.begin(), copy.end());
    }
    auto g2 = model_backward(doubled, p, hy);
    REQUIRE(g1.size() == g2.size());
    double worst = 0.0;
    for (size_t i = 0; i < g1.size(); ++i) worst = std::max(worst, std::fabs(g1[i] - g2[i]));
    CHECK(worst < 1e-12);
}

TEST_CASE("dropout keeps the loss reproducible under a fixed seed") {
    ModelConfig cfg = toy_config();
    cfg.dropout = 0.2;
    Rng rng(33);
    ModelParams p = ModelParams::init(cfg, rng);
    auto batch = toy_batch();
    LossHyper hy;
    const double l1 = model_loss(batch, p, hy, 0.2, 99).total;
    const double l2 = model_loss(batch, p, hy, 0.2, 99).total;
    const double l3 = model_loss(batch, p, hy, 0.2, 100).total;
    CHECK(l1 == l2);
    CHECK(l1 != l3);
}
