#pragma once

#include <chrono>
#include <cstring>
#include <functional>
#include <thread>

#include "fedcctr/adaldp.hpp"
#include "fedcctr/model.hpp"

namespace fedcctr::fed {

// ---------------------------------------------------------------------------
// the client -> server payload. Only this type crosses the boundary; it is
// built from the post-noise gradient and travels as serialized bytes.
// ---------------------------------------------------------------------------

struct NoisyGradient {
    int client = -1;
    int round = -1;
    std::vector<uint8_t> bytes;

    static NoisyGradient wrap(std::span<const double> values, int client, int round) {
        NoisyGradient p;
        p.client = client;
        p.round = round;
        p.bytes.resize(values.size() * sizeof(double));
        std::memcpy(p.bytes.data(), values.data(), p.bytes.size());
        return p;
    }

    size_t dim() const { return bytes.size() / sizeof(double); }

    std::vector<double> values() const {
        std::vector<double> out(dim());
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }
};

// ---------------------------------------------------------------------------
// client state
// ---------------------------------------------------------------------------

struct ClientState {
    int id = -1;
    std::string user_id;
    model::UserBatch context;           // shared sequences + side tokens, no instances
    std::vector<model::Instance> pool;  // full local training set D_k+
    dp::PrivacyState privacy;
    bool privacy_enabled = true;
    bool active = true;
};

struct RoundReport {
    int round = 0;
    std::vector<int> sampled;
    int received = 0;
    int dropped = 0;  // stopped or skipped, so received + dropped = |sampled|
    double mean_loss = 0.0;
    double mean_bce_a = 0.0, mean_bce_b = 0.0, mean_idra = 0.0, mean_cdrd = 0.0;
    double sigma_mean = 0.0;
    double seconds = 0.0;  // wall time; written to CSV only when timing is on
};

enum class ServerOptimizer { Sgd, AdamW };

struct TrainHooks {
    std::function<void(int round, std::span<const double> params)> on_broadcast;
    std::function<void(const NoisyGradient&)> on_payload;
};

struct TrainOptions {
    int rounds = 100;
    double eta = 5e-4;
    double rho = 0.01;
    int batch_size = 32;
    int local_steps = 1;
    uint64_t seed = 1;
    int threads = 1;
    double dropout = 0.0;
    model::LossHyper hyper;
    ServerOptimizer optimizer = ServerOptimizer::Sgd;
    double adamw_beta1 = 0.9, adamw_beta2 = 0.999, adamw_eps = 1e-8;
    double weight_decay = 0.01;
    TrainHooks hooks;
};

// ---------------------------------------------------------------------------
// client sampling: uniform without replacement among active clients
// ---------------------------------------------------------------------------

inline std::vector<int> sample_clients(std::span<const int> active_ids, double rho, Rng& rng) {
    if (rho <= 0.0 || rho > 1.0) throw ConfigError("rho must be in (0,1]");
    if (active_ids.empty()) throw ConfigError("no active clients to sample");
    const size_t n = active_ids.size();
    const size_t want = std::min(n, size_t(std::max<long long>(1, std::llround(rho * double(n)))));
    std::vector<int> ids(active_ids.begin(), active_ids.end());
    for (size_t i = 0; i < want; ++i) {
        const size_t j = i + rng.uniform_int(n - i);
        std::swap(ids[i], ids[j]);
    }
    ids.resize(want);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// one client round: sample a mini-batch, compute the local gradient, pass it
// through AdaLDP, and emit a payload (or stop / skip)
// ---------------------------------------------------------------------------

struct StepOutcome {
    enum Kind { Payload, Stopped, Skipped } kind = Skipped;
    NoisyGradient payload;
    model::LossBreakdown loss;
    double sigma_used = 0.0;
};

// Mini-batch sampled without replacement from the pool under the round stream.
inline std::vector<model::Instance> sample_batch(const std::vector<model::Instance>& pool, int batch_size,
                                                 Rng& rng) {
    const size_t want = std::min(pool.size(), size_t(batch_size));
    std::vector<size_t> ix(pool.size());
    for (size_t i = 0; i < ix.size(); ++i) ix[i] = i;
    for (size_t i = 0; i < want; ++i) {
        const size_t j = i + rng.uniform_int(ix.size() - i);
        std::swap(ix[i], ix[j]);
    }
    std::vector<model::Instance> out;
    out.reserve(want);
    for (size_t i = 0; i < want; ++i) out.push_back(pool[ix[i]]);
    return out;
}

// The local gradient for (client, round): mean of `local_steps` mini-batch
// gradients evaluated at the received parameters.
inline std::vector<double> local_gradient(const ClientState& client, const model::ModelParams& params,
                                          const TrainOptions& opt, int round, model::LossBreakdown* loss_out) {
    Rng batch_rng(derive_stream(opt.seed, "batch", uint64_t(client.id), uint64_t(round)));
    std::vector<double> grad;
    model::LossBreakdown agg;
    for (int step = 0; step < opt.local_steps; ++step) {
        model::UserBatch b = client.context;
        b.instances = sample_batch(client.pool, opt.batch_size, batch_rng);
        model::LossBreakdown lb;
        std::vector<double> g =
            model::model_backward(std::vector{b}, params, opt.hyper, opt.dropout,
                                  derive_stream(opt.seed, "dropout", uint64_t(client.id), uint64_t(round), step),
                                  &lb);
        if (grad.empty())
            grad = std::move(g);
        else
            for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
        agg.total += lb.total;
        agg.bce_a += lb.bce_a;
        agg.bce_b += lb.bce_b;
        agg.idra += lb.idra;
        agg.cdrd += lb.cdrd;
        agg.n_a += lb.n_a;
        agg.n_b += lb.n_b;
    }
    if (opt.local_steps > 1) {
        const double inv = 1.0 / opt.local_steps;
        for (double& v : grad) v *= inv;
        agg.total *= inv;
        agg.bce_a *= inv;
        agg.bce_b *= inv;
        agg.idra *= inv;
        agg.cdrd *= inv;
    }
    if (loss_out) *loss_out = agg;
    return grad;
}

inline StepOutcome client_step(ClientState& client, const model::ModelParams& params, const TrainOptions& opt,
                               int round) {
    StepOutcome out;
    if (!client.active) {
        out.kind = StepOutcome::Stopped;
        return out;
    }
    if (client.pool.empty()) {
        out.kind = StepOutcome::Skipped;
        return out;
    }
    std::vector<double> grad = local_gradient(client, params, opt, round, &out.loss);

    if (!client.privacy_enabled) {
        out.kind = StepOutcome::Payload;
        out.payload = NoisyGradient::wrap(grad, client.id, round);
        return out;
    }

    out.sigma_used = client.privacy.sigma;
    Rng noise_rng(derive_stream(opt.seed, "noise", uint64_t(client.id), uint64_t(round)));
    dp::StepResult res = dp::adaldp_step(grad, client.privacy, noise_rng);
    if (std::holds_alternative<dp::StopParticipation>(res)) {
        client.active = false;
        out.kind = StepOutcome::Stopped;
        return out;
    }
    out.kind = StepOutcome::Payload;
    out.payload = NoisyGradient::wrap(std::get<std::vector<double>>(res), client.id, round);
    return out;
}

// ---------------------------------------------------------------------------
// server-side aggregation and update
// ---------------------------------------------------------------------------

struct AdamWState {
    std::vector<double> m, v;
    long t = 0;
};

// Unweighted mean of the received payloads, deserialized at the boundary.
// Payloads are processed in ascending client order so aggregation does not
// depend on arrival order.
inline std::vector<double> average_payloads(std::span<const NoisyGradient> payloads, size_t dim) {
    if (payloads.empty()) throw ConfigError("aggregate over zero gradients");
    std::vector<const NoisyGradient*> ordered;
    ordered.reserve(payloads.size());
    for (const auto& p : payloads) ordered.push_back(&p);
    std::sort(ordered.begin(), ordered.end(),
              [](const NoisyGradient* x, const NoisyGradient* y) { return x->client < y->client; });
    std::vector<double> mean(dim, 0.0);
    for (const NoisyGradient* p : ordered) {
        if (p->dim() != dim) throw DimensionError("payload length mismatch");
        const std::vector<double> v = p->values();
        for (size_t i = 0; i < dim; ++i) mean[i] += v[i];
    }
    const double inv = 1.0 / double(payloads.size());
    for (double& v : mean) v *= inv;
    return mean;
}

inline void aggregate_and_update(std::vector<double>& params, std::span<const NoisyGradient> payloads,
                                 const TrainOptions& opt, AdamWState* adamw = nullptr) {
    const std::vector<double> mean = average_payloads(payloads, params.size());
    if (opt.optimizer == ServerOptimizer::Sgd) {
        for (size_t i = 0; i < params.size(); ++i) params[i] -= opt.eta * mean[i];
        return;
    }
    if (!adamw) throw ConfigError("adamw optimizer needs state");
    if (adamw->m.empty()) {
        adamw->m.assign(params.size(), 0.0);
        adamw->v.assign(params.size(), 0.0);
    }
    adamw->t += 1;
    const double b1 = opt.adamw_beta1, b2 = opt.adamw_beta2;
    const double bc1 = 1.0 - std::pow(b1, double(adamw->t));
    const double bc2 = 1.0 - std::pow(b2, double(adamw->t));
    for (size_t i = 0; i < params.size(); ++i) {
        adamw->m[i] = b1 * adamw->m[i] + (1.0 - b1) * mean[i];
        adamw->v[i] = b2 * adamw->v[i] + (1.0 - b2) * mean[i] * mean[i];
        const double mhat = adamw->m[i] / bc1;
        const double vhat = adamw->v[i] / bc2;
        params[i] -= opt.eta * (mhat / (std::sqrt(vhat) + opt.adamw_eps) + opt.weight_decay * params[i]);
    }
}

// ---------------------------------------------------------------------------
// the full training loop (Algorithm-1 shape)
// ---------------------------------------------------------------------------

struct TrainResult {
    model::ModelParams params;
    std::vector<RoundReport> reports;
    int rounds_run = 0;
    bool terminated_early = false;  // every client went inactive
};

inline TrainResult run_training(std::vector<ClientState>& clients, const model::ModelParams& init,
                                const TrainOptions& opt) {
    TrainResult result;
    result.params = init;
    std::vector<double> flat = init.flatten();
    AdamWState adamw;

    for (int round = 0; round < opt.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();

        std::vector<int> active_ids;
        for (const auto& c : clients)
            if (c.active && !c.pool.empty()) active_ids.push_back(c.id);
        if (active_ids.empty()) {
            result.terminated_early = true;
            break;
        }

        Rng sample_rng(derive_stream(opt.seed, "sample", uint64_t(round)));
        const std::vector<int> sampled = sample_clients(active_ids, opt.rho, sample_rng);

        // broadcast: clients work on a deserialized snapshot of the global params
        result.params.unflatten(flat);
        const model::ModelParams& snapshot = result.params;
        if (opt.hooks.on_broadcast) opt.hooks.on_broadcast(round, flat);

        std::vector<StepOutcome> outcomes(sampled.size());
        auto run_range = [&](size_t begin, size_t end) {
            for (size_t i = begin; i < end; ++i) outcomes[i] = client_step(clients[sampled[i]], snapshot, opt, round);
        };
        const int n_threads = std::max(1, std::min<int>(opt.threads, int(sampled.size())));
        if (n_threads == 1) {
            run_range(0, sampled.size());
        } else {
            std::vector<std::thread> pool;
            const size_t chunk = (sampled.size() + n_threads - 1) / n_threads;
            for (int t = 0; t < n_threads; ++t) {
                const size_t b = t * chunk, e = std::min(sampled.size(), b + chunk);
                if (b < e) pool.emplace_back(run_range, b, e);
            }
            for (auto& th : pool) th.join();
        }

        RoundReport rep;
        rep.round = round;
        rep.sampled = sampled;
        std::vector<NoisyGradient> payloads;
        double sigma_sum = 0.0;
        for (auto& oc : outcomes) {
            if (oc.kind == StepOutcome::Payload) {
                rep.received += 1;
                rep.mean_loss += oc.loss.total;
                rep.mean_bce_a += oc.loss.bce_a;
                rep.mean_bce_b += oc.loss.bce_b;
                rep.mean_idra += oc.loss.idra;
                rep.mean_cdrd += oc.loss.cdrd;
                sigma_sum += oc.sigma_used;
                if (opt.hooks.on_payload) opt.hooks.on_payload(oc.payload);
                payloads.push_back(std::move(oc.payload));
            } else {
                rep.dropped += 1;
            }
        }
        if (rep.received > 0) {
            rep.mean_loss /= rep.received;
            rep.mean_bce_a /= rep.received;
            rep.mean_bce_b /= rep.received;
            rep.mean_idra /= rep.received;
            rep.mean_cdrd /= rep.received;
            rep.sigma_mean = sigma_sum / rep.received;
            aggregate_and_update(flat, payloads, opt, &adamw);
        }
        // zero received: the round is skipped and the report notes it

        rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.reports.push_back(std::move(rep));
        result.rounds_run = round + 1;
    }

    result.params.unflatten(flat);
    return result;
}

// ---------------------------------------------------------------------------
// centralized oracle: the same local computation without the federated
// machinery (sampling, payload boundary, aggregation). Batches derive from the
// identical (seed, client, round) streams so a 1-client noiseless federation
// must reproduce it exactly.
// ---------------------------------------------------------------------------

inline model::ModelParams centralized_train(const ClientState& client, const model::ModelParams& init,
                                            const TrainOptions& opt) {
    model::ModelParams params = init;
    std::vector<double> flat = params.flatten();
    for (int round = 0; round < opt.rounds; ++round) {
        params.unflatten(flat);
        std::vector<double> g = local_gradient(client, params, opt, round, nullptr);
        for (size_t i = 0; i < flat.size(); ++i) flat[i] -= opt.eta * (g[i] / 1.0);
    }
    params.unflatten(flat);
    return params;
}

}  // namespace fedcctr::fed
