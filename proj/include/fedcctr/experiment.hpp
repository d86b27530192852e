#pragma once

// Glue binding datasets, augmentation, the model and the federated runtime into
// the experiment commands (generate / augment / train / evaluate / ablate).

#include <filesystem>
#include <memory>

#include "fedcctr/config.hpp"
#include "fedcctr/data.hpp"
#include "fedcctr/fed.hpp"
#include "fedcctr/io.hpp"
#include "fedcctr/llm_http.hpp"
#include "fedcctr/privaug.hpp"

namespace fedcctr::exp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// stable token vocabularies derived from the closed augmentation vocabulary,
// so every ablation arm shares one parameter layout
// ---------------------------------------------------------------------------

struct VocabMaps {
    std::map<std::string, int> feat;  // genre/theme/keyword strings
    std::map<std::string, int> side;  // "age:...", "gender:...", "pref:..."

    static VocabMaps make(const aug::AugVocab& v) {
        VocabMaps m;
        int fi = 0;
        for (const auto& g : v.genres) m.feat["genre:" + g] = fi++;
        for (const auto& t : v.themes) m.feat["theme:" + t] = fi++;
        for (const auto& k : v.keywords) m.feat["keyword:" + k] = fi++;
        int si = 0;
        for (const auto& a : v.age_brackets) m.side["age:" + a] = si++;
        for (const auto& g : v.genders) m.side["gender:" + g] = si++;
        for (const auto& p : v.genres) m.side["pref:" + p] = si++;
        return m;
    }

    std::vector<int> feat_indices(const aug::AugmentedItem* item) const {
        std::vector<int> out;
        if (!item) return out;
        auto push = [&](const std::string& prefix, const std::vector<std::string>& vals) {
            for (const auto& v : vals) {
                auto it = feat.find(prefix + v);
                if (it != feat.end()) out.push_back(it->second);  // off-vocabulary strings are skipped
            }
        };
        push("genre:", item->genres);
        push("theme:", item->themes);
        push("keyword:", item->keywords);
        return out;
    }

    std::vector<int> side_indices(const aug::AugmentedUserProfile& p) const {
        std::vector<int> out;
        auto push = [&](const std::string& key) {
            auto it = side.find(key);
            if (it != side.end()) out.push_back(it->second);
        };
        if (!p.age_bracket.empty()) push("age:" + p.age_bracket);
        if (!p.gender.empty()) push("gender:" + p.gender);
        for (const auto& pref : p.preference_summary) push("pref:" + pref);
        return out;
    }
};

inline model::ModelConfig model_config_from(const cfg::ExperimentConfig& c, const data::Catalog& catalog,
                                            const VocabMaps& vm) {
    model::ModelConfig mc;
    mc.vocab_a = catalog.size('A');
    mc.vocab_b = catalog.size('B');
    mc.feat_vocab_a = mc.feat_vocab_b = int(vm.feat.size());
    mc.side_vocab = int(vm.side.size());
    mc.d_id = c.d_id;
    mc.d_feat = c.d_feat;
    mc.d_pos = c.d_pos;
    mc.d_o = c.d_o;
    mc.heads = c.heads;
    mc.d_ff = c.d_ff;
    mc.max_len = c.max_len;
    mc.mlp_dims = c.mlp_dims;
    mc.dropout = c.dropout;
    mc.validate();
    return mc;
}

// ---------------------------------------------------------------------------
// building client states: augmented sequences, instance pools, privacy state
// ---------------------------------------------------------------------------

namespace detail {

inline model::Token make_token(const data::Catalog& catalog, const VocabMaps& vm, const aug::AugmentedDataset* ad,
                               char domain, int item_ix) {
    model::Token t;
    t.item = item_ix;
    t.domain = domain;
    if (ad) t.feats = vm.feat_indices(ad->item(domain, catalog.name_of(domain, item_ix)));
    return t;
}

// merged per-domain sequence: train events then expansion positives
inline std::vector<int> merged_domain_items(const data::Catalog& catalog, const data::UserData& u, char domain,
                                            const aug::AugmentedDataset* ad, bool include_validation) {
    const data::DomainSplit& split = u.split(domain);
    std::vector<std::string> original;
    for (const auto& e : split.train) original.push_back(catalog.name_of(domain, e.item));
    if (include_validation) original.push_back(catalog.name_of(domain, split.validation.item));
    std::vector<std::string> positives;
    if (ad) {
        auto it = ad->users.find(u.user_id);
        if (it != ad->users.end())
            positives = domain == 'A' ? it->second.expansion.positives_a : it->second.expansion.positives_b;
    }
    std::vector<int> out;
    for (const auto& id : aug::merge_expansion(original, positives)) {
        const int ix = catalog.index_of(domain, id);
        if (ix >= 0) out.push_back(ix);
    }
    return out;
}

inline model::SeqInput seq_from_items(const data::Catalog& catalog, const VocabMaps& vm,
                                      const aug::AugmentedDataset* ad, char domain, std::span<const int> items) {
    model::SeqInput s;
    for (int ix : items) s.toks.push_back(make_token(catalog, vm, ad, domain, ix));
    return s;
}

inline model::SeqInput target_seq_for(const model::SeqInput& domain_seq, const data::Catalog& catalog,
                                      const VocabMaps& vm, const aug::AugmentedDataset* ad, char domain,
                                      int target_ix) {
    model::SeqInput s;
    for (const auto& tok : domain_seq.toks)
        if (tok.item != target_ix) s.toks.push_back(tok);
    s.toks.push_back(make_token(catalog, vm, ad, domain, target_ix));
    return s;
}

}  // namespace detail

struct BuiltClients {
    model::ModelConfig model_config;
    VocabMaps vocab;
    std::vector<fed::ClientState> clients;
};

// Builds per-user contexts and instance pools from the split dataset and the
// (optional) augmentation. Label-1 instances come from the merged sequences,
// label-0 instances from expansion negatives plus seeded random negatives.
inline BuiltClients build_clients(const data::SplitDataset& ds, const aug::AugmentedDataset* ad,
                                  const cfg::ExperimentConfig& c) {
    BuiltClients out;
    out.vocab = VocabMaps::make(aug::AugVocab{});
    out.model_config = model_config_from(c, ds.catalog, out.vocab);

    dp::PrivacyState proto;
    if (c.privacy_enabled) {
        double zeta = c.zeta;
        if (c.optimize_zeta)
            zeta = dp::optimize_zeta(c.rounds, c.sigma0, c.decay, c.theta, c.rho, c.delta,
                                     c.privacy_formula == "appendix" ? dp::CostFormula::Appendix
                                                                     : dp::CostFormula::MainText);
        proto = dp::PrivacyState::make(
            c.epsilon0, c.delta, zeta, c.theta, c.sigma0, c.decay, c.rho,
            c.privacy_mode == "decrement" ? dp::BudgetMode::Decrement : dp::BudgetMode::RdpConvert,
            c.privacy_formula == "appendix" ? dp::CostFormula::Appendix : dp::CostFormula::MainText);
    }

    for (size_t ui = 0; ui < ds.users.size(); ++ui) {
        const data::UserData& u = ds.users[ui];
        fed::ClientState cs;
        cs.id = int(ui);
        cs.user_id = u.user_id;
        cs.privacy = proto;
        cs.privacy_enabled = c.privacy_enabled;
        if (c.privacy_enabled && proto.exhausted_at_init()) cs.active = false;

        const aug::UserAugmentation* ua = nullptr;
        if (ad) {
            auto it = ad->users.find(u.user_id);
            if (it != ad->users.end()) ua = &it->second;
        }

        const std::vector<int> items_a = detail::merged_domain_items(ds.catalog, u, 'A', ad, false);
        const std::vector<int> items_b = detail::merged_domain_items(ds.catalog, u, 'B', ad, false);
        cs.context.aug_a = detail::seq_from_items(ds.catalog, out.vocab, ad, 'A', items_a);
        cs.context.aug_b = detail::seq_from_items(ds.catalog, out.vocab, ad, 'B', items_b);
        {
            std::vector<int> orig_a, orig_b;
            for (const auto& e : u.a.train) orig_a.push_back(e.item);
            for (const auto& e : u.b.train) orig_b.push_back(e.item);
            cs.context.orig_a = detail::seq_from_items(ds.catalog, out.vocab, ad, 'A', orig_a);
            cs.context.orig_b = detail::seq_from_items(ds.catalog, out.vocab, ad, 'B', orig_b);
        }
        // mixed sequence: chronological train merge, then A then B expansion items
        {
            model::SeqInput mixed;
            for (const auto& e : data::build_mixed_sequence(u.a.train, u.b.train))
                mixed.toks.push_back(detail::make_token(ds.catalog, out.vocab, ad, e.domain, e.item));
            auto append_expansion = [&](char domain, const std::vector<int>& merged, size_t original_len) {
                for (size_t i = original_len; i < merged.size(); ++i)
                    mixed.toks.push_back(detail::make_token(ds.catalog, out.vocab, ad, domain, merged[i]));
            };
            append_expansion('A', items_a, u.a.train.size());
            append_expansion('B', items_b, u.b.train.size());
            cs.context.mixed = std::move(mixed);
        }
        if (ua) cs.context.side_tokens = out.vocab.side_indices(ua->profile);

        // instance pool
        auto add_instance = [&](char domain, int target_ix, double label) {
            model::Instance ins;
            ins.domain = domain;
            ins.label = label;
            ins.target_item = target_ix;
            const model::SeqInput& dom_seq = domain == 'A' ? cs.context.aug_a : cs.context.aug_b;
            ins.target_seq = detail::target_seq_for(dom_seq, ds.catalog, out.vocab, ad, domain, target_ix);
            cs.pool.push_back(std::move(ins));
        };
        for (char domain : {'A', 'B'}) {
            const std::vector<int>& merged = domain == 'A' ? items_a : items_b;
            for (int ix : merged) add_instance(domain, ix, 1.0);

            std::set<int> known(merged.begin(), merged.end());
            const data::DomainSplit& split = u.split(domain);
            known.insert(split.validation.item);
            known.insert(split.test.item);
            if (ua) {
                const auto& negs = domain == 'A' ? ua->expansion.negatives_a : ua->expansion.negatives_b;
                for (const auto& id : negs) {
                    const int ix = ds.catalog.index_of(domain, id);
                    if (ix >= 0 && !known.count(ix)) {
                        add_instance(domain, ix, 0.0);
                        known.insert(ix);
                    }
                }
            }
            const int want_random = c.random_negatives_per_positive * int(merged.size());
            Rng neg_rng(derive_stream(c.seed, "trainneg", fnv1a(u.user_id), uint64_t(domain)));
            const int catalog_size = ds.catalog.size(domain);
            int added = 0, guard = 0;
            while (added < want_random && guard < want_random * 50 + 100) {
                ++guard;
                const int ix = int(neg_rng.uniform_int(uint64_t(catalog_size)));
                if (known.count(ix)) continue;
                known.insert(ix);
                add_instance(domain, ix, 0.0);
                ++added;
            }
        }
        out.clients.push_back(std::move(cs));
    }
    return out;
}

// ---------------------------------------------------------------------------
// ranking evaluation: 1 held-out positive + 99 sampled negatives per user and
// domain, scored by the candidate-terminated domain encoder
// ---------------------------------------------------------------------------

struct EvalOutcome {
    data::RankingMetrics a, b;
};

inline EvalOutcome evaluate_model(const model::ModelParams& params, const data::SplitDataset& ds,
                                  const aug::AugmentedDataset* ad, const cfg::ExperimentConfig& c,
                                  bool test_split) {
    const VocabMaps vm = VocabMaps::make(aug::AugVocab{});
    data::MetricsAccumulator acc_a(c.cutoffs), acc_b(c.cutoffs);

    for (const data::UserData& u : ds.users) {
        const aug::UserAugmentation* ua = nullptr;
        if (ad) {
            auto it = ad->users.find(u.user_id);
            if (it != ad->users.end()) ua = &it->second;
        }

        // user-level context: mixed history and side information
        model::SeqInput mixed;
        {
            std::vector<data::Event> ta = u.a.train, tb = u.b.train;
            if (test_split) {
                ta.push_back(u.a.validation);
                tb.push_back(u.b.validation);
            }
            for (const auto& e : data::build_mixed_sequence(ta, tb))
                mixed.toks.push_back(detail::make_token(ds.catalog, vm, ad, e.domain, e.item));
            const std::vector<int> ia = detail::merged_domain_items(ds.catalog, u, 'A', ad, test_split);
            const std::vector<int> ib = detail::merged_domain_items(ds.catalog, u, 'B', ad, test_split);
            const size_t la = u.a.train.size() + (test_split ? 1 : 0);
            const size_t lb = u.b.train.size() + (test_split ? 1 : 0);
            for (size_t i = la; i < ia.size(); ++i)
                mixed.toks.push_back(detail::make_token(ds.catalog, vm, ad, 'A', ia[i]));
            for (size_t i = lb; i < ib.size(); ++i)
                mixed.toks.push_back(detail::make_token(ds.catalog, vm, ad, 'B', ib[i]));
        }
        const model::Matrix h_m = model::encode_domain(mixed, 'M', params);
        model::Matrix e_side_a(1, params.cfg.d_o), e_side_b(1, params.cfg.d_o);
        if (ua) {
            const auto side = vm.side_indices(ua->profile);
            e_side_a = model::side_embedding(side, params.side_a, params.cfg.d_o);
            e_side_b = model::side_embedding(side, params.side_b, params.cfg.d_o);
        }

        for (char domain : {'A', 'B'}) {
            const data::DomainSplit& split = u.split(domain);
            const int positive = test_split ? split.test.item : split.validation.item;

            std::unordered_set<int> interacted;
            for (const auto& e : split.train) interacted.insert(e.item);
            interacted.insert(split.validation.item);
            interacted.insert(split.test.item);

            const auto negatives =
                data::sample_eval_negatives(ds.catalog.size(domain), interacted, 99, c.seed, u.user_id, domain,
                                            test_split ? "eval-test" : "eval-val");

            const std::vector<int> hist = detail::merged_domain_items(ds.catalog, u, domain, ad, test_split);
            const model::SeqInput hist_seq = detail::seq_from_items(ds.catalog, vm, ad, domain, hist);

            std::vector<data::ScoredCandidate> scored;
            scored.reserve(100);
            auto score_of = [&](int candidate) {
                const model::SeqInput seq =
                    detail::target_seq_for(hist_seq, ds.catalog, vm, ad, domain, candidate);
                return model::score_instance(params, seq, domain, h_m, domain == 'A' ? e_side_a : e_side_b);
            };
            scored.push_back({positive, score_of(positive)});
            for (int neg : negatives) scored.push_back({neg, score_of(neg)});
            const int rank = data::rank_of_positive(scored, positive);
            (domain == 'A' ? acc_a : acc_b).add_rank(rank);
        }
    }
    return {acc_a.result(), acc_b.result()};
}

// ---------------------------------------------------------------------------
// experiment commands (the CLI is a thin veneer over these)
// ---------------------------------------------------------------------------

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

inline data::SplitDataset load_dataset(const cfg::ExperimentConfig& c, const fs::path& run_dir) {
    std::vector<data::Interaction> raw;
    if (c.source == "synthetic") {
        data::SyntheticConfig sc;
        sc.users = c.users;
        sc.items_per_domain = c.items_per_domain;
        sc.latent_dim = c.latent_dim;
        sc.sparsity = c.sparsity;
        sc.min_events_per_user = c.min_events_per_user;
        sc.seed = c.seed;
        raw = data::generate_synthetic(sc);
    } else {
        fs::path p = c.data_path;
        if (!p.is_absolute() && !fs::exists(p) && fs::exists(run_dir / p)) p = run_dir / p;
        raw = data::read_jsonl(p.string());
    }
    data::PreprocessOptions pp;
    pp.min_user_interactions = c.min_user_interactions;
    pp.min_item_frequency = c.min_item_frequency;
    pp.min_events_per_domain = c.min_events_per_domain;
    data::SplitDataset ds = data::preprocess(raw, pp);
    if (ds.users.empty()) throw ConfigError("preprocessing removed every user; relax the dataset filters");
    return ds;
}

inline std::string stats_json(const data::SplitDataset& ds, const aug::AugmentedDataset* ad) {
    const data::CorpusStats s = data::corpus_stats(ds);
    nlohmann::json j{{"users", s.users},
                     {"unique_items", {{"A", s.unique_items_a}, {"B", s.unique_items_b}}},
                     {"ori_avg_seq_len", {{"A", s.avg_seq_len_a}, {"B", s.avg_seq_len_b}}},
                     {"ori_sparsity", {{"A", s.sparsity_a}, {"B", s.sparsity_b}}}};
    if (ad) {
        double aug_a = 0.0, aug_b = 0.0;
        for (const auto& u : ds.users) {
            aug_a += double(detail::merged_domain_items(ds.catalog, u, 'A', ad, false).size()) + 2;
            aug_b += double(detail::merged_domain_items(ds.catalog, u, 'B', ad, false).size()) + 2;
        }
        j["aug_feature_fields"] = {{"user", aug::AugmentedUserProfile::field_count()},
                                   {"item", aug::AugmentedItem::field_count_with_original()}};
        j["aug_avg_seq_len"] = {{"A", aug_a / double(ds.users.size())}, {"B", aug_b / double(ds.users.size())}};
        const double cells_a = double(ds.users.size()) * ds.catalog.size('A');
        const double cells_b = double(ds.users.size()) * ds.catalog.size('B');
        j["aug_sparsity"] = {{"A", 1.0 - aug_a / cells_a}, {"B", 1.0 - aug_b / cells_b}};
    }
    return j.dump(2) + "\n";
}

struct GenerateResult {
    fs::path interactions;
    long records = 0;
};

inline GenerateResult cmd_generate(const cfg::ExperimentConfig& c) {
    c.validate();
    if (c.source != "synthetic") throw ConfigError("generate requires dataset.source = synthetic");
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);
    data::SyntheticConfig sc;
    sc.users = c.users;
    sc.items_per_domain = c.items_per_domain;
    sc.latent_dim = c.latent_dim;
    sc.sparsity = c.sparsity;
    sc.min_events_per_user = c.min_events_per_user;
    sc.seed = c.seed;
    const auto raw = data::generate_synthetic(sc);
    GenerateResult res;
    res.interactions = dir / "interactions.jsonl";
    res.records = long(raw.size());
    data::write_jsonl(res.interactions.string(), raw);
    data::PreprocessOptions pp;
    pp.min_user_interactions = c.min_user_interactions;
    pp.min_item_frequency = c.min_item_frequency;
    pp.min_events_per_domain = c.min_events_per_domain;
    write_text(dir / "stats.json", stats_json(data::preprocess(raw, pp), nullptr));
    write_text(dir / "config_echo.toml", cfg::echo_config(c));
    return res;
}

inline std::unique_ptr<aug::LlmClient> make_backend(const cfg::ExperimentConfig& c) {
    if (c.backend == "mock") return std::make_unique<aug::MockLlmClient>(c.seed);
    aug::HttpOptions h = aug::HttpOptions::from_env();
    h.max_attempts = c.max_attempts;
    return std::make_unique<aug::HttpLlmClient>(std::move(h));
}

struct AugmentResult {
    fs::path items, users;
    double cache_hit_rate = 0.0;
    long warnings = 0;
};

inline AugmentResult cmd_augment(const cfg::ExperimentConfig& c, const data::SplitDataset& ds) {
    c.validate();
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);

    auto backend = make_backend(c);
    const fs::path cache_dir = c.cache_dir.empty() ? dir / "llm_cache" : fs::path(c.cache_dir);
    aug::CachingLlmClient cached(*backend, cache_dir);

    aug::AugmentOptions opts;
    opts.candidate_size = c.candidate_size;
    opts.max_attempts = c.max_attempts;
    opts.temperature = c.temperature;
    opts.top_p = c.top_p;
    opts.max_tokens = c.max_tokens;
    opts.model = c.llm_model;
    opts.seed = c.seed;
    opts.threads = c.threads;
    aug::AugmentStats stats;
    const aug::AugmentedDataset ad = aug::augment_dataset(ds, cached, opts, &stats);

    AugmentResult res;
    res.items = dir / "augmented_items.jsonl";
    res.users = dir / "augmented_users.jsonl";
    aug::write_augmented(res.items.string(), res.users.string(), ad);
    res.cache_hit_rate = cached.hit_rate();
    res.warnings = stats.dropped_ids.load() + stats.fallbacks.load() + stats.transport_errors.load();
    write_text(dir / "stats.json", stats_json(ds, &ad));
    write_text(dir / "config_echo.toml", cfg::echo_config(c));
    nlohmann::json meta{{"cache_hits", cached.hits()},
                        {"cache_misses", cached.misses()},
                        {"cache_hit_rate", res.cache_hit_rate},
                        {"parse_retries", stats.parse_retries.load()},
                        {"fallbacks", stats.fallbacks.load()},
                        {"dropped_ids", stats.dropped_ids.load()},
                        {"transport_errors", stats.transport_errors.load()}};
    write_text(dir / "augment_report.json", meta.dump(2) + "\n");
    return res;
}

struct TrainOutputs {
    fs::path checkpoint, round_reports, traces_dir;
    fed::TrainResult result;
    model::ModelConfig model_config;
};

inline fed::TrainOptions train_options_from(const cfg::ExperimentConfig& c) {
    fed::TrainOptions opt;
    opt.rounds = c.rounds;
    opt.eta = c.eta;
    opt.rho = c.rho;
    opt.batch_size = c.local_batch;
    opt.local_steps = c.local_steps;
    opt.seed = c.seed;
    opt.threads = c.threads;
    opt.dropout = c.dropout;
    opt.hyper = {c.lambda1, c.lambda2, c.alpha, c.tau};
    opt.optimizer = c.optimizer == "adamw" ? fed::ServerOptimizer::AdamW : fed::ServerOptimizer::Sgd;
    opt.weight_decay = c.weight_decay;
    return opt;
}

inline TrainOutputs cmd_train(const cfg::ExperimentConfig& c, const data::SplitDataset& ds,
                              const aug::AugmentedDataset* ad, fed::TrainHooks hooks = {}) {
    c.validate();
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);

    BuiltClients built = build_clients(ds, ad, c);
    Rng init_rng(derive_stream(c.seed, "init"));
    const model::ModelParams init = model::ModelParams::init(built.model_config, init_rng);

    fed::TrainOptions opt = train_options_from(c);
    opt.hooks = std::move(hooks);
    fed::TrainResult result = fed::run_training(built.clients, init, opt);

    TrainOutputs out;
    out.model_config = built.model_config;
    out.checkpoint = dir / "checkpoint.bin";
    out.round_reports = dir / "round_reports.csv";
    out.traces_dir = dir / "traces";
    io::save_checkpoint(out.checkpoint.string(), result.params.flatten(), cfg::config_hash(c));
    io::write_round_reports_csv(out.round_reports.string(), result.reports, c.timing);
    if (c.privacy_enabled) {
        fs::create_directories(out.traces_dir);
        for (const auto& client : built.clients) {
            if (client.privacy.trace.empty()) continue;
            char name[64];
            std::snprintf(name, sizeof(name), "client_%05d.csv", client.id);
            dp::export_trace_csv(client.privacy, (out.traces_dir / name).string());
        }
    }
    write_text(dir / "config_echo.toml", cfg::echo_config(c));
    out.result = std::move(result);
    return out;
}

inline std::vector<io::MetricsRow> cmd_evaluate(const cfg::ExperimentConfig& c, const data::SplitDataset& ds,
                                                const aug::AugmentedDataset* ad, const std::string& checkpoint_path,
                                                const std::string& model_name = "FedCCTR-LM") {
    c.validate();
    const io::Checkpoint ck = io::load_checkpoint(checkpoint_path);
    const model::ModelConfig mc = model_config_from(c, ds.catalog, VocabMaps::make(aug::AugVocab{}));
    model::ModelParams params = model::ModelParams::zeros(mc);
    if (ck.params.size() != params.param_count())
        throw ConfigError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, expected " +
                          std::to_string(params.param_count()));
    params.unflatten(ck.params);
    const EvalOutcome eo = evaluate_model(params, ds, ad, c, c.eval_split == "test");
    auto rows = io::metrics_rows(model_name, eo.a, eo.b);
    const fs::path dir = c.output_dir;
    fs::create_directories(dir);
    io::write_metrics_csv((dir / "metrics.csv").string(), rows);
    return rows;
}

// The six Table-style ablation arms, all sharing one dataset and seed.
inline const std::vector<std::string> kAblationArms = {"FedCCTR-LM",    "w/o PrivAugNet", "w/o IDRA",
                                                       "w/o CDRD",      "w/o AdaLDP",     "w/ Static LDP"};

inline cfg::ExperimentConfig arm_config(const cfg::ExperimentConfig& base, const std::string& arm) {
    cfg::ExperimentConfig c = base;
    if (arm == "w/o IDRA") c.lambda1 = 0.0;
    if (arm == "w/o CDRD") c.lambda2 = 0.0;
    if (arm == "w/o AdaLDP") c.privacy_enabled = false;
    if (arm == "w/ Static LDP") c.decay = 1.0;
    return c;
}

inline std::vector<io::MetricsRow> cmd_ablate(const cfg::ExperimentConfig& base, const data::SplitDataset& ds,
                                              const aug::AugmentedDataset* ad) {
    base.validate();
    const fs::path dir = base.output_dir;
    fs::create_directories(dir);
    std::vector<io::MetricsRow> all;
    for (size_t ai = 0; ai < kAblationArms.size(); ++ai) {
        const std::string& arm = kAblationArms[ai];
        cfg::ExperimentConfig c = arm_config(base, arm);
        c.output_dir = (dir / ("arm_" + std::to_string(ai))).string();
        const aug::AugmentedDataset* arm_ad = arm == "w/o PrivAugNet" ? nullptr : ad;
        TrainOutputs t = cmd_train(c, ds, arm_ad);
        const EvalOutcome eo = evaluate_model(t.result.params, ds, arm_ad, c, c.eval_split == "test");
        for (auto& row : io::metrics_rows(arm, eo.a, eo.b)) all.push_back(row);
    }
    io::write_metrics_csv((dir / "ablation.csv").string(), all);
    write_text(dir / "config_echo.toml", cfg::echo_config(base));
    return all;
}

}  // namespace fedcctr::exp
