#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "fedcctr/errors.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::data {

// One raw interaction record, as stored in JSON-lines files.
struct Interaction {
    std::string user;
    std::string item;
    char domain = 'A';  // 'A' or 'B'
    double rating = 1.0;
    int64_t ts = 0;
};

// One event inside an id-mapped, time-ordered sequence.
struct Event {
    int item = -1;  // index into the domain catalog
    char domain = 'A';
    int64_t ts = 0;
};

struct Catalog {
    std::vector<std::string> items_a, items_b;
    std::unordered_map<std::string, int> index_a, index_b;

    int index_of(char domain, const std::string& id) const {
        const auto& m = domain == 'A' ? index_a : index_b;
        auto it = m.find(id);
        return it == m.end() ? -1 : it->second;
    }
    const std::string& name_of(char domain, int ix) const {
        return domain == 'A' ? items_a[ix] : items_b[ix];
    }
    int size(char domain) const { return domain == 'A' ? int(items_a.size()) : int(items_b.size()); }
};

// Leave-one-out split for one user in one domain: train events followed by the
// held-out validation and test events.
struct DomainSplit {
    std::vector<Event> train;
    Event validation;
    Event test;
};

struct UserData {
    std::string user_id;
    DomainSplit a, b;
    std::vector<Event> all_events;  // chronological union across domains (pre-split)

    const DomainSplit& split(char d) const { return d == 'A' ? a : b; }
};

struct SplitDataset {
    Catalog catalog;
    std::vector<UserData> users;
};

// ---------------------------------------------------------------------------
// ordering helpers: ties broken A-before-B, then by item index
// ---------------------------------------------------------------------------

inline bool event_less(const Event& x, const Event& y) {
    if (x.ts != y.ts) return x.ts < y.ts;
    if (x.domain != y.domain) return x.domain < y.domain;
    return x.item < y.item;
}

// Chronological merge of two per-domain sequences into a mixed-domain sequence.
inline std::vector<Event> build_mixed_sequence(std::span<const Event> a, std::span<const Event> b) {
    std::vector<Event> out;
    out.reserve(a.size() + b.size());
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (event_less(b[j], a[i]))
            out.push_back(b[j++]);
        else
            out.push_back(a[i++]);
    }
    while (i < a.size()) out.push_back(a[i++]);
    while (j < b.size()) out.push_back(b[j++]);
    return out;
}

// ---------------------------------------------------------------------------
// preprocessing: frequency filters + leave-one-out split
// ---------------------------------------------------------------------------

struct PreprocessOptions {
    int min_user_interactions = 10;  // strictly more than this many events kept
    int min_item_frequency = 10;     // strictly more than this many occurrences kept
    int min_events_per_domain = 3;   // leave-one-out needs train/val/test per domain
};

inline SplitDataset preprocess(std::span<const Interaction> raw, const PreprocessOptions& opt = {}) {
    // item frequency filter (strict ">")
    std::map<std::pair<char, std::string>, int> freq;
    for (const auto& r : raw) {
        if (r.domain != 'A' && r.domain != 'B') throw ConfigError("unknown domain tag in raw data");
        ++freq[{r.domain, r.item}];
    }
    std::set<std::pair<char, std::string>> kept_items;
    for (const auto& [key, n] : freq)
        if (n > opt.min_item_frequency) kept_items.insert(key);

    // group surviving events per user
    std::map<std::string, std::vector<Interaction>> by_user;
    for (const auto& r : raw)
        if (kept_items.count({r.domain, r.item})) by_user[r.user].push_back(r);

    // catalogs over items that survive and are referenced by retained users
    SplitDataset out;
    std::set<std::string> cat_a, cat_b;

    std::vector<const std::vector<Interaction>*> retained;
    std::vector<std::string> retained_ids;
    for (auto& [user, events] : by_user) {
        int na = 0, nb = 0;
        for (const auto& e : events) (e.domain == 'A' ? na : nb)++;
        // overlapping-user requirement plus enough history per domain to split
        if (int(events.size()) <= opt.min_user_interactions) continue;
        if (na < opt.min_events_per_domain || nb < opt.min_events_per_domain) continue;
        retained.push_back(&events);
        retained_ids.push_back(user);
        for (const auto& e : events) (e.domain == 'A' ? cat_a : cat_b).insert(e.item);
    }

    out.catalog.items_a.assign(cat_a.begin(), cat_a.end());
    out.catalog.items_b.assign(cat_b.begin(), cat_b.end());
    for (size_t i = 0; i < out.catalog.items_a.size(); ++i) out.catalog.index_a[out.catalog.items_a[i]] = int(i);
    for (size_t i = 0; i < out.catalog.items_b.size(); ++i) out.catalog.index_b[out.catalog.items_b[i]] = int(i);

    for (size_t u = 0; u < retained.size(); ++u) {
        UserData ud;
        ud.user_id = retained_ids[u];
        std::vector<Event> a, b;
        for (const auto& r : *retained[u]) {
            Event e{out.catalog.index_of(r.domain, r.item), r.domain, r.ts};
            (r.domain == 'A' ? a : b).push_back(e);
        }
        std::sort(a.begin(), a.end(), event_less);
        std::sort(b.begin(), b.end(), event_less);
        ud.all_events = build_mixed_sequence(a, b);

        auto split_one = [](std::vector<Event>& ev) {
            DomainSplit s;
            s.test = ev.back();
            ev.pop_back();
            s.validation = ev.back();
            ev.pop_back();
            s.train = std::move(ev);
            return s;
        };
        ud.a = split_one(a);
        ud.b = split_one(b);
        out.users.push_back(std::move(ud));
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus: latent-factor click model with exact event counts
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int users = 200;
    int items_per_domain = 500;
    int latent_dim = 8;
    double sparsity = 0.97;  // fraction of the user x item grid left empty, per domain
    int min_events_per_user = 3;
    uint64_t seed = 1;
};

inline std::vector<Interaction> generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.users < 2 || cfg.items_per_domain < 2) throw ConfigError("synthetic corpus needs >= 2 users and items");
    if (cfg.sparsity < 0.0 || cfg.sparsity >= 1.0) throw ConfigError("sparsity must be in [0,1)");
    const int64_t cells = int64_t(cfg.users) * cfg.items_per_domain;
    const int64_t target = std::llround((1.0 - cfg.sparsity) * double(cells));
    if (target < int64_t(cfg.users) * cfg.min_events_per_user)
        throw ConfigError("infeasible sparsity: fewer events than users * min_events (sparsity too high)");

    Rng latent_rng(derive_stream(cfg.seed, "synthetic-latent"));
    std::vector<double> user_vec(size_t(cfg.users) * cfg.latent_dim);
    for (double& v : user_vec) v = latent_rng.gaussian();

    std::vector<Interaction> out;
    char name_buf[32];

    for (char domain : {'A', 'B'}) {
        Rng item_rng(derive_stream(cfg.seed, "synthetic-items", domain));
        std::vector<double> item_vec(size_t(cfg.items_per_domain) * cfg.latent_dim);
        for (double& v : item_vec) v = item_rng.gaussian();

        // affinity of every (user, item) pair
        struct Cell {
            double affinity;
            int user, item;
        };
        std::vector<Cell> cells_v;
        cells_v.reserve(cells);
        for (int u = 0; u < cfg.users; ++u)
            for (int i = 0; i < cfg.items_per_domain; ++i) {
                double s = 0.0;
                for (int k = 0; k < cfg.latent_dim; ++k)
                    s += user_vec[size_t(u) * cfg.latent_dim + k] * item_vec[size_t(i) * cfg.latent_dim + k];
                cells_v.push_back({s, u, i});
            }

        // forced per-user picks first, then the global affinity quantile
        std::vector<uint8_t> taken(cells, 0);
        std::vector<std::pair<int, int>> chosen;
        chosen.reserve(target);
        for (int u = 0; u < cfg.users; ++u) {
            std::vector<std::pair<double, int>> best;
            for (int i = 0; i < cfg.items_per_domain; ++i)
                best.push_back({cells_v[size_t(u) * cfg.items_per_domain + i].affinity, i});
            std::partial_sort(best.begin(), best.begin() + cfg.min_events_per_user, best.end(),
                              [](auto& x, auto& y) { return x.first > y.first; });
            for (int j = 0; j < cfg.min_events_per_user; ++j) {
                const int i = best[j].second;
                taken[size_t(u) * cfg.items_per_domain + i] = 1;
                chosen.push_back({u, i});
            }
        }
        std::sort(cells_v.begin(), cells_v.end(), [](const Cell& x, const Cell& y) {
            if (x.affinity != y.affinity) return x.affinity > y.affinity;
            if (x.user != y.user) return x.user < y.user;
            return x.item < y.item;
        });
        for (const Cell& c : cells_v) {
            if (int64_t(chosen.size()) >= target) break;
            if (taken[size_t(c.user) * cfg.items_per_domain + c.item]) continue;
            taken[size_t(c.user) * cfg.items_per_domain + c.item] = 1;
            chosen.push_back({c.user, c.item});
        }

        Rng ts_rng(derive_stream(cfg.seed, "synthetic-ts", domain));
        for (const auto& [u, i] : chosen) {
            std::snprintf(name_buf, sizeof(name_buf), "u%05d", u);
            Interaction r;
            r.user = name_buf;
            std::snprintf(name_buf, sizeof(name_buf), "%c%05d", domain == 'A' ? 'a' : 'b', i);
            r.item = name_buf;
            r.domain = domain;
            r.rating = 5.0;
            r.ts = int64_t(ts_rng.uniform_int(1000000));
            out.push_back(std::move(r));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// ranking metrics: NDCG@K and MRR@K for a single relevant item among sampled
// negatives. Rank ties are broken by ascending item index.
// ---------------------------------------------------------------------------

struct ScoredCandidate {
    int item = -1;
    double score = 0.0;
};

inline const std::vector<int> kDefaultCutoffs = {2, 5, 10};

struct RankingMetrics {
    std::map<int, double> ndcg;
    std::map<int, double> mrr;
    long n_instances = 0;
};

// 1-based rank of the positive among candidates by descending score; a
// duplicate candidate id is a protocol violation.
inline int rank_of_positive(std::span<const ScoredCandidate> candidates, int positive_item) {
    std::unordered_set<int> seen;
    double pos_score = 0.0;
    bool found = false;
    for (const auto& c : candidates) {
        if (!seen.insert(c.item).second) throw EvaluationError("duplicate candidate id " + std::to_string(c.item));
        if (c.item == positive_item) {
            pos_score = c.score;
            found = true;
        }
    }
    if (!found) throw EvaluationError("positive item missing from candidates");
    int rank = 1;
    for (const auto& c : candidates) {
        if (c.item == positive_item) continue;
        if (c.score > pos_score || (c.score == pos_score && c.item < positive_item)) ++rank;
    }
    return rank;
}

inline double ndcg_at(int rank, int k) { return rank <= k ? 1.0 / std::log2(double(rank) + 1.0) : 0.0; }
inline double mrr_at(int rank, int k) { return rank <= k ? 1.0 / double(rank) : 0.0; }

class MetricsAccumulator {
public:
    explicit MetricsAccumulator(std::vector<int> cutoffs = kDefaultCutoffs) : cutoffs_(std::move(cutoffs)) {}

    void add_rank(int rank) {
        for (int k : cutoffs_) {
            ndcg_sum_[k] += ndcg_at(rank, k);
            mrr_sum_[k] += mrr_at(rank, k);
        }
        ++n_;
    }

    RankingMetrics result() const {
        if (n_ == 0) throw EvaluationError("no instances accumulated");
        RankingMetrics m;
        m.n_instances = n_;
        for (int k : cutoffs_) {
            m.ndcg[k] = ndcg_sum_.at(k) / double(n_);
            m.mrr[k] = mrr_sum_.at(k) / double(n_);
        }
        return m;
    }

private:
    std::vector<int> cutoffs_;
    std::map<int, double> ndcg_sum_, mrr_sum_;
    long n_ = 0;
};

// Metrics over a batch of scored instances; each instance is exactly 1 positive
// plus 99 sampled negatives.
inline RankingMetrics evaluate_ranking(std::span<const std::vector<ScoredCandidate>> instances,
                                       std::span<const int> positives,
                                       const std::vector<int>& cutoffs = kDefaultCutoffs) {
    if (instances.size() != positives.size()) throw EvaluationError("instances/positives length mismatch");
    MetricsAccumulator acc(cutoffs);
    for (size_t i = 0; i < instances.size(); ++i) {
        if (instances[i].size() != 100) throw EvaluationError("an instance must score exactly 100 candidates");
        acc.add_rank(rank_of_positive(instances[i], positives[i]));
    }
    return acc.result();
}

// Seeded per (user, domain, purpose): negatives are items the user never
// interacted with in that domain.
inline std::vector<int> sample_eval_negatives(int catalog_size, const std::unordered_set<int>& user_items,
                                              int count, uint64_t seed, const std::string& user, char domain,
                                              std::string_view purpose) {
    if (catalog_size - int(user_items.size()) < count)
        throw EvaluationError("catalog too small to sample " + std::to_string(count) + " negatives");
    Rng rng(derive_stream(fnv1a(user, seed), purpose, uint64_t(domain)));
    std::unordered_set<int> picked;
    std::vector<int> out;
    out.reserve(count);
    while (int(out.size()) < count) {
        const int c = int(rng.uniform_int(uint64_t(catalog_size)));
        if (user_items.count(c) || picked.count(c)) continue;
        picked.insert(c);
        out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines IO and the Amazon review-JSON converter
// ---------------------------------------------------------------------------

inline void write_jsonl(const std::string& path, std::span<const Interaction> records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& r : records) {
        nlohmann::json j{{"user", r.user}, {"item", r.item}, {"domain", std::string(1, r.domain)},
                         {"rating", r.rating}, {"ts", r.ts}};
        out << j.dump() << "\n";
    }
}

inline std::vector<Interaction> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<Interaction> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Interaction r;
        r.user = j.at("user").get<std::string>();
        r.item = j.at("item").get<std::string>();
        const std::string d = j.at("domain").get<std::string>();
        if (d != "A" && d != "B") throw IoError(path + ":" + std::to_string(lineno) + ": bad domain " + d);
        r.domain = d[0];
        r.rating = j.at("rating").get<double>();
        r.ts = j.at("ts").get<int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

// Converts one Amazon-reviews JSON file (reviewerID/asin/overall/unixReviewTime
// per line) into interactions tagged with the given domain.
inline std::vector<Interaction> convert_amazon_reviews(const std::string& path, char domain) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<Interaction> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        Interaction r;
        r.user = j.at("reviewerID").get<std::string>();
        r.item = j.at("asin").get<std::string>();
        r.domain = domain;
        r.rating = j.value("overall", 1.0);
        r.ts = j.value("unixReviewTime", int64_t(0));
        out.push_back(std::move(r));
    }
    return out;
}

// Table-style corpus statistics (users, items, sequence lengths, sparsity).
struct CorpusStats {
    long users = 0;
    long unique_items_a = 0, unique_items_b = 0;
    double avg_seq_len_a = 0.0, avg_seq_len_b = 0.0;
    double sparsity_a = 0.0, sparsity_b = 0.0;
};

inline CorpusStats corpus_stats(const SplitDataset& ds) {
    CorpusStats s;
    s.users = long(ds.users.size());
    s.unique_items_a = ds.catalog.size('A');
    s.unique_items_b = ds.catalog.size('B');
    long ev_a = 0, ev_b = 0;
    for (const auto& u : ds.users) {
        ev_a += long(u.a.train.size()) + 2;
        ev_b += long(u.b.train.size()) + 2;
    }
    if (s.users > 0) {
        s.avg_seq_len_a = double(ev_a) / s.users;
        s.avg_seq_len_b = double(ev_b) / s.users;
        if (s.unique_items_a > 0) s.sparsity_a = 1.0 - double(ev_a) / (double(s.users) * s.unique_items_a);
        if (s.unique_items_b > 0) s.sparsity_b = 1.0 - double(ev_b) / (double(s.users) * s.unique_items_b);
    }
    return s;
}

}  // namespace fedcctr::data
