#pragma once

#include <atomic>
#include <map>
#include <set>
#include <thread>

#include "fedcctr/data.hpp"
#include "fedcctr/llm_client.hpp"

namespace fedcctr::aug {

// ---------------------------------------------------------------------------
// augmentation records
// ---------------------------------------------------------------------------

struct ItemRecord {
    std::string id;
    char domain = 'A';
    std::string title;
};

struct AugmentedItem {
    std::string item_id;
    char domain = 'A';
    std::vector<std::string> genres, themes, keywords;

    bool empty() const { return genres.empty() && themes.empty() && keywords.empty(); }
    // title plus the three generated fields
    static constexpr int field_count_with_original() { return 4; }
};

struct AugmentedUserProfile {
    std::string user_id;
    std::string age_bracket, gender;
    std::vector<std::string> preference_summary;

    static constexpr int field_count() { return 3; }
};

struct SequenceExpansion {
    std::vector<std::string> positives_a, positives_b;
    std::vector<std::string> negatives_a, negatives_b;
};

struct UserAugmentation {
    AugmentedUserProfile profile;
    SequenceExpansion expansion;
};

struct AugmentedDataset {
    std::map<std::pair<char, std::string>, AugmentedItem> items;
    std::map<std::string, UserAugmentation> users;

    const AugmentedItem* item(char domain, const std::string& id) const {
        auto it = items.find({domain, id});
        return it == items.end() ? nullptr : &it->second;
    }
};

// ---------------------------------------------------------------------------
// prompt templates
// ---------------------------------------------------------------------------

struct PromptTemplate {
    std::string system;
    std::string text;  // {name} placeholders
    double temperature = 0.4;
    double top_p = 0.45;
    int max_tokens = 512;

    // {name} spans whose content is an identifier are placeholders; other braces
    // (JSON examples in the instructions) pass through literally
    std::string render(const std::map<std::string, std::string>& binds) const {
        auto is_ident = [](const std::string& s) {
            if (s.empty()) return false;
            for (char c : s)
                if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
            return true;
        };
        std::string out = text;
        size_t pos = 0;
        while ((pos = out.find('{', pos)) != std::string::npos) {
            const size_t end = out.find('}', pos);
            if (end == std::string::npos) break;
            const std::string key = out.substr(pos + 1, end - pos - 1);
            if (!is_ident(key)) {
                ++pos;
                continue;
            }
            auto it = binds.find(key);
            if (it == binds.end()) throw ConfigError("prompt placeholder '" + key + "' is unbound");
            out.replace(pos, end - pos + 1, it->second);
            pos += it->second.size();
        }
        return out;
    }
};

inline PromptTemplate item_prompt_template() {
    PromptTemplate t;
    t.system = "You enrich catalog items for a recommender system. Reply with strict JSON only.";
    t.text =
        "Given the item below, infer plausible genres, themes and keywords.\n"
        "Reply with one JSON object exactly of the form\n"
        "{\"genres\": [..], \"themes\": [..], \"keywords\": [..]}.\n"
        "INPUT_JSON:{payload}";
    return t;
}

inline PromptTemplate user_prompt_template() {
    PromptTemplate t;
    t.system = "You summarize a user's cross-domain history into a profile. Reply with strict JSON only.";
    t.text =
        "Given the interaction history below, produce an enriched user profile.\n"
        "Reply with one JSON object exactly of the form\n"
        "{\"age_bracket\": \"..\", \"gender\": \"..\", \"preference_summary\": [..]}.\n"
        "INPUT_JSON:{payload}";
    return t;
}

inline PromptTemplate seq_prompt_template() {
    PromptTemplate t;
    t.system = "You expand sparse interaction sequences for a recommender system. Reply with strict JSON only.";
    t.text =
        "Given the user profile, their history and the candidate items below, pick\n"
        "likely future interactions (positives) and unlikely ones (negatives),\n"
        "choosing only from the candidates.\n"
        "Reply with one JSON object exactly of the form\n"
        "{\"positives_a\": [..], \"negatives_a\": [..], \"positives_b\": [..], \"negatives_b\": [..]}.\n"
        "INPUT_JSON:{payload}";
    return t;
}

// ---------------------------------------------------------------------------
// pipeline options and bookkeeping
// ---------------------------------------------------------------------------

struct AugmentOptions {
    int candidate_size = 10;  // |C| per domain
    int max_attempts = 3;     // parse retries per request
    double temperature = 0.4;
    double top_p = 0.45;
    int max_tokens = 512;
    std::string model = "mock";
    uint64_t seed = 1;
    int threads = 1;
    bool continue_on_error = true;  // transport failure -> un-augmented record
    AugVocab vocab;
};

struct AugmentStats {
    std::atomic<long> items_ok{0}, users_ok{0};
    std::atomic<long> parse_retries{0}, fallbacks{0}, dropped_ids{0}, transport_errors{0};
};

namespace detail {

inline ChatRequest make_request(const PromptTemplate& tmpl, const nlohmann::json& payload,
                                const AugmentOptions& opts, int attempt) {
    ChatRequest req;
    req.model = opts.model;
    req.temperature = opts.temperature;
    req.top_p = opts.top_p;
    req.max_tokens = opts.max_tokens;
    req.messages.push_back({"system", tmpl.system});
    req.messages.push_back({"user", tmpl.render({{"payload", payload.dump()}})});
    if (attempt > 0)
        req.messages.push_back(
            {"system", "Your previous reply was not valid JSON. Reply with valid JSON only. Attempt " +
                           std::to_string(attempt + 1) + "."});
    return req;
}

// chat with parse retries; returns nullopt after the attempt budget is spent
template <class Parse>
inline auto chat_parsed(LlmClient& client, const PromptTemplate& tmpl, const nlohmann::json& payload,
                        const AugmentOptions& opts, AugmentStats* stats, Parse&& parse)
    -> std::optional<decltype(parse(nlohmann::json{}))> {
    for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
        ChatReply reply;
        try {
            reply = client.chat(make_request(tmpl, payload, opts, attempt));
        } catch (const TransportError&) {
            if (stats) ++stats->transport_errors;
            if (opts.continue_on_error) return std::nullopt;
            throw;
        }
        try {
            return parse(nlohmann::json::parse(reply.content));
        } catch (const std::exception&) {
            if (stats) ++stats->parse_retries;
        }
    }
    if (stats) ++stats->fallbacks;
    return std::nullopt;
}

inline std::vector<std::string> string_list(const nlohmann::json& j, const char* key) {
    std::vector<std::string> out;
    if (!j.contains(key)) return out;
    for (const auto& v : j.at(key))
        if (v.is_string()) out.push_back(v.get<std::string>());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// stage 1: item feature augmentation
// ---------------------------------------------------------------------------

inline AugmentedItem augment_item(const ItemRecord& item, const PromptTemplate& tmpl, LlmClient& client,
                                  const AugmentOptions& opts, AugmentStats* stats = nullptr) {
    if (item.title.empty()) throw AugmentationError("item " + item.id + " has no title");
    nlohmann::json payload{{"task", "item"},
                           {"item_id", item.id},
                           {"domain", std::string(1, item.domain)},
                           {"title", item.title}};
    AugmentedItem out;
    out.item_id = item.id;
    out.domain = item.domain;
    auto parsed = detail::chat_parsed(client, tmpl, payload, opts, stats, [](const nlohmann::json& j) {
        if (!j.is_object()) throw AugmentationError("reply is not an object");
        std::array<std::vector<std::string>, 3> fields = {detail::string_list(j, "genres"),
                                                          detail::string_list(j, "themes"),
                                                          detail::string_list(j, "keywords")};
        if (fields[0].empty() && fields[1].empty() && fields[2].empty())
            throw AugmentationError("reply carries no augmented fields");
        return fields;
    });
    if (parsed) {
        out.genres = std::move((*parsed)[0]);
        out.themes = std::move((*parsed)[1]);
        out.keywords = std::move((*parsed)[2]);
        if (stats) ++stats->items_ok;
    }
    return out;  // empty augmentation on fallback, recorded in stats
}

// ---------------------------------------------------------------------------
// stage 2: user profile augmentation
// ---------------------------------------------------------------------------

// mixed_seq pairs each event's title with its stage-1 features
inline AugmentedUserProfile augment_user(const std::string& user_id,
                                         const std::vector<const AugmentedItem*>& mixed_seq,
                                         const std::vector<std::string>& titles, const PromptTemplate& tmpl,
                                         LlmClient& client, const AugmentOptions& opts,
                                         AugmentStats* stats = nullptr) {
    if (mixed_seq.empty()) throw EmptySequenceError("user " + user_id + " has an empty mixed sequence");
    nlohmann::json history = nlohmann::json::array();
    for (size_t i = 0; i < mixed_seq.size(); ++i) {
        nlohmann::json ev{{"title", i < titles.size() ? titles[i] : ""}};
        if (mixed_seq[i]) {
            ev["genres"] = mixed_seq[i]->genres;
            ev["themes"] = mixed_seq[i]->themes;
            ev["keywords"] = mixed_seq[i]->keywords;
        }
        history.push_back(std::move(ev));
    }
    nlohmann::json payload{{"task", "user"}, {"user_id", user_id}, {"history", history}};

    AugmentedUserProfile out;
    out.user_id = user_id;
    auto parsed = detail::chat_parsed(client, tmpl, payload, opts, stats, [&](const nlohmann::json& j) {
        AugmentedUserProfile p;
        p.user_id = user_id;
        p.age_bracket = j.value("age_bracket", "");
        p.gender = j.value("gender", "");
        p.preference_summary = detail::string_list(j, "preference_summary");
        // fields must come from the closed vocabularies
        if (!opts.vocab.has(opts.vocab.age_brackets, p.age_bracket))
            throw AugmentationError("age bracket outside vocabulary");
        if (!opts.vocab.has(opts.vocab.genders, p.gender)) throw AugmentationError("gender outside vocabulary");
        for (const auto& pref : p.preference_summary)
            if (!opts.vocab.has(opts.vocab.genres, pref)) throw AugmentationError("preference outside vocabulary");
        return p;
    });
    if (parsed) {
        out = std::move(*parsed);
        if (stats) ++stats->users_ok;
    }
    return out;
}

// ---------------------------------------------------------------------------
// stage 3: candidate sampling and interaction sequence expansion
// ---------------------------------------------------------------------------

inline std::vector<std::string> sample_candidates(std::span<const std::string> catalog, int size,
                                                  const std::set<std::string>& exclude, Rng& rng) {
    std::vector<std::string> pool;
    for (const auto& id : catalog)
        if (!exclude.count(id)) pool.push_back(id);
    if (int(pool.size()) < size)
        throw ConfigError("catalog too small: need " + std::to_string(size) + " candidates, have " +
                          std::to_string(pool.size()));
    // partial Fisher-Yates
    for (int i = 0; i < size; ++i) {
        const size_t j = i + rng.uniform_int(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(size);
    return pool;
}

inline SequenceExpansion expand_sequence(const AugmentedUserProfile& profile, const nlohmann::json& mixed_history,
                                         const std::vector<std::string>& cand_a,
                                         const std::vector<std::string>& cand_b, const PromptTemplate& tmpl,
                                         LlmClient& client, const AugmentOptions& opts,
                                         AugmentStats* stats = nullptr) {
    if (cand_a.empty() || cand_b.empty()) throw ConfigError("candidate sets must be nonempty");
    nlohmann::json payload{{"task", "seq"},
                           {"profile",
                            {{"age_bracket", profile.age_bracket},
                             {"gender", profile.gender},
                             {"preference_summary", profile.preference_summary}}},
                           {"history", mixed_history},
                           {"candidates_a", cand_a},
                           {"candidates_b", cand_b}};

    auto parsed = detail::chat_parsed(client, tmpl, payload, opts, stats, [](const nlohmann::json& j) {
        SequenceExpansion e;
        e.positives_a = detail::string_list(j, "positives_a");
        e.negatives_a = detail::string_list(j, "negatives_a");
        e.positives_b = detail::string_list(j, "positives_b");
        e.negatives_b = detail::string_list(j, "negatives_b");
        return e;
    });
    SequenceExpansion out;
    if (!parsed) return out;
    out = std::move(*parsed);

    // every id must come from the candidate set; violators are dropped
    auto filter = [&](std::vector<std::string>& ids, const std::vector<std::string>& cands) {
        const std::set<std::string> allowed(cands.begin(), cands.end());
        std::vector<std::string> kept;
        std::set<std::string> seen;
        for (auto& id : ids) {
            if (allowed.count(id) && !seen.count(id)) {
                seen.insert(id);
                kept.push_back(id);
            } else if (stats) {
                ++stats->dropped_ids;
            }
        }
        ids = std::move(kept);
    };
    filter(out.positives_a, cand_a);
    filter(out.negatives_a, cand_a);
    filter(out.positives_b, cand_b);
    filter(out.negatives_b, cand_b);

    // positives and negatives must be disjoint per domain
    auto disjoin = [&](const std::vector<std::string>& pos, std::vector<std::string>& neg) {
        const std::set<std::string> p(pos.begin(), pos.end());
        std::vector<std::string> kept;
        for (auto& id : neg) {
            if (p.count(id)) {
                if (stats) ++stats->dropped_ids;
            } else {
                kept.push_back(id);
            }
        }
        neg = std::move(kept);
    };
    disjoin(out.positives_a, out.negatives_a);
    disjoin(out.positives_b, out.negatives_b);
    return out;
}

// Union preserving the original chronology: expansion positives are appended
// after the last original event in their given order, duplicates dropped
// keeping the first occurrence.
inline std::vector<std::string> merge_expansion(std::span<const std::string> original,
                                                std::span<const std::string> positives) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& id : original)
        if (seen.insert(id).second) out.push_back(id);
    for (const auto& id : positives)
        if (seen.insert(id).second) out.push_back(id);
    return out;
}

// ---------------------------------------------------------------------------
// whole-dataset driver (three sequential stages per client)
// ---------------------------------------------------------------------------

inline std::string synthetic_title(char domain, const std::string& id) {
    return std::string(1, domain) + "-item " + id;
}

inline AugmentedDataset augment_dataset(const data::SplitDataset& ds, LlmClient& client, const AugmentOptions& opts,
                                        AugmentStats* stats = nullptr) {
    AugmentedDataset out;

    // stage 1 over the union of catalog items (shared across clients via the cache)
    std::vector<ItemRecord> all_items;
    for (char d : {'A', 'B'}) {
        const auto& names = d == 'A' ? ds.catalog.items_a : ds.catalog.items_b;
        for (const auto& id : names) all_items.push_back({id, d, synthetic_title(d, id)});
    }
    {
        std::vector<AugmentedItem> results(all_items.size());
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            const PromptTemplate tmpl = item_prompt_template();
            for (size_t i = next.fetch_add(1); i < all_items.size(); i = next.fetch_add(1))
                results[i] = augment_item(all_items[i], tmpl, client, opts, stats);
        };
        std::vector<std::thread> pool;
        const int n_threads = std::max(1, opts.threads);
        for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
        worker();
        for (auto& th : pool) th.join();
        for (size_t i = 0; i < all_items.size(); ++i)
            out.items[{all_items[i].domain, all_items[i].id}] = std::move(results[i]);
    }

    // stages 2 and 3 per user
    {
        std::vector<UserAugmentation> results(ds.users.size());
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            const PromptTemplate user_tmpl = user_prompt_template();
            const PromptTemplate seq_tmpl = seq_prompt_template();
            for (size_t ui = next.fetch_add(1); ui < ds.users.size(); ui = next.fetch_add(1)) {
                const data::UserData& u = ds.users[ui];

                // mixed train history with stage-1 features
                std::vector<const AugmentedItem*> seq;
                std::vector<std::string> titles;
                nlohmann::json history = nlohmann::json::array();
                std::set<std::string> hist_a, hist_b;
                for (const data::Event& e : data::build_mixed_sequence(u.a.train, u.b.train)) {
                    const std::string& id = ds.catalog.name_of(e.domain, e.item);
                    (e.domain == 'A' ? hist_a : hist_b).insert(id);
                    const AugmentedItem* ai = out.item(e.domain, id);
                    seq.push_back(ai);
                    titles.push_back(synthetic_title(e.domain, id));
                    nlohmann::json ev{{"title", titles.back()}};
                    if (ai && !ai->empty()) ev["genres"] = ai->genres;
                    history.push_back(std::move(ev));
                }

                UserAugmentation ua;
                ua.profile = augment_user(u.user_id, seq, titles, user_tmpl, client, opts, stats);

                Rng cand_rng(derive_stream(opts.seed, "candidates", fnv1a(u.user_id)));
                const auto cand_a = sample_candidates(ds.catalog.items_a, opts.candidate_size, hist_a, cand_rng);
                const auto cand_b = sample_candidates(ds.catalog.items_b, opts.candidate_size, hist_b, cand_rng);
                ua.expansion =
                    expand_sequence(ua.profile, history, cand_a, cand_b, seq_tmpl, client, opts, stats);
                results[ui] = std::move(ua);
            }
        };
        std::vector<std::thread> pool;
        const int n_threads = std::max(1, opts.threads);
        for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
        worker();
        for (auto& th : pool) th.join();
        for (size_t ui = 0; ui < ds.users.size(); ++ui) out.users[ds.users[ui].user_id] = std::move(results[ui]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence, parallel to the raw interaction file
// ---------------------------------------------------------------------------

inline void write_augmented(const std::string& items_path, const std::string& users_path,
                            const AugmentedDataset& ad) {
    std::ofstream items(items_path);
    if (!items) throw IoError("cannot write " + items_path);
    for (const auto& [key, it] : ad.items) {
        nlohmann::json j{{"item", key.second},        {"domain", std::string(1, key.first)}, {"genres", it.genres},
                         {"themes", it.themes},       {"keywords", it.keywords}};
        items << j.dump() << "\n";
    }
    std::ofstream users(users_path);
    if (!users) throw IoError("cannot write " + users_path);
    for (const auto& [uid, ua] : ad.users) {
        nlohmann::json j{{"user", uid},
                         {"profile",
                          {{"age_bracket", ua.profile.age_bracket},
                           {"gender", ua.profile.gender},
                           {"preference_summary", ua.profile.preference_summary}}},
                         {"positives_a", ua.expansion.positives_a},
                         {"negatives_a", ua.expansion.negatives_a},
                         {"positives_b", ua.expansion.positives_b},
                         {"negatives_b", ua.expansion.negatives_b}};
        users << j.dump() << "\n";
    }
}

inline AugmentedDataset read_augmented(const std::string& items_path, const std::string& users_path) {
    AugmentedDataset out;
    std::ifstream items(items_path);
    if (!items) throw IoError("cannot read " + items_path);
    std::string line;
    while (std::getline(items, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        AugmentedItem it;
        it.item_id = j.at("item").get<std::string>();
        it.domain = j.at("domain").get<std::string>()[0];
        it.genres = detail::string_list(j, "genres");
        it.themes = detail::string_list(j, "themes");
        it.keywords = detail::string_list(j, "keywords");
        out.items[{it.domain, it.item_id}] = std::move(it);
    }
    std::ifstream users(users_path);
    if (!users) throw IoError("cannot read " + users_path);
    while (std::getline(users, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        UserAugmentation ua;
        ua.profile.user_id = j.at("user").get<std::string>();
        const auto& prof = j.at("profile");
        ua.profile.age_bracket = prof.value("age_bracket", "");
        ua.profile.gender = prof.value("gender", "");
        ua.profile.preference_summary = detail::string_list(prof, "preference_summary");
        ua.expansion.positives_a = detail::string_list(j, "positives_a");
        ua.expansion.negatives_a = detail::string_list(j, "negatives_a");
        ua.expansion.positives_b = detail::string_list(j, "positives_b");
        ua.expansion.negatives_b = detail::string_list(j, "negatives_b");
        out.users[ua.profile.user_id] = std::move(ua);
    }
    return out;
}

}  // namespace fedcctr::aug
