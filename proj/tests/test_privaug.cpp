#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "fedcctr/privaug.hpp"

using namespace fedcctr;
using namespace fedcctr::aug;

namespace {

// stub clients for the failure paths
struct GarbageClient : LlmClient {
    int calls = 0;
    ChatReply chat(const ChatRequest&) override {
        ++calls;
        return {"this is not json", 3, 4, 0.0, false};
    }
};

struct OffCandidateClient : LlmClient {
    ChatReply chat(const ChatRequest&) override {
        nlohmann::json j{{"positives_a", {"nope1", "a-known"}},
                         {"negatives_a", {"nope2"}},
                         {"positives_b", {"b-known"}},
                         {"negatives_b", {"b-known"}}};  // collides with positives_b
        return {j.dump(), 0, 0, 0.0, false};
    }
};

struct DeadClient : LlmClient {
    ChatReply chat(const ChatRequest&) override { throw TransportError("connection refused"); }
};

data::SplitDataset tiny_dataset() {
    data::SyntheticConfig cfg;
    cfg.users = 8;
    cfg.items_per_domain = 30;
    cfg.sparsity = 0.8;
    cfg.seed = 5;
    data::PreprocessOptions pp;
    pp.min_user_interactions = 0;
    pp.min_item_frequency = 0;
    pp.min_events_per_domain = 3;
    return data::preprocess(data::generate_synthetic(cfg), pp);
}

}  // namespace

// --- wire format ---------------------------------------------------------------

TEST_CASE("chat body follows the chat-completions shape") {
    ChatRequest req;
    req.model = "llama";
    req.messages = {{"system", "be terse"}, {"user", "hello"}};
    req.temperature = 0.4;
    req.top_p = 0.45;
    req.max_tokens = 128;
    const nlohmann::json j = build_chat_body(req);
    CHECK(j.at("model") == "llama");
    CHECK(j.at("messages").size() == 2);
    CHECK(j.at("messages")[0].at("role") == "system");
    CHECK(j.at("messages")[1].at("content") == "hello");
    CHECK(j.at("temperature") == 0.4);
    CHECK(j.at("top_p") == 0.45);
    CHECK(j.at("max_tokens") == 128);
}

TEST_CASE("reply parsing picks choices[0].message.content and rejects other shapes") {
    nlohmann::json good{{"choices", {{{"message", {{"role", "assistant"}, {"content", "hi"}}}}}}};
    CHECK(parse_chat_reply(good) == "hi");
    CHECK_THROWS_AS(parse_chat_reply(nlohmann::json{{"foo", 1}}), TransportError);
    CHECK_THROWS_AS(parse_chat_reply(nlohmann::json{{"choices", nlohmann::json::array()}}), TransportError);
}

TEST_CASE("decoding defaults sit at the tuned operating point") {
    ChatRequest req;
    CHECK(req.temperature == 0.4);
    CHECK(req.top_p >= 0.3);
    CHECK(req.top_p <= 0.6);
    AugmentOptions opts;
    CHECK(opts.candidate_size == 10);
}

// --- mock backend ------------------------------------------------------------------

TEST_CASE("mock replies are a deterministic function of the request") {
    MockLlmClient c1(9), c2(9), c3(10);
    ChatRequest req;
    req.messages = {{"user", std::string("augment\nINPUT_JSON:") +
                                 R"({"task":"item","item_id":"x","domain":"A","title":"A-item x"})"}};
    CHECK(c1.chat(req).content == c2.chat(req).content);
    CHECK(c1.chat(req).content != c3.chat(req).content);

    ChatRequest req2 = req;
    req2.temperature = 0.8;  // different decoding params are a different request
    CHECK(c1.chat(req).content != c1.chat(req2).content);
}

// --- stage 1: items ---------------------------------------------------------------------

TEST_CASE("item augmentation yields the four-field record deterministically") {
    MockLlmClient client(3);
    AugmentOptions opts;
    ItemRecord item{"a0001", 'A', "A-item a0001"};
    AugmentedItem one = augment_item(item, item_prompt_template(), client, opts);
    AugmentedItem two = augment_item(item, item_prompt_template(), client, opts);
    CHECK(one.genres == two.genres);
    CHECK(one.themes == two.themes);
    CHECK(one.keywords == two.keywords);
    CHECK_FALSE(one.empty());
    CHECK(AugmentedItem::field_count_with_original() == 4);  // title + genres + themes + keywords
}

TEST_CASE("items without a title are rejected") {
    MockLlmClient client(3);
    AugmentOptions opts;
    CHECK_THROWS_AS(augment_item({"x", 'A', ""}, item_prompt_template(), client, opts), AugmentationError);
}

TEST_CASE("malformed replies are retried then fall back to empty augmentation") {
    GarbageClient client;
    AugmentOptions opts;
    opts.max_attempts = 3;
    AugmentStats stats;
    AugmentedItem it = augment_item({"a1", 'A', "A-item a1"}, item_prompt_template(), client, opts, &stats);
    CHECK(it.empty());
    CHECK(client.calls == 3);
    CHECK(stats.parse_retries.load() == 3);
    CHECK(stats.fallbacks.load() == 1);
}

TEST_CASE("transport failures surface or degrade according to policy") {
    DeadClient client;
    AugmentOptions opts;
    AugmentStats stats;
    opts.continue_on_error = true;
    AugmentedItem it = augment_item({"a1", 'A', "A-item a1"}, item_prompt_template(), client, opts, &stats);
    CHECK(it.empty());
    CHECK(stats.transport_errors.load() == 1);
    opts.continue_on_error = false;
    CHECK_THROWS_AS(augment_item({"a1", 'A', "A-item a1"}, item_prompt_template(), client, opts, &stats),
                    TransportError);
}

// --- stage 2: user profiles ------------------------------------------------------------------

TEST_CASE("user profiles carry three augmented fields from the closed vocabularies") {
    MockLlmClient client(4);
    AugmentOptions opts;
    AugmentedItem ai;
    ai.genres = {"sci-fi"};
    std::vector<const AugmentedItem*> seq = {&ai, nullptr};
    std::vector<std::string> titles = {"A-item a1", "B-item b2"};
    AugmentedUserProfile p1 = augment_user("u1", seq, titles, user_prompt_template(), client, opts);
    AugmentedUserProfile p2 = augment_user("u1", seq, titles, user_prompt_template(), client, opts);
    CHECK(AugmentedUserProfile::field_count() == 3);
    CHECK(opts.vocab.has(opts.vocab.age_brackets, p1.age_bracket));
    CHECK(opts.vocab.has(opts.vocab.genders, p1.gender));
    CHECK(p1.age_bracket == p2.age_bracket);
    CHECK(p1.preference_summary == p2.preference_summary);
}

TEST_CASE("an empty mixed sequence is a precondition violation") {
    MockLlmClient client(4);
    AugmentOptions opts;
    CHECK_THROWS_AS(augment_user("u1", {}, {}, user_prompt_template(), client, opts), EmptySequenceError);
}

// --- stage 3: candidates and expansion --------------------------------------------------------

TEST_CASE("candidate sampling excludes history, is seeded, and can cover the catalog") {
    std::vector<std::string> catalog;
    for (int i = 0; i < 20; ++i) catalog.push_back("i" + std::to_string(i));
    std::set<std::string> history = {"i3", "i7"};
    Rng r1(5), r2(5);
    auto c1 = sample_candidates(catalog, 10, history, r1);
    auto c2 = sample_candidates(catalog, 10, history, r2);
    CHECK(c1 == c2);
    for (const auto& id : c1) CHECK(history.count(id) == 0);
    std::set<std::string> uniq(c1.begin(), c1.end());
    CHECK(uniq.size() == 10);

    Rng r3(6);
    auto all = sample_candidates(catalog, 18, history, r3);
    std::set<std::string> got(all.begin(), all.end());
    CHECK(got.size() == 18);  // whole catalog minus history

    Rng r4(7);
    CHECK_THROWS_AS(sample_candidates(catalog, 19, history, r4), ConfigError);
}

TEST_CASE("expansion stays inside the candidate sets and splits deterministically") {
    MockLlmClient client(8);
    AugmentOptions opts;
    AugmentedUserProfile prof;
    prof.user_id = "u1";
    prof.age_bracket = "25-34";
    prof.gender = "female";
    std::vector<std::string> ca, cb;
    for (int i = 0; i < 10; ++i) {
        ca.push_back("a" + std::to_string(i));
        cb.push_back("b" + std::to_string(i));
    }
    auto e1 = expand_sequence(prof, nlohmann::json::array(), ca, cb, seq_prompt_template(), client, opts);
    auto e2 = expand_sequence(prof, nlohmann::json::array(), ca, cb, seq_prompt_template(), client, opts);
    CHECK(e1.positives_a == e2.positives_a);
    CHECK(e1.negatives_b == e2.negatives_b);
    CHECK(e1.positives_a.size() == 4);  // ceil(10/3)
    CHECK(e1.negatives_a.size() == 4);

    const std::set<std::string> sa(ca.begin(), ca.end()), sb(cb.begin(), cb.end());
    for (const auto& id : e1.positives_a) CHECK(sa.count(id) == 1);
    for (const auto& id : e1.negatives_a) CHECK(sa.count(id) == 1);
    for (const auto& id : e1.positives_b) CHECK(sb.count(id) == 1);
    std::set<std::string> pos(e1.positives_a.begin(), e1.positives_a.end());
    for (const auto& id : e1.negatives_a) CHECK(pos.count(id) == 0);
}

TEST_CASE("ids outside the candidate set are dropped with a warning count") {
    OffCandidateClient client;
    AugmentOptions opts;
    AugmentStats stats;
    AugmentedUserProfile prof;
    prof.age_bracket = "25-34";
    prof.gender = "male";
    auto e = expand_sequence(prof, nlohmann::json::array(), {"a-known"}, {"b-known"}, seq_prompt_template(), client,
                             opts, &stats);
    CHECK(e.positives_a == std::vector<std::string>{"a-known"});
    CHECK(e.negatives_a.empty());
    CHECK(e.positives_b == std::vector<std::string>{"b-known"});
    CHECK(e.negatives_b.empty());  // collision with positives_b removed
    CHECK(stats.dropped_ids.load() == 3);
}

// --- merge ------------------------------------------------------------------------------------

TEST_CASE("merging an empty expansion is the identity") {
    std::vector<std::string> orig = {"x", "y", "z"};
    CHECK(merge_expansion(orig, {}) == orig);
}

TEST_CASE("disjoint expansion appends after the last original event") {
    std::vector<std::string> orig = {"a", "b", "c", "d", "e"};
    std::vector<std::string> pos = {"p1", "p2", "p3"};
    auto merged = merge_expansion(orig, pos);
    REQUIRE(merged.size() == 8);
    CHECK(merged[4] == "e");
    CHECK(merged[5] == "p1");
    CHECK(merged[7] == "p3");
}

TEST_CASE("overlapping expansion drops duplicates and merging is idempotent") {
    std::vector<std::string> orig = {"a", "b"};
    std::vector<std::string> pos = {"b", "c", "c"};
    auto once = merge_expansion(orig, pos);
    CHECK(once == std::vector<std::string>{"a", "b", "c"});
    auto twice = merge_expansion(once, pos);
    CHECK(twice == once);
}

// --- cache -------------------------------------------------------------------------------------

TEST_CASE("disk cache replays identical requests with a perfect hit rate") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fedcctr_cache_test";
    fs::remove_all(dir);

    MockLlmClient mock(11);
    CachingLlmClient cached(mock, dir);
    ChatRequest req;
    req.messages = {{"user", std::string("x\nINPUT_JSON:") + R"({"task":"item","title":"t"})"}};

    ChatReply first = cached.chat(req);
    CHECK_FALSE(first.cached);
    CHECK(cached.misses() == 1);
    ChatReply second = cached.chat(req);
    CHECK(second.cached);
    CHECK(second.content == first.content);
    CHECK(cached.hits() == 1);

    // one JSON file per request hash
    int files = 0;
    for (auto& e : fs::directory_iterator(dir)) {
        CHECK(e.path().extension() == ".json");
        ++files;
    }
    CHECK(files == 1);

    // a fresh client over the same directory reads the same reply: 100% hits
    MockLlmClient mock2(999);  // different backend seed would give different text on a miss
    CachingLlmClient warm(mock2, dir);
    ChatReply replay = warm.chat(req);
    CHECK(replay.cached);
    CHECK(replay.content == first.content);
    CHECK(warm.hit_rate() == 1.0);
    fs::remove_all(dir);
}

// --- whole pipeline ------------------------------------------------------------------------------

TEST_CASE("the pipeline is bit-reproducible under the mock backend") {
    auto ds = tiny_dataset();
    REQUIRE(ds.users.size() > 0);
    MockLlmClient mock(21);
    AugmentOptions opts;
    opts.candidate_size = 5;
    opts.seed = 21;
    AugmentedDataset a1 = augment_dataset(ds, mock, opts);
    AugmentedDataset a2 = augment_dataset(ds, mock, opts);

    REQUIRE(a1.users.size() == ds.users.size());
    REQUIRE(a1.items.size() == a2.items.size());
    for (const auto& [key, it] : a1.items) {
        const AugmentedItem* other = a2.item(key.first, key.second);
        REQUIRE(other != nullptr);
        CHECK(it.genres == other->genres);
        CHECK(it.keywords == other->keywords);
    }
    for (const auto& [uid, ua] : a1.users) {
        const auto& other = a2.users.at(uid);
        CHECK(ua.profile.age_bracket == other.profile.age_bracket);
        CHECK(ua.expansion.positives_a == other.expansion.positives_a);
        CHECK(ua.expansion.negatives_b == other.expansion.negatives_b);
    }

    // multithreaded execution produces the same result
    AugmentOptions opts2 = opts;
    opts2.threads = 2;
    AugmentedDataset a3 = augment_dataset(ds, mock, opts2);
    CHECK(a3.users.at(ds.users[0].user_id).expansion.positives_a ==
          a1.users.at(ds.users[0].user_id).expansion.positives_a);
}

TEST_CASE("augmented records round-trip through jsonl files") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "fedcctr_aug_io";
    fs::create_directories(dir);
    auto ds = tiny_dataset();
    MockLlmClient mock(22);
    AugmentOptions opts;
    opts.candidate_size = 5;
    AugmentedDataset a = augment_dataset(ds, mock, opts);

    const auto items = (dir / "items.jsonl").string();
    const auto users = (dir / "users.jsonl").string();
    write_augmented(items, users, a);
    AugmentedDataset back = read_augmented(items, users);
    CHECK(back.items.size() == a.items.size());
    CHECK(back.users.size() == a.users.size());
    for (const auto& [uid, ua] : a.users) {
        CHECK(back.users.at(uid).profile.gender == ua.profile.gender);
        CHECK(back.users.at(uid).expansion.positives_b == ua.expansion.positives_b);
    }
    fs::remove_all(dir);
}
