#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedcctr/errors.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::aug {

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ChatRequest {
    std::string model = "mock";
    std::vector<ChatMessage> messages;
    double temperature = 0.4;
    double top_p = 0.45;
    int max_tokens = 512;
};

struct ChatReply {
    std::string content;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    double latency_ms = 0.0;
    bool cached = false;
};

// chat-completions wire shape: {model, messages:[{role,content}...], temperature, top_p, max_tokens}
inline nlohmann::json build_chat_body(const ChatRequest& req) {
    nlohmann::json msgs = nlohmann::json::array();
    for (const auto& m : req.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return nlohmann::json{{"model", req.model},
                          {"messages", msgs},
                          {"temperature", req.temperature},
                          {"top_p", req.top_p},
                          {"max_tokens", req.max_tokens}};
}

inline std::string parse_chat_reply(const nlohmann::json& body) {
    if (!body.contains("choices") || !body["choices"].is_array() || body["choices"].empty())
        throw TransportError("reply has no choices");
    const auto& choice = body["choices"][0];
    if (!choice.contains("message") || !choice["message"].contains("content"))
        throw TransportError("reply choice has no message content");
    return choice["message"]["content"].get<std::string>();
}

inline uint64_t request_hash(const ChatRequest& req) { return fnv1a(build_chat_body(req).dump()); }

inline int count_tokens(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    int n = 0;
    while (in >> w) ++n;
    return n;
}

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual ChatReply chat(const ChatRequest& req) = 0;
};

// ---------------------------------------------------------------------------
// deterministic offline backend
// ---------------------------------------------------------------------------

// Closed vocabularies the mock draws from; profile validation uses the same lists.
struct AugVocab {
    std::vector<std::string> genres = {"adventure", "romance",  "mystery", "sci-fi", "history",
                                       "comedy",    "thriller", "fantasy", "drama",  "biography"};
    std::vector<std::string> themes = {"friendship", "betrayal", "survival", "discovery",
                                       "redemption", "identity", "family",   "power"};
    std::vector<std::string> keywords = {"classic", "bestseller", "award-winning", "cult",
                                         "epic",    "minimalist", "experimental",  "nostalgic"};
    std::vector<std::string> age_brackets = {"18-24", "25-34", "35-44", "45-54", "55+"};
    std::vector<std::string> genders = {"female", "male", "nonbinary", "undisclosed"};

    bool has(const std::vector<std::string>& pool, const std::string& v) const {
        return std::find(pool.begin(), pool.end(), v) != pool.end();
    }
};

constexpr const char* kInputMarker = "INPUT_JSON:";

// Parses the structured payload the prompt templates embed after INPUT_JSON:.
inline nlohmann::json extract_input_json(const std::string& prompt) {
    const auto pos = prompt.find(kInputMarker);
    if (pos == std::string::npos) throw TransportError("mock backend: prompt lacks INPUT_JSON payload");
    return nlohmann::json::parse(prompt.substr(pos + std::string(kInputMarker).size()));
}

// Deterministic structured replies: every pick derives from the hash of the full
// request plus the backend seed, so identical requests always get identical text.
class MockLlmClient : public LlmClient {
public:
    explicit MockLlmClient(uint64_t seed = 0, AugVocab vocab = {}) : seed_(seed), vocab_(std::move(vocab)) {}

    ChatReply chat(const ChatRequest& req) override {
        if (req.messages.empty()) throw TransportError("empty request");
        const nlohmann::json input = extract_input_json(req.messages.back().content);
        Rng rng(derive_stream(seed_, "mock-reply", request_hash(req)));
        const std::string task = input.value("task", "");

        nlohmann::json reply;
        if (task == "item") {
            reply["genres"] = pick_many(vocab_.genres, 2, rng);
            reply["themes"] = pick_many(vocab_.themes, 1, rng);
            reply["keywords"] = pick_many(vocab_.keywords, 1, rng);
        } else if (task == "user") {
            reply["age_bracket"] = vocab_.age_brackets[rng.uniform_int(vocab_.age_brackets.size())];
            reply["gender"] = vocab_.genders[rng.uniform_int(vocab_.genders.size())];
            reply["preference_summary"] = pick_many(vocab_.genres, 2, rng);
        } else if (task == "seq") {
            const auto [pos_a, neg_a] = split_candidates(input.at("candidates_a"), rng);
            const auto [pos_b, neg_b] = split_candidates(input.at("candidates_b"), rng);
            reply["positives_a"] = pos_a;
            reply["negatives_a"] = neg_a;
            reply["positives_b"] = pos_b;
            reply["negatives_b"] = neg_b;
        } else {
            throw TransportError("mock backend: unknown task '" + task + "'");
        }

        ChatReply out;
        out.content = reply.dump();
        for (const auto& m : req.messages) out.prompt_tokens += count_tokens(m.content);
        out.completion_tokens = count_tokens(out.content);
        return out;
    }

private:
    std::vector<std::string> pick_many(const std::vector<std::string>& pool, int n, Rng& rng) {
        std::vector<std::string> out;
        std::vector<size_t> ixs(pool.size());
        for (size_t i = 0; i < ixs.size(); ++i) ixs[i] = i;
        for (int k = 0; k < n && !ixs.empty(); ++k) {
            const size_t j = rng.uniform_int(ixs.size());
            out.push_back(pool[ixs[j]]);
            ixs.erase(ixs.begin() + j);
        }
        return out;
    }

    // positives = first ceil(|C|/3) candidates in hash order, negatives the next
    // block of the same ordering (disjoint by construction)
    std::pair<std::vector<std::string>, std::vector<std::string>> split_candidates(const nlohmann::json& cands,
                                                                                   Rng& rng) {
        std::vector<std::string> ids = cands.get<std::vector<std::string>>();
        const uint64_t order_seed = rng.next_u64();
        std::sort(ids.begin(), ids.end(), [&](const std::string& x, const std::string& y) {
            return fnv1a(x, order_seed) < fnv1a(y, order_seed);
        });
        const size_t k = (ids.size() + 2) / 3;
        const size_t mid = std::min(ids.size(), k);
        const size_t end = std::min(ids.size(), 2 * k);
        return {{ids.begin(), ids.begin() + mid}, {ids.begin() + mid, ids.begin() + end}};
    }

    uint64_t seed_;
    AugVocab vocab_;
};

// ---------------------------------------------------------------------------
// on-disk reply cache, one JSON file per request hash
// ---------------------------------------------------------------------------

class CachingLlmClient : public LlmClient {
public:
    CachingLlmClient(LlmClient& inner, std::filesystem::path dir) : inner_(inner), dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    ChatReply chat(const ChatRequest& req) override {
        const uint64_t h = request_hash(req);
        const auto path = cache_path(h);
        {
            std::lock_guard<std::mutex> lock(mu_);
            std::ifstream in(path);
            if (in) {
                nlohmann::json j = nlohmann::json::parse(in);
                ChatReply r;
                r.content = j.at("reply").at("content").get<std::string>();
                r.prompt_tokens = j.at("reply").value("prompt_tokens", 0);
                r.completion_tokens = j.at("reply").value("completion_tokens", 0);
                r.cached = true;
                ++hits_;
                return r;
            }
        }
        ChatReply r = inner_.chat(req);
        {
            std::lock_guard<std::mutex> lock(mu_);
            ++misses_;
            nlohmann::json j{{"request", build_chat_body(req)},
                             {"reply",
                              {{"content", r.content},
                               {"prompt_tokens", r.prompt_tokens},
                               {"completion_tokens", r.completion_tokens}}}};
            const auto tmp = path.string() + ".tmp";
            std::ofstream out(tmp);
            out << j.dump(2);
            out.close();
            std::filesystem::rename(tmp, path);
        }
        return r;
    }

    long hits() const { return hits_; }
    long misses() const { return misses_; }
    double hit_rate() const { return hits_ + misses_ == 0 ? 0.0 : double(hits_) / double(hits_ + misses_); }

private:
    std::filesystem::path cache_path(uint64_t h) const {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx.json", static_cast<unsigned long long>(h));
        return dir_ / buf;
    }

    LlmClient& inner_;
    std::filesystem::path dir_;
    std::mutex mu_;
    long hits_ = 0;
    long misses_ = 0;
};

}  // namespace fedcctr::aug
