#pragma once

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "fedcctr/llm_client.hpp"

namespace fedcctr::aug {

struct HttpOptions {
    std::string endpoint;  // e.g. http://host:port/v1/chat/completions
    std::string api_key;
    int max_attempts = 3;
    int timeout_seconds = 60;
    int backoff_ms = 500;  // doubled per retry

    static HttpOptions from_env() {
        HttpOptions o;
        if (const char* e = std::getenv("LLM_ENDPOINT")) o.endpoint = e;
        if (const char* k = std::getenv("LLM_API_KEY")) o.api_key = k;
        return o;
    }
};

// splits an URL into (scheme://host[:port], path)
inline std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

class HttpLlmClient : public LlmClient {
public:
    explicit HttpLlmClient(HttpOptions opts) : opts_(std::move(opts)) {
        if (opts_.endpoint.empty()) throw ConfigError("LLM endpoint not configured (set LLM_ENDPOINT)");
    }

    ChatReply chat(const ChatRequest& req) override {
        const auto [base, path] = split_url(opts_.endpoint);
        const std::string body = build_chat_body(req).dump();
        std::string last_error;
        int backoff = opts_.backoff_ms;
        for (int attempt = 0; attempt < opts_.max_attempts; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
            const auto t0 = std::chrono::steady_clock::now();
            httplib::Client cli(base);
            cli.set_read_timeout(opts_.timeout_seconds, 0);
            cli.set_connection_timeout(opts_.timeout_seconds, 0);
            httplib::Headers headers;
            if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
            auto res = cli.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "transport failure: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status < 200 || res->status >= 300) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            try {
                ChatReply out;
                out.content = parse_chat_reply(nlohmann::json::parse(res->body));
                for (const auto& m : req.messages) out.prompt_tokens += count_tokens(m.content);
                out.completion_tokens = count_tokens(out.content);
                out.latency_ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                return out;
            } catch (const std::exception& e) {
                last_error = e.what();
            }
        }
        throw TransportError("chat request failed after " + std::to_string(opts_.max_attempts) +
                             " attempts: " + last_error);
    }

private:
    HttpOptions opts_;
};

}  // namespace fedcctr::aug
