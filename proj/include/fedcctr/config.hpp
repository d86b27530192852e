#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fedcctr/errors.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::cfg {

// ---------------------------------------------------------------------------
// minimal TOML-style reader: [section], key = value, values are strings,
// numbers, booleans or flat arrays; '#' starts a comment
// ---------------------------------------------------------------------------

using TomlValue = std::variant<std::string, double, bool, std::vector<double>, std::vector<std::string>>;
using TomlTable = std::map<std::string, std::map<std::string, TomlValue>>;

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& line) {
    bool in_quote = false;
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_quote = !in_quote;
        if (line[i] == '#' && !in_quote) return line.substr(0, i);
    }
    return line;
}

inline TomlValue parse_scalar(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    if (v.empty()) throw ConfigError(where + ": empty value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
        return v.substr(1, v.size() - 2);
    }
    if (v == "true") return true;
    if (v == "false") return false;
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(where + ": cannot parse value '" + v + "'");
    }
}

inline TomlValue parse_value(const std::string& raw, const std::string& where) {
    const std::string v = trim(raw);
    if (!v.empty() && v.front() == '[') {
        if (v.back() != ']') throw ConfigError(where + ": unterminated array");
        std::vector<std::string> parts;
        std::string cur;
        bool in_quote = false;
        for (size_t i = 1; i + 1 < v.size(); ++i) {
            const char c = v[i];
            if (c == '"') in_quote = !in_quote;
            if (c == ',' && !in_quote) {
                parts.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!trim(cur).empty()) parts.push_back(cur);
        std::vector<double> nums;
        std::vector<std::string> strs;
        bool numeric = true;
        for (const auto& p : parts) {
            TomlValue sv = parse_scalar(p, where);
            if (std::holds_alternative<double>(sv) && numeric) {
                nums.push_back(std::get<double>(sv));
            } else if (std::holds_alternative<std::string>(sv)) {
                numeric = false;
                strs.push_back(std::get<std::string>(sv));
            } else {
                throw ConfigError(where + ": arrays hold numbers or strings");
            }
        }
        if (numeric) return nums;
        if (strs.size() != parts.size()) throw ConfigError(where + ": mixed array types");
        return strs;
    }
    return parse_scalar(v, where);
}

}  // namespace detail

inline TomlTable parse_toml(std::istream& in, const std::string& name = "<config>") {
    TomlTable table;
    std::string section;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = name + ":" + std::to_string(lineno);
        std::string s = detail::trim(detail::strip_comment(line));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(where + ": bad section header");
            section = detail::trim(s.substr(1, s.size() - 2));
            if (section.empty()) throw ConfigError(where + ": empty section name");
            table[section];
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = detail::trim(s.substr(0, eq));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (section.empty()) throw ConfigError(where + ": key outside any [section]");
        if (table[section].count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
        table[section][key] = detail::parse_value(s.substr(eq + 1), where);
    }
    return table;
}

inline TomlTable parse_toml_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse_toml(in, path);
}

// ---------------------------------------------------------------------------
// the experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    // [dataset]
    std::string source = "synthetic";  // synthetic | files
    std::string data_path;             // interactions.jsonl when source = files
    int users = 200;
    int items_per_domain = 500;
    int latent_dim = 8;
    double sparsity = 0.97;
    int min_events_per_user = 4;
    int min_user_interactions = 10;
    int min_item_frequency = 10;
    int min_events_per_domain = 3;

    // [augmentation]
    std::string backend = "mock";  // mock | http
    double temperature = 0.4;
    double top_p = 0.45;
    int max_tokens = 512;
    int candidate_size = 10;
    std::string llm_model = "mock";
    int max_attempts = 3;
    std::string cache_dir;

    // [model]
    int d_id = 16, d_feat = 8, d_pos = 8, d_o = 8;
    int heads = 8;
    int d_ff = 0;
    int max_len = 20;
    std::vector<int> mlp_dims{512, 256, 128};
    double dropout = 0.1;
    double lambda1 = 0.3, lambda2 = 0.5;
    double alpha = 0.5, tau = 0.1;
    int random_negatives_per_positive = 1;

    // [federation]
    int rounds = 100;
    double eta = 5e-4;
    double rho = 0.01;
    int local_batch = 32;
    int local_steps = 1;
    std::string optimizer = "sgd";  // sgd | adamw
    double weight_decay = 0.01;

    // [privacy]
    bool privacy_enabled = true;
    double epsilon0 = 1.0;
    double delta = 1e-5;
    double zeta = 2.0;
    double theta = 0.5;
    double sigma0 = 1.0;
    double decay = 0.997;
    std::string privacy_mode = "decrement";  // decrement | rdp-convert
    std::string privacy_formula = "appendix";  // appendix | maintext
    bool optimize_zeta = false;

    // [run]
    uint64_t seed = 1;
    std::string output_dir = "runs/out";
    int threads = 1;
    bool timing = false;  // measured seconds break byte-reproducibility, so opt in
    std::string eval_split = "test";  // test | val
    std::vector<int> cutoffs{2, 5, 10};

    void validate() const {
        auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (source != "synthetic" && source != "files") throw ConfigError("dataset.source must be synthetic|files");
        if (source == "files" && data_path.empty()) throw ConfigError("dataset.path required when source = files");
        if (users < 2 || items_per_domain < 2) throw ConfigError("dataset.users/items_per_domain must be >= 2");
        if (sparsity < 0.0 || sparsity >= 1.0) throw ConfigError("dataset.sparsity must be in [0,1)");
        if (backend != "mock" && backend != "http") throw ConfigError("augmentation.backend must be mock|http");
        if (candidate_size <= 0) throw ConfigError("augmentation.candidate_size must be positive");
        if (max_attempts <= 0) throw ConfigError("augmentation.max_attempts must be positive");
        if (!in01(lambda1) || !in01(lambda2)) throw ConfigError("model.lambda1/lambda2 must be in [0,1]");
        if (tau <= 0.0) throw ConfigError("model.tau must be > 0");
        if (alpha < 0.0) throw ConfigError("model.alpha must be >= 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0,1)");
        if (random_negatives_per_positive < 0) throw ConfigError("model.random_negatives_per_positive must be >= 0");
        if (rounds < 0) throw ConfigError("federation.rounds must be >= 0");
        if (eta <= 0.0) throw ConfigError("federation.eta must be > 0");
        if (rho <= 0.0 || rho > 1.0) throw ConfigError("federation.rho must be in (0,1]");
        if (local_batch <= 0 || local_steps <= 0) throw ConfigError("federation.local_batch/local_steps positive");
        if (optimizer != "sgd" && optimizer != "adamw") throw ConfigError("federation.optimizer must be sgd|adamw");
        if (privacy_enabled) {
            if (epsilon0 < 0.0) throw ConfigError("privacy.epsilon0 must be >= 0");
            if (delta <= 0.0 || delta > 1.0) throw ConfigError("privacy.delta must be in (0,1]");
            if (zeta <= 1.0) throw ConfigError("privacy.zeta must be > 1");
            if (theta <= 0.0) throw ConfigError("privacy.theta must be > 0");
            if (sigma0 < 0.0) throw ConfigError("privacy.sigma0 must be >= 0");
            if (decay <= 0.0 || decay > 1.0) throw ConfigError("privacy.decay must be in (0,1]");
            if (privacy_mode != "decrement" && privacy_mode != "rdp-convert")
                throw ConfigError("privacy.mode must be decrement|rdp-convert");
            if (privacy_formula != "appendix" && privacy_formula != "maintext")
                throw ConfigError("privacy.formula must be appendix|maintext");
        }
        if (threads <= 0) throw ConfigError("run.threads must be positive");
        if (eval_split != "test" && eval_split != "val") throw ConfigError("run.eval_split must be test|val");
        if (cutoffs.empty()) throw ConfigError("run.cutoffs must be nonempty");
    }
};

namespace detail {

struct Reader {
    const TomlTable& t;
    std::map<std::string, std::vector<std::string>> known;

    bool has(const std::string& sec, const std::string& key) {
        known[sec].push_back(key);
        auto s = t.find(sec);
        return s != t.end() && s->second.count(key);
    }
    const TomlValue& raw(const std::string& sec, const std::string& key) { return t.at(sec).at(key); }

    void get(const std::string& sec, const std::string& key, std::string& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<std::string>(raw(sec, key)))
            throw ConfigError(sec + "." + key + " must be a string");
        out = std::get<std::string>(raw(sec, key));
    }
    void get(const std::string& sec, const std::string& key, bool& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<bool>(raw(sec, key))) throw ConfigError(sec + "." + key + " must be a boolean");
        out = std::get<bool>(raw(sec, key));
    }
    void get(const std::string& sec, const std::string& key, double& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<double>(raw(sec, key))) throw ConfigError(sec + "." + key + " must be a number");
        out = std::get<double>(raw(sec, key));
    }
    void get(const std::string& sec, const std::string& key, int& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<double>(raw(sec, key))) throw ConfigError(sec + "." + key + " must be a number");
        const double d = std::get<double>(raw(sec, key));
        if (d != double(long(d))) throw ConfigError(sec + "." + key + " must be an integer");
        out = int(d);
    }
    void get(const std::string& sec, const std::string& key, uint64_t& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<double>(raw(sec, key))) throw ConfigError(sec + "." + key + " must be a number");
        const double d = std::get<double>(raw(sec, key));
        if (d < 0 || d != double(uint64_t(d))) throw ConfigError(sec + "." + key + " must be a nonnegative integer");
        out = uint64_t(d);
    }
    void get(const std::string& sec, const std::string& key, std::vector<int>& out) {
        if (!has(sec, key)) return;
        if (!std::holds_alternative<std::vector<double>>(raw(sec, key)))
            throw ConfigError(sec + "." + key + " must be a numeric array");
        out.clear();
        for (double d : std::get<std::vector<double>>(raw(sec, key))) {
            if (d != double(long(d))) throw ConfigError(sec + "." + key + " must hold integers");
            out.push_back(int(d));
        }
    }

    // every key present in the file must have been consumed
    void reject_unknown() const {
        for (const auto& [sec, keys] : t) {
            auto k = known.find(sec);
            if (k == known.end()) throw ConfigError("unknown config section [" + sec + "]");
            for (const auto& [key, _] : keys)
                if (std::find(k->second.begin(), k->second.end(), key) == k->second.end())
                    throw ConfigError("unknown config key " + sec + "." + key);
        }
    }
};

}  // namespace detail

inline ExperimentConfig config_from_table(const TomlTable& t) {
    ExperimentConfig c;
    detail::Reader r{t, {}};

    r.get("dataset", "source", c.source);
    r.get("dataset", "path", c.data_path);
    r.get("dataset", "users", c.users);
    r.get("dataset", "items_per_domain", c.items_per_domain);
    r.get("dataset", "latent_dim", c.latent_dim);
    r.get("dataset", "sparsity", c.sparsity);
    r.get("dataset", "min_events_per_user", c.min_events_per_user);
    r.get("dataset", "min_user_interactions", c.min_user_interactions);
    r.get("dataset", "min_item_frequency", c.min_item_frequency);
    r.get("dataset", "min_events_per_domain", c.min_events_per_domain);

    r.get("augmentation", "backend", c.backend);
    r.get("augmentation", "temperature", c.temperature);
    r.get("augmentation", "top_p", c.top_p);
    r.get("augmentation", "max_tokens", c.max_tokens);
    r.get("augmentation", "candidate_size", c.candidate_size);
    r.get("augmentation", "model", c.llm_model);
    r.get("augmentation", "max_attempts", c.max_attempts);
    r.get("augmentation", "cache_dir", c.cache_dir);

    r.get("model", "d_id", c.d_id);
    r.get("model", "d_feat", c.d_feat);
    r.get("model", "d_pos", c.d_pos);
    r.get("model", "d_o", c.d_o);
    r.get("model", "heads", c.heads);
    r.get("model", "d_ff", c.d_ff);
    r.get("model", "max_len", c.max_len);
    r.get("model", "mlp", c.mlp_dims);
    r.get("model", "dropout", c.dropout);
    r.get("model", "lambda1", c.lambda1);
    r.get("model", "lambda2", c.lambda2);
    r.get("model", "alpha", c.alpha);
    r.get("model", "tau", c.tau);
    r.get("model", "random_negatives_per_positive", c.random_negatives_per_positive);

    r.get("federation", "rounds", c.rounds);
    r.get("federation", "eta", c.eta);
    r.get("federation", "rho", c.rho);
    r.get("federation", "local_batch", c.local_batch);
    r.get("federation", "local_steps", c.local_steps);
    r.get("federation", "optimizer", c.optimizer);
    r.get("federation", "weight_decay", c.weight_decay);

    r.get("privacy", "enabled", c.privacy_enabled);
    r.get("privacy", "epsilon0", c.epsilon0);
    r.get("privacy", "delta", c.delta);
    r.get("privacy", "zeta", c.zeta);
    r.get("privacy", "theta", c.theta);
    r.get("privacy", "sigma0", c.sigma0);
    r.get("privacy", "decay", c.decay);
    r.get("privacy", "mode", c.privacy_mode);
    r.get("privacy", "formula", c.privacy_formula);
    r.get("privacy", "optimize_zeta", c.optimize_zeta);

    r.get("run", "seed", c.seed);
    r.get("run", "output_dir", c.output_dir);
    r.get("run", "threads", c.threads);
    r.get("run", "timing", c.timing);
    r.get("run", "eval_split", c.eval_split);
    r.get("run", "cutoffs", c.cutoffs);

    r.reject_unknown();
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_table(parse_toml_file(path)); }

// Canonical echo: fixed ordering so the text (and its hash) identify the run.
inline std::string echo_config(const ExperimentConfig& c) {
    std::ostringstream out;
    out.precision(17);
    auto arr_i = [](const std::vector<int>& v) {
        std::string s = "[";
        for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
        return s + "]";
    };
    out << "[dataset]\n";
    out << "source = \"" << c.source << "\"\n";
    out << "path = \"" << c.data_path << "\"\n";
    out << "users = " << c.users << "\n";
    out << "items_per_domain = " << c.items_per_domain << "\n";
    out << "latent_dim = " << c.latent_dim << "\n";
    out << "sparsity = " << c.sparsity << "\n";
    out << "min_events_per_user = " << c.min_events_per_user << "\n";
    out << "min_user_interactions = " << c.min_user_interactions << "\n";
    out << "min_item_frequency = " << c.min_item_frequency << "\n";
    out << "min_events_per_domain = " << c.min_events_per_domain << "\n";
    out << "\n[augmentation]\n";
    out << "backend = \"" << c.backend << "\"\n";
    out << "temperature = " << c.temperature << "\n";
    out << "top_p = " << c.top_p << "\n";
    out << "max_tokens = " << c.max_tokens << "\n";
    out << "candidate_size = " << c.candidate_size << "\n";
    out << "model = \"" << c.llm_model << "\"\n";
    out << "max_attempts = " << c.max_attempts << "\n";
    out << "cache_dir = \"" << c.cache_dir << "\"\n";
    out << "\n[model]\n";
    out << "d_id = " << c.d_id << "\n";
    out << "d_feat = " << c.d_feat << "\n";
    out << "d_pos = " << c.d_pos << "\n";
    out << "d_o = " << c.d_o << "\n";
    out << "heads = " << c.heads << "\n";
    out << "d_ff = " << c.d_ff << "\n";
    out << "max_len = " << c.max_len << "\n";
    out << "mlp = " << arr_i(c.mlp_dims) << "\n";
    out << "dropout = " << c.dropout << "\n";
    out << "lambda1 = " << c.lambda1 << "\n";
    out << "lambda2 = " << c.lambda2 << "\n";
    out << "alpha = " << c.alpha << "\n";
    out << "tau = " << c.tau << "\n";
    out << "random_negatives_per_positive = " << c.random_negatives_per_positive << "\n";
    out << "\n[federation]\n";
    out << "rounds = " << c.rounds << "\n";
    out << "eta = " << c.eta << "\n";
    out << "rho = " << c.rho << "\n";
    out << "local_batch = " << c.local_batch << "\n";
    out << "local_steps = " << c.local_steps << "\n";
    out << "optimizer = \"" << c.optimizer << "\"\n";
    out << "weight_decay = " << c.weight_decay << "\n";
    out << "\n[privacy]\n";
    out << "enabled = " << (c.privacy_enabled ? "true" : "false") << "\n";
    out << "epsilon0 = " << c.epsilon0 << "\n";
    out << "delta = " << c.delta << "\n";
    out << "zeta = " << c.zeta << "\n";
    out << "theta = " << c.theta << "\n";
    out << "sigma0 = " << c.sigma0 << "\n";
    out << "decay = " << c.decay << "\n";
    out << "mode = \"" << c.privacy_mode << "\"\n";
    out << "formula = \"" << c.privacy_formula << "\"\n";
    out << "optimize_zeta = " << (c.optimize_zeta ? "true" : "false") << "\n";
    out << "\n[run]\n";
    out << "seed = " << c.seed << "\n";
    out << "output_dir = \"" << c.output_dir << "\"\n";
    out << "threads = " << c.threads << "\n";
    out << "timing = " << (c.timing ? "true" : "false") << "\n";
    out << "eval_split = \"" << c.eval_split << "\"\n";
    out << "cutoffs = " << arr_i(c.cutoffs) << "\n";
    return out.str();
}

inline uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(echo_config(c)); }

}  // namespace fedcctr::cfg
