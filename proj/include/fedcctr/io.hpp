#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fedcctr/data.hpp"
#include "fedcctr/fed.hpp"

namespace fedcctr::io {

// ---------------------------------------------------------------------------
// checkpoints: magic, version, config hash, parameter count, raw doubles
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[4] = {'F', 'C', 'K', 'P'};
constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, std::span<const double> params, uint64_t config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, 4);
    const uint32_t version = kCheckpointVersion;
    const uint64_t count = params.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&config_hash), sizeof(config_hash));
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(params.data()), std::streamsize(params.size() * sizeof(double)));
}

struct Checkpoint {
    uint64_t config_hash = 0;
    std::vector<double> params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path);
    char magic[4];
    uint32_t version = 0;
    Checkpoint ck;
    uint64_t count = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&ck.config_hash), sizeof(ck.config_hash));
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError(path + " is not a checkpoint");
    if (version != kCheckpointVersion) throw IoError(path + ": unsupported checkpoint version");
    ck.params.resize(count);
    in.read(reinterpret_cast<char*>(ck.params.data()), std::streamsize(count * sizeof(double)));
    if (!in) throw IoError(path + ": truncated checkpoint");
    return ck;
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

inline void write_round_reports_csv(const std::string& path, std::span<const fed::RoundReport> reports,
                                    bool timing) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "round,sampled,received,dropped,mean_loss,sigma_mean,seconds\n";
    char buf[256];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof(buf), "%d,%zu,%d,%d,%.17g,%.17g,%.3f\n", r.round, r.sampled.size(), r.received,
                      r.dropped, r.mean_loss, r.sigma_mean, timing ? r.seconds : 0.0);
        out << buf;
    }
}

struct MetricsRow {
    std::string model;
    char domain = 'A';
    int k = 10;
    double ndcg = 0.0;
    double mrr = 0.0;
    long n_instances = 0;
};

inline void write_metrics_csv(const std::string& path, std::span<const MetricsRow> rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "model,domain,K,ndcg,mrr,n_instances\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%c,%d,%.17g,%.17g,%ld\n", r.model.c_str(), r.domain, r.k, r.ndcg, r.mrr,
                      r.n_instances);
        out << buf;
    }
}

inline std::vector<MetricsRow> metrics_rows(const std::string& model_name, const data::RankingMetrics& a,
                                            const data::RankingMetrics& b) {
    std::vector<MetricsRow> rows;
    for (const auto& [k, v] : a.ndcg) rows.push_back({model_name, 'A', k, v, a.mrr.at(k), a.n_instances});
    for (const auto& [k, v] : b.ndcg) rows.push_back({model_name, 'B', k, v, b.mrr.at(k), b.n_instances});
    return rows;
}

}  // namespace fedcctr::io
