#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/rng.hpp"

namespace cuedepth {

constexpr int kWordDim = 25;

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace detail

/// Token -> fixed-width word vector, with per-dimension statistics over
/// the stored entries. Vectors are immutable once loaded.
struct EmbeddingTable {
    int dim = kWordDim;
    std::map<std::string, std::vector<double>> entries;
    std::vector<double> mean;   // per dimension
    std::vector<double> stddev; // population std per dimension
    bool stats_defined = false;

    void recompute_stats() {
        mean.assign(static_cast<std::size_t>(dim), 0.0);
        stddev.assign(static_cast<std::size_t>(dim), 0.0);
        stats_defined = !entries.empty();
        if (!stats_defined) return;
        const double n = static_cast<double>(entries.size());
        for (const auto& [tok, vec] : entries)
            for (int d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] += vec[static_cast<std::size_t>(d)];
        for (int d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] /= n;
        for (const auto& [tok, vec] : entries)
            for (int d = 0; d < dim; ++d) {
                const double c = vec[static_cast<std::size_t>(d)] - mean[static_cast<std::size_t>(d)];
                stddev[static_cast<std::size_t>(d)] += c * c;
            }
        for (int d = 0; d < dim; ++d) stddev[static_cast<std::size_t>(d)] = std::sqrt(stddev[static_cast<std::size_t>(d)] / n);
    }

    /// Checks stored stats against a fresh pass over the entries.
    void validate() const {
        for (const auto& [tok, vec] : entries) {
            if (static_cast<int>(vec.size()) != dim) {
                throw ValidationError("embedding '" + tok + "' has " + std::to_string(vec.size()) +
                                      " dims, table dim is " + std::to_string(dim));
            }
        }
        EmbeddingTable fresh;
        fresh.dim = dim;
        fresh.entries = entries;
        fresh.recompute_stats();
        if (fresh.stats_defined != stats_defined) throw ValidationError("embedding table stats flag is stale");
        for (int d = 0; d < dim; ++d) {
            const std::size_t i = static_cast<std::size_t>(d);
            if (std::abs(fresh.mean[i] - mean[i]) > 1e-9 || std::abs(fresh.stddev[i] - stddev[i]) > 1e-9) {
                throw ValidationError("embedding table stats are stale at dimension " + std::to_string(d));
            }
        }
    }
};

struct EmbeddingLoadResult {
    EmbeddingTable table;
    std::size_t duplicates = 0; // tokens overwritten by a later line
};

/// Standard word-vector text format: one token then `dim` floats per
/// line. Duplicate tokens keep the last occurrence.
inline EmbeddingLoadResult load_embedding_table(std::istream& in, int dim = kWordDim) {
    EmbeddingLoadResult r;
    r.table.dim = dim;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string token;
        if (!(ls >> token)) continue;
        std::vector<double> vec;
        vec.reserve(static_cast<std::size_t>(dim));
        std::string field;
        while (ls >> field) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(field, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != field.size()) {
                throw ParseError("embedding table line " + std::to_string(line_no) +
                                 ": unparseable value '" + field + "'");
            }
            vec.push_back(v);
        }
        if (static_cast<int>(vec.size()) != dim) {
            throw FormatError("embedding table line " + std::to_string(line_no) + ": expected " +
                              std::to_string(dim) + " values after the token, got " +
                              std::to_string(vec.size()));
        }
        if (!r.table.entries.insert_or_assign(token, std::move(vec)).second) ++r.duplicates;
    }
    r.table.recompute_stats();
    return r;
}

inline EmbeddingLoadResult load_embedding_table(const std::filesystem::path& path, int dim = kWordDim) {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open embedding table " + path.string());
    return load_embedding_table(in, dim);
}

/// Writes the same text format the loader reads; full double precision
/// so a round trip is exact.
inline void save_embedding_table(const EmbeddingTable& t, std::ostream& out) {
    out << std::setprecision(17);
    for (const auto& [tok, vec] : t.entries) {
        out << tok;
        for (double v : vec) out << ' ' << v;
        out << '\n';
    }
}

inline void save_embedding_table(const EmbeddingTable& t, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw PersistenceError("cannot write embedding table " + path.string());
    save_embedding_table(t, out);
    if (!out) throw PersistenceError("short write on embedding table " + path.string());
}

struct ClassEmbedding {
    std::vector<double> vec;
    bool oov = false; // no token of the name was found
};

/// Single-token names look up directly; multi-token names (split on
/// whitespace and underscores) average the vectors of the tokens that
/// are present. Names with no known token map to zero with a flag.
inline ClassEmbedding embed_class_name(const EmbeddingTable& t, const std::string& name) {
    if (name.empty()) throw DomainError("embed_class_name: empty class name");
    ClassEmbedding out;
    out.vec.assign(static_cast<std::size_t>(t.dim), 0.0);
    std::size_t found = 0;
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        auto it = t.entries.find(token);
        if (it != t.entries.end()) {
            for (int d = 0; d < t.dim; ++d) out.vec[static_cast<std::size_t>(d)] += it->second[static_cast<std::size_t>(d)];
            ++found;
        }
        token.clear();
    };
    for (char c : name) {
        if (c == '_' || std::isspace(static_cast<unsigned char>(c))) flush();
        else token.push_back(c);
    }
    flush();
    if (found == 0) {
        out.oov = true;
        return out;
    }
    for (double& v : out.vec) v /= static_cast<double>(found);
    return out;
}

/// One fixed vector per class, sampled N(mean_d, std_d) per dimension.
/// Each class draws from its own substream keyed by the name, so the
/// assignment is independent of list order.
inline EmbeddingTable make_random_table(const std::vector<std::string>& names,
                                        const std::vector<double>& mean,
                                        const std::vector<double>& stddev,
                                        std::uint64_t seed) {
    if (mean.size() != stddev.size() || mean.empty()) {
        throw DimensionError("make_random_table: stats vectors disagree (" + std::to_string(mean.size()) +
                             " vs " + std::to_string(stddev.size()) + ")");
    }
    EmbeddingTable t;
    t.dim = static_cast<int>(mean.size());
    for (const std::string& name : names) {
        Rng rng(Rng::sub_seed(seed, detail::fnv1a(name), 11));
        std::vector<double> vec(mean.size());
        for (std::size_t d = 0; d < mean.size(); ++d) vec[d] = rng.normal(mean[d], stddev[d]);
        t.entries[name] = std::move(vec);
    }
    t.recompute_stats();
    return t;
}

inline EmbeddingTable make_random_table(const std::vector<std::string>& names,
                                        const EmbeddingTable& stats_source, std::uint64_t seed) {
    if (!stats_source.stats_defined) throw ContractError("make_random_table: stats source table is empty");
    return make_random_table(names, stats_source.mean, stats_source.stddev, seed);
}

/// Synthetic stand-in for pre-trained word vectors: random Fourier
/// features of log object size plus per-class noise, so the similarity
/// of two class vectors decays with their log-size gap the way
/// distributional embeddings of physically similar nouns do.
inline EmbeddingTable make_language_table(const std::vector<std::string>& names,
                                          const std::vector<double>& log_sizes,
                                          std::uint64_t seed, int dim = kWordDim,
                                          double bandwidth = 0.75, double noise = 0.25) {
    if (names.size() != log_sizes.size()) {
        throw DimensionError("make_language_table: " + std::to_string(names.size()) + " names vs " +
                             std::to_string(log_sizes.size()) + " sizes");
    }
    if (bandwidth <= 0.0) throw DomainError("make_language_table: bandwidth must be positive");
    Rng feature_rng(Rng::sub_seed(seed, 0, 13));
    std::vector<double> omega(static_cast<std::size_t>(dim)), phase(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) {
        omega[static_cast<std::size_t>(d)] = feature_rng.normal(0.0, 1.0 / bandwidth);
        phase[static_cast<std::size_t>(d)] = feature_rng.uniform(0.0, 6.283185307179586);
    }
    EmbeddingTable t;
    t.dim = dim;
    for (std::size_t i = 0; i < names.size(); ++i) {
        Rng class_rng(Rng::sub_seed(seed, detail::fnv1a(names[i]), 14));
        std::vector<double> vec(static_cast<std::size_t>(dim));
        for (int d = 0; d < dim; ++d) {
            const std::size_t k = static_cast<std::size_t>(d);
            vec[k] = std::cos(omega[k] * log_sizes[i] + phase[k]) + noise * class_rng.normal();
        }
        t.entries[names[i]] = std::move(vec);
    }
    t.recompute_stats();
    return t;
}

} // namespace cuedepth
