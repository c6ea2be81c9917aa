#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedafd {

// Error taxonomy. The CLI maps ConfigError to exit code 1 and everything
// else derived from Error to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct DegenerateFeatureError : Error {
    using Error::Error;
};
struct PartitionError : Error {
    using Error::Error;
};
struct ProtocolError : Error {
    using Error::Error;
};

/// Dense row-major matrix of plain values. Used for everything that is data
/// rather than a differentiable computation: feature payloads, caches,
/// uploads, teacher aggregates.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    FeatureMatrix() = default;
    FeatureMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    bool empty() const { return rows == 0 || cols == 0; }
};

FeatureMatrix gather_rows(const FeatureMatrix& m, std::span<const std::size_t> idx);

/// All-pairs cosine similarity: out[i][j] = cos(a.row(i), b.row(j)).
/// Throws DegenerateFeatureError on zero-norm rows.
FeatureMatrix cosine_matrix(const FeatureMatrix& a, const FeatureMatrix& b);
/// Row-aligned cosines: out[k] = cos(a.row(k), b.row(k)).
std::vector<double> row_cosines(const FeatureMatrix& a, const FeatureMatrix& b);

// --- Deterministic randomness -------------------------------------------
//
// All randomness flows through Rng streams derived from the run's master
// seed plus a list of integer tags (client id, round, component, ...).
// Distributions are implemented locally so that sequences do not depend on
// the standard library's unspecified distribution algorithms.

class Rng {
   public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform double in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (second draw cached).
    double normal();
    /// Gamma(shape, 1) via Marsaglia-Tsang; shape > 0.
    double gamma(double shape);
    /// Uniform index in [0, n); n > 0.
    std::size_t index(std::size_t n);

   private:
    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Stream identifiers; combined with entity/round tags to derive substreams.
enum class StreamId : std::uint64_t {
    data_gen = 1,
    partition = 2,
    client_split = 3,
    param_init = 4,
    task_batches = 5,
    baa_batches = 6,
    kd_batches = 7,
    server_task_batches = 8,
};

Rng derive_stream(std::uint64_t master_seed, std::initializer_list<std::uint64_t> tags);

std::vector<double> dirichlet(Rng& rng, double alpha, std::size_t k);

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
        std::size_t j = rng.index(i + 1);
        std::swap(v[i], v[j]);
    }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng);

}  // namespace fedafd
