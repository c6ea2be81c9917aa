#include "fedafd/common.hpp"

#include <cmath>
#include <numeric>

namespace fedafd {

FeatureMatrix gather_rows(const FeatureMatrix& m, std::span<const std::size_t> idx) {
    FeatureMatrix out(idx.size(), m.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m.rows) throw ContractError("gather_rows: index out of range");
        auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

namespace {

std::vector<double> row_norms(const FeatureMatrix& m, const char* who) {
    std::vector<double> norms(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += m.at(i, j) * m.at(i, j);
        if (s == 0.0) throw DegenerateFeatureError(std::string(who) + ": zero-norm feature row");
        norms[i] = std::sqrt(s);
    }
    return norms;
}

}  // namespace

FeatureMatrix cosine_matrix(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.cols != b.cols) throw DimensionError("cosine_matrix: feature widths differ");
    auto na = row_norms(a, "cosine_matrix");
    auto nb = row_norms(b, "cosine_matrix");
    FeatureMatrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            auto bj = b.row(j);
            double dot = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) dot += ai[k] * bj[k];
            out.at(i, j) = dot / (na[i] * nb[j]);
        }
    }
    return out;
}

std::vector<double> row_cosines(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("row_cosines: shape mismatch");
    auto na = row_norms(a, "row_cosines");
    auto nb = row_norms(b, "row_cosines");
    std::vector<double> out(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) dot += a.at(i, k) * b.at(i, k);
        out[i] = dot / (na[i] * nb[i]);
    }
    return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

}  // namespace

// xoshiro256++ seeded through splitmix64, the reference construction.
Rng::Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from zero.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::gamma(double shape) {
    if (!(shape > 0.0)) throw ContractError("gamma: shape must be positive");
    if (shape < 1.0) {
        // Boost to shape+1 and scale back.
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw ContractError("Rng::index: empty range");
    const std::uint64_t bound = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return static_cast<std::size_t>(x % bound);
}

Rng derive_stream(std::uint64_t master_seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = master_seed;
    for (std::uint64_t t : tags) {
        std::uint64_t x = h ^ (t + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
        h = splitmix64(x);
    }
    return Rng(h);
}

std::vector<double> dirichlet(Rng& rng, double alpha, std::size_t k) {
    if (!(alpha > 0.0)) throw ContractError("dirichlet: alpha must be positive");
    std::vector<double> draws(k);
    double total = 0.0;
    for (auto& d : draws) {
        d = rng.gamma(alpha);
        total += d;
    }
    if (total <= 0.0) {
        // All gamma draws underflowed; fall back to a single winner.
        draws.assign(k, 0.0);
        draws[rng.index(k)] = 1.0;
        return draws;
    }
    for (auto& d : draws) d /= total;
    return draws;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(idx, rng);
    return idx;
}

}  // namespace fedafd
