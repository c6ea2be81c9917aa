#include "fedafd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace fedafd::synth {

void SynthSpec::validate() const {
    if (num_classes < 1 || latent_dim < 1 || modality_a_dim < 1 || modality_b_dim < 1 ||
        samples_per_class < 1)
        throw ConfigError("synth spec: all dimensions and counts must be positive");
    if (!(noise_std > 0.0)) throw ConfigError("synth spec: noise_std must be positive");
    if (latent_jitter < 0.0) throw ConfigError("synth spec: latent_jitter must be nonnegative");
    if (shared_projection && modality_a_dim != modality_b_dim)
        throw ConfigError("synth spec: shared_projection requires equal modality dims");
}

namespace {

FeatureMatrix random_projection(int in_dim, int out_dim, Rng& rng) {
    FeatureMatrix w(in_dim, out_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& v : w.data) v = rng.normal() * scale;
    return w;
}

void project_into(std::span<const double> z, const FeatureMatrix& w, std::span<double> out,
                  double noise_std, Rng& noise_rng) {
    for (std::size_t j = 0; j < w.cols; ++j) out[j] = 0.0;
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double zi = z[i];
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += zi * w.at(i, j);
    }
    for (std::size_t j = 0; j < w.cols; ++j) out[j] += noise_std * noise_rng.normal();
}

}  // namespace

MultimodalDataset generate(const SynthSpec& spec) {
    spec.validate();
    Rng proto_rng = derive_stream(spec.seed, {static_cast<std::uint64_t>(StreamId::data_gen), 1});
    Rng jitter_rng = derive_stream(spec.seed, {static_cast<std::uint64_t>(StreamId::data_gen), 2});
    Rng noise_rng = derive_stream(spec.seed, {static_cast<std::uint64_t>(StreamId::data_gen), 3});
    Rng proj_rng = derive_stream(spec.seed, {static_cast<std::uint64_t>(StreamId::data_gen), 4});

    const std::size_t n = static_cast<std::size_t>(spec.num_classes) * spec.samples_per_class;
    MultimodalDataset ds;
    ds.num_classes = spec.num_classes;
    ds.x_a = FeatureMatrix(n, spec.modality_a_dim);
    ds.x_b = FeatureMatrix(n, spec.modality_b_dim);
    ds.labels.resize(n);

    std::vector<double> prototypes(static_cast<std::size_t>(spec.num_classes) * spec.latent_dim);
    for (auto& v : prototypes) v = proto_rng.normal();

    FeatureMatrix w_a = random_projection(spec.latent_dim, spec.modality_a_dim, proj_rng);
    FeatureMatrix w_b = spec.shared_projection
                            ? w_a
                            : random_projection(spec.latent_dim, spec.modality_b_dim, proj_rng);

    std::vector<double> z(spec.latent_dim);
    std::size_t row = 0;
    for (int c = 0; c < spec.num_classes; ++c) {
        const double* proto = prototypes.data() + static_cast<std::size_t>(c) * spec.latent_dim;
        for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
            for (int i = 0; i < spec.latent_dim; ++i)
                z[i] = proto[i] + spec.latent_jitter * jitter_rng.normal();
            project_into(z, w_a, ds.x_a.row(row), spec.noise_std, noise_rng);
            project_into(z, w_b, ds.x_b.row(row), spec.noise_std, noise_rng);
            ds.labels[row] = c;
        }
    }
    return ds;
}

std::vector<std::vector<std::size_t>> partition_dirichlet(std::span<const int> labels,
                                                          int num_clients, double alpha,
                                                          std::uint64_t seed) {
    if (num_clients < 1) throw PartitionError("partition: need at least one client");
    if (!(alpha > 0.0)) throw ConfigError("partition: dirichlet alpha must be positive");
    if (labels.size() < static_cast<std::size_t>(num_clients))
        throw PartitionError("partition: dataset smaller than client count");

    int num_classes = 0;
    for (int l : labels) num_classes = std::max(num_classes, l + 1);
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    Rng rng = derive_stream(seed, {static_cast<std::uint64_t>(StreamId::partition), 1});
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<std::vector<std::size_t>> parts(num_clients);
        for (int c = 0; c < num_classes; ++c) {
            auto idx = by_class[c];
            shuffle(idx, rng);
            const std::size_t n = idx.size();
            if (n == 0) continue;
            std::vector<double> props = dirichlet(rng, alpha, num_clients);
            // Largest-remainder apportionment so counts sum exactly to n.
            std::vector<std::size_t> counts(num_clients);
            std::vector<std::pair<double, int>> remainders;
            std::size_t assigned = 0;
            for (int k = 0; k < num_clients; ++k) {
                const double exact = props[k] * static_cast<double>(n);
                counts[k] = static_cast<std::size_t>(exact);
                assigned += counts[k];
                remainders.push_back({exact - std::floor(exact), k});
            }
            std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (std::size_t r = 0; assigned < n; ++r, ++assigned)
                counts[remainders[r % remainders.size()].second]++;
            std::size_t pos = 0;
            for (int k = 0; k < num_clients; ++k)
                for (std::size_t t = 0; t < counts[k]; ++t) parts[k].push_back(idx[pos++]);
        }
        const bool any_empty = std::any_of(parts.begin(), parts.end(),
                                           [](const auto& p) { return p.empty(); });
        if (!any_empty) {
            for (auto& p : parts) std::sort(p.begin(), p.end());
            return parts;
        }
    }
    throw PartitionError("partition: could not draw a non-empty dirichlet split in 100 attempts");
}

std::vector<std::vector<std::size_t>> partition_shards(std::span<const int> groups,
                                                       int num_clients, int shards_per_client,
                                                       std::uint64_t seed) {
    if (num_clients < 1 || shards_per_client < 1)
        throw PartitionError("partition: clients and shards_per_client must be positive");
    const std::size_t n = groups.size();
    const std::size_t total_shards =
        static_cast<std::size_t>(num_clients) * static_cast<std::size_t>(shards_per_client);
    if (n < total_shards || n % total_shards != 0)
        throw PartitionError("partition: sample count does not divide into shards evenly");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return groups[a] < groups[b]; });

    Rng rng = derive_stream(seed, {static_cast<std::uint64_t>(StreamId::partition), 2});
    std::vector<std::size_t> shard_ids(total_shards);
    std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
    shuffle(shard_ids, rng);

    const std::size_t shard_size = n / total_shards;
    std::vector<std::vector<std::size_t>> parts(num_clients);
    for (std::size_t s = 0; s < total_shards; ++s) {
        const int client = static_cast<int>(s / shards_per_client);
        const std::size_t base = shard_ids[s] * shard_size;
        for (std::size_t t = 0; t < shard_size; ++t) parts[client].push_back(order[base + t]);
    }
    for (auto& p : parts) std::sort(p.begin(), p.end());
    return parts;
}

std::vector<std::vector<std::size_t>> partition_iid(std::size_t n, int num_clients,
                                                    std::uint64_t seed) {
    if (num_clients < 1) throw PartitionError("partition: need at least one client");
    if (n < static_cast<std::size_t>(num_clients))
        throw PartitionError("partition: dataset smaller than client count");
    Rng rng = derive_stream(seed, {static_cast<std::uint64_t>(StreamId::partition), 3});
    auto order = shuffled_indices(n, rng);
    std::vector<std::vector<std::size_t>> parts(num_clients);
    for (std::size_t i = 0; i < n; ++i) parts[i % num_clients].push_back(order[i]);
    for (auto& p : parts) std::sort(p.begin(), p.end());
    return parts;
}

void export_dataset(const MultimodalDataset& ds, std::ostream& os) {
    const std::size_t width = std::max(ds.x_a.cols, ds.x_b.cols);
    os << "sample_id,label,modality";
    for (std::size_t j = 0; j < width; ++j) os << ",f" << j;
    os << "\n";
    char buf[64];
    auto write_row = [&](std::size_t i, const char* modality, const FeatureMatrix& m) {
        os << i << "," << ds.labels[i] << "," << modality;
        for (std::size_t j = 0; j < width; ++j) {
            if (j < m.cols) {
                std::snprintf(buf, sizeof(buf), "%.6f", m.at(i, j));
                os << "," << buf;
            } else {
                os << ",";
            }
        }
        os << "\n";
    };
    for (std::size_t i = 0; i < ds.size(); ++i) {
        write_row(i, "A", ds.x_a);
        write_row(i, "B", ds.x_b);
    }
}

}  // namespace fedafd::synth
