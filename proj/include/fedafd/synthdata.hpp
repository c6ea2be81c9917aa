#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "fedafd/common.hpp"

namespace fedafd::synth {

struct SynthSpec {
    int num_classes = 4;
    int latent_dim = 8;
    int modality_a_dim = 16;
    int modality_b_dim = 12;
    int samples_per_class = 128;
    double noise_std = 0.05;
    double latent_jitter = 0.3;
    // When true (and the modality dims match) both modalities use the same
    // projection, making raw cross-modal cosine retrieval meaningful.
    bool shared_projection = false;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Paired two-modality dataset: row k of x_a and x_b derive from the same
/// latent vector; labels[k] is the class (== latent prototype group).
struct MultimodalDataset {
    FeatureMatrix x_a;
    FeatureMatrix x_b;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
};

MultimodalDataset generate(const SynthSpec& spec);

/// Label-skewed split: per class, a Dirichlet(alpha) draw over clients
/// apportions that class's samples. Every sample lands exactly once and no
/// client is left empty (the allocation is redrawn, up to 100 times).
std::vector<std::vector<std::size_t>> partition_dirichlet(std::span<const int> labels,
                                                          int num_clients, double alpha,
                                                          std::uint64_t seed);

/// Group-skewed split: samples sorted by group, cut into
/// num_clients * shards_per_client contiguous shards, dealt out randomly.
std::vector<std::vector<std::size_t>> partition_shards(std::span<const int> groups,
                                                       int num_clients, int shards_per_client,
                                                       std::uint64_t seed);

/// Uniform shuffle split into near-equal parts (sizes differ by at most 1).
std::vector<std::vector<std::size_t>> partition_iid(std::size_t n, int num_clients,
                                                    std::uint64_t seed);

/// Column-oriented text export: header "sample_id,label,modality,f0,f1,...",
/// one row per (sample, modality).
void export_dataset(const MultimodalDataset& ds, std::ostream& os);

}  // namespace fedafd::synth
