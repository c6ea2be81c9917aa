#pragma once

#include <optional>
#include <vector>

#include "fedafd/common.hpp"
#include "fedafd/nets.hpp"

namespace fedafd {

enum class ClientRole { image_unimodal, text_unimodal, multimodal };
enum class Modality { image, text };

/// Everything a client owns for one modality: the encoder, the pair of
/// adversarial discriminators and the fusion gate.
struct ModalityBranch {
    Modality modality = Modality::image;
    nets::EncoderParams encoder;
    nets::DiscriminatorParams disc_in;
    nets::DiscriminatorParams disc_cr;
    nets::GateParams gate;
};

/// Frozen copy of the broadcast global encoders plus the round it arrived.
struct GlobalEncoderCache {
    nets::EncoderParams enc_img, enc_txt;
    int round_stamp = -1;
    bool valid() const { return round_stamp >= 0; }
};

struct ClientDataset {
    FeatureMatrix x_a;  // image-side raw inputs (rows shared with x_b on multimodal clients)
    FeatureMatrix x_b;  // text-side raw inputs
    std::vector<int> labels;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
};

struct ClientState {
    int id = 0;
    ClientRole role = ClientRole::image_unimodal;
    std::vector<ModalityBranch> branches;  // 1 for unimodal, 2 (image, text) for multimodal
    std::optional<nets::ClassifierParams> classifier;
    ClientDataset data;
    GlobalEncoderCache cache;
    // Global-encoder features of the private training rows, one per branch,
    // refreshed when a new encoder snapshot arrives (K-round caching).
    std::vector<FeatureMatrix> private_global_feats;
    int private_feats_stamp = -1;
};

struct GlobalState {
    nets::EncoderParams enc_img, enc_txt;
    int round = 0;
};

inline const FeatureMatrix& branch_inputs(const ClientDataset& data, Modality m) {
    return m == Modality::image ? data.x_a : data.x_b;
}

}  // namespace fedafd
