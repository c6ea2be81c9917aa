#pragma once

#include <span>
#include <utility>

#include "fedafd/state.hpp"
#include "fedafd/tensor.hpp"

namespace fedafd::baa {

/// Aligned feature rows for one adversarial minibatch: row k of each matrix
/// refers to the same public sample.
struct AdvBatch {
    Tensor local;         // [b x d] client features
    Tensor global_same;   // [b x d] same-modality global features
    Tensor global_cross;  // [b x d] other-modality global features
};

/// Intra- and cross-modal adversarial losses, each the batch mean of
/// log D(global) + log(1 - D(local)). Both are always <= 0.
std::pair<Tensor, Tensor> adv_losses(const AdvBatch& batch,
                                     const nets::DiscriminatorParams& disc_in,
                                     const nets::DiscriminatorParams& disc_cr);

/// Per-sample terms log D(global_k) + log(1 - D(local_k)) without autodiff,
/// for reporting and tests.
std::vector<double> per_sample_adv_terms(const FeatureMatrix& local,
                                         const FeatureMatrix& global_feats,
                                         const nets::DiscriminatorParams& disc);

/// Mean over the public set of the per-sample intra + cross terms.
double adv_total(std::span<const double> per_sample_in, std::span<const double> per_sample_cr);

struct BaaStepConfig {
    double beta = 0.5;
    double lr = 0.05;
    std::size_t batch_size = 64;
};

/// One pass over the given public rows for a single modality branch.
/// Per minibatch: gradient ascent on both discriminators (encoder frozen,
/// step size lr*beta), then gradient descent on the encoder against
/// beta * L_adv (discriminators frozen). Rows are visited in the order of
/// `order`. Returns the mean adversarial loss observed across the pass.
double baa_branch_pass(ModalityBranch& branch, const FeatureMatrix& public_inputs,
                       const FeatureMatrix& global_same, const FeatureMatrix& global_cross,
                       std::span<const std::size_t> order, const BaaStepConfig& cfg);

/// Full adversarial pass for a client: every branch is aligned against the
/// broadcast global features of both modalities. Returns the mean adversarial
/// loss (summed over branches, averaged over samples).
double baa_step(ClientState& client, const FeatureMatrix& public_a, const FeatureMatrix& public_b,
                const FeatureMatrix& global_img, const FeatureMatrix& global_txt,
                std::span<const std::size_t> order, const BaaStepConfig& cfg);

}  // namespace fedafd::baa
