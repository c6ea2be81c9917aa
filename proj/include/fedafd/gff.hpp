#pragma once

#include <span>

#include "fedafd/state.hpp"
#include "fedafd/tensor.hpp"

namespace fedafd::gff {

struct FusionResult {
    Tensor intermediate;  // h = M(l+g) (x) l + (1 - M(l+g)) (x) g
    Tensor fused;         // M(h) (x) l + (1 - M(h)) (x) g
};

/// Two-stage attention-gated fusion of local and global features. Every
/// fused component is a convex mix of the corresponding local and global
/// components, so it lies between them.
FusionResult fuse(const Tensor& local, const Tensor& global_feats, nets::GateParams& gate,
                  nets::BnMode mode);

/// Symmetric InfoNCE over the cosine similarities of paired rows.
Tensor contrastive_loss(const Tensor& u, const Tensor& v, double temperature);

struct TaskStepConfig {
    double lr = 0.05;
    double temperature = 0.07;
    bool use_fusion = true;
};

/// Minibatch descent of the classification task on fused (or raw) features.
/// global_batch rows come from the frozen broadcast encoder and carry no
/// gradient. Returns the task loss value.
double task_step_unimodal(ModalityBranch& branch, nets::ClassifierParams& classifier,
                          const FeatureMatrix& x_batch, const std::vector<int>& y_batch,
                          const FeatureMatrix* global_batch, const TaskStepConfig& cfg);

/// Minibatch descent of the retrieval task: each branch is fused with its
/// own frozen global features, then the contrastive loss ties them together.
double task_step_multimodal(ModalityBranch& img, ModalityBranch& txt, const FeatureMatrix& xa,
                            const FeatureMatrix& xb, const FeatureMatrix* global_a,
                            const FeatureMatrix* global_b, const TaskStepConfig& cfg);

}  // namespace fedafd::gff
