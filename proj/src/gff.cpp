#include "fedafd/gff.hpp"

#include <numeric>

namespace fedafd::gff {

namespace {

Tensor gated_mix(const Tensor& m, const Tensor& local, const Tensor& global_feats) {
    return add(mul(m, local), mul(add_scalar(neg(m), 1.0), global_feats));
}

}  // namespace

FusionResult fuse(const Tensor& local, const Tensor& global_feats, nets::GateParams& gate,
                  nets::BnMode mode) {
    if (local.rows() != global_feats.rows() || local.cols() != global_feats.cols())
        throw ContractError("fuse: local and global shapes must match");
    Tensor m1 = nets::gate_forward(gate, add(local, global_feats), mode);
    Tensor h = gated_mix(m1, local, global_feats);
    Tensor m2 = nets::gate_forward(gate, h, mode);
    return {h, gated_mix(m2, local, global_feats)};
}

Tensor contrastive_loss(const Tensor& u, const Tensor& v, double temperature) {
    if (u.rows() != v.rows()) throw ContractError("contrastive_loss: unpaired batch");
    if (u.rows() == 0) throw ContractError("contrastive_loss: empty batch");
    if (!(temperature > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");
    Tensor sim = mul_scalar(matmul(row_normalize(u), row_normalize(v), false, true),
                            1.0 / temperature);
    std::vector<int> labels(u.rows());
    std::iota(labels.begin(), labels.end(), 0);
    Tensor l_uv = cross_entropy(sim, labels);
    Tensor l_vu = cross_entropy(transpose(sim), labels);
    return mul_scalar(add(l_uv, l_vu), 0.5);
}

namespace {

Tensor features_for_task(ModalityBranch& branch, const FeatureMatrix& x_batch,
                         const FeatureMatrix* global_batch, bool use_fusion) {
    Tensor local = nets::encoder_forward(branch.encoder, Tensor::from_matrix(x_batch));
    if (!use_fusion) return local;
    if (global_batch == nullptr)
        throw ContractError("task step: fusion requested without global features");
    return fuse(local, Tensor::from_matrix(*global_batch), branch.gate, nets::BnMode::train).fused;
}

}  // namespace

double task_step_unimodal(ModalityBranch& branch, nets::ClassifierParams& classifier,
                          const FeatureMatrix& x_batch, const std::vector<int>& y_batch,
                          const FeatureMatrix* global_batch, const TaskStepConfig& cfg) {
    if (x_batch.rows == 0) throw ContractError("task step: empty batch");
    if (x_batch.rows != y_batch.size()) throw ContractError("task step: labels mismatch");

    Tensor feats = features_for_task(branch, x_batch, global_batch, cfg.use_fusion);
    Tensor loss = cross_entropy(nets::classifier_forward(classifier, feats), y_batch);

    auto params = nets::encoder_params(branch.encoder);
    if (cfg.use_fusion)
        for (Tensor* p : nets::gate_params(branch.gate)) params.push_back(p);
    for (Tensor* p : nets::classifier_params(classifier)) params.push_back(p);

    backward(loss);
    sgd_step(params, cfg.lr);
    return loss.item();
}

double task_step_multimodal(ModalityBranch& img, ModalityBranch& txt, const FeatureMatrix& xa,
                            const FeatureMatrix& xb, const FeatureMatrix* global_a,
                            const FeatureMatrix* global_b, const TaskStepConfig& cfg) {
    if (xa.rows == 0) throw ContractError("task step: empty batch");
    if (xa.rows != xb.rows) throw ContractError("task step: unpaired multimodal batch");

    Tensor u = features_for_task(img, xa, global_a, cfg.use_fusion);
    Tensor v = features_for_task(txt, xb, global_b, cfg.use_fusion);
    Tensor loss = contrastive_loss(u, v, cfg.temperature);

    auto params = nets::encoder_params(img.encoder);
    for (Tensor* p : nets::encoder_params(txt.encoder)) params.push_back(p);
    if (cfg.use_fusion) {
        for (Tensor* p : nets::gate_params(img.gate)) params.push_back(p);
        for (Tensor* p : nets::gate_params(txt.gate)) params.push_back(p);
    }

    backward(loss);
    sgd_step(params, cfg.lr);
    return loss.item();
}

}  // namespace fedafd::gff
