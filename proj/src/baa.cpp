#include "fedafd/baa.hpp"

#include <cmath>

namespace fedafd::baa {

namespace {

/// mean over the batch of log D(global) + log(1 - D(local))
Tensor adversarial_term(const nets::DiscriminatorParams& disc, const Tensor& global_feats,
                        const Tensor& local_feats) {
    Tensor p_global = nets::discriminator_forward(disc, global_feats);
    Tensor p_local = nets::discriminator_forward(disc, local_feats);
    Tensor term = add(log(p_global), log(add_scalar(neg(p_local), 1.0)));
    return mean_all(term);
}

void check_batch(const AdvBatch& batch) {
    const std::size_t b = batch.local.rows(), d = batch.local.cols();
    if (b == 0) throw ContractError("adv_losses: empty batch");
    if (batch.global_same.rows() != b || batch.global_same.cols() != d ||
        batch.global_cross.rows() != b || batch.global_cross.cols() != d)
        throw DimensionError("adv_losses: batch matrices must share shape");
}

}  // namespace

std::pair<Tensor, Tensor> adv_losses(const AdvBatch& batch,
                                     const nets::DiscriminatorParams& disc_in,
                                     const nets::DiscriminatorParams& disc_cr) {
    check_batch(batch);
    Tensor l_in = adversarial_term(disc_in, batch.global_same, batch.local);
    Tensor l_cr = adversarial_term(disc_cr, batch.global_cross, batch.local);
    return {l_in, l_cr};
}

std::vector<double> per_sample_adv_terms(const FeatureMatrix& local,
                                         const FeatureMatrix& global_feats,
                                         const nets::DiscriminatorParams& disc) {
    if (local.rows != global_feats.rows || local.cols != global_feats.cols)
        throw DimensionError("per_sample_adv_terms: shape mismatch");
    if (local.rows == 0) throw ContractError("per_sample_adv_terms: empty batch");
    NoGradGuard guard;
    auto p_g = nets::discriminator_forward(disc, Tensor::from_matrix(global_feats)).values();
    auto p_l = nets::discriminator_forward(disc, Tensor::from_matrix(local)).values();
    std::vector<double> out(local.rows);
    for (std::size_t k = 0; k < local.rows; ++k) {
        if (!(p_g[k] > 0.0 && p_g[k] < 1.0 && p_l[k] > 0.0 && p_l[k] < 1.0))
            throw ContractError("per_sample_adv_terms: discriminator output left (0,1)");
        out[k] = std::log(p_g[k]) + std::log(1.0 - p_l[k]);
    }
    return out;
}

double adv_total(std::span<const double> per_sample_in, std::span<const double> per_sample_cr) {
    if (per_sample_in.size() != per_sample_cr.size())
        throw ContractError("adv_total: mismatched sample coverage");
    if (per_sample_in.empty()) throw ContractError("adv_total: empty public set");
    double sum = 0.0;
    for (std::size_t k = 0; k < per_sample_in.size(); ++k)
        sum += per_sample_in[k] + per_sample_cr[k];
    return sum / static_cast<double>(per_sample_in.size());
}

double baa_branch_pass(ModalityBranch& branch, const FeatureMatrix& public_inputs,
                       const FeatureMatrix& global_same, const FeatureMatrix& global_cross,
                       std::span<const std::size_t> order, const BaaStepConfig& cfg) {
    if (cfg.beta < 0.0) throw ConfigError("baa: beta must be nonnegative");
    if (!(cfg.lr > 0.0)) throw ConfigError("baa: learning rate must be positive");
    if (order.empty()) throw ContractError("baa: empty public pass");

    auto disc_params = nets::discriminator_params(branch.disc_in);
    for (Tensor* p : nets::discriminator_params(branch.disc_cr)) disc_params.push_back(p);
    auto enc_params = nets::encoder_params(branch.encoder);
    const double step = cfg.lr * cfg.beta;

    double loss_sum = 0.0;
    std::size_t sample_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t len = std::min(cfg.batch_size, order.size() - start);
        auto batch_idx = order.subspan(start, len);
        FeatureMatrix x = gather_rows(public_inputs, batch_idx);
        Tensor g_same = Tensor::from_matrix(gather_rows(global_same, batch_idx));
        Tensor g_cross = Tensor::from_matrix(gather_rows(global_cross, batch_idx));

        // (i) discriminator ascent with the encoder frozen
        {
            FeatureMatrix local = nets::encoder_forward_nograd(branch.encoder, x);
            AdvBatch batch{Tensor::from_matrix(local), g_same, g_cross};
            auto [l_in, l_cr] = adv_losses(batch, branch.disc_in, branch.disc_cr);
            Tensor l_adv = add(l_in, l_cr);
            loss_sum += l_adv.item() * static_cast<double>(len);
            sample_count += len;
            if (step > 0.0) {
                backward(l_adv);
                sgd_ascent_step(disc_params, step);
            }
        }
        // (ii) encoder descent against beta * L_adv with discriminators frozen
        if (step > 0.0) {
            Tensor local = nets::encoder_forward(branch.encoder, Tensor::from_matrix(x));
            AdvBatch batch{local, g_same, g_cross};
            auto [l_in, l_cr] = adv_losses(batch, branch.disc_in, branch.disc_cr);
            backward(add(l_in, l_cr));
            sgd_step(enc_params, step);
        }
    }
    return loss_sum / static_cast<double>(sample_count);
}

double baa_step(ClientState& client, const FeatureMatrix& public_a, const FeatureMatrix& public_b,
                const FeatureMatrix& global_img, const FeatureMatrix& global_txt,
                std::span<const std::size_t> order, const BaaStepConfig& cfg) {
    double total = 0.0;
    for (ModalityBranch& branch : client.branches) {
        const bool image_side = branch.modality == Modality::image;
        const FeatureMatrix& inputs = image_side ? public_a : public_b;
        const FeatureMatrix& same = image_side ? global_img : global_txt;
        const FeatureMatrix& cross = image_side ? global_txt : global_img;
        total += baa_branch_pass(branch, inputs, same, cross, order, cfg);
    }
    return total;
}

}  // namespace fedafd::baa
