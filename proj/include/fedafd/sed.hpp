#pragma once

#include <vector>

#include "fedafd/state.hpp"
#include "fedafd/tensor.hpp"

namespace fedafd::sed {

/// Per-sample similarity score of one client's public features against the
/// global ones: s[k] = log softmax_j(cos(f_c^k, f_g^j)) evaluated at j = k.
/// Every score is <= 0.
std::vector<double> similarity_scores(const FeatureMatrix& client_feats,
                                      const FeatureMatrix& global_feats);

/// Softmax over group members of their scores, per sample. member_scores is
/// one score vector per member, all covering the same samples. The result is
/// [samples x members]; each row sums to 1.
FeatureMatrix aggregation_weights(const std::vector<std::vector<double>>& member_scores);

/// Weights for a single sample, matching the per-sample formulation.
std::vector<double> aggregation_weights_at(const std::vector<std::vector<double>>& member_scores,
                                           std::size_t k);

/// Weighted per-sample combination of member features.
FeatureMatrix aggregate_teacher(const std::vector<const FeatureMatrix*>& member_feats,
                                const FeatureMatrix& weights);

enum class KdNorm { euclidean, squared };

struct KdConfig {
    double gamma = 0.4;
    double eta = 0.05;
    std::size_t batch_size = 64;
    KdNorm norm = KdNorm::euclidean;
};

/// Distillation loss at the current server parameters, without updating:
/// mean over samples of ||i_agg - i_g||2 + ||t_agg - t_g||2.
double kd_loss_value(const GlobalState& server, const FeatureMatrix& teacher_img,
                     const FeatureMatrix& teacher_txt, const FeatureMatrix& pub_a,
                     const FeatureMatrix& pub_b, KdNorm norm);

/// One minibatch SGD pass over the public set, descending eta*gamma times
/// the distillation gradient. Teacher features carry no gradient. Returns
/// the mean distillation loss observed across the pass.
double kd_update(GlobalState& server, const FeatureMatrix& teacher_img,
                 const FeatureMatrix& teacher_txt, const FeatureMatrix& pub_a,
                 const FeatureMatrix& pub_b, std::span<const std::size_t> order,
                 const KdConfig& cfg);

}  // namespace fedafd::sed
