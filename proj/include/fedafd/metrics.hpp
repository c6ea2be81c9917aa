#pragma once

#include <span>

#include "fedafd/common.hpp"

namespace fedafd::metrics {

/// Fraction of rows whose argmax column equals the label; ties break to the
/// lowest class index. Result in [0, 1].
double acc_at_1(const FeatureMatrix& scores, std::span<const int> labels);

enum class Direction { i2t, t2i };

/// Top-1 retrieval recall on a square similarity matrix whose diagonal marks
/// the true pairs. i2t ranks columns within each row, t2i rows within each
/// column; ties break to the lowest index. Result in [0, 1].
double recall_at_1(const FeatureMatrix& sim, Direction dir);

/// Mean over aligned rows of (1 - cosine); in [0, 2].
double rep_gap(const FeatureMatrix& client_feats, const FeatureMatrix& global_feats);

/// Mean Shannon entropy of the row-softmax distributions (nats).
double mean_prediction_entropy(const FeatureMatrix& logits);

/// Mean over feature dimensions of the per-dimension variance over samples.
double feature_variance(const FeatureMatrix& feats);

}  // namespace fedafd::metrics
