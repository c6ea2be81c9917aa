#include "fedafd/metrics.hpp"

#include <cmath>

namespace fedafd::metrics {

namespace {

std::size_t argmax_lowest(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

std::size_t argmax_lowest_col(const FeatureMatrix& m, std::size_t col) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.rows; ++i)
        if (m.at(i, col) > m.at(best, col)) best = i;
    return best;
}

}  // namespace

double acc_at_1(const FeatureMatrix& scores, std::span<const int> labels) {
    if (scores.rows == 0) throw ContractError("acc_at_1: empty prediction set");
    if (scores.rows != labels.size()) throw ContractError("acc_at_1: labels mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.rows; ++i)
        if (argmax_lowest(scores.row(i)) == static_cast<std::size_t>(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(scores.rows);
}

double recall_at_1(const FeatureMatrix& sim, Direction dir) {
    if (sim.rows != sim.cols) throw ContractError("recall_at_1: similarity matrix must be square");
    if (sim.rows == 0) throw ContractError("recall_at_1: empty similarity matrix");
    const std::size_t n = sim.rows;
    std::size_t hits = 0;
    if (dir == Direction::i2t) {
        for (std::size_t i = 0; i < n; ++i)
            if (argmax_lowest(sim.row(i)) == i) ++hits;
    } else {
        for (std::size_t j = 0; j < n; ++j)
            if (argmax_lowest_col(sim, j) == j) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

double rep_gap(const FeatureMatrix& client_feats, const FeatureMatrix& global_feats) {
    auto cosines = row_cosines(client_feats, global_feats);
    double sum = 0.0;
    for (double c : cosines) sum += 1.0 - c;
    return sum / static_cast<double>(cosines.size());
}

double mean_prediction_entropy(const FeatureMatrix& logits) {
    if (logits.rows == 0) throw ContractError("mean_prediction_entropy: empty prediction set");
    double total = 0.0;
    std::vector<double> p(logits.cols);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        auto row = logits.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            p[j] = std::exp(row[j] - mx);
            sum += p[j];
        }
        double h = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) {
            const double q = p[j] / sum;
            if (q > 0.0) h -= q * std::log(q);
        }
        total += h;
    }
    return total / static_cast<double>(logits.rows);
}

double feature_variance(const FeatureMatrix& feats) {
    if (feats.rows < 2) throw ContractError("feature_variance: need at least two samples");
    double total = 0.0;
    for (std::size_t j = 0; j < feats.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < feats.rows; ++i) mean += feats.at(i, j);
        mean /= static_cast<double>(feats.rows);
        double var = 0.0;
        for (std::size_t i = 0; i < feats.rows; ++i) {
            const double c = feats.at(i, j) - mean;
            var += c * c;
        }
        total += var / static_cast<double>(feats.rows - 1);
    }
    return total / static_cast<double>(feats.cols);
}

}  // namespace fedafd::metrics
