#include "fedafd/sed.hpp"

#include <cmath>

namespace fedafd::sed {

std::vector<double> similarity_scores(const FeatureMatrix& client_feats,
                                      const FeatureMatrix& global_feats) {
    if (client_feats.rows != global_feats.rows)
        throw ContractError("similarity_scores: feature sets must cover the same public samples");
    if (client_feats.rows == 0) throw ContractError("similarity_scores: empty public set");
    FeatureMatrix cos = cosine_matrix(client_feats, global_feats);
    const std::size_t n = cos.rows;
    std::vector<double> scores(n);
    for (std::size_t k = 0; k < n; ++k) {
        auto row = cos.row(k);
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        scores[k] = row[k] - mx - std::log(sum);
    }
    return scores;
}

FeatureMatrix aggregation_weights(const std::vector<std::vector<double>>& member_scores) {
    if (member_scores.empty()) throw ContractError("aggregation_weights: empty group");
    const std::size_t samples = member_scores[0].size();
    for (const auto& s : member_scores)
        if (s.size() != samples)
            throw ContractError("aggregation_weights: members disagree on sample count");
    const std::size_t members = member_scores.size();
    FeatureMatrix w(samples, members);
    for (std::size_t k = 0; k < samples; ++k) {
        double mx = member_scores[0][k];
        for (std::size_t c = 1; c < members; ++c) mx = std::max(mx, member_scores[c][k]);
        double sum = 0.0;
        for (std::size_t c = 0; c < members; ++c) {
            w.at(k, c) = std::exp(member_scores[c][k] - mx);
            sum += w.at(k, c);
        }
        for (std::size_t c = 0; c < members; ++c) w.at(k, c) /= sum;
    }
    return w;
}

std::vector<double> aggregation_weights_at(const std::vector<std::vector<double>>& member_scores,
                                           std::size_t k) {
    FeatureMatrix w = aggregation_weights(member_scores);
    if (k >= w.rows) throw ContractError("aggregation_weights_at: sample index out of range");
    auto row = w.row(k);
    return {row.begin(), row.end()};
}

FeatureMatrix aggregate_teacher(const std::vector<const FeatureMatrix*>& member_feats,
                                const FeatureMatrix& weights) {
    if (member_feats.empty()) throw ContractError("aggregate_teacher: empty group");
    if (weights.cols != member_feats.size())
        throw ContractError("aggregate_teacher: weights and member count misaligned");
    const std::size_t samples = weights.rows;
    const std::size_t d = member_feats[0]->cols;
    for (const FeatureMatrix* f : member_feats)
        if (f->rows != samples || f->cols != d)
            throw ContractError("aggregate_teacher: member features misaligned");
    FeatureMatrix out(samples, d);
    // Fixed member order keeps the floating-point reduction reproducible.
    for (std::size_t c = 0; c < member_feats.size(); ++c) {
        const FeatureMatrix& f = *member_feats[c];
        for (std::size_t k = 0; k < samples; ++k) {
            const double w = weights.at(k, c);
            auto src = f.row(k);
            auto dst = out.row(k);
            for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
        }
    }
    return out;
}

namespace {

Tensor branch_kd_loss(const nets::EncoderParams& enc, const FeatureMatrix& inputs,
                      const FeatureMatrix& teacher, KdNorm norm) {
    Tensor student = nets::encoder_forward(enc, Tensor::from_matrix(inputs));
    Tensor diff = sub(Tensor::from_matrix(teacher), student);
    Tensor per_sample = norm == KdNorm::euclidean ? l2norm_rows(diff) : sumsq_rows(diff);
    return mean_all(per_sample);
}

}  // namespace

double kd_loss_value(const GlobalState& server, const FeatureMatrix& teacher_img,
                     const FeatureMatrix& teacher_txt, const FeatureMatrix& pub_a,
                     const FeatureMatrix& pub_b, KdNorm norm) {
    NoGradGuard guard;
    return branch_kd_loss(server.enc_img, pub_a, teacher_img, norm).item() +
           branch_kd_loss(server.enc_txt, pub_b, teacher_txt, norm).item();
}

double kd_update(GlobalState& server, const FeatureMatrix& teacher_img,
                 const FeatureMatrix& teacher_txt, const FeatureMatrix& pub_a,
                 const FeatureMatrix& pub_b, std::span<const std::size_t> order,
                 const KdConfig& cfg) {
    if (cfg.gamma < 0.0) throw ConfigError("kd: gamma must be nonnegative");
    if (!(cfg.eta > 0.0)) throw ConfigError("kd: eta must be positive");
    if (teacher_img.rows != pub_a.rows || teacher_txt.rows != pub_b.rows)
        throw ContractError("kd: teacher misaligned with public set");

    auto params = nets::encoder_params(server.enc_img);
    for (Tensor* p : nets::encoder_params(server.enc_txt)) params.push_back(p);
    const double step = cfg.eta * cfg.gamma;

    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t len = std::min(cfg.batch_size, order.size() - start);
        auto idx = order.subspan(start, len);
        Tensor loss = add(branch_kd_loss(server.enc_img, gather_rows(pub_a, idx),
                                         gather_rows(teacher_img, idx), cfg.norm),
                          branch_kd_loss(server.enc_txt, gather_rows(pub_b, idx),
                                         gather_rows(teacher_txt, idx), cfg.norm));
        loss_sum += loss.item() * static_cast<double>(len);
        count += len;
        if (step > 0.0) {
            backward(loss);
            sgd_step(params, step);
        }
    }
    return count == 0 ? 0.0 : loss_sum / static_cast<double>(count);
}

}  // namespace fedafd::sed
