#include "fedafd/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "fedafd/baa.hpp"
#include "fedafd/gff.hpp"
#include "fedafd/metrics.hpp"

namespace fedafd::protocol {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kBytesPerValue = 4;  // payloads ship as 32-bit floats
constexpr std::uint64_t kServerScope = 1'000'000;

std::uint64_t subseed(std::uint64_t master, std::uint64_t tag) {
    return derive_stream(master, {tag}).next_u64();
}

std::uint64_t tag(StreamId id) { return static_cast<std::uint64_t>(id); }

}  // namespace

Strategy strategy_from_name(const std::string& name) {
    if (name == "fedafd") return Strategy::fedafd;
    if (name == "local") return Strategy::local;
    if (name == "avg_uniform") return Strategy::avg_uniform;
    if (name == "avg_samples") return Strategy::avg_samples;
    if (name == "avg_entropy") return Strategy::avg_entropy;
    if (name == "avg_variance") return Strategy::avg_variance;
    if (name == "aggr_mm") return Strategy::aggr_mm;
    throw ConfigError("unknown strategy: " + name);
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::fedafd: return "fedafd";
        case Strategy::local: return "local";
        case Strategy::avg_uniform: return "avg_uniform";
        case Strategy::avg_samples: return "avg_samples";
        case Strategy::avg_entropy: return "avg_entropy";
        case Strategy::avg_variance: return "avg_variance";
        case Strategy::aggr_mm: return "aggr_mm";
    }
    return "?";
}

bool strategy_exchanges(Strategy s) { return s != Strategy::local; }

bool strategy_uses_client_modules(Strategy s) {
    return s == Strategy::fedafd || s == Strategy::aggr_mm;
}

void RunConfig::validate() const {
    if (rounds < 0) throw ConfigError("T must be nonnegative");
    if (local_epochs < 0) throw ConfigError("E must be nonnegative");
    if (cache_interval < 1) throw ConfigError("K must be at least 1");
    if (beta < 0.0) throw ConfigError("beta must be nonnegative");
    if (gamma < 0.0) throw ConfigError("gamma must be nonnegative");
    if (!(eta > 0.0) || !(eta_c > 0.0)) throw ConfigError("learning rates must be positive");
    if (feature_dim < 4) throw ConfigError("feature dim must be at least 4 (discriminator taper)");
    if (roster.n_image < 0 || roster.n_text < 0 || roster.n_multimodal < 0 || roster.total() < 1)
        throw ConfigError("roster must name at least one client");
    if (public_size < 1) throw ConfigError("public set must be nonempty");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(client_test_fraction > 0.0) || client_test_fraction >= 1.0)
        throw ConfigError("client test fraction must lie in (0,1)");
    if (!(baa_public_fraction > 0.0) || baa_public_fraction > 1.0)
        throw ConfigError("baa public fraction must lie in (0,1]");
    if (threads < 1) throw ConfigError("threads must be positive");
    if (gate_bottleneck == 0 || feature_dim / gate_bottleneck == 0)
        throw ConfigError("gate bottleneck too large for feature dim");
    const std::size_t classes = static_cast<std::size_t>(synth.num_classes);
    if (public_size % classes != 0 || server_test_pairs % classes != 0)
        throw ConfigError("public and server-test sizes must divide evenly across classes");
}

// --- World construction -----------------------------------------------------

namespace {

std::size_t client_hidden_dim(const RunConfig& cfg) {
    return cfg.client_hidden ? cfg.client_hidden : cfg.feature_dim;
}
std::size_t server_hidden_dim(const RunConfig& cfg) {
    return cfg.server_hidden ? cfg.server_hidden : 2 * cfg.feature_dim;
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
}

ModalityBranch make_branch(const RunConfig& cfg, Modality m, int client_id, int branch_index) {
    const std::size_t in_dim =
        m == Modality::image ? cfg.synth.modality_a_dim : cfg.synth.modality_b_dim;
    const std::uint64_t scope = static_cast<std::uint64_t>(client_id) * 100 +
                                static_cast<std::uint64_t>(branch_index) * 10;
    ModalityBranch b;
    b.modality = m;
    nets::ParamStream enc_ps{cfg.seed, scope + 0};
    b.encoder = nets::make_encoder(in_dim, client_hidden_dim(cfg), cfg.feature_dim, enc_ps);
    nets::ParamStream din_ps{cfg.seed, scope + 1};
    b.disc_in = nets::make_discriminator(cfg.feature_dim, din_ps);
    nets::ParamStream dcr_ps{cfg.seed, scope + 2};
    b.disc_cr = nets::make_discriminator(cfg.feature_dim, dcr_ps);
    nets::ParamStream gate_ps{cfg.seed, scope + 3};
    b.gate = nets::make_gate(cfg.feature_dim, cfg.gate_bottleneck, gate_ps);
    return b;
}

void split_train_test(ClientState& c, const RunConfig& cfg) {
    const std::size_t n = c.data.labels.empty()
                              ? std::max(c.data.x_a.rows, c.data.x_b.rows)
                              : c.data.labels.size();
    Rng rng = derive_stream(cfg.seed, {tag(StreamId::client_split),
                                       static_cast<std::uint64_t>(c.id)});
    auto order = shuffled_indices(n, rng);
    if (n == 1) {
        c.data.train_idx = {0};
        c.data.test_idx = {0};
        return;
    }
    std::size_t test_count =
        std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(n) *
                                                          cfg.client_test_fraction));
    test_count = std::min(test_count, n - 1);
    c.data.test_idx.assign(order.begin(), order.begin() + test_count);
    c.data.train_idx.assign(order.begin() + test_count, order.end());
    std::sort(c.data.test_idx.begin(), c.data.test_idx.end());
    std::sort(c.data.train_idx.begin(), c.data.train_idx.end());
}

std::vector<std::vector<std::size_t>> partition_pool(const RunConfig& cfg,
                                                     const std::vector<std::size_t>& pool,
                                                     const std::vector<int>& labels,
                                                     int num_clients, bool shard_based,
                                                     std::uint64_t pool_tag) {
    std::vector<int> pool_labels(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool_labels[i] = labels[pool[i]];
    const std::uint64_t s = subseed(cfg.seed, pool_tag);
    std::vector<std::vector<std::size_t>> parts;
    if (cfg.iid) {
        parts = synth::partition_iid(pool.size(), num_clients, s);
    } else if (shard_based) {
        parts = synth::partition_shards(pool_labels, num_clients, cfg.shards_per_client, s);
    } else {
        parts = synth::partition_dirichlet(pool_labels, num_clients, cfg.dirichlet_alpha, s);
    }
    for (auto& p : parts)
        for (auto& i : p) i = pool[i];
    return parts;
}

}  // namespace

World build_world(const RunConfig& cfg) {
    cfg.validate();
    const std::size_t classes = static_cast<std::size_t>(cfg.synth.num_classes);
    const std::size_t pub_pc = cfg.public_size / classes;
    const std::size_t test_pc = cfg.server_test_pairs / classes;
    const std::size_t pool_pc = cfg.pool_per_class;

    synth::SynthSpec spec = cfg.synth;
    spec.samples_per_class = static_cast<int>(pub_pc + test_pc + 3 * pool_pc);
    spec.seed = cfg.seed;
    synth::MultimodalDataset ds = synth::generate(spec);

    // Stratified carve-up of each class block: public, server test, then the
    // three private pools.
    std::vector<std::size_t> pub_rows, test_rows, img_pool, txt_pool, mm_pool;
    const std::size_t spc = static_cast<std::size_t>(spec.samples_per_class);
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t cursor = c * spc;
        auto take = [&](std::vector<std::size_t>& dst, std::size_t count) {
            for (std::size_t i = 0; i < count; ++i) dst.push_back(cursor++);
        };
        take(pub_rows, pub_pc);
        take(test_rows, test_pc);
        take(img_pool, pool_pc);
        take(txt_pool, pool_pc);
        take(mm_pool, pool_pc);
    }

    World world;
    world.public_set.x_a = gather_rows(ds.x_a, pub_rows);
    world.public_set.x_b = gather_rows(ds.x_b, pub_rows);
    world.public_set.labels = gather_labels(ds.labels, pub_rows);
    world.server_test_a = gather_rows(ds.x_a, test_rows);
    world.server_test_b = gather_rows(ds.x_b, test_rows);
    world.server_test_labels = gather_labels(ds.labels, test_rows);

    nets::ParamStream simg{cfg.seed, kServerScope + 0};
    world.server.enc_img = nets::make_encoder(cfg.synth.modality_a_dim, server_hidden_dim(cfg),
                                              cfg.feature_dim, simg);
    nets::ParamStream stxt{cfg.seed, kServerScope + 1};
    world.server.enc_txt = nets::make_encoder(cfg.synth.modality_b_dim, server_hidden_dim(cfg),
                                              cfg.feature_dim, stxt);

    int next_id = 0;
    auto add_unimodal = [&](Modality m, const std::vector<std::size_t>& rows) {
        ClientState c;
        c.id = next_id++;
        c.role = m == Modality::image ? ClientRole::image_unimodal : ClientRole::text_unimodal;
        c.branches.push_back(make_branch(cfg, m, c.id, 0));
        if (m == Modality::image)
            c.data.x_a = gather_rows(ds.x_a, rows);
        else
            c.data.x_b = gather_rows(ds.x_b, rows);
        c.data.labels = gather_labels(ds.labels, rows);
        nets::ParamStream cls_ps{cfg.seed, static_cast<std::uint64_t>(c.id) * 100 + 99};
        c.classifier = nets::make_classifier(cfg.feature_dim, classes, cls_ps);
        split_train_test(c, cfg);
        world.clients.push_back(std::move(c));
    };

    if (cfg.roster.n_image > 0) {
        auto parts = partition_pool(cfg, img_pool, ds.labels, cfg.roster.n_image, false, 11);
        for (const auto& rows : parts) add_unimodal(Modality::image, rows);
    }
    if (cfg.roster.n_text > 0) {
        auto parts = partition_pool(cfg, txt_pool, ds.labels, cfg.roster.n_text, false, 12);
        for (const auto& rows : parts) add_unimodal(Modality::text, rows);
    }
    if (cfg.roster.n_multimodal > 0) {
        auto parts = partition_pool(cfg, mm_pool, ds.labels, cfg.roster.n_multimodal, true, 13);
        for (const auto& rows : parts) {
            ClientState c;
            c.id = next_id++;
            c.role = ClientRole::multimodal;
            c.branches.push_back(make_branch(cfg, Modality::image, c.id, 0));
            c.branches.push_back(make_branch(cfg, Modality::text, c.id, 1));
            c.data.x_a = gather_rows(ds.x_a, rows);
            c.data.x_b = gather_rows(ds.x_b, rows);
            c.data.labels = gather_labels(ds.labels, rows);
            split_train_test(c, cfg);
            world.clients.push_back(std::move(c));
        }
    }
    return world;
}

// --- Training passes --------------------------------------------------------

namespace {

/// Contiguous [start, start+len) batch windows; a trailing singleton is
/// folded into the previous batch so batch-norm always sees >= 2 rows.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n,
                                                              std::size_t batch_size) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size)
        out.push_back({start, std::min(batch_size, n - start)});
    if (out.size() >= 2 && out.back().second == 1) {
        out.pop_back();
        out.back().second += 1;
    }
    return out;
}

double server_task_epoch(GlobalState& server, const PublicSet& pub, const RunConfig& cfg,
                         int round) {
    Rng rng = derive_stream(cfg.seed, {tag(StreamId::server_task_batches),
                                       static_cast<std::uint64_t>(round)});
    auto order = shuffled_indices(pub.size(), rng);
    auto params = nets::encoder_params(server.enc_img);
    for (Tensor* p : nets::encoder_params(server.enc_txt)) params.push_back(p);

    double loss_sum = 0.0;
    std::size_t count = 0;
    for (auto [start, len] : batch_ranges(order.size(), cfg.batch_size)) {
        if (len < 2) continue;  // contrastive loss needs at least one negative
        std::span<const std::size_t> idx(order.data() + start, len);
        Tensor u = nets::encoder_forward(server.enc_img,
                                         Tensor::from_matrix(gather_rows(pub.x_a, idx)));
        Tensor v = nets::encoder_forward(server.enc_txt,
                                         Tensor::from_matrix(gather_rows(pub.x_b, idx)));
        Tensor loss = gff::contrastive_loss(u, v, cfg.temperature);
        loss_sum += loss.item() * static_cast<double>(len);
        count += len;
        backward(loss);
        sgd_step(params, cfg.eta);
    }
    return count ? loss_sum / static_cast<double>(count) : kNaN;
}

void refresh_private_global_feats(ClientState& c) {
    if (!c.cache.valid()) throw ProtocolError("client has no encoder snapshot");
    if (c.private_feats_stamp == c.cache.round_stamp) return;
    c.private_global_feats.clear();
    for (const ModalityBranch& b : c.branches) {
        const nets::EncoderParams& enc =
            b.modality == Modality::image ? c.cache.enc_img : c.cache.enc_txt;
        c.private_global_feats.push_back(
            nets::encoder_forward_nograd(enc, branch_inputs(c.data, b.modality)));
    }
    c.private_feats_stamp = c.cache.round_stamp;
}

struct UpdateOut {
    double l_task = kNaN;
    double l_adv = kNaN;
};

UpdateOut client_update(ClientState& c, const PublicSet& pub, const FeatureMatrix& g_img,
                        const FeatureMatrix& g_txt, const RunConfig& cfg, int round) {
    const bool exchange = strategy_exchanges(cfg.strategy);
    const bool modules = exchange && strategy_uses_client_modules(cfg.strategy);
    const bool use_baa = modules && cfg.ablations.baa;
    bool use_gff = modules && cfg.ablations.gff;

    if (exchange) {
        const int last_broadcast = round - round % cfg.cache_interval;
        if (c.cache.round_stamp != last_broadcast)
            throw ProtocolError("client encoder cache is stale for this round");
    }
    // Fusion needs batch statistics; a one-sample training split cannot
    // provide them, so such a client trains on raw features.
    if (c.data.train_idx.size() < 2) use_gff = false;
    if (use_gff) refresh_private_global_feats(c);

    UpdateOut out;
    double task_sum = 0.0, adv_sum = 0.0;
    std::size_t task_count = 0, adv_passes = 0;

    for (int e = 0; e < cfg.local_epochs; ++e) {
        if (use_baa) {
            Rng rng = derive_stream(cfg.seed, {tag(StreamId::baa_batches),
                                               static_cast<std::uint64_t>(c.id),
                                               static_cast<std::uint64_t>(round),
                                               static_cast<std::uint64_t>(e)});
            auto order = shuffled_indices(pub.size(), rng);
            const std::size_t keep = std::max<std::size_t>(
                1, static_cast<std::size_t>(static_cast<double>(order.size()) *
                                            cfg.baa_public_fraction));
            order.resize(keep);
            baa::BaaStepConfig bcfg{cfg.beta, cfg.eta_c, cfg.batch_size};
            adv_sum += baa::baa_step(c, pub.x_a, pub.x_b, g_img, g_txt, order, bcfg);
            ++adv_passes;
        }

        Rng rng = derive_stream(cfg.seed, {tag(StreamId::task_batches),
                                           static_cast<std::uint64_t>(c.id),
                                           static_cast<std::uint64_t>(round),
                                           static_cast<std::uint64_t>(e)});
        std::vector<std::size_t> rows = c.data.train_idx;
        shuffle(rows, rng);
        gff::TaskStepConfig tcfg{cfg.eta_c, cfg.temperature, use_gff};
        for (auto [start, len] : batch_ranges(rows.size(), cfg.batch_size)) {
            std::span<const std::size_t> idx(rows.data() + start, len);
            if (c.role == ClientRole::multimodal) {
                if (len < 2) continue;
                FeatureMatrix xa = gather_rows(c.data.x_a, idx);
                FeatureMatrix xb = gather_rows(c.data.x_b, idx);
                FeatureMatrix ga, gb;
                if (use_gff) {
                    ga = gather_rows(c.private_global_feats[0], idx);
                    gb = gather_rows(c.private_global_feats[1], idx);
                }
                task_sum += gff::task_step_multimodal(c.branches[0], c.branches[1], xa, xb,
                                                      use_gff ? &ga : nullptr,
                                                      use_gff ? &gb : nullptr, tcfg) *
                            static_cast<double>(len);
                task_count += len;
            } else {
                const FeatureMatrix& inputs = branch_inputs(c.data, c.branches[0].modality);
                FeatureMatrix x = gather_rows(inputs, idx);
                std::vector<int> y(len);
                for (std::size_t i = 0; i < len; ++i) y[i] = c.data.labels[idx[i]];
                FeatureMatrix g;
                if (use_gff) g = gather_rows(c.private_global_feats[0], idx);
                task_sum += gff::task_step_unimodal(c.branches[0], *c.classifier, x, y,
                                                    use_gff ? &g : nullptr, tcfg) *
                            static_cast<double>(len);
                task_count += len;
            }
        }
    }
    if (task_count) out.l_task = task_sum / static_cast<double>(task_count);
    if (adv_passes) out.l_adv = adv_sum / static_cast<double>(adv_passes);
    return out;
}

template <typename F>
void parallel_over_clients(std::size_t n, int threads, F&& f) {
    const int workers = std::min<int>(threads, static_cast<int>(n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = static_cast<std::size_t>(w); i < n;
                 i += static_cast<std::size_t>(workers))
                f(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace

// --- Aggregation -------------------------------------------------------------

namespace {

struct Group {
    std::vector<const Upload*> members;
};

FeatureMatrix uniform_like(std::size_t samples, std::size_t members) {
    FeatureMatrix w(samples, members);
    const double v = 1.0 / static_cast<double>(members);
    for (auto& x : w.data) x = v;
    return w;
}

FeatureMatrix static_score_weights(const Group& g, std::size_t samples,
                                   const std::vector<double>& scores) {
    std::vector<std::vector<double>> member_scores;
    member_scores.reserve(g.members.size());
    for (double s : scores) member_scores.push_back(std::vector<double>(samples, s));
    return sed::aggregation_weights(member_scores);
}

FeatureMatrix entropy_weights(const Group& g, std::size_t samples, bool& fallback_used) {
    const std::size_t n = g.members.size();
    std::vector<std::size_t> scored;
    for (std::size_t i = 0; i < n; ++i)
        if (g.members[i]->has_predictions) scored.push_back(i);
    if (scored.empty()) {
        fallback_used = true;
        return uniform_like(samples, n);
    }
    std::vector<double> row(n, 1.0 / static_cast<double>(n));
    if (scored.size() < n) fallback_used = true;
    // Members without predictions keep the uniform share; the rest split the
    // remaining mass by softmax of negative entropy.
    const double mass = static_cast<double>(scored.size()) / static_cast<double>(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i : scored) mx = std::max(mx, -g.members[i]->mean_entropy);
    double denom = 0.0;
    for (std::size_t i : scored) denom += std::exp(-g.members[i]->mean_entropy - mx);
    for (std::size_t i : scored)
        row[i] = mass * std::exp(-g.members[i]->mean_entropy - mx) / denom;
    FeatureMatrix w(samples, n);
    for (std::size_t k = 0; k < samples; ++k)
        for (std::size_t i = 0; i < n; ++i) w.at(k, i) = row[i];
    return w;
}

FeatureMatrix group_weights(Strategy s, const Group& g, const FeatureMatrix& global_same,
                            bool& entropy_fallback) {
    const std::size_t samples = global_same.rows;
    switch (s) {
        case Strategy::fedafd:
        case Strategy::aggr_mm: {
            std::vector<std::vector<double>> member_scores;
            member_scores.reserve(g.members.size());
            for (const Upload* u : g.members)
                member_scores.push_back(sed::similarity_scores(*u->feats, global_same));
            return sed::aggregation_weights(member_scores);
        }
        case Strategy::avg_uniform:
            return uniform_like(samples, g.members.size());
        case Strategy::avg_samples: {
            std::vector<double> scores;
            for (const Upload* u : g.members) {
                if (u->sample_count == 0)
                    throw ContractError("avg_samples: member with zero samples");
                scores.push_back(std::log(static_cast<double>(u->sample_count)));
            }
            return static_score_weights(g, samples, scores);
        }
        case Strategy::avg_entropy:
            return entropy_weights(g, samples, entropy_fallback);
        case Strategy::avg_variance: {
            std::vector<double> scores;
            for (const Upload* u : g.members) scores.push_back(-u->feat_variance);
            return static_score_weights(g, samples, scores);
        }
        case Strategy::local:
            throw ContractError("local strategy performs no aggregation");
    }
    throw ContractError("unreachable strategy");
}

}  // namespace

TeacherOutputs aggregate(Strategy s, const std::vector<Upload>& uploads,
                         const FeatureMatrix& global_img, const FeatureMatrix& global_txt,
                         int expected_round) {
    Group img, txt;
    for (const Upload& u : uploads) {
        if (u.round_stamp != expected_round)
            throw ProtocolError("aggregate: upload from a different round");
        if (s == Strategy::aggr_mm && !u.from_multimodal) continue;
        (u.modality == Modality::image ? img : txt).members.push_back(&u);
    }
    if (img.members.empty() || txt.members.empty())
        throw ContractError("aggregate: a modality group is empty");

    TeacherOutputs out;
    auto run_group = [&](Group& g, const FeatureMatrix& global_same, FeatureMatrix& teacher,
                         FeatureMatrix& weights, std::vector<int>& member_ids) {
        weights = group_weights(s, g, global_same, out.entropy_fallback_used);
        std::vector<const FeatureMatrix*> feats;
        for (const Upload* u : g.members) {
            feats.push_back(u->feats);
            member_ids.push_back(u->client_id);
        }
        teacher = sed::aggregate_teacher(feats, weights);
    };
    run_group(img, global_img, out.img, out.weights_img, out.members_img);
    run_group(txt, global_txt, out.txt, out.weights_txt, out.members_txt);
    return out;
}

// --- Evaluation ---------------------------------------------------------------

namespace {

FeatureMatrix fused_features_eval(ModalityBranch& branch, const FeatureMatrix& x,
                                  const FeatureMatrix& global_feats) {
    NoGradGuard guard;
    Tensor local = nets::encoder_forward(branch.encoder, Tensor::from_matrix(x));
    return gff::fuse(local, Tensor::from_matrix(global_feats), branch.gate, nets::BnMode::eval)
        .fused.to_matrix();
}

FeatureMatrix client_eval_features(ClientState& c, std::size_t branch_index,
                                   std::span<const std::size_t> rows, bool fused) {
    const ModalityBranch& b = c.branches[branch_index];
    FeatureMatrix x = gather_rows(branch_inputs(c.data, b.modality), rows);
    if (!fused) return nets::encoder_forward_nograd(b.encoder, x);
    const nets::EncoderParams& genc =
        b.modality == Modality::image ? c.cache.enc_img : c.cache.enc_txt;
    FeatureMatrix g = nets::encoder_forward_nograd(genc, x);
    return fused_features_eval(c.branches[branch_index], x, g);
}

}  // namespace

RoundRecord evaluate_round(const RunConfig& cfg, World& world, int round) {
    RoundRecord rec;
    rec.round = round;
    rec.strategy = cfg.strategy;
    rec.seed = cfg.seed;
    rec.server_task_loss = kNaN;
    rec.l_kd = kNaN;

    const PublicSet& pub = world.public_set;
    FeatureMatrix g_img = nets::encoder_forward_nograd(world.server.enc_img, pub.x_a);
    FeatureMatrix g_txt = nets::encoder_forward_nograd(world.server.enc_txt, pub.x_b);

    FeatureMatrix ti = nets::encoder_forward_nograd(world.server.enc_img, world.server_test_a);
    FeatureMatrix tt = nets::encoder_forward_nograd(world.server.enc_txt, world.server_test_b);
    FeatureMatrix sim = cosine_matrix(ti, tt);
    rec.server_i2t = metrics::recall_at_1(sim, metrics::Direction::i2t);
    rec.server_t2i = metrics::recall_at_1(sim, metrics::Direction::t2i);

    const bool modules =
        strategy_exchanges(cfg.strategy) && strategy_uses_client_modules(cfg.strategy);
    double gap_sum = 0.0;
    for (ClientState& c : world.clients) {
        ClientRoundStats s;
        s.client_id = c.id;
        s.role = c.role;
        s.l_task = s.l_adv = s.acc1 = s.i2t = s.t2i = kNaN;

        double gap = 0.0;
        for (const ModalityBranch& b : c.branches) {
            FeatureMatrix feats = nets::encoder_forward_nograd(
                b.encoder, b.modality == Modality::image ? pub.x_a : pub.x_b);
            gap += metrics::rep_gap(feats, b.modality == Modality::image ? g_img : g_txt);
        }
        s.rep_gap = gap / static_cast<double>(c.branches.size());
        gap_sum += s.rep_gap;

        const bool fused = modules && cfg.ablations.gff && c.cache.valid() &&
                           c.data.train_idx.size() >= 2;
        std::span<const std::size_t> test_rows(c.data.test_idx);
        if (c.role == ClientRole::multimodal) {
            FeatureMatrix u = client_eval_features(c, 0, test_rows, fused);
            FeatureMatrix v = client_eval_features(c, 1, test_rows, fused);
            FeatureMatrix csim = cosine_matrix(u, v);
            s.i2t = metrics::recall_at_1(csim, metrics::Direction::i2t);
            s.t2i = metrics::recall_at_1(csim, metrics::Direction::t2i);
        } else {
            FeatureMatrix f = client_eval_features(c, 0, test_rows, fused);
            NoGradGuard guard;
            FeatureMatrix logits =
                nets::classifier_forward(*c.classifier, Tensor::from_matrix(f)).to_matrix();
            std::vector<int> y(test_rows.size());
            for (std::size_t i = 0; i < test_rows.size(); ++i) y[i] = c.data.labels[test_rows[i]];
            s.acc1 = metrics::acc_at_1(logits, y);
        }
        rec.clients.push_back(s);
    }
    rec.mean_rep_gap =
        world.clients.empty() ? kNaN : gap_sum / static_cast<double>(world.clients.size());
    return rec;
}

// --- The round loop ------------------------------------------------------------

RunResult run(const RunConfig& cfg) {
    cfg.validate();
    RunResult res;
    res.config = cfg;
    res.world = build_world(cfg);
    World& world = res.world;
    const PublicSet& pub = world.public_set;
    const bool exchange = strategy_exchanges(cfg.strategy);
    const std::uint64_t enc_bytes = encoder_payload_bytes(world.server);
    const std::uint64_t feat_bytes_one = kBytesPerValue * pub.size() * cfg.feature_dim;

    for (int t = 0; t < cfg.rounds; ++t) {
        world.server.round = t;
        double server_task_loss = server_task_epoch(world.server, pub, cfg, t);

        FeatureMatrix g_img = nets::encoder_forward_nograd(world.server.enc_img, pub.x_a);
        FeatureMatrix g_txt = nets::encoder_forward_nograd(world.server.enc_txt, pub.x_b);

        const bool broadcast_encoder = (t % cfg.cache_interval == 0);
        std::vector<std::uint64_t> down_bytes(world.clients.size(), 0);
        std::vector<std::uint64_t> up_bytes(world.clients.size(), 0);
        if (exchange) {
            for (std::size_t i = 0; i < world.clients.size(); ++i) {
                ClientState& c = world.clients[i];
                if (broadcast_encoder) {
                    c.cache.enc_img = nets::clone_frozen(world.server.enc_img);
                    c.cache.enc_txt = nets::clone_frozen(world.server.enc_txt);
                    c.cache.round_stamp = t;
                }
                down_bytes[i] = 2 * feat_bytes_one + (broadcast_encoder ? enc_bytes : 0);
            }
        }

        std::vector<UpdateOut> updates(world.clients.size());
        parallel_over_clients(world.clients.size(), cfg.threads, [&](std::size_t i) {
            updates[i] = client_update(world.clients[i], pub, g_img, g_txt, cfg, t);
        });

        double l_kd = kNaN;
        if (exchange) {
            std::vector<FeatureMatrix> upload_store;
            std::vector<Upload> uploads;
            std::size_t total_branches = 0;
            for (const ClientState& c : world.clients) total_branches += c.branches.size();
            upload_store.reserve(total_branches);
            for (std::size_t i = 0; i < world.clients.size(); ++i) {
                ClientState& c = world.clients[i];
                for (std::size_t bi = 0; bi < c.branches.size(); ++bi) {
                    const ModalityBranch& b = c.branches[bi];
                    upload_store.push_back(nets::encoder_forward_nograd(
                        b.encoder, b.modality == Modality::image ? pub.x_a : pub.x_b));
                    const FeatureMatrix& feats = upload_store.back();
                    Upload u;
                    u.client_id = c.id;
                    u.modality = b.modality;
                    u.feats = &feats;
                    u.round_stamp = t;
                    u.from_multimodal = c.role == ClientRole::multimodal;
                    u.sample_count = c.data.train_idx.size();
                    u.feat_variance =
                        feats.rows >= 2 ? metrics::feature_variance(feats) : 0.0;
                    if (c.classifier && c.branches.size() == 1) {
                        NoGradGuard guard;
                        FeatureMatrix logits =
                            nets::classifier_forward(*c.classifier, Tensor::from_matrix(feats))
                                .to_matrix();
                        u.mean_entropy = metrics::mean_prediction_entropy(logits);
                        u.has_predictions = true;
                    }
                    uploads.push_back(u);
                    up_bytes[i] += feat_bytes_one;
                }
            }

            // The sed ablation swaps the similarity weighting for plain
            // averaging while the rest of the round is unchanged.
            Strategy agg_strategy = cfg.strategy;
            if (cfg.strategy == Strategy::fedafd && !cfg.ablations.sed)
                agg_strategy = Strategy::avg_uniform;
            TeacherOutputs teacher = aggregate(agg_strategy, uploads, g_img, g_txt, t);

            Rng kd_rng =
                derive_stream(cfg.seed, {tag(StreamId::kd_batches), static_cast<std::uint64_t>(t)});
            auto order = shuffled_indices(pub.size(), kd_rng);
            sed::KdConfig kcfg{cfg.gamma, cfg.eta, cfg.batch_size,
                               cfg.squared_l2 ? sed::KdNorm::squared : sed::KdNorm::euclidean};
            l_kd = sed::kd_update(world.server, teacher.img, teacher.txt, pub.x_a, pub.x_b, order,
                                  kcfg);
        }

        RoundRecord rec = evaluate_round(cfg, world, t);
        rec.server_task_loss = server_task_loss;
        rec.l_kd = l_kd;
        for (std::size_t i = 0; i < world.clients.size(); ++i) {
            rec.clients[i].l_task = updates[i].l_task;
            rec.clients[i].l_adv = updates[i].l_adv;
            rec.clients[i].up_bytes = up_bytes[i];
            rec.clients[i].down_bytes = down_bytes[i];
            rec.up_bytes += up_bytes[i];
            rec.down_bytes += down_bytes[i];
        }
        res.records.push_back(std::move(rec));
    }
    return res;
}

// --- Accounting -----------------------------------------------------------------

std::uint64_t encoder_payload_bytes(const GlobalState& server) {
    return kBytesPerValue *
           (nets::encoder_value_count(server.enc_img) + nets::encoder_value_count(server.enc_txt));
}

namespace {
double round2(double x) { return std::round(x * 100.0) / 100.0; }
constexpr double kMiB = 1024.0 * 1024.0;
}  // namespace

CommCost comm_cost(const CommCostInputs& in) {
    if (in.cache_interval < 1) throw ConfigError("comm_cost: K must be at least 1");
    CommCost out;
    const std::uint64_t one_matrix =
        kBytesPerValue * static_cast<std::uint64_t>(in.public_size) * in.feature_dim;
    out.upload_bytes_per_round = 2 * one_matrix;
    out.feature_download_bytes_per_round = 2 * one_matrix;
    // Display convention: each modality payload is rounded to 2 decimals
    // before summing, which reproduces the reported 19.54 MB at
    // |P|=10000, d=256 (raw arithmetic gives 19.53).
    out.per_modality_mb = round2(static_cast<double>(one_matrix) / kMiB);
    out.upload_mb = 2.0 * out.per_modality_mb;
    const double m = round2(in.encoder_payload_mb);
    out.download_mb = out.upload_mb + m;
    out.sum_mb = out.upload_mb + out.download_mb;
    out.amortized_encoder_mb = in.encoder_payload_mb / static_cast<double>(in.cache_interval);
    out.amortized_download_mb = out.upload_mb + out.amortized_encoder_mb;
    const int broadcasts =
        (in.rounds + in.cache_interval - 1) / in.cache_interval;  // rounds with t % K == 0
    out.total_upload_mb = out.upload_mb * in.rounds;
    out.total_download_mb = out.upload_mb * in.rounds + m * broadcasts;
    return out;
}

RunSummary summarize(const RunResult& result) {
    RunSummary s;
    if (result.records.empty()) return s;
    const RoundRecord& last = result.records.back();
    s.server_i2t = last.server_i2t;
    s.server_t2i = last.server_t2i;
    s.server_rsum_pct = 100.0 * (last.server_i2t + last.server_t2i);
    double metric_sum = 0.0;
    for (const ClientRoundStats& c : last.clients)
        metric_sum += c.role == ClientRole::multimodal ? 0.5 * (c.i2t + c.t2i) : c.acc1;
    s.mean_client_metric =
        last.clients.empty() ? 0.0 : metric_sum / static_cast<double>(last.clients.size());
    s.first_rep_gap = result.records.front().mean_rep_gap;
    s.last_rep_gap = last.mean_rep_gap;
    for (const RoundRecord& r : result.records) {
        s.total_up_bytes += r.up_bytes;
        s.total_down_bytes += r.down_bytes;
    }
    return s;
}

}  // namespace fedafd::protocol
