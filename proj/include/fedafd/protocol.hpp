#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedafd/sed.hpp"
#include "fedafd/state.hpp"
#include "fedafd/synthdata.hpp"

namespace fedafd::protocol {

/// Server aggregation strategy. `fedafd` and `aggr_mm` keep the client-side
/// alignment and fusion modules active (subject to the ablation flags);
/// `local` disables all exchange; the avg_* baselines emulate plain
/// distillation methods whose clients train without those modules.
enum class Strategy {
    fedafd,
    local,
    avg_uniform,
    avg_samples,
    avg_entropy,
    avg_variance,
    aggr_mm,
};

Strategy strategy_from_name(const std::string& name);
std::string strategy_name(Strategy s);
bool strategy_exchanges(Strategy s);
bool strategy_uses_client_modules(Strategy s);

struct Roster {
    int n_image = 3;
    int n_text = 3;
    int n_multimodal = 4;
    int total() const { return n_image + n_text + n_multimodal; }
};

struct Ablations {
    bool baa = true;
    bool gff = true;
    bool sed = true;
};

struct RunConfig {
    int rounds = 20;         // T
    int local_epochs = 2;    // E
    int cache_interval = 1;  // K: encoders broadcast when t % K == 0
    double beta = 0.5;
    double gamma = 0.4;
    double eta = 0.05;    // server learning rate
    double eta_c = 0.05;  // client learning rate
    std::size_t feature_dim = 32;  // d
    Roster roster;
    std::size_t public_size = 512;  // |P|
    Strategy strategy = Strategy::fedafd;
    Ablations ablations;
    std::uint64_t seed = 1;

    // Synthetic data shape (per-run sample counts are derived from the pool
    // sizes below; synth.samples_per_class and synth.seed are overwritten).
    synth::SynthSpec synth;
    std::size_t pool_per_class = 128;  // private pool per class, per client group
    std::size_t server_test_pairs = 128;
    double dirichlet_alpha = 0.1;
    int shards_per_client = 2;
    bool iid = false;

    std::size_t batch_size = 64;
    double temperature = 0.07;
    double client_test_fraction = 0.25;
    std::size_t client_hidden = 0;  // 0 -> feature_dim
    std::size_t server_hidden = 0;  // 0 -> 2 * feature_dim
    std::size_t gate_bottleneck = 4;
    bool squared_l2 = false;
    double baa_public_fraction = 1.0;
    int threads = 1;
    // Encoder payload for the accounting table, in MB; < 0 derives it from
    // the serialized size of the actual global encoders (4 bytes per value).
    double encoder_payload_mb = -1.0;

    void validate() const;
};

struct PublicSet {
    FeatureMatrix x_a, x_b;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

struct World {
    PublicSet public_set;
    FeatureMatrix server_test_a, server_test_b;
    std::vector<int> server_test_labels;
    GlobalState server;
    std::vector<ClientState> clients;
};

/// Deterministic world construction: synthesize data, carve the public,
/// server-test and per-group private pools, partition them and initialize
/// every model from seed-derived streams.
World build_world(const RunConfig& cfg);

struct ClientRoundStats {
    int client_id = -1;
    ClientRole role = ClientRole::image_unimodal;
    double l_task = 0, l_adv = 0;  // NaN when not applicable
    double acc1 = 0, i2t = 0, t2i = 0;
    double rep_gap = 0;
    std::uint64_t up_bytes = 0, down_bytes = 0;
};

struct RoundRecord {
    int round = 0;
    double server_task_loss = 0;
    double l_kd = 0;
    double server_i2t = 0, server_t2i = 0;  // fractions in [0,1]
    double mean_rep_gap = 0;
    std::uint64_t up_bytes = 0, down_bytes = 0;
    Strategy strategy = Strategy::fedafd;
    std::uint64_t seed = 0;
    std::vector<ClientRoundStats> clients;
};

struct RunResult {
    RunConfig config;
    std::vector<RoundRecord> records;
    World world;  // final states
};

/// The round loop: server public task step, feature/encoder broadcast with
/// K-round caching, client updates, uploads, strategy-selected aggregation
/// and the distillation update, with one record per round.
RunResult run(const RunConfig& cfg);

/// One client's public-feature upload for a round, with the side statistics
/// the baseline strategies weight by.
struct Upload {
    int client_id = 0;
    Modality modality = Modality::image;
    const FeatureMatrix* feats = nullptr;
    int round_stamp = -1;
    bool from_multimodal = false;
    bool has_predictions = false;
    double mean_entropy = 0.0;
    double feat_variance = 0.0;
    std::size_t sample_count = 0;
};

struct TeacherOutputs {
    FeatureMatrix img, txt;
    FeatureMatrix weights_img, weights_txt;  // [|P| x members]
    std::vector<int> members_img, members_txt;
    bool entropy_fallback_used = false;
};

/// Groups the uploads by modality and produces the per-sample teacher
/// features under the given weighting strategy. Validates that every upload
/// carries the expected round stamp.
TeacherOutputs aggregate(Strategy s, const std::vector<Upload>& uploads,
                         const FeatureMatrix& global_img, const FeatureMatrix& global_txt,
                         int expected_round);

/// Measures everything logged per round from the current states: server
/// retrieval on the held-out pairs, per-client metrics on their own test
/// splits, and the client/global representation gap on the public set.
RoundRecord evaluate_round(const RunConfig& cfg, const World& world, int round);

// --- Communication accounting (4 bytes per transmitted value) -------------

struct CommCostInputs {
    std::size_t public_size = 10000;
    std::size_t feature_dim = 256;
    double encoder_payload_mb = 0.0;  // M
    int cache_interval = 1;           // K
    int rounds = 1;                   // T
};

struct CommCost {
    std::uint64_t upload_bytes_per_round = 0;            // 2 * |P| * d * 4
    std::uint64_t feature_download_bytes_per_round = 0;  // 2 * |P| * d * 4
    double per_modality_mb = 0.0;       // rounded to 2 decimals before summing
    double upload_mb = 0.0;             // display convention
    double download_mb = 0.0;           // features + encoder on broadcast rounds
    double sum_mb = 0.0;
    double amortized_encoder_mb = 0.0;  // M / K
    double amortized_download_mb = 0.0;
    double total_upload_mb = 0.0;       // over T rounds
    double total_download_mb = 0.0;     // with K-round encoder caching
};

CommCost comm_cost(const CommCostInputs& in);

/// Serialized size of both global encoders at 4 bytes per value.
std::uint64_t encoder_payload_bytes(const GlobalState& server);

// --- Run summaries used by sweeps and the acceptance suite ----------------

struct RunSummary {
    double server_i2t = 0, server_t2i = 0;  // final round, fractions
    double server_rsum_pct = 0;             // percent convention
    double mean_client_metric = 0;          // acc1 or (i2t+t2i)/2 per client
    double first_rep_gap = 0, last_rep_gap = 0;
    std::uint64_t total_up_bytes = 0, total_down_bytes = 0;
};

RunSummary summarize(const RunResult& result);

}  // namespace fedafd::protocol
