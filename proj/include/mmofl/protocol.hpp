#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmofl/datagen.hpp"
#include "mmofl/model.hpp"
#include "mmofl/pmm.hpp"

namespace mmofl {

enum class Strategy { FullModality, PartialModality, ZeroFilling, PMM };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TrainConfig {
    int rounds = 0;
    int local_iters = 1;
    double eta0 = 0.1;
    double decay = 1.0;
    double eta_floor = 1e-3;
    Strategy strategy = Strategy::FullModality;

    void validate() const;
    // per-round schedule: max(eta0 * decay^t, eta_floor)
    double eta_at(int round) const;
};

struct PmmRunConfig {
    QuantizerConfig quantizer;
    DelayConfig delay;
    bool normalize_prototypes = true;
    bool fallback_to_zero = true;
};

// ---- per-client local updates -------------------------------------------

struct LocalResult {
    ModelParams params;
    double train_loss = 0.0;  // loss of the returned params on the client's view
    int fallback_rows = 0;
};

LocalResult local_update_full(const ModelConfig& cfg, const ModelParams& global,
                              const RoundBatch& batch, int local_iters, double eta);

// Missing modalities enter the forward pass as zero feature blocks and their
// encoder blocks are gradient-masked, so they come back bit-identical.
LocalResult local_update_partial(const ModelConfig& cfg, const ModelParams& global,
                                 const RoundBatch& batch, int local_iters, double eta);

// Missing modalities are re-filled with all-zero raw inputs and trained
// unmasked; their encoders keep adapting to the zero input.
LocalResult local_update_zerofill(const ModelConfig& cfg, const ModelParams& global,
                                  const RoundBatch& batch, int local_iters, double eta);

// Missing-modality features come from the prototype collection, looked up per
// sample label; those blocks are constants, so the encoders stay masked.
LocalResult local_update_pmm(const ModelConfig& cfg, const ModelParams& global,
                             const RoundBatch& batch, int local_iters, double eta,
                             const PrototypeMatrix& prototypes, bool fallback_to_zero);

// ---- experiment ----------------------------------------------------------

struct ExperimentSpec {
    ModelConfig model;

    enum class DataSource { Synthetic, External };
    DataSource source = DataSource::Synthetic;
    SyntheticSpec synthetic;       // its seed is derived from the run seed...
    bool synthetic_seed_fixed = false;  // ...unless pinned in the config
    std::string external_manifest;
    double test_fraction = 0.2;
    PartitionConfig partition;

    double lambda = 0.0;
    MissingSchedule::Mode mode = MissingSchedule::Mode::Synchronized;

    TrainConfig train;
    PmmRunConfig pmm;

    void validate() const;
};

struct RoundRecord {
    int round = 0;
    double eta = 0.0;
    double train_loss = 0.0;  // F_t(global) on full-modality round data
    double test_acc = 0.0;    // after aggregation
    uint64_t model_bits_up = 0, model_bits_down = 0;
    uint64_t proto_bits_up = 0, proto_bits_down = 0;
    int opc_executions = 0;  // modalities whose collection ran this round
    int prototype_fallback_rows = 0;
};

struct EventRow {
    int round;
    int client;
    Strategy strategy;
    std::string modalities_available;  // e.g. "101", one char per modality
    double local_loss;
    uint64_t upload_bytes;
};

struct RoundHooks {
    std::function<void(int round, int client, const ModelParams& upload)> on_upload;
    std::function<void(int round, const ModelParams& global_after)> on_aggregate;
};

// Deterministic synchronous simulator: one instance = one (spec, seed) run.
// Client updates within a round may execute on several workers; results are
// reduced in ascending client order, so the trajectory is identical for any
// worker count.
class Experiment {
public:
    Experiment(const ExperimentSpec& spec, uint64_t seed);

    bool step(int workers = 1, const RoundHooks* hooks = nullptr);
    void run_all(int workers = 1, const RoundHooks* hooks = nullptr);

    int round() const { return round_; }
    const ExperimentSpec& spec() const { return spec_; }
    uint64_t seed() const { return seed_; }
    const Dataset& dataset() const { return dataset_; }
    const ModelParams& global_params() const { return global_; }
    const PrototypeMatrix& prototypes() const { return server_protos_; }
    const MissingSchedule& schedule() const { return schedule_; }
    const std::vector<RoundRecord>& records() const { return records_; }
    const std::vector<EventRow>& events() const { return events_; }
    const std::vector<std::vector<std::vector<int>>>& batch_rows() const { return batch_rows_; }
    const std::vector<ModelParams>& iterates() const { return iterates_; }
    const RoundBatch& test_batch() const { return test_batch_; }
    bool pools_sampled_with_replacement() const { return partition_.sampled_with_replacement; }

    void save_checkpoint(const std::string& path) const;
    void restore_checkpoint(const std::string& path);

private:
    struct Client {
        int id;
        StreamState stream;
        std::shared_ptr<const PrototypeMatrix> collection;  // latest broadcast
    };

    void run_opc_phase(int t, const std::vector<RoundBatch>& scheduled, RoundRecord& rec);

    ExperimentSpec spec_;
    uint64_t seed_;
    Dataset dataset_;
    std::vector<int> train_rows_, test_rows_;
    PartitionResult partition_;
    MissingSchedule schedule_;
    RoundBatch test_batch_;

    ModelParams global_;
    PrototypeMatrix server_protos_;
    DelayState delay_state_;
    std::vector<Client> clients_;
    int round_ = 0;

    std::vector<RoundRecord> records_;
    std::vector<EventRow> events_;
    std::vector<std::vector<std::vector<int>>> batch_rows_;  // [t][k] dataset rows
    std::vector<ModelParams> iterates_;                      // global params at round start
};

std::string events_to_csv(const std::vector<EventRow>& events);

}  // namespace mmofl
