#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmofl/batch.hpp"
#include "mmofl/matrix.hpp"

namespace mmofl {

// Gaussian class-cluster generator standing in for preprocessed sensor
// features. Per (class, modality) a fixed center is drawn, scaled by that
// modality's informativeness; samples add isotropic noise around it.
struct SyntheticSpec {
    int num_classes = 0;
    std::vector<int> input_dims;
    double class_center_separation = 1.0;
    double noise_std = 1.0;
    std::vector<double> modality_informativeness;
    int total_samples = 0;
    uint64_t seed = 0;

    void validate() const;
};

struct Dataset {
    std::vector<Matrix> modalities;  // per modality, total_samples x input_dim
    std::vector<int> labels;
    int num_classes = 0;

    size_t size() const { return labels.size(); }
    size_t num_modalities() const { return modalities.size(); }
};

Dataset generate_synthetic(const SyntheticSpec& spec);

// Manifest is a JSON file: {"num_classes": C, "modalities": [csv...], "labels": csv}
// with paths resolved relative to the manifest's directory. Modality CSVs are
// headerless comma-separated reals; the label file holds one 0-indexed
// integer per line.
Dataset load_external(const std::string& manifest_path);

void save_dataset(const Dataset& ds, const std::string& dir);

struct PartitionConfig {
    int num_clients = 0;
    double alpha = 1.0;
    int initial_pool_per_client = 0;
    int window_size = 0;
    int churn_per_round = 0;

    void validate() const;
};

struct PartitionResult {
    std::vector<std::vector<int>> pools;  // per client, dataset row ids
    bool sampled_with_replacement = false;
};

// Per class, client shares ~ Dirichlet(alpha); each client ends up with
// exactly initial_pool_per_client rows (largest-remainder rounding, shortfall
// filled by a uniform draw over leftover rows, then with replacement).
PartitionResult partition_dirichlet(const Dataset& ds, const std::vector<int>& candidate_rows,
                                    const PartitionConfig& cfg, uint64_t seed);

// Deterministic shuffle split; returns (train_rows, test_rows).
std::pair<std::vector<int>, std::vector<int>> split_test(size_t n, double test_fraction,
                                                         uint64_t seed);

// FIFO window over a fixed seeded permutation of the client pool, cycled when
// exhausted. Round 0 is the initial window; each advance() appends
// churn_per_round fresh rows and evicts the oldest churn_per_round.
class StreamState {
public:
    StreamState(std::vector<int> pool, int window_size, int churn, uint64_t seed);

    const std::vector<int>& window_rows() const { return window_; }
    void advance();
    void advance_to_round(int round);  // replay helper, from the initial window
    int round() const { return round_; }

private:
    int next_row();
    std::vector<int> order_;
    size_t cursor_ = 0;
    int churn_ = 0;
    int round_ = 0;
    std::vector<int> window_;
};

RoundBatch make_batch(const Dataset& ds, const std::vector<int>& rows, int client_id, int round);

struct MissingSchedule {
    enum class Mode { Synchronized, Independent };

    int rounds = 0;
    int num_clients = 0;
    int num_modalities = 0;
    double lambda = 0.0;
    Mode mode = Mode::Synchronized;
    // missing_modality[round][client] is the modality lost that round, or -1
    std::vector<std::vector<int>> missing_modality;

    bool is_missing(int round, int client, int modality) const {
        return missing_modality[round][client] == modality;
    }
    bool any_missing(int round) const;
    std::vector<bool> available_mask(int round, int client) const;
    size_t missing_round_count() const;
};

// Exactly round(lambda*T) missing rounds drawn uniformly without replacement.
// Synchronized mode drops one uniformly chosen modality for every client at
// once; independent mode draws each client's lost modality separately. Every
// client keeps at least one modality in every round.
MissingSchedule build_schedule(int rounds, double lambda, int num_modalities, int num_clients,
                               MissingSchedule::Mode mode, uint64_t seed);

void apply_schedule(RoundBatch& batch, const MissingSchedule& schedule);

// Audit export: round,client,modality,available
std::string schedule_to_csv(const MissingSchedule& schedule);

}  // namespace mmofl
