#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmofl/datagen.hpp"
#include "mmofl/model.hpp"
#include "mmofl/protocol.hpp"

namespace mmofl {

// One CSV row; bit and execution counters are cumulative up to the round.
struct MetricsRecord {
    int round = 0;
    double train_loss = 0.0;
    double comparator_loss = 0.0;
    double cum_regret = 0.0;
    double test_acc = 0.0;
    uint64_t model_bits = 0;
    uint64_t proto_bits = 0;
    uint64_t opc_count = 0;
};

struct RunLabels {
    double lambda = 0.0;
    double alpha = 0.0;
    int bits = 32;
    int delay = 0;
    std::string strategy;
    long long seed = 0;
};

struct ComparatorReport {
    bool converged = false;
    double grad_norm = 0.0;
    int iterations = 0;
    bool proxy = false;  // non-convex config: best stored iterate instead of a fit
};

// Hindsight comparator over the pooled multiset of every round batch. The
// pool is stored as unique dataset rows plus multiplicities, which makes the
// pooled objective an exact weighted mean.
struct ComparatorOracle {
    ModelParams theta_star;
    std::vector<int> rows;
    std::vector<double> weights;
    ComparatorReport report;
};

using BatchRows = std::vector<std::vector<std::vector<int>>>;  // [round][client] -> dataset rows

// Full-batch fit of the convex-mode pooled objective (identity encoders +
// linear head only) until the gradient norm drops below `tolerance` or the
// iteration cap is hit (then flagged, regret becomes an upper estimate).
ComparatorOracle fit_comparator(const ModelConfig& cfg, const Dataset& ds,
                                const BatchRows& batch_rows, double tolerance = 1e-8,
                                int max_iterations = 2000);

// Non-convex runs: pick the stored iterate with the best pooled loss and
// label the resulting series proxy regret.
ComparatorOracle proxy_comparator(const ModelConfig& cfg, const Dataset& ds,
                                  const BatchRows& batch_rows,
                                  const std::vector<ModelParams>& iterates);

// Pooled weighted mean loss of arbitrary params (evaluation half of the
// comparator objective).
double pooled_loss(const ModelConfig& cfg, const Dataset& ds, const ComparatorOracle& oracle,
                   const ModelParams& params);

// F_t(theta) per round on the full-modality batches.
std::vector<double> comparator_round_losses(const ModelConfig& cfg, const Dataset& ds,
                                            const BatchRows& batch_rows,
                                            const ModelParams& theta);

// Cumulative sum of (train_loss_t - comparator_loss_t).
std::vector<double> regret_series(const std::vector<double>& train_loss,
                                  const std::vector<double>& comparator_loss);

struct CommTotals {
    uint64_t model_bits_up = 0, model_bits_down = 0;
    uint64_t proto_bits_up = 0, proto_bits_down = 0;
    uint64_t opc_executions = 0;
};

CommTotals account_communication(const std::vector<RoundRecord>& rounds);

// Merges per-round records with the comparator columns into CSV rows;
// comparator_losses may be empty (columns fall back to 0 regret form).
std::vector<MetricsRecord> build_metrics(const std::vector<RoundRecord>& rounds,
                                         const std::vector<double>& comparator_losses);

std::string metrics_to_csv(const std::vector<MetricsRecord>& records, const RunLabels& labels);
void export_csv(const std::vector<MetricsRecord>& records, const RunLabels& labels,
                const std::string& path);
std::vector<MetricsRecord> import_csv(const std::string& path, RunLabels* labels = nullptr);

}  // namespace mmofl
