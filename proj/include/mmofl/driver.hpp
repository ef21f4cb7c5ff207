#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmofl/config.hpp"
#include "mmofl/metrics.hpp"

namespace mmofl {

struct CliOptions {
    std::string out_override;             // --out beats MMOFL_OUT_ROOT beats config
    std::vector<uint64_t> seeds_override;  // --seeds
    int workers = 1;
    bool emit_plots = false;
};

struct RunResult {
    std::vector<MetricsRecord> records;
    RunLabels labels;
    ComparatorReport comparator;
    bool pools_with_replacement = false;
    std::vector<EventRow> events;
    std::string schedule_csv;
    std::vector<uint8_t> checkpoint;  // final-round checkpoint blob content
};

// One full pipeline in memory: simulate, fit the comparator (exact in convex
// mode, proxy otherwise), assemble metrics rows.
RunResult run_single(const ExperimentConfig& cfg, uint64_t seed, int workers);

std::string effective_output_dir(const ExperimentConfig& cfg, const CliOptions& options);

// Output tree: resolved_config.json, per-seed CSVs/events/schedule/checkpoint,
// seed-mean CSV, run_summary.json, optional gnuplot .dat companions.
void cmd_run(const ExperimentConfig& cfg, const CliOptions& options);

enum class SweepAxis { Lambda, Alpha, Bits, Delay, Strategy };

SweepAxis sweep_axis_from_name(const std::string& name);
ExperimentConfig apply_axis_value(const ExperimentConfig& cfg, SweepAxis axis,
                                  const std::string& value);

// Cartesian product of axis values x seeds; per-cell run directories plus a
// summary table of seed-mean final accuracy.
void cmd_sweep(const ExperimentConfig& cfg, SweepAxis axis, const std::vector<std::string>& values,
               const CliOptions& options);

void cmd_gen_data(const SyntheticSpec& spec, const std::string& out_dir);

// Column-mean of per-seed metric rows, round by round.
std::vector<MetricsRecord> mean_records(const std::vector<std::vector<MetricsRecord>>& per_seed);

double final_quartile_accuracy(const std::vector<MetricsRecord>& records);

}  // namespace mmofl
