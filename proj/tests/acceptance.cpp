// Acceptance gate: every release-blocking property in one binary, one
// pass/fail line each. Exit code is nonzero if any check fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmofl/config.hpp"
#include "mmofl/driver.hpp"
#include "mmofl/metrics.hpp"
#include "mmofl/pmm.hpp"
#include "mmofl/protocol.hpp"
#include "mmofl/rng.hpp"
#include "mmofl/threadpool.hpp"
#include "oracles.hpp"

using namespace mmofl;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
    std::printf("%s  [%2d] %s (%s)\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// the synthetic benchmark anchor shared by criteria 2-8
const char* kAnchorConfig = R"({
  "model": {
    "num_modalities": 2, "input_dims": [20, 20], "feature_dim": 16, "num_classes": 6,
    "encoder_kinds": ["mlp1", "mlp1"], "head_kind": "mlp1", "hidden_dim": 24
  },
  "data": {
    "source": "synthetic",
    "synthetic": { "class_center_separation": 1.0, "noise_std": 3.2, "total_samples": 3000, "seed": null },
    "test_fraction": 0.2,
    "partition": { "num_clients": 5, "alpha": 10.0, "initial_pool_per_client": 480,
                   "window_size": 40, "churn_per_round": 20 }
  },
  "schedule": { "lambda": 0.5, "mode": "synchronized" },
  "train": { "rounds": 60, "local_iters": 2, "eta0": 0.1, "decay": 0.985, "eta_floor": 0.001,
             "strategy": "pmm" },
  "pmm": { "quantizer_bits": 32, "delay_interval": 0 },
  "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
  "output_dir": "out"
})";

ExperimentConfig anchor() { return parse_config_text(kAnchorConfig); }

struct CellKey {
    std::string name;
    ExperimentConfig cfg;
};

// every benchmark cell is run once and shared across criteria
std::map<std::string, std::vector<RunResult>> run_cells(const std::vector<CellKey>& cells,
                                                        int workers) {
    struct Job {
        size_t cell;
        size_t seed_idx;
    };
    std::vector<Job> jobs;
    for (size_t c = 0; c < cells.size(); ++c)
        for (size_t s = 0; s < cells[c].cfg.seeds.size(); ++s) jobs.push_back({c, s});
    std::map<std::string, std::vector<RunResult>> out;
    for (const auto& cell : cells) out[cell.name].resize(cell.cfg.seeds.size());
    parallel_for(jobs.size(), workers, [&](size_t i) {
        const auto& cell = cells[jobs[i].cell];
        out.at(cell.name)[jobs[i].seed_idx] =
            run_single(cell.cfg, cell.cfg.seeds[jobs[i].seed_idx], 1);
    });
    return out;
}

double final_quartile_mean(const std::vector<RunResult>& runs) {
    double acc = 0.0;
    for (const auto& r : runs) acc += final_quartile_accuracy(r.records);
    return acc / runs.size();
}

double final_round_mean(const std::vector<RunResult>& runs) {
    double acc = 0.0;
    for (const auto& r : runs) acc += r.records.back().test_acc;
    return acc / runs.size();
}

// ---- criterion 1 ----------------------------------------------------------

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const EncoderKind enc_kinds[] = {EncoderKind::Identity, EncoderKind::Linear,
                                     EncoderKind::Mlp1};
    const HeadKind head_kinds[] = {HeadKind::Linear, HeadKind::Mlp1};
    Rng rng(20240811);
    int instances = 0;
    double worst = 0.0;
    bool ok = true;
    for (EncoderKind enc : enc_kinds) {
        for (HeadKind head : head_kinds) {
            for (int trial = 0; trial < 100; ++trial) {
                ModelConfig cfg;
                cfg.num_modalities = 1 + static_cast<int>(rng.uniform_index(2));
                cfg.feature_dim = 2 + static_cast<int>(rng.uniform_index(3));
                cfg.num_classes = 2 + static_cast<int>(rng.uniform_index(3));
                cfg.hidden_dim = 2 + static_cast<int>(rng.uniform_index(3));
                cfg.head_kind = head;
                for (int m = 0; m < cfg.num_modalities; ++m) {
                    cfg.encoder_kinds.push_back(enc);
                    cfg.input_dims.push_back(enc == EncoderKind::Identity
                                                 ? cfg.feature_dim
                                                 : 2 + static_cast<int>(rng.uniform_index(5)));
                }
                const ModelParams p = init_params(cfg, rng.next_u64());
                const RoundBatch batch = oracle::random_batch(cfg, rng, 1 + rng.uniform_index(5));
                const std::vector<bool> avail(cfg.num_modalities, true);
                const GradientVector g = backward(cfg, p, batch, {}, avail);
                for (size_t i = 0; i < p.total_size(); ++i) {
                    const double fd = oracle::finite_diff(cfg, p, batch, {}, i);
                    const double err = oracle::rel_err(fd, oracle::get_flat_grad(g, i));
                    worst = std::max(worst, err);
                    if (err >= 1e-5) ok = false;
                }
                ++instances;
            }
        }
    }
    const double elapsed = seconds_since(t0);
    ok = ok && elapsed < 30.0;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "%d instances over 6 encoder/head pairs, worst rel err %.2e, %.1fs", instances,
                  worst, elapsed);
    report(1, ok, "analytic gradients match central finite differences at 1e-5", detail);
}

// ---- criterion 2 ----------------------------------------------------------

uint64_t fnv1a(const std::vector<uint8_t>& bytes, uint64_t h = 1469598103934665603ull) {
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

void criterion_degeneracy() {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentConfig cfg = anchor();
    cfg.spec.lambda = 0.0;
    cfg.spec.train.rounds = 50;

    std::vector<std::vector<uint64_t>> hashes;
    std::vector<std::vector<double>> losses, accs;
    for (Strategy s : {Strategy::FullModality, Strategy::PartialModality, Strategy::ZeroFilling,
                       Strategy::PMM}) {
        cfg.spec.train.strategy = s;
        Experiment exp(cfg.spec, 7);
        std::vector<uint64_t> h;
        RoundHooks hooks;
        hooks.on_aggregate = [&h](int, const ModelParams& global) {
            h.push_back(fnv1a(serialize_params(global)));
        };
        exp.run_all(2, &hooks);
        std::vector<double> loss, acc;
        for (const auto& r : exp.records()) {
            loss.push_back(r.train_loss);
            acc.push_back(r.test_acc);
        }
        hashes.push_back(std::move(h));
        losses.push_back(std::move(loss));
        accs.push_back(std::move(acc));
    }
    bool ok = true;
    for (size_t i = 1; i < hashes.size(); ++i)
        ok = ok && hashes[i] == hashes[0] && losses[i] == losses[0] && accs[i] == accs[0];
    const double elapsed = seconds_since(t0);
    ok = ok && elapsed < 60.0;
    char detail[120];
    std::snprintf(detail, sizeof(detail), "fm/pm/zf/pmm trajectories over %zu rounds, %.1fs",
                  hashes[0].size(), elapsed);
    report(2, ok, "lambda=0 runs of all strategies are bit-identical", detail);
}

// ---- criterion 3 ----------------------------------------------------------

void criterion_freeze() {
    ExperimentConfig cfg = anchor();
    cfg.spec.train.rounds = 40;
    bool ok = true;
    long checks = 0;
    for (Strategy s : {Strategy::PartialModality, Strategy::PMM}) {
        cfg.spec.train.strategy = s;
        for (uint64_t seed : {1ull, 2ull}) {
            Experiment exp(cfg.spec, seed);
            while (exp.round() < cfg.spec.train.rounds) {
                const ModelParams broadcast = exp.global_params();
                RoundHooks hooks;
                hooks.on_upload = [&](int round, int client, const ModelParams& upload) {
                    for (int m = 0; m < 2; ++m) {
                        if (!exp.schedule().is_missing(round, client, m)) continue;
                        ++checks;
                        if (upload.encoders[m] != broadcast.encoders[m]) ok = false;
                    }
                };
                exp.step(2, &hooks);
            }
        }
    }
    char detail[100];
    std::snprintf(detail, sizeof(detail), "%ld uploaded missing blocks compared bit-exactly",
                  checks);
    report(3, ok && checks > 0, "missing encoder blocks return bit-identical to the broadcast",
           detail);
}

// ---- criteria 4-8: shared benchmark cells ---------------------------------

void criteria_benchmarks(int workers) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentConfig base = anchor();
    auto with = [&](auto&& patch) {
        ExperimentConfig c = base;
        patch(c);
        c.spec.validate();
        return c;
    };
    std::vector<CellKey> cells;
    cells.push_back({"pm", with([](ExperimentConfig& c) {
                         c.spec.train.strategy = Strategy::PartialModality;
                     })});
    cells.push_back(
        {"zf", with([](ExperimentConfig& c) { c.spec.train.strategy = Strategy::ZeroFilling; })});
    cells.push_back({"pmm", base});
    cells.push_back({"lam01", with([](ExperimentConfig& c) { c.spec.lambda = 0.1; })});
    cells.push_back({"lam07", with([](ExperimentConfig& c) { c.spec.lambda = 0.7; })});
    cells.push_back(
        {"alpha_low", with([](ExperimentConfig& c) { c.spec.partition.alpha = 0.02; })});
    cells.push_back({"bits4", with([](ExperimentConfig& c) { c.spec.pmm.quantizer.bits = 4; })});
    cells.push_back({"delay4", with([](ExperimentConfig& c) { c.spec.pmm.delay.interval = 4; })});
    const auto runs = run_cells(cells, workers);
    const double bench_elapsed = seconds_since(t0);

    // 4: benchmark ordering
    {
        const double pm = final_quartile_mean(runs.at("pm"));
        const double zf = final_quartile_mean(runs.at("zf"));
        const double pmm = final_quartile_mean(runs.at("pmm"));
        const bool ok = pmm > zf && zf > pm && pmm - pm >= 0.03 && bench_elapsed < 600.0;
        char detail[160];
        std::snprintf(detail, sizeof(detail),
                      "final-quartile means pm=%.4f zf=%.4f pmm=%.4f, pmm-pm=%.4f, 12 seeds, "
                      "cells %.0fs",
                      pm, zf, pmm, pmm - pm, bench_elapsed);
        report(4, ok, "benchmark ordering pmm > zf > pm with pmm-pm >= 0.03", detail);
    }
    // 5: lambda monotonicity
    {
        const double a01 = final_round_mean(runs.at("lam01"));
        const double a05 = final_round_mean(runs.at("pmm"));
        const double a07 = final_round_mean(runs.at("lam07"));
        const bool ok = a01 >= a05 && a05 >= a07;
        char detail[120];
        std::snprintf(detail, sizeof(detail),
                      "final accuracy lambda 0.1/0.5/0.7 = %.4f/%.4f/%.4f", a01, a05, a07);
        report(5, ok, "pmm accuracy is non-increasing in the missing ratio lambda", detail);
    }
    // 6: alpha effect, smaller than the lambda effect
    {
        const double high = final_round_mean(runs.at("pmm"));
        const double low = final_round_mean(runs.at("alpha_low"));
        const double lambda_gap =
            final_round_mean(runs.at("lam01")) - final_round_mean(runs.at("lam07"));
        const bool ok = high > low && (high - low) < lambda_gap;
        char detail[140];
        std::snprintf(detail, sizeof(detail),
                      "alpha 10 vs 0.02: %.4f vs %.4f (gap %.4f), lambda 0.1->0.7 gap %.4f", high,
                      low, high - low, lambda_gap);
        report(6, ok, "higher alpha helps pmm, less than the missing ratio hurts", detail);
    }
    // 7: quantization trade-off
    {
        const double acc32 = final_round_mean(runs.at("pmm"));
        const double acc4 = final_round_mean(runs.at("bits4"));
        bool bits_ok = true;
        double worst_ratio = 0.0;
        for (size_t s = 0; s < runs.at("pmm").size(); ++s) {
            const uint64_t b32 = runs.at("pmm")[s].records.back().proto_bits;
            const uint64_t b4 = runs.at("bits4")[s].records.back().proto_bits;
            worst_ratio = std::max(worst_ratio,
                                   static_cast<double>(b4) / static_cast<double>(b32));
            if (8 * b4 >= b32) bits_ok = false;  // exact integer comparison
        }
        const bool ok = std::fabs(acc4 - acc32) <= 0.02 && bits_ok;
        char detail[140];
        std::snprintf(detail, sizeof(detail),
                      "b=4 acc %.4f vs b=32 acc %.4f, worst prototype bit ratio %.4f", acc4, acc32,
                      worst_ratio);
        report(7, ok, "4-bit prototypes cost <= 0.02 accuracy at < 1/8 the bits", detail);
    }
    // 8: delayed update trade-off with exactly predicted collection counts
    {
        const double acc0 = final_round_mean(runs.at("pmm"));
        const double acc4 = final_round_mean(runs.at("delay4"));
        bool counts_ok = true;
        const std::pair<const char*, int> variants[] = {{"pmm", 0}, {"delay4", 4}};
        for (const auto& cell : variants) {
            for (size_t s = 0; s < runs.at(cell.first).size(); ++s) {
                // independent replay of the occurrence-counter rule
                const MissingSchedule sched = build_schedule(
                    base.spec.train.rounds, base.spec.lambda, 2, base.spec.partition.num_clients,
                    base.spec.mode, derive_seed(base.seeds[s], "schedule"));
                uint64_t expected = 0;
                int counter[2] = {0, 0};
                for (int t = 0; t < base.spec.train.rounds; ++t) {
                    const bool observed = !sched.any_missing(t);  // synchronized mode
                    if (!observed) continue;
                    for (int m = 0; m < 2; ++m) {
                        if (cell.second == 0) {
                            ++expected;
                        } else if (++counter[m] >= cell.second) {
                            counter[m] = 0;
                            ++expected;
                        }
                    }
                }
                if (runs.at(cell.first)[s].records.back().opc_count != expected) counts_ok = false;
            }
        }
        const bool ok = std::fabs(acc0 - acc4) <= 0.05 && counts_ok;
        char detail[140];
        std::snprintf(detail, sizeof(detail),
                      "u=4 acc %.4f vs u=0 acc %.4f, collection counts match the schedule replay",
                      acc4, acc0);
        report(8, ok, "4-round delayed collection costs <= 0.05 accuracy, counts exact", detail);
    }
}

// ---- criterion 9 ----------------------------------------------------------

void criterion_regret(int workers) {
    const auto t0 = std::chrono::steady_clock::now();
    const char* convex = R"({
      "model": { "num_modalities": 2, "input_dims": [8, 8], "feature_dim": 8, "num_classes": 4,
                 "encoder_kinds": ["identity", "identity"], "head_kind": "linear" },
      "data": { "source": "synthetic",
                "synthetic": { "class_center_separation": 1.0, "noise_std": 1.5,
                               "total_samples": 1500, "seed": null },
                "test_fraction": 0.2,
                "partition": { "num_clients": 5, "alpha": 10.0, "initial_pool_per_client": 220,
                               "window_size": 40, "churn_per_round": 10 } },
      "schedule": { "lambda": 0.0, "mode": "synchronized" },
      "train": { "rounds": 400, "local_iters": 1, "eta0": 0.1, "decay": 0.99,
                 "eta_floor": 0.001, "strategy": "fm" },
      "pmm": {},
      "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
      "output_dir": "out"
    })";
    const ExperimentConfig cfg = parse_config_text(convex);
    std::vector<RunResult> runs(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), workers,
                 [&](size_t i) { runs[i] = run_single(cfg, cfg.seeds[i], 1); });

    const int T = cfg.spec.train.rounds;
    double avg_T = 0.0, avg_quarter = 0.0, min_reg = 1e300;
    bool all_exact = true;
    for (const auto& r : runs) {
        avg_T += r.records[T - 1].cum_regret / T;
        avg_quarter += r.records[T / 4 - 1].cum_regret / (T / 4);
        for (const auto& rec : r.records) min_reg = std::min(min_reg, rec.cum_regret);
        if (r.comparator.proxy || !r.comparator.converged) all_exact = false;
    }
    avg_T /= runs.size();
    avg_quarter /= runs.size();
    const double elapsed = seconds_since(t0);
    const bool ok =
        avg_T < 0.9 * avg_quarter && min_reg >= -1e-6 && all_exact && elapsed < 300.0;
    char detail[180];
    std::snprintf(detail, sizeof(detail),
                  "Reg_T/T=%.5f < 0.9*Reg_{T/4}/(T/4)=%.5f, min cum regret %.2e, certified "
                  "comparators, %.0fs",
                  avg_T, 0.9 * avg_quarter, min_reg, elapsed);
    report(9, ok, "convex-mode average regret is sublinear and non-negative", detail);
}

// ---- criterion 10 ---------------------------------------------------------

void criterion_prototype_oracle() {
    Rng rng(555);
    bool ok = true;
    int cases = 0;
    double worst = 0.0;
    // group-mean equivalence on randomized instances
    for (int trial = 0; trial < 700; ++trial) {
        const int d = 1 + static_cast<int>(rng.uniform_index(6));
        const int classes = 2 + static_cast<int>(rng.uniform_index(5));
        ModelConfig cfg;
        cfg.num_modalities = 1;
        cfg.input_dims = {d};
        cfg.feature_dim = d;
        cfg.num_classes = classes;
        cfg.encoder_kinds = {EncoderKind::Identity};
        cfg.head_kind = HeadKind::Linear;
        ModelParams params;
        params.head.assign(cfg.head_param_count(), 0.0);
        params.encoders.resize(1);
        const RoundBatch batch = oracle::random_batch(cfg, rng, 1 + rng.uniform_index(14));
        const LocalPrototypeSet set = build_local_prototypes(cfg, params, batch, false);
        const auto means = oracle::group_means(batch.data[0], batch.labels, classes);
        for (int c = 0; c < classes; ++c) {
            if (means[c].empty()) {
                if (set.entries.count({0, c})) ok = false;
                continue;
            }
            const auto& vec = set.entries.at({0, c}).vec;
            for (int j = 0; j < d; ++j) {
                worst = std::max(worst, std::fabs(vec[j] - means[c][j]));
                if (std::fabs(vec[j] - means[c][j]) >= 1e-12) ok = false;
            }
        }
        ++cases;
    }
    // running-mean identity on randomized sequences
    for (int trial = 0; trial < 400; ++trial) {
        const int d = 1 + static_cast<int>(rng.uniform_index(5));
        PrototypeMatrix matrix(1, 1, d, false);
        std::vector<double> sum(d, 0.0);
        const int k = 1 + static_cast<int>(rng.uniform_index(25));
        for (int i = 0; i < k; ++i) {
            std::vector<double> v(d);
            for (double& x : v) x = rng.normal() * rng.uniform(0.1, 4.0);
            for (int j = 0; j < d; ++j) sum[j] += v[j];
            TemporalPrototypes t;
            t[{0, 0}] = v;
            update_persistent(matrix, t, i);
        }
        for (int j = 0; j < d; ++j) {
            const double err = std::fabs(matrix.value[0][0][j] - sum[j] / k);
            worst = std::max(worst, err);
            if (err >= 1e-12) ok = false;
        }
        ++cases;
    }
    char detail[120];
    std::snprintf(detail, sizeof(detail), "%d randomized cases, worst abs err %.2e", cases, worst);
    report(10, ok && cases >= 1000, "prototypes match brute-force group and running means",
           detail);
}

// ---- criterion 11 ---------------------------------------------------------

void criterion_determinism() {
    ExperimentConfig cfg = anchor();
    cfg.spec.train.rounds = 12;
    cfg.seeds = {3};
    const std::string dir1 = (fs::temp_directory_path() / "mmofl_acc_w1").string();
    const std::string dir4 = (fs::temp_directory_path() / "mmofl_acc_w4").string();
    fs::remove_all(dir1);
    fs::remove_all(dir4);
    CliOptions o1;
    o1.out_override = dir1;
    o1.workers = 1;
    CliOptions o4;
    o4.out_override = dir4;
    o4.workers = 4;
    cmd_run(cfg, o1);
    cmd_run(cfg, o4);
    auto slurp = [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    bool ok = true;
    for (const char* name : {"seed3.csv", "mean.csv", "seed3_events.csv"}) {
        const std::string a = slurp((fs::path(dir1) / name).string());
        const std::string b = slurp((fs::path(dir4) / name).string());
        if (a.empty() || a != b) ok = false;
    }
    fs::remove_all(dir1);
    fs::remove_all(dir4);
    report(11, ok, "1-worker and 4-worker runs emit byte-identical CSVs",
           "run + mean + event logs compared");
}

}  // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    const int workers = 2;
    criterion_gradients();
    criterion_degeneracy();
    criterion_freeze();
    criteria_benchmarks(workers);
    criterion_regret(workers);
    criterion_prototype_oracle();
    criterion_determinism();
    std::printf("%s: %d/11 criteria passed in %.0fs\n", g_failures == 0 ? "ACCEPTED" : "REJECTED",
                11 - g_failures, seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
