#include "mmofl/driver.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmofl/csvio.hpp"
#include "mmofl/serialize.hpp"
#include "mmofl/threadpool.hpp"

namespace mmofl {

namespace fs = std::filesystem;

RunResult run_single(const ExperimentConfig& cfg, uint64_t seed, int workers) {
    Experiment exp(cfg.spec, seed);
    exp.run_all(workers);

    ComparatorOracle oracle =
        cfg.spec.model.convex_mode()
            ? fit_comparator(cfg.spec.model, exp.dataset(), exp.batch_rows())
            : proxy_comparator(cfg.spec.model, exp.dataset(), exp.batch_rows(), exp.iterates());
    const std::vector<double> comp_losses = comparator_round_losses(
        cfg.spec.model, exp.dataset(), exp.batch_rows(), oracle.theta_star);

    RunResult result;
    result.records = build_metrics(exp.records(), comp_losses);
    result.labels = labels_for(cfg, seed);
    result.comparator = oracle.report;
    result.pools_with_replacement = exp.pools_sampled_with_replacement();
    result.events = exp.events();
    result.schedule_csv = schedule_to_csv(exp.schedule());

    const std::string tmp = (fs::temp_directory_path() /
                             ("mmofl_ck_" + std::to_string(seed) + "_" +
                              std::to_string(reinterpret_cast<uintptr_t>(&exp)) + ".bin"))
                                .string();
    exp.save_checkpoint(tmp);
    result.checkpoint = read_file(tmp);
    fs::remove(tmp);
    return result;
}

std::string effective_output_dir(const ExperimentConfig& cfg, const CliOptions& options) {
    if (!options.out_override.empty()) return options.out_override;
    if (const char* env = std::getenv("MMOFL_OUT_ROOT"); env && *env)
        return (fs::path(env) / fs::path(cfg.output_dir).filename()).string();
    return cfg.output_dir;
}

std::vector<MetricsRecord> mean_records(const std::vector<std::vector<MetricsRecord>>& per_seed) {
    if (per_seed.empty()) return {};
    const size_t rounds = per_seed.front().size();
    for (const auto& rec : per_seed)
        if (rec.size() != rounds)
            throw std::invalid_argument("mean_records: seed series have different lengths");
    std::vector<MetricsRecord> out(rounds);
    const double inv = 1.0 / static_cast<double>(per_seed.size());
    for (size_t t = 0; t < rounds; ++t) {
        MetricsRecord& m = out[t];
        m.round = per_seed.front()[t].round;
        double model_bits = 0.0, proto_bits = 0.0, opc = 0.0;
        for (const auto& rec : per_seed) {
            m.train_loss += rec[t].train_loss;
            m.comparator_loss += rec[t].comparator_loss;
            m.cum_regret += rec[t].cum_regret;
            m.test_acc += rec[t].test_acc;
            model_bits += static_cast<double>(rec[t].model_bits);
            proto_bits += static_cast<double>(rec[t].proto_bits);
            opc += static_cast<double>(rec[t].opc_count);
        }
        m.train_loss *= inv;
        m.comparator_loss *= inv;
        m.cum_regret *= inv;
        m.test_acc *= inv;
        m.model_bits = static_cast<uint64_t>(model_bits * inv);
        m.proto_bits = static_cast<uint64_t>(proto_bits * inv);
        m.opc_count = static_cast<uint64_t>(opc * inv);
    }
    return out;
}

double final_quartile_accuracy(const std::vector<MetricsRecord>& records) {
    if (records.empty()) return 0.0;
    const size_t quartile = std::max<size_t>(1, records.size() / 4);
    double sum = 0.0;
    for (size_t i = records.size() - quartile; i < records.size(); ++i)
        sum += records[i].test_acc;
    return sum / static_cast<double>(quartile);
}

namespace {

std::string plot_dat(const std::vector<MetricsRecord>& records) {
    std::ostringstream out;
    out << "# round train_loss test_acc cum_regret\n";
    for (const auto& r : records)
        out << r.round << ' ' << format_real(r.train_loss) << ' ' << format_real(r.test_acc) << ' '
            << format_real(r.cum_regret) << '\n';
    return out.str();
}

void write_run_outputs(const ExperimentConfig& cfg, const std::string& dir,
                       const std::vector<uint64_t>& seeds, const std::vector<RunResult>& results,
                       bool emit_plots) {
    fs::create_directories(dir);
    write_file_atomic((fs::path(dir) / "resolved_config.json").string(), dump_config(cfg));

    nlohmann::ordered_json summary;
    std::vector<std::vector<MetricsRecord>> per_seed;
    for (size_t i = 0; i < seeds.size(); ++i) {
        const RunResult& r = results[i];
        const std::string tag = "seed" + std::to_string(seeds[i]);
        export_csv(r.records, r.labels, (fs::path(dir) / (tag + ".csv")).string());
        write_file_atomic((fs::path(dir) / (tag + "_events.csv")).string(),
                          events_to_csv(r.events));
        write_file_atomic((fs::path(dir) / (tag + "_schedule.csv")).string(), r.schedule_csv);
        write_file_atomic((fs::path(dir) / (tag + "_checkpoint.bin")).string(),
                          r.checkpoint.data(), r.checkpoint.size());
        if (emit_plots)
            write_file_atomic((fs::path(dir) / (tag + ".dat")).string(), plot_dat(r.records));
        per_seed.push_back(r.records);

        nlohmann::ordered_json js;
        js["seed"] = seeds[i];
        js["regret_kind"] = r.comparator.proxy ? "proxy" : "exact";
        js["comparator_converged"] = r.comparator.converged;
        js["comparator_grad_norm"] = r.comparator.proxy ? -1.0 : r.comparator.grad_norm;
        js["comparator_iterations"] = r.comparator.iterations;
        js["pools_sampled_with_replacement"] = r.pools_with_replacement;
        js["final_test_acc"] = r.records.empty() ? 0.0 : r.records.back().test_acc;
        js["final_quartile_test_acc"] = final_quartile_accuracy(r.records);
        summary["runs"].push_back(js);
    }

    const std::vector<MetricsRecord> mean = mean_records(per_seed);
    RunLabels mean_labels = results.empty() ? RunLabels{} : results.front().labels;
    mean_labels.seed = -1;
    export_csv(mean, mean_labels, (fs::path(dir) / "mean.csv").string());
    if (emit_plots) write_file_atomic((fs::path(dir) / "mean.dat").string(), plot_dat(mean));

    summary["seed_mean_final_test_acc"] = mean.empty() ? 0.0 : mean.back().test_acc;
    summary["seed_mean_final_quartile_test_acc"] = final_quartile_accuracy(mean);
    write_file_atomic((fs::path(dir) / "run_summary.json").string(), summary.dump(2) + "\n");
}

std::vector<RunResult> run_seeds(const ExperimentConfig& cfg, const std::vector<uint64_t>& seeds,
                                 int workers) {
    std::vector<RunResult> results(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    if (seeds.size() == 1) {
        results[0] = run_single(cfg, seeds[0], workers);
        return results;
    }
    parallel_for(seeds.size(), workers, [&](size_t i) {
        try {
            results[i] = run_single(cfg, seeds[i], 1);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

}  // namespace

void cmd_run(const ExperimentConfig& cfg_in, const CliOptions& options) {
    ExperimentConfig cfg = cfg_in;
    if (!options.seeds_override.empty()) cfg.seeds = options.seeds_override;
    cfg.output_dir = effective_output_dir(cfg, options);
    cfg.spec.validate();

    const std::vector<RunResult> results = run_seeds(cfg, cfg.seeds, options.workers);
    write_run_outputs(cfg, cfg.output_dir, cfg.seeds, results, options.emit_plots);
}

SweepAxis sweep_axis_from_name(const std::string& name) {
    if (name == "lambda") return SweepAxis::Lambda;
    if (name == "alpha") return SweepAxis::Alpha;
    if (name == "bits") return SweepAxis::Bits;
    if (name == "delay") return SweepAxis::Delay;
    if (name == "strategy") return SweepAxis::Strategy;
    throw std::invalid_argument("unknown sweep axis '" + name +
                                "' (lambda|alpha|bits|delay|strategy)");
}

namespace {
std::string axis_name(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Lambda: return "lambda";
        case SweepAxis::Alpha: return "alpha";
        case SweepAxis::Bits: return "bits";
        case SweepAxis::Delay: return "delay";
        case SweepAxis::Strategy: return "strategy";
    }
    return "?";
}
}  // namespace

ExperimentConfig apply_axis_value(const ExperimentConfig& cfg, SweepAxis axis,
                                  const std::string& value) {
    ExperimentConfig out = cfg;
    switch (axis) {
        case SweepAxis::Lambda:
            out.spec.lambda = parse_real(value);
            break;
        case SweepAxis::Alpha:
            out.spec.partition.alpha = parse_real(value);
            break;
        case SweepAxis::Bits:
            out.spec.pmm.quantizer.bits = static_cast<int>(parse_int(value));
            break;
        case SweepAxis::Delay:
            out.spec.pmm.delay.interval = static_cast<int>(parse_int(value));
            break;
        case SweepAxis::Strategy:
            out.spec.train.strategy = strategy_from_name(value);
            break;
    }
    out.spec.validate();
    return out;
}

void cmd_sweep(const ExperimentConfig& cfg_in, SweepAxis axis,
               const std::vector<std::string>& values, const CliOptions& options) {
    if (values.empty()) throw std::invalid_argument("sweep: no axis values given");
    std::set<std::string> unique(values.begin(), values.end());
    if (unique.size() != values.size())
        throw std::invalid_argument("sweep: duplicate axis values");

    ExperimentConfig base = cfg_in;
    if (!options.seeds_override.empty()) base.seeds = options.seeds_override;
    base.output_dir = effective_output_dir(base, options);

    // validate every cell before any output exists
    std::vector<ExperimentConfig> cells;
    for (const auto& v : values) cells.push_back(apply_axis_value(base, axis, v));

    struct Job {
        size_t cell;
        size_t seed_idx;
    };
    std::vector<Job> jobs;
    for (size_t c = 0; c < cells.size(); ++c)
        for (size_t s = 0; s < base.seeds.size(); ++s) jobs.push_back({c, s});

    std::vector<std::vector<RunResult>> results(cells.size());
    for (auto& r : results) r.resize(base.seeds.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    parallel_for(jobs.size(), options.workers, [&](size_t i) {
        try {
            results[jobs[i].cell][jobs[i].seed_idx] =
                run_single(cells[jobs[i].cell], base.seeds[jobs[i].seed_idx], 1);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::ostringstream table;
    table << "axis,value,seeds,final_acc_mean,final_quartile_acc_mean\n";
    for (size_t c = 0; c < cells.size(); ++c) {
        const std::string cell_dir =
            (fs::path(base.output_dir) / (axis_name(axis) + "=" + values[c])).string();
        write_run_outputs(cells[c], cell_dir, base.seeds, results[c], options.emit_plots);

        std::vector<std::vector<MetricsRecord>> per_seed;
        for (const auto& r : results[c]) per_seed.push_back(r.records);
        const std::vector<MetricsRecord> mean = mean_records(per_seed);
        table << axis_name(axis) << ',' << values[c] << ',' << base.seeds.size() << ','
              << format_real(mean.empty() ? 0.0 : mean.back().test_acc) << ','
              << format_real(final_quartile_accuracy(mean)) << '\n';
    }
    write_file_atomic((fs::path(base.output_dir) / "summary.csv").string(), table.str());
    write_file_atomic((fs::path(base.output_dir) / "resolved_config.json").string(),
                      dump_config(base));
}

void cmd_gen_data(const SyntheticSpec& spec, const std::string& out_dir) {
    const Dataset ds = generate_synthetic(spec);
    save_dataset(ds, out_dir);
}

}  // namespace mmofl
