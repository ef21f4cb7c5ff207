#include "mmofl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "mmofl/csvio.hpp"
#include "mmofl/rng.hpp"
#include "mmofl/serialize.hpp"

namespace mmofl {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }
}  // namespace

void SyntheticSpec::validate() const {
    if (num_classes < 2) fail("synthetic.num_classes must be >= 2");
    if (input_dims.empty()) fail("synthetic.input_dims must be non-empty");
    for (int d : input_dims)
        if (d < 1) fail("synthetic.input_dims entries must be >= 1");
    if (class_center_separation <= 0.0) fail("synthetic.class_center_separation must be > 0");
    if (noise_std < 0.0) fail("synthetic.noise_std must be >= 0");
    if (modality_informativeness.size() != input_dims.size())
        fail("synthetic.modality_informativeness must list one entry per modality");
    for (double v : modality_informativeness)
        if (v < 0.0 || v > 1.0) fail("synthetic.modality_informativeness entries must be in [0,1]");
    if (total_samples < 0) fail("synthetic.total_samples must be >= 0");
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const int M = static_cast<int>(spec.input_dims.size());
    const int C = spec.num_classes;
    Rng rng(spec.seed);

    // fixed (class, modality) centers around a per-modality baseline, both
    // scaled by informativeness; the class-independent baseline mimics sensor
    // offsets (gravity, illumination) shared by every class
    std::vector<std::vector<std::vector<double>>> centers(C, std::vector<std::vector<double>>(M));
    for (int m = 0; m < M; ++m) {
        const double scale = spec.class_center_separation * spec.modality_informativeness[m];
        std::vector<double> baseline(spec.input_dims[m]);
        for (double& v : baseline) v = scale * rng.normal();
        for (int c = 0; c < C; ++c) {
            centers[c][m].resize(spec.input_dims[m]);
            for (int j = 0; j < spec.input_dims[m]; ++j)
                centers[c][m][j] = baseline[j] + scale * rng.normal();
        }
    }

    // near-balanced labels, shuffled
    std::vector<int> labels(spec.total_samples);
    for (int i = 0; i < spec.total_samples; ++i) labels[i] = i % C;
    rng.shuffle(labels);

    Dataset ds;
    ds.num_classes = C;
    ds.labels = labels;
    ds.modalities.resize(M);
    for (int m = 0; m < M; ++m) ds.modalities[m] = Matrix(spec.total_samples, spec.input_dims[m]);
    for (int i = 0; i < spec.total_samples; ++i) {
        const int c = labels[i];
        for (int m = 0; m < M; ++m) {
            double* row = ds.modalities[m].row(i);
            for (int j = 0; j < spec.input_dims[m]; ++j)
                row[j] = centers[c][m][j] + spec.noise_std * rng.normal();
        }
    }
    return ds;
}

namespace {

Matrix load_csv_matrix(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto& c : cells) {
            const double v = parse_real(c);
            if (!std::isfinite(v)) fail(path + ": non-finite value '" + c + "'");
            row.push_back(v);
        }
        if (!rows.empty() && row.size() != rows.front().size())
            fail(path + ": ragged row at line " + std::to_string(rows.size() + 1));
        rows.push_back(std::move(row));
    }
    Matrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), m.row(i));
    return m;
}

std::vector<int> load_labels(const std::string& path, int num_classes) {
    std::ifstream in(path);
    if (!in) fail("cannot open " + path);
    std::vector<int> labels;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const long long v = parse_int(line);
        if (v < 0 || v >= num_classes)
            fail(path + ": label " + std::to_string(v) + " out of range [0," +
                 std::to_string(num_classes) + ")");
        labels.push_back(static_cast<int>(v));
    }
    return labels;
}

}  // namespace

Dataset load_external(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) fail("cannot open manifest " + manifest_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const nlohmann::json::parse_error& e) {
        fail("manifest " + manifest_path + ": " + e.what());
    }
    const auto base = std::filesystem::path(manifest_path).parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    if (!j.contains("num_classes") || !j.contains("modalities") || !j.contains("labels"))
        fail("manifest must declare num_classes, modalities and labels");
    Dataset ds;
    ds.num_classes = j.at("num_classes").get<int>();
    if (ds.num_classes < 2) fail("manifest num_classes must be >= 2");
    for (const auto& p : j.at("modalities"))
        ds.modalities.push_back(load_csv_matrix(resolve(p.get<std::string>())));
    if (ds.modalities.empty()) fail("manifest lists no modalities");
    ds.labels = load_labels(resolve(j.at("labels").get<std::string>()), ds.num_classes);
    for (size_t m = 0; m < ds.modalities.size(); ++m)
        if (ds.modalities[m].rows != ds.labels.size())
            fail("modality " + std::to_string(m) + " has " +
                 std::to_string(ds.modalities[m].rows) + " rows but " +
                 std::to_string(ds.labels.size()) + " labels");
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["num_classes"] = ds.num_classes;
    manifest["labels"] = "labels.csv";
    std::vector<std::string> names;
    for (size_t m = 0; m < ds.num_modalities(); ++m) {
        const std::string name = "modality" + std::to_string(m) + ".csv";
        names.push_back(name);
        std::ostringstream out;
        const Matrix& mat = ds.modalities[m];
        for (size_t i = 0; i < mat.rows; ++i) {
            for (size_t jcol = 0; jcol < mat.cols; ++jcol) {
                if (jcol) out << ',';
                out << format_real(mat(i, jcol));
            }
            out << '\n';
        }
        write_file_atomic((fs::path(dir) / name).string(), out.str());
    }
    manifest["modalities"] = names;
    std::ostringstream labels;
    for (int lab : ds.labels) labels << lab << '\n';
    write_file_atomic((fs::path(dir) / "labels.csv").string(), labels.str());
    write_file_atomic((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

void PartitionConfig::validate() const {
    if (num_clients < 1) fail("partition.num_clients must be >= 1");
    if (alpha <= 0.0) fail("partition.alpha must be > 0");
    if (initial_pool_per_client < 1) fail("partition.initial_pool_per_client must be >= 1");
    if (window_size < 1) fail("partition.window_size must be >= 1");
    if (churn_per_round < 0) fail("partition.churn_per_round must be >= 0");
    if (churn_per_round > window_size) fail("partition.churn_per_round must be <= window_size");
    if (window_size > initial_pool_per_client)
        fail("partition.window_size must be <= initial_pool_per_client");
}

PartitionResult partition_dirichlet(const Dataset& ds, const std::vector<int>& candidate_rows,
                                    const PartitionConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (candidate_rows.empty()) fail("partition: empty dataset");
    const int K = cfg.num_clients;
    const int C = ds.num_classes;
    const int pool_size = cfg.initial_pool_per_client;
    Rng rng(seed);

    // per-class shuffled row queues
    std::vector<std::vector<int>> class_rows(C);
    for (int r : candidate_rows) class_rows[ds.labels[r]].push_back(r);
    for (auto& rows : class_rows) rng.shuffle(rows);

    // per class, shares over clients ~ Dirichlet(alpha)
    std::vector<std::vector<double>> share(C);
    for (int c = 0; c < C; ++c) share[c] = rng.dirichlet(cfg.alpha, K);

    // client k's class mix is share-weighted by class frequency, so large
    // alpha reproduces the global histogram
    std::vector<std::vector<int>> want(K, std::vector<int>(C, 0));
    for (int k = 0; k < K; ++k) {
        std::vector<double> raw(C);
        double total = 0.0;
        for (int c = 0; c < C; ++c) {
            raw[c] = static_cast<double>(class_rows[c].size()) * share[c][k];
            total += raw[c];
        }
        if (total <= 0.0) {
            raw.assign(C, 1.0);
            total = C;
        }
        // largest-remainder rounding to exactly pool_size
        std::vector<double> exact(C);
        int assigned = 0;
        for (int c = 0; c < C; ++c) {
            exact[c] = pool_size * raw[c] / total;
            want[k][c] = static_cast<int>(std::floor(exact[c]));
            assigned += want[k][c];
        }
        std::vector<int> order(C);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
        });
        for (int i = 0; assigned < pool_size; ++i, ++assigned) ++want[k][order[i % C]];
    }

    PartitionResult result;
    result.pools.assign(K, {});
    std::vector<size_t> next(C, 0);
    std::vector<int> shortfall(K, 0);
    for (int c = 0; c < C; ++c) {
        for (int k = 0; k < K; ++k) {
            for (int i = 0; i < want[k][c]; ++i) {
                if (next[c] < class_rows[c].size()) {
                    result.pools[k].push_back(class_rows[c][next[c]++]);
                } else {
                    ++shortfall[k];
                }
            }
        }
    }

    // leftovers from all classes, for disjoint shortfall filling
    std::vector<int> leftovers;
    for (int c = 0; c < C; ++c)
        for (size_t i = next[c]; i < class_rows[c].size(); ++i) leftovers.push_back(class_rows[c][i]);
    rng.shuffle(leftovers);
    size_t next_leftover = 0;
    for (int k = 0; k < K; ++k) {
        for (int i = 0; i < shortfall[k]; ++i) {
            if (next_leftover < leftovers.size()) {
                result.pools[k].push_back(leftovers[next_leftover++]);
            } else {
                result.pools[k].push_back(
                    candidate_rows[rng.uniform_index(candidate_rows.size())]);
                result.sampled_with_replacement = true;
            }
        }
    }
    return result;
}

std::pair<std::vector<int>, std::vector<int>> split_test(size_t n, double test_fraction,
                                                         uint64_t seed) {
    if (test_fraction < 0.0 || test_fraction >= 1.0) fail("test_fraction must be in [0,1)");
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(seed);
    rng.shuffle(rows);
    const size_t n_test = static_cast<size_t>(std::llround(test_fraction * static_cast<double>(n)));
    std::vector<int> test(rows.end() - n_test, rows.end());
    rows.resize(n - n_test);
    return {std::move(rows), std::move(test)};
}

StreamState::StreamState(std::vector<int> pool, int window_size, int churn, uint64_t seed)
    : churn_(churn) {
    if (pool.empty()) fail("stream: empty pool");
    if (window_size < 1 || churn < 0 || churn > window_size) fail("stream: bad window/churn");
    order_ = std::move(pool);
    Rng rng(seed);
    rng.shuffle(order_);
    window_.reserve(window_size);
    for (int i = 0; i < window_size; ++i) window_.push_back(next_row());
}

int StreamState::next_row() {
    const int row = order_[cursor_];
    cursor_ = (cursor_ + 1) % order_.size();
    return row;
}

void StreamState::advance() {
    // FIFO: drop the oldest churn_ rows, append churn_ fresh ones
    window_.erase(window_.begin(), window_.begin() + churn_);
    for (int i = 0; i < churn_; ++i) window_.push_back(next_row());
    ++round_;
}

void StreamState::advance_to_round(int round) {
    if (round < round_) fail("stream: cannot rewind");
    while (round_ < round) advance();
}

RoundBatch make_batch(const Dataset& ds, const std::vector<int>& rows, int client_id, int round) {
    RoundBatch batch;
    batch.client_id = client_id;
    batch.round_index = round;
    batch.availability.assign(ds.num_modalities(), true);
    batch.labels.reserve(rows.size());
    for (int r : rows) batch.labels.push_back(ds.labels[r]);
    batch.data.resize(ds.num_modalities());
    for (size_t m = 0; m < ds.num_modalities(); ++m) {
        const Matrix& src = ds.modalities[m];
        Matrix& dst = batch.data[m];
        dst = Matrix(rows.size(), src.cols);
        for (size_t i = 0; i < rows.size(); ++i)
            std::copy(src.row(rows[i]), src.row(rows[i]) + src.cols, dst.row(i));
    }
    return batch;
}

bool MissingSchedule::any_missing(int round) const {
    for (int m : missing_modality[round])
        if (m >= 0) return true;
    return false;
}

std::vector<bool> MissingSchedule::available_mask(int round, int client) const {
    std::vector<bool> mask(num_modalities, true);
    const int m = missing_modality[round][client];
    if (m >= 0) mask[m] = false;
    return mask;
}

size_t MissingSchedule::missing_round_count() const {
    size_t n = 0;
    for (int t = 0; t < rounds; ++t)
        if (any_missing(t)) ++n;
    return n;
}

MissingSchedule build_schedule(int rounds, double lambda, int num_modalities, int num_clients,
                               MissingSchedule::Mode mode, uint64_t seed) {
    if (rounds < 0) fail("schedule: rounds must be >= 0");
    if (lambda < 0.0 || lambda > 1.0) fail("schedule: lambda must be in [0,1]");
    if (num_clients < 1) fail("schedule: num_clients must be >= 1");
    if (num_modalities < 1) fail("schedule: num_modalities must be >= 1");
    const int n_missing = static_cast<int>(std::llround(lambda * rounds));
    if (n_missing > 0 && num_modalities < 2)
        fail("schedule: a missing round with a single modality would leave clients with no data");

    MissingSchedule s;
    s.rounds = rounds;
    s.num_clients = num_clients;
    s.num_modalities = num_modalities;
    s.lambda = lambda;
    s.mode = mode;
    s.missing_modality.assign(rounds, std::vector<int>(num_clients, -1));

    Rng rng(seed);
    // partial Fisher-Yates draw of n_missing distinct rounds
    std::vector<int> idx(rounds);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n_missing; ++i) {
        const size_t j = i + rng.uniform_index(idx.size() - i);
        std::swap(idx[i], idx[j]);
    }
    std::vector<int> chosen(idx.begin(), idx.begin() + n_missing);
    std::sort(chosen.begin(), chosen.end());

    for (int t : chosen) {
        if (mode == MissingSchedule::Mode::Synchronized) {
            const int m = static_cast<int>(rng.uniform_index(num_modalities));
            for (int k = 0; k < num_clients; ++k) s.missing_modality[t][k] = m;
        } else {
            for (int k = 0; k < num_clients; ++k)
                s.missing_modality[t][k] = static_cast<int>(rng.uniform_index(num_modalities));
        }
    }
    return s;
}

void apply_schedule(RoundBatch& batch, const MissingSchedule& schedule) {
    if (batch.round_index < 0 || batch.round_index >= schedule.rounds)
        fail("apply_schedule: batch round not covered by schedule");
    const int missing = schedule.missing_modality[batch.round_index][batch.client_id];
    if (missing < 0) return;
    batch.data[missing] = Matrix();
    batch.availability[missing] = false;
}

std::string schedule_to_csv(const MissingSchedule& schedule) {
    std::ostringstream out;
    out << "round,client,modality,available\n";
    for (int t = 0; t < schedule.rounds; ++t)
        for (int k = 0; k < schedule.num_clients; ++k)
            for (int m = 0; m < schedule.num_modalities; ++m)
                out << t << ',' << k << ',' << m << ','
                    << (schedule.is_missing(t, k, m) ? 0 : 1) << '\n';
    return out.str();
}

}  // namespace mmofl
