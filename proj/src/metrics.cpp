#include "mmofl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mmofl/csvio.hpp"
#include "mmofl/serialize.hpp"

namespace mmofl {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

struct WeightedPool {
    std::vector<int> rows;
    std::vector<double> weights;
    Matrix x;  // n x D concatenated identity features
    std::vector<int> labels;
    double weight_sum = 0.0;
};

WeightedPool build_pool(const Dataset& ds, const BatchRows& batch_rows) {
    std::map<int, double> counts;
    for (const auto& per_round : batch_rows)
        for (const auto& per_client : per_round)
            for (int row : per_client) counts[row] += 1.0;
    if (counts.empty()) fail("comparator: no round batches recorded");

    WeightedPool pool;
    size_t width = 0;
    for (const auto& mod : ds.modalities) width += mod.cols;
    pool.x = Matrix(counts.size(), width);
    size_t i = 0;
    for (const auto& [row, w] : counts) {
        pool.rows.push_back(row);
        pool.weights.push_back(w);
        pool.weight_sum += w;
        pool.labels.push_back(ds.labels[row]);
        double* xi = pool.x.row(i);
        size_t off = 0;
        for (size_t m = 0; m < ds.num_modalities(); ++m) {
            const Matrix& src = ds.modalities[m];
            std::copy(src.row(row), src.row(row) + src.cols, xi + off);
            off += src.cols;
        }
        ++i;
    }
    return pool;
}

// weighted multinomial logistic objective on identity features;
// theta = [W (C x D) row-major, b (C)]. Extended-precision accumulation keeps
// the gradient's cancellation noise below the 1e-8 certificate.
double objective(const WeightedPool& pool, int C, int D, const std::vector<double>& theta,
                 std::vector<double>* grad) {
    const double* w = theta.data();
    const double* b = theta.data() + static_cast<size_t>(C) * D;
    std::vector<long double> grad_acc;
    if (grad) grad_acc.assign(theta.size(), 0.0L);
    long double loss = 0.0L;
    std::vector<double> logits(C);
    for (size_t i = 0; i < pool.x.rows; ++i) {
        const double* xi = pool.x.row(i);
        double mx = -1e300;
        for (int c = 0; c < C; ++c) {
            const double* wc = w + static_cast<size_t>(c) * D;
            double acc = b[c];
            for (int j = 0; j < D; ++j) acc += wc[j] * xi[j];
            logits[c] = acc;
            mx = std::max(mx, acc);
        }
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(logits[c] - mx);
        const double lse = mx + std::log(sum);
        const int y = pool.labels[i];
        const double wi = pool.weights[i];
        loss += static_cast<long double>(wi) * (lse - logits[y]);
        if (grad) {
            for (int c = 0; c < C; ++c) {
                const double p = std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0);
                const long double g = static_cast<long double>(wi) * p;
                long double* gw = grad_acc.data() + static_cast<size_t>(c) * D;
                for (int j = 0; j < D; ++j) gw[j] += g * xi[j];
                grad_acc[static_cast<size_t>(C) * D + c] += g;
            }
        }
    }
    const long double inv = 1.0L / pool.weight_sum;
    if (grad) {
        grad->resize(grad_acc.size());
        for (size_t i = 0; i < grad_acc.size(); ++i)
            (*grad)[i] = static_cast<double>(grad_acc[i] * inv);
    }
    return static_cast<double>(loss * inv);
}

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// L-BFGS (two-loop recursion, Armijo backtracking) on the pooled objective
struct FitResult {
    std::vector<double> theta;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

FitResult lbfgs_fit(const WeightedPool& pool, int C, int D, double tolerance,
                    int max_iterations) {
    const size_t n = static_cast<size_t>(C) * D + C;
    std::vector<double> theta(n, 0.0), grad;
    double loss = objective(pool, C, D, theta, &grad);

    constexpr int kMemory = 10;
    std::vector<std::vector<double>> s_hist, y_hist;
    std::vector<double> rho_hist;

    FitResult r;
    for (int iter = 0; iter < max_iterations; ++iter) {
        const double gnorm = norm2(grad);
        if (gnorm < tolerance) {
            r.theta = theta;
            r.grad_norm = gnorm;
            r.iterations = iter;
            r.converged = true;
            return r;
        }
        // two-loop recursion for the search direction
        std::vector<double> q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int h = static_cast<int>(s_hist.size()) - 1; h >= 0; --h) {
            alpha[h] = rho_hist[h] * dot(s_hist[h], q);
            for (size_t i = 0; i < n; ++i) q[i] -= alpha[h] * y_hist[h][i];
        }
        if (!s_hist.empty()) {
            const auto& s = s_hist.back();
            const auto& y = y_hist.back();
            const double gamma = dot(s, y) / dot(y, y);
            for (double& v : q) v *= gamma;
        }
        for (size_t h = 0; h < s_hist.size(); ++h) {
            const double beta = rho_hist[h] * dot(y_hist[h], q);
            for (size_t i = 0; i < n; ++i) q[i] += s_hist[h][i] * (alpha[h] - beta);
        }
        for (double& v : q) v = -v;

        double dir_deriv = dot(grad, q);
        if (dir_deriv >= 0.0) {  // bad curvature: fall back to steepest descent
            for (size_t i = 0; i < n; ++i) q[i] = -grad[i];
            dir_deriv = -gnorm * gnorm;
        }

        double step = s_hist.empty() ? 1.0 / std::max(1.0, gnorm) : 1.0;
        std::vector<double> trial(n), trial_grad;
        double trial_loss = 0.0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (size_t i = 0; i < n; ++i) trial[i] = theta[i] + step * q[i];
            trial_loss = objective(pool, C, D, trial, &trial_grad);
            if (trial_loss <= loss + 1e-4 * step * dir_deriv) {
                accepted = true;
                break;
            }
            // near the optimum the predicted decrease rounds to zero in the
            // objective; keep going as long as the gradient itself shrinks
            if (trial_loss <= loss + 1e-12 * (1.0 + std::fabs(loss)) &&
                norm2(trial_grad) < 0.999 * gnorm) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {  // flat to machine precision along the ray
            r.theta = theta;
            r.grad_norm = gnorm;
            r.iterations = iter;
            r.converged = gnorm < tolerance;
            return r;
        }

        std::vector<double> s(n), y(n);
        for (size_t i = 0; i < n; ++i) {
            s[i] = trial[i] - theta[i];
            y[i] = trial_grad[i] - grad[i];
        }
        const double sy = dot(s, y);
        if (sy > 1e-12) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > kMemory) {
                s_hist.erase(s_hist.begin());
                y_hist.erase(y_hist.begin());
                rho_hist.erase(rho_hist.begin());
            }
        }
        theta = std::move(trial);
        grad = std::move(trial_grad);
        loss = trial_loss;
    }
    r.theta = theta;
    r.grad_norm = norm2(grad);
    r.iterations = max_iterations;
    r.converged = r.grad_norm < tolerance;
    return r;
}

ModelParams head_only_params(const ModelConfig& cfg, std::vector<double> head) {
    ModelParams p;
    p.head = std::move(head);
    p.encoders.assign(cfg.num_modalities, {});
    return p;
}

}  // namespace

ComparatorOracle fit_comparator(const ModelConfig& cfg, const Dataset& ds,
                                const BatchRows& batch_rows, double tolerance,
                                int max_iterations) {
    cfg.validate();
    if (!cfg.convex_mode())
        fail("fit_comparator: hindsight optimum is only certified in convex mode "
             "(identity encoders + linear head); use proxy_comparator instead");
    WeightedPool pool = build_pool(ds, batch_rows);
    const int C = cfg.num_classes;
    const int D = cfg.num_modalities * cfg.feature_dim;

    // center the features first: a large common input offset couples the
    // weight and bias directions into a near-flat valley that stalls the fit
    std::vector<double> mu(D, 0.0);
    {
        std::vector<long double> acc(D, 0.0L);
        for (size_t i = 0; i < pool.x.rows; ++i) {
            const double* xi = pool.x.row(i);
            for (int j = 0; j < D; ++j) acc[j] += static_cast<long double>(pool.weights[i]) * xi[j];
        }
        for (int j = 0; j < D; ++j) mu[j] = static_cast<double>(acc[j] / pool.weight_sum);
    }
    double mu_norm = 0.0;
    for (double v : mu) mu_norm += v * v;
    mu_norm = std::sqrt(mu_norm);
    WeightedPool centered = pool;
    for (size_t i = 0; i < centered.x.rows; ++i) {
        double* xi = centered.x.row(i);
        for (int j = 0; j < D; ++j) xi[j] -= mu[j];
    }
    const double inner_tol = tolerance / (1.0 + mu_norm);
    FitResult fit = lbfgs_fit(centered, C, D, inner_tol, max_iterations);

    // logits = W'(x - mu) + b'  =>  W = W', b = b' - W' mu
    for (int c = 0; c < C; ++c) {
        double shift = 0.0;
        for (int j = 0; j < D; ++j) shift += fit.theta[static_cast<size_t>(c) * D + j] * mu[j];
        fit.theta[static_cast<size_t>(C) * D + c] -= shift;
    }
    // certify stationarity in the original coordinates
    std::vector<double> grad;
    objective(pool, C, D, fit.theta, &grad);
    const double gnorm = norm2(grad);

    ComparatorOracle oracle;
    oracle.theta_star = head_only_params(cfg, fit.theta);
    oracle.rows = std::move(pool.rows);
    oracle.weights = std::move(pool.weights);
    oracle.report.converged = gnorm < tolerance;
    oracle.report.grad_norm = gnorm;
    oracle.report.iterations = fit.iterations;
    oracle.report.proxy = false;
    return oracle;
}

double pooled_loss(const ModelConfig& cfg, const Dataset& ds, const ComparatorOracle& oracle,
                   const ModelParams& params) {
    const RoundBatch batch = make_batch(ds, oracle.rows, -1, -1);
    const ForwardResult fr = forward(cfg, params, batch);
    const std::vector<double> ce = cross_entropy_rows(fr.logits, batch.labels);
    double acc = 0.0, wsum = 0.0;
    for (size_t i = 0; i < ce.size(); ++i) {
        acc += oracle.weights[i] * ce[i];
        wsum += oracle.weights[i];
    }
    return acc / wsum;
}

ComparatorOracle proxy_comparator(const ModelConfig& cfg, const Dataset& ds,
                                  const BatchRows& batch_rows,
                                  const std::vector<ModelParams>& iterates) {
    if (iterates.empty()) fail("proxy_comparator: no stored iterates");
    WeightedPool pool = build_pool(ds, batch_rows);

    ComparatorOracle oracle;
    oracle.rows = std::move(pool.rows);
    oracle.weights = std::move(pool.weights);

    // thinned scan; always includes the final iterate
    const size_t stride = std::max<size_t>(1, iterates.size() / 50);
    double best = 0.0;
    size_t best_idx = 0;
    int evaluated = 0;
    for (size_t i = 0; i < iterates.size(); i += stride) {
        const size_t idx = std::min(i, iterates.size() - 1);
        const double loss = pooled_loss(cfg, ds, oracle, iterates[idx]);
        if (evaluated == 0 || loss < best) {
            best = loss;
            best_idx = idx;
        }
        ++evaluated;
    }
    {
        const double loss = pooled_loss(cfg, ds, oracle, iterates.back());
        if (loss < best) {
            best = loss;
            best_idx = iterates.size() - 1;
        }
        ++evaluated;
    }
    oracle.theta_star = iterates[best_idx];
    oracle.report.proxy = true;
    oracle.report.converged = false;
    oracle.report.iterations = evaluated;
    oracle.report.grad_norm = std::nan("");
    return oracle;
}

std::vector<double> comparator_round_losses(const ModelConfig& cfg, const Dataset& ds,
                                            const BatchRows& batch_rows,
                                            const ModelParams& theta) {
    std::vector<double> out;
    out.reserve(batch_rows.size());
    for (const auto& per_round : batch_rows) {
        double sum = 0.0;
        for (const auto& rows : per_round) {
            const RoundBatch batch = make_batch(ds, rows, -1, -1);
            sum += forward(cfg, theta, batch).loss;
        }
        out.push_back(sum / static_cast<double>(per_round.size()));
    }
    return out;
}

std::vector<double> regret_series(const std::vector<double>& train_loss,
                                  const std::vector<double>& comparator_loss) {
    if (train_loss.size() != comparator_loss.size())
        fail("regret_series: trace lengths differ (loss trace vs comparator)");
    std::vector<double> out(train_loss.size());
    double acc = 0.0;
    for (size_t t = 0; t < train_loss.size(); ++t) {
        acc += train_loss[t] - comparator_loss[t];
        out[t] = acc;
    }
    return out;
}

CommTotals account_communication(const std::vector<RoundRecord>& rounds) {
    CommTotals totals;
    for (const auto& r : rounds) {
        totals.model_bits_up += r.model_bits_up;
        totals.model_bits_down += r.model_bits_down;
        totals.proto_bits_up += r.proto_bits_up;
        totals.proto_bits_down += r.proto_bits_down;
        totals.opc_executions += static_cast<uint64_t>(r.opc_executions);
    }
    return totals;
}

std::vector<MetricsRecord> build_metrics(const std::vector<RoundRecord>& rounds,
                                         const std::vector<double>& comparator_losses) {
    if (!comparator_losses.empty() && comparator_losses.size() != rounds.size())
        fail("build_metrics: comparator trace does not cover every round");
    std::vector<MetricsRecord> out;
    out.reserve(rounds.size());
    uint64_t model_bits = 0, proto_bits = 0, opc = 0;
    double regret = 0.0;
    for (size_t t = 0; t < rounds.size(); ++t) {
        const RoundRecord& r = rounds[t];
        model_bits += r.model_bits_up + r.model_bits_down;
        proto_bits += r.proto_bits_up + r.proto_bits_down;
        opc += static_cast<uint64_t>(r.opc_executions);
        MetricsRecord rec;
        rec.round = r.round;
        rec.train_loss = r.train_loss;
        rec.test_acc = r.test_acc;
        rec.model_bits = model_bits;
        rec.proto_bits = proto_bits;
        rec.opc_count = opc;
        if (!comparator_losses.empty()) {
            rec.comparator_loss = comparator_losses[t];
            regret += r.train_loss - comparator_losses[t];
            rec.cum_regret = regret;
        }
        out.push_back(rec);
    }
    return out;
}

static const char* kCsvHeader =
    "round,train_loss,comparator_loss,cum_regret,test_acc,model_bits,proto_bits,opc_count,"
    "lambda,alpha,b,delay,strategy,seed";

std::string metrics_to_csv(const std::vector<MetricsRecord>& records, const RunLabels& labels) {
    std::ostringstream out;
    out << kCsvHeader << '\n';
    for (const auto& r : records) {
        out << r.round << ',' << format_real(r.train_loss) << ',' << format_real(r.comparator_loss)
            << ',' << format_real(r.cum_regret) << ',' << format_real(r.test_acc) << ','
            << r.model_bits << ',' << r.proto_bits << ',' << r.opc_count << ','
            << format_real(labels.lambda) << ',' << format_real(labels.alpha) << ',' << labels.bits
            << ',' << labels.delay << ',' << labels.strategy << ',' << labels.seed << '\n';
    }
    return out.str();
}

void export_csv(const std::vector<MetricsRecord>& records, const RunLabels& labels,
                const std::string& path) {
    write_file_atomic(path, metrics_to_csv(records, labels));
}

std::vector<MetricsRecord> import_csv(const std::string& path, RunLabels* labels) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    if (line != kCsvHeader) throw std::runtime_error(path + ": unexpected CSV header");
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 14) throw std::runtime_error(path + ": malformed row");
        MetricsRecord r;
        r.round = static_cast<int>(parse_int(cells[0]));
        r.train_loss = parse_real(cells[1]);
        r.comparator_loss = parse_real(cells[2]);
        r.cum_regret = parse_real(cells[3]);
        r.test_acc = parse_real(cells[4]);
        r.model_bits = static_cast<uint64_t>(parse_int(cells[5]));
        r.proto_bits = static_cast<uint64_t>(parse_int(cells[6]));
        r.opc_count = static_cast<uint64_t>(parse_int(cells[7]));
        if (labels) {
            labels->lambda = parse_real(cells[8]);
            labels->alpha = parse_real(cells[9]);
            labels->bits = static_cast<int>(parse_int(cells[10]));
            labels->delay = static_cast<int>(parse_int(cells[11]));
            labels->strategy = cells[12];
            labels->seed = parse_int(cells[13]);
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace mmofl
