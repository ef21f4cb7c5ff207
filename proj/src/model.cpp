#include "mmofl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "mmofl/rng.hpp"
#include "mmofl/serialize.hpp"

namespace mmofl {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_finite(const Matrix& x, const std::string& what) {
    for (double v : x.v)
        if (!std::isfinite(v)) fail(what + ": non-finite input value");
}

size_t linear_count(int in, int out) { return static_cast<size_t>(out) * in + out; }

// y = W x + b over a whole batch; W is (out x in) row-major, block = [W, b]
void linear_forward(const double* block, int in, int out, const Matrix& x, Matrix& y) {
    const double* w = block;
    const double* b = block + static_cast<size_t>(out) * in;
    y = Matrix(x.rows, out);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (int o = 0; o < out; ++o) {
            const double* wo = w + static_cast<size_t>(o) * in;
            double acc = b[o];
            for (int j = 0; j < in; ++j) acc += wo[j] * xi[j];
            yi[o] = acc;
        }
    }
}

// accumulates dW += dy^T x, db += colsum(dy); optionally emits dx = dy W
void linear_backward(const double* block, int in, int out, const Matrix& x, const Matrix& dy,
                     double* dblock, Matrix* dx) {
    const double* w = block;
    double* dw = dblock;
    double* db = dblock + static_cast<size_t>(out) * in;
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* dyi = dy.row(i);
        for (int o = 0; o < out; ++o) {
            const double g = dyi[o];
            if (g == 0.0) {
                continue;
            }
            double* dwo = dw + static_cast<size_t>(o) * in;
            for (int j = 0; j < in; ++j) dwo[j] += g * xi[j];
            db[o] += g;
        }
    }
    if (dx) {
        *dx = Matrix(x.rows, in);
        for (size_t i = 0; i < x.rows; ++i) {
            const double* dyi = dy.row(i);
            double* dxi = dx->row(i);
            for (int o = 0; o < out; ++o) {
                const double g = dyi[o];
                if (g == 0.0) continue;
                const double* wo = w + static_cast<size_t>(o) * in;
                for (int j = 0; j < in; ++j) dxi[j] += g * wo[j];
            }
        }
    }
}

struct Mlp1Layout {
    int in, hidden, out;
    const double* w1(const double* b) const { return b; }
    const double* b1(const double* b) const { return b + static_cast<size_t>(hidden) * in; }
    size_t w2_off() const { return static_cast<size_t>(hidden) * in + hidden; }
};

void mlp1_forward(const double* block, int in, int hidden, int out, const Matrix& x, Matrix& h,
                  Matrix& y) {
    linear_forward(block, in, hidden, x, h);
    for (double& v : h.v) v = std::tanh(v);
    const size_t off = static_cast<size_t>(hidden) * in + hidden;
    linear_forward(block + off, hidden, out, h, y);
}

void mlp1_backward(const double* block, int in, int hidden, int out, const Matrix& x,
                   const Matrix& h, const Matrix& dy, double* dblock, Matrix* dx) {
    const size_t off = static_cast<size_t>(hidden) * in + hidden;
    Matrix dh;
    linear_backward(block + off, hidden, out, h, dy, dblock + off, &dh);
    // through tanh: dpre = dh * (1 - h^2)
    for (size_t i = 0; i < dh.v.size(); ++i) dh.v[i] *= 1.0 - h.v[i] * h.v[i];
    linear_backward(block, in, hidden, x, dh, dblock, dx);
}

struct ForwardCache {
    std::vector<Matrix> encoder_hidden;  // mlp1 encoders only
    std::vector<Matrix> raw_features;    // pre-normalization blocks (normalize_features)
    std::vector<std::vector<double>> feature_norms;
    Matrix concat;                       // N x (M*d)
    Matrix head_hidden;                  // mlp1 head only
    Matrix probs;                        // softmax(logits)
};

// rows with norm below this stay untouched by feature normalization
constexpr double kNormFloor = 1e-12;

ForwardResult forward_impl(const ModelConfig& cfg, const ModelParams& params,
                           const RoundBatch& batch, const FeatureOverrides& overrides,
                           ForwardCache* cache) {
    cfg.validate();
    const int M = cfg.num_modalities;
    const int d = cfg.feature_dim;
    if (batch.data.size() != static_cast<size_t>(M) ||
        batch.availability.size() != static_cast<size_t>(M))
        fail("batch modality count does not match model config");
    if (params.encoders.size() != static_cast<size_t>(M) ||
        params.head.size() != cfg.head_param_count())
        fail("params layout does not match model config");
    const size_t n = batch.size();
    if (n == 0) fail("empty batch");
    for (int lab : batch.labels)
        if (lab < 0 || lab >= cfg.num_classes) fail("label out of range");

    ForwardResult out;
    out.features.features.resize(M);
    out.features.source.resize(M, FeatureSource::Encoded);
    if (cache) {
        cache->encoder_hidden.resize(M);
        cache->raw_features.resize(M);
        cache->feature_norms.resize(M);
    }

    for (int m = 0; m < M; ++m) {
        const auto ov = overrides.find(m);
        if (ov != overrides.end()) {
            const Matrix& z = ov->second.features;
            if (z.rows != n || z.cols != static_cast<size_t>(d))
                fail("override block for modality " + std::to_string(m) + " has wrong shape");
            check_finite(z, "override modality " + std::to_string(m));
            out.features.features[m] = z;
            out.features.source[m] = ov->second.source;
            continue;
        }
        if (!batch.availability[m])
            fail("modality " + std::to_string(m) + " has neither data nor an override block");
        const Matrix& x = batch.data[m];
        if (x.rows != n || x.cols != static_cast<size_t>(cfg.input_dims[m]))
            fail("data matrix for modality " + std::to_string(m) + " has wrong shape");
        check_finite(x, "modality " + std::to_string(m));
        if (params.encoders[m].size() != cfg.encoder_param_count(m))
            fail("encoder block " + std::to_string(m) + " has wrong size");

        Matrix z;
        switch (cfg.encoder_kinds[m]) {
            case EncoderKind::Identity:
                z = x;
                break;
            case EncoderKind::Linear:
                linear_forward(params.encoders[m].data(), cfg.input_dims[m], d, x, z);
                break;
            case EncoderKind::Mlp1: {
                Matrix h;
                mlp1_forward(params.encoders[m].data(), cfg.input_dims[m], cfg.hidden_dim, d, x, h,
                             z);
                if (cache) cache->encoder_hidden[m] = std::move(h);
                break;
            }
        }
        if (cfg.normalize_features) {
            std::vector<double> norms(n);
            if (cache) cache->raw_features[m] = z;
            for (size_t i = 0; i < n; ++i) {
                double s = 0.0;
                double* zi = z.row(i);
                for (int j = 0; j < d; ++j) s += zi[j] * zi[j];
                norms[i] = std::sqrt(s);
                if (norms[i] > kNormFloor)
                    for (int j = 0; j < d; ++j) zi[j] /= norms[i];
            }
            if (cache) cache->feature_norms[m] = std::move(norms);
        }
        out.features.features[m] = std::move(z);
    }

    Matrix concat(n, static_cast<size_t>(M) * d);
    for (int m = 0; m < M; ++m) {
        const Matrix& z = out.features.features[m];
        for (size_t i = 0; i < n; ++i)
            std::copy(z.row(i), z.row(i) + d, concat.row(i) + static_cast<size_t>(m) * d);
    }

    Matrix logits;
    if (cfg.head_kind == HeadKind::Linear) {
        linear_forward(params.head.data(), M * d, cfg.num_classes, concat, logits);
    } else {
        Matrix h;
        mlp1_forward(params.head.data(), M * d, cfg.hidden_dim, cfg.num_classes, concat, h, logits);
        if (cache) cache->head_hidden = std::move(h);
    }

    const std::vector<double> ce = cross_entropy_rows(logits, batch.labels);
    double loss = 0.0;
    for (double c : ce) loss += c;
    loss /= static_cast<double>(n);

    if (cache) {
        cache->concat = std::move(concat);
        // softmax probabilities, reusing the stable per-row normalizer
        cache->probs = Matrix(n, cfg.num_classes);
        for (size_t i = 0; i < n; ++i) {
            const double* li = logits.row(i);
            double mx = li[0];
            for (int c = 1; c < cfg.num_classes; ++c) mx = std::max(mx, li[c]);
            double sum = 0.0;
            for (int c = 0; c < cfg.num_classes; ++c) sum += std::exp(li[c] - mx);
            const double lse = mx + std::log(sum);
            for (int c = 0; c < cfg.num_classes; ++c) cache->probs(i, c) = std::exp(li[c] - lse);
        }
    }
    out.logits = std::move(logits);
    out.loss = loss;
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (num_modalities < 1) fail("model.num_modalities must be >= 1");
    if (input_dims.size() != static_cast<size_t>(num_modalities))
        fail("model.input_dims must list one entry per modality");
    if (encoder_kinds.size() != static_cast<size_t>(num_modalities))
        fail("model.encoder_kinds must list one entry per modality");
    if (feature_dim < 1) fail("model.feature_dim must be >= 1");
    if (num_classes < 2) fail("model.num_classes must be >= 2");
    bool needs_hidden = head_kind == HeadKind::Mlp1;
    for (int m = 0; m < num_modalities; ++m) {
        if (input_dims[m] < 1) fail("model.input_dims[" + std::to_string(m) + "] must be >= 1");
        if (encoder_kinds[m] == EncoderKind::Identity && input_dims[m] != feature_dim)
            fail("model.input_dims[" + std::to_string(m) +
                 "]: identity encoder requires input_dim == feature_dim");
        if (encoder_kinds[m] == EncoderKind::Mlp1) needs_hidden = true;
    }
    if (needs_hidden && hidden_dim < 1) fail("model.hidden_dim must be >= 1 for mlp1 layers");
}

size_t ModelConfig::encoder_param_count(int m) const {
    switch (encoder_kinds[m]) {
        case EncoderKind::Identity:
            return 0;
        case EncoderKind::Linear:
            return linear_count(input_dims[m], feature_dim);
        case EncoderKind::Mlp1:
            return linear_count(input_dims[m], hidden_dim) + linear_count(hidden_dim, feature_dim);
    }
    return 0;
}

size_t ModelConfig::head_param_count() const {
    const int in = num_modalities * feature_dim;
    if (head_kind == HeadKind::Linear) return linear_count(in, num_classes);
    return linear_count(in, hidden_dim) + linear_count(hidden_dim, num_classes);
}

size_t ModelConfig::total_param_count() const {
    size_t total = head_param_count();
    for (int m = 0; m < num_modalities; ++m) total += encoder_param_count(m);
    return total;
}

bool ModelConfig::convex_mode() const {
    if (head_kind != HeadKind::Linear || normalize_features) return false;
    for (auto k : encoder_kinds)
        if (k != EncoderKind::Identity) return false;
    return true;
}

size_t ModelParams::total_size() const {
    size_t total = head.size();
    for (const auto& e : encoders) total += e.size();
    return total;
}

bool ModelParams::same_layout(const ModelParams& o) const {
    if (head.size() != o.head.size() || encoders.size() != o.encoders.size()) return false;
    for (size_t m = 0; m < encoders.size(); ++m)
        if (encoders[m].size() != o.encoders[m].size()) return false;
    return true;
}

bool ModelParams::bitwise_equal(const ModelParams& o) const {
    if (!same_layout(o)) return false;
    auto eq = [](const std::vector<double>& a, const std::vector<double>& b) {
        for (size_t i = 0; i < a.size(); ++i) {
            uint64_t x, y;
            std::memcpy(&x, &a[i], 8);
            std::memcpy(&y, &b[i], 8);
            if (x != y) return false;
        }
        return true;
    };
    if (!eq(head, o.head)) return false;
    for (size_t m = 0; m < encoders.size(); ++m)
        if (!eq(encoders[m], o.encoders[m])) return false;
    return true;
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    auto fill_linear = [&rng](std::vector<double>& block, size_t off, int in, int out) {
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        const size_t count = linear_count(in, out);
        for (size_t i = 0; i < count; ++i) block[off + i] = rng.uniform(-s, s);
        return off + count;
    };

    ModelParams p;
    p.head.resize(cfg.head_param_count());
    const int head_in = cfg.num_modalities * cfg.feature_dim;
    if (cfg.head_kind == HeadKind::Linear) {
        fill_linear(p.head, 0, head_in, cfg.num_classes);
    } else {
        size_t off = fill_linear(p.head, 0, head_in, cfg.hidden_dim);
        fill_linear(p.head, off, cfg.hidden_dim, cfg.num_classes);
    }
    p.encoders.resize(cfg.num_modalities);
    for (int m = 0; m < cfg.num_modalities; ++m) {
        p.encoders[m].resize(cfg.encoder_param_count(m));
        switch (cfg.encoder_kinds[m]) {
            case EncoderKind::Identity:
                break;
            case EncoderKind::Linear:
                fill_linear(p.encoders[m], 0, cfg.input_dims[m], cfg.feature_dim);
                break;
            case EncoderKind::Mlp1: {
                size_t off = fill_linear(p.encoders[m], 0, cfg.input_dims[m], cfg.hidden_dim);
                fill_linear(p.encoders[m], off, cfg.hidden_dim, cfg.feature_dim);
                break;
            }
        }
    }
    return p;
}

ForwardResult forward(const ModelConfig& cfg, const ModelParams& params, const RoundBatch& batch,
                      const FeatureOverrides& overrides) {
    return forward_impl(cfg, params, batch, overrides, nullptr);
}

GradientVector backward(const ModelConfig& cfg, const ModelParams& params, const RoundBatch& batch,
                        const FeatureOverrides& overrides,
                        const std::vector<bool>& modality_available) {
    const int M = cfg.num_modalities;
    const int d = cfg.feature_dim;
    if (modality_available.size() != static_cast<size_t>(M))
        fail("modality availability mask must have one entry per modality");
    for (int m = 0; m < M; ++m)
        if (overrides.count(m) && modality_available[m])
            fail("modality " + std::to_string(m) +
                 " carries an override block but is not masked; substituted features are "
                 "constants");

    ForwardCache cache;
    forward_impl(cfg, params, batch, overrides, &cache);
    const size_t n = batch.size();

    GradientVector g;
    g.head.assign(params.head.size(), 0.0);
    g.encoders.resize(M);
    for (int m = 0; m < M; ++m) g.encoders[m].assign(params.encoders[m].size(), 0.0);
    g.block_mask.assign(static_cast<size_t>(M) + 1, true);

    // d(mean CE)/dlogits = (softmax - onehot) / N
    Matrix dlogits = cache.probs;
    for (size_t i = 0; i < n; ++i) dlogits(i, batch.labels[i]) -= 1.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (double& v : dlogits.v) v *= inv_n;

    Matrix dconcat;
    if (cfg.head_kind == HeadKind::Linear) {
        linear_backward(params.head.data(), M * d, cfg.num_classes, cache.concat, dlogits,
                        g.head.data(), &dconcat);
    } else {
        mlp1_backward(params.head.data(), M * d, cfg.hidden_dim, cfg.num_classes, cache.concat,
                      cache.head_hidden, dlogits, g.head.data(), &dconcat);
    }

    for (int m = 0; m < M; ++m) {
        if (!modality_available[m]) {
            g.block_mask[static_cast<size_t>(m) + 1] = false;
            continue;  // block stays exactly zero
        }
        if (cfg.encoder_kinds[m] == EncoderKind::Identity) continue;
        Matrix dz(n, d);
        for (size_t i = 0; i < n; ++i)
            std::copy(dconcat.row(i) + static_cast<size_t>(m) * d,
                      dconcat.row(i) + static_cast<size_t>(m + 1) * d, dz.row(i));
        if (cfg.normalize_features) {
            // through y = z/|z|: dz = (dy - y (y . dy)) / |z|
            const Matrix& raw = cache.raw_features[m];
            for (size_t i = 0; i < n; ++i) {
                const double r = cache.feature_norms[m][i];
                if (r <= kNormFloor) continue;  // row passed through unnormalized
                double* dzi = dz.row(i);
                const double* zi = raw.row(i);
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += zi[j] / r * dzi[j];
                for (int j = 0; j < d; ++j) dzi[j] = (dzi[j] - zi[j] / r * dot) / r;
            }
        }
        if (cfg.encoder_kinds[m] == EncoderKind::Linear) {
            linear_backward(params.encoders[m].data(), cfg.input_dims[m], d, batch.data[m], dz,
                            g.encoders[m].data(), nullptr);
        } else {
            mlp1_backward(params.encoders[m].data(), cfg.input_dims[m], cfg.hidden_dim, d,
                          batch.data[m], cache.encoder_hidden[m], dz, g.encoders[m].data(),
                          nullptr);
        }
    }
    return g;
}

ModelParams sgd_step(const ModelParams& params, const GradientVector& grad, double eta) {
    if (eta <= 0.0) fail("sgd_step: eta must be positive");
    if (grad.head.size() != params.head.size() || grad.encoders.size() != params.encoders.size())
        fail("sgd_step: gradient layout does not match params");
    ModelParams out = params;
    for (size_t i = 0; i < out.head.size(); ++i) out.head[i] -= eta * grad.head[i];
    for (size_t m = 0; m < out.encoders.size(); ++m) {
        if (grad.encoders[m].size() != params.encoders[m].size())
            fail("sgd_step: gradient layout does not match params");
        for (size_t i = 0; i < out.encoders[m].size(); ++i)
            out.encoders[m][i] -= eta * grad.encoders[m][i];
    }
    return out;
}

ModelParams average_params(const std::vector<std::pair<int, const ModelParams*>>& uploads) {
    if (uploads.empty()) fail("average_params: empty upload list");
    std::vector<std::pair<int, const ModelParams*>> sorted = uploads;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    const ModelParams& first = *sorted.front().second;
    // extended-precision accumulators keep the reduction reproducible and make
    // the mean of K identical models bit-exact
    std::vector<long double> head_acc(first.head.size(), 0.0L);
    std::vector<std::vector<long double>> enc_acc(first.encoders.size());
    for (size_t m = 0; m < first.encoders.size(); ++m)
        enc_acc[m].assign(first.encoders[m].size(), 0.0L);
    for (const auto& [id, p] : sorted) {
        (void)id;
        if (!p->same_layout(first)) fail("average_params: layout mismatch");
        for (size_t i = 0; i < head_acc.size(); ++i) head_acc[i] += p->head[i];
        for (size_t m = 0; m < enc_acc.size(); ++m)
            for (size_t i = 0; i < enc_acc[m].size(); ++i) enc_acc[m][i] += p->encoders[m][i];
    }
    const long double k = static_cast<long double>(sorted.size());
    ModelParams acc;
    acc.head.resize(first.head.size());
    acc.encoders.resize(first.encoders.size());
    for (size_t i = 0; i < head_acc.size(); ++i)
        acc.head[i] = static_cast<double>(head_acc[i] / k);
    for (size_t m = 0; m < enc_acc.size(); ++m) {
        acc.encoders[m].resize(enc_acc[m].size());
        for (size_t i = 0; i < enc_acc[m].size(); ++i)
            acc.encoders[m][i] = static_cast<double>(enc_acc[m][i] / k);
    }
    return acc;
}

double predict_accuracy(const ModelConfig& cfg, const ModelParams& params,
                        const RoundBatch& batch) {
    if (batch.size() == 0) fail("predict_accuracy: empty batch");
    if (!batch.all_available()) fail("predict_accuracy: test batch must be full-modality");
    const ForwardResult fr = forward(cfg, params, batch);
    size_t correct = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const double* li = fr.logits.row(i);
        int best = 0;
        for (int c = 1; c < cfg.num_classes; ++c)
            if (li[c] > li[best]) best = c;  // strict: ties keep the lowest index
        if (best == batch.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

std::vector<double> cross_entropy_rows(const Matrix& logits, const std::vector<int>& labels) {
    std::vector<double> out(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        const double* li = logits.row(i);
        double mx = li[0];
        for (size_t c = 1; c < logits.cols; ++c) mx = std::max(mx, li[c]);
        double sum = 0.0;
        for (size_t c = 0; c < logits.cols; ++c) sum += std::exp(li[c] - mx);
        out[i] = mx + std::log(sum) - li[labels[i]];
    }
    return out;
}

static constexpr char kParamsMagic[8] = {'M', 'M', 'O', 'F', 'L', 'P', 'B', '1'};

std::vector<uint8_t> serialize_params(const ModelParams& params) {
    ByteWriter w;
    w.magic(kParamsMagic);
    w.u32(static_cast<uint32_t>(params.encoders.size() + 1));
    w.u64(params.head.size());
    for (const auto& e : params.encoders) w.u64(e.size());
    for (double v : params.head) w.f64(v);
    for (const auto& e : params.encoders)
        for (double v : e) w.f64(v);
    return w.take();
}

ModelParams deserialize_params(const std::vector<uint8_t>& blob) {
    ByteReader r(blob);
    r.expect_magic(kParamsMagic);
    const uint32_t nblocks = r.u32();
    if (nblocks < 1) throw std::runtime_error("params blob: no blocks");
    ModelParams p;
    p.head.resize(r.u64());
    p.encoders.resize(nblocks - 1);
    for (auto& e : p.encoders) e.resize(r.u64());
    for (auto& v : p.head) v = r.f64();
    for (auto& e : p.encoders)
        for (auto& v : e) v = r.f64();
    if (!r.done()) throw std::runtime_error("params blob: trailing bytes");
    return p;
}

uint64_t params_blob_bits(const ModelParams& params) {
    // magic + block count + layout descriptor + payload
    const uint64_t bytes = 8 + 4 + 8 * (params.encoders.size() + 1) + 8 * params.total_size();
    return bytes * 8;
}

}  // namespace mmofl
