#include "mmofl/pmm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mmofl/serialize.hpp"

namespace mmofl {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// below this an aggregate is treated as the degenerate zero vector and never
// normalized
constexpr double kZeroNorm = 1e-12;

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

bool normalize_in_place(std::vector<double>& v) {
    const double n = l2_norm(v);
    if (n < kZeroNorm) return false;
    for (double& x : v) x /= n;
    return true;
}

}  // namespace

PrototypeMatrix::PrototypeMatrix(int M, int C, int d, bool norm)
    : num_modalities(M),
      num_classes(C),
      dim(d),
      normalized(norm),
      value(M, std::vector<std::vector<double>>(C, std::vector<double>(d, 0.0))),
      update_count(M, std::vector<uint32_t>(C, 0)),
      round_of_last_update(M, -1) {}

bool PrototypeMatrix::empty() const {
    for (const auto& per_m : update_count)
        for (uint32_t n : per_m)
            if (n > 0) return false;
    return true;
}

void QuantizerConfig::validate() const {
    if (bits < 2 || bits > 32) fail("quantizer bits must be in [2,32]");
}

void DelayConfig::validate() const {
    if (interval < 0) fail("delay interval must be >= 0");
}

QuantizerConfig full_precision() { return QuantizerConfig{32}; }

LocalPrototypeSet build_local_prototypes(const ModelConfig& cfg, const ModelParams& params,
                                         const RoundBatch& batch, bool normalize) {
    if (!batch.all_available())
        fail("build_local_prototypes: only full-modality clients construct prototypes");
    const ForwardResult fr = forward(cfg, params, batch);
    const int d = cfg.feature_dim;

    LocalPrototypeSet set;
    set.client_id = batch.client_id;
    set.round = batch.round_index;
    for (int m = 0; m < cfg.num_modalities; ++m) {
        const Matrix& z = fr.features.features[m];
        std::map<int, std::pair<std::vector<double>, int>> by_class;
        for (size_t i = 0; i < batch.size(); ++i) {
            auto& [sum, count] = by_class[batch.labels[i]];
            if (sum.empty()) sum.assign(d, 0.0);
            const double* zi = z.row(i);
            for (int j = 0; j < d; ++j) sum[j] += zi[j];
            ++count;
        }
        for (auto& [c, acc] : by_class) {
            auto& [sum, count] = acc;
            for (double& x : sum) x /= static_cast<double>(count);
            if (normalize && !normalize_in_place(sum)) continue;  // degenerate mean, skip
            set.entries[{m, c}] = LocalPrototypeSet::Entry{std::move(sum), count};
        }
    }
    return set;
}

TemporalPrototypes aggregate_temporal(const std::vector<LocalPrototypeSet>& locals,
                                      bool normalize) {
    std::vector<const LocalPrototypeSet*> ordered;
    ordered.reserve(locals.size());
    for (const auto& s : locals) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(),
              [](const auto* a, const auto* b) { return a->client_id < b->client_id; });

    TemporalPrototypes out;
    std::map<std::pair<int, int>, int> contributors;
    for (const auto* set : ordered) {
        for (const auto& [key, entry] : set->entries) {
            auto& acc = out[key];
            if (acc.empty()) acc.assign(entry.vec.size(), 0.0);
            for (size_t j = 0; j < entry.vec.size(); ++j) acc[j] += entry.vec[j];
            ++contributors[key];
        }
    }
    for (auto it = out.begin(); it != out.end();) {
        const double inv = 1.0 / contributors[it->first];
        for (double& x : it->second) x *= inv;
        if (normalize && l2_norm(it->second) < kZeroNorm) {
            it = out.erase(it);  // cancelled out, nothing representative left
        } else {
            ++it;
        }
    }
    return out;
}

void update_persistent(PrototypeMatrix& matrix, const TemporalPrototypes& temporal, int round) {
    for (const auto& [key, vec] : temporal) {
        const auto [m, c] = key;
        if (m < 0 || m >= matrix.num_modalities || c < 0 || c >= matrix.num_classes)
            fail("update_persistent: (modality,class) outside the matrix");
        if (vec.size() != static_cast<size_t>(matrix.dim))
            fail("update_persistent: prototype dimension mismatch");
        auto& cell = matrix.value[m][c];
        const uint32_t n = matrix.update_count[m][c] + 1;
        for (int j = 0; j < matrix.dim; ++j)
            cell[j] = (static_cast<double>(n - 1) * cell[j] + vec[j]) / static_cast<double>(n);
        matrix.update_count[m][c] = n;
        if (matrix.normalized) normalize_in_place(cell);  // zero-norm cells stay zero
        matrix.round_of_last_update[m] = round;
    }
}

QuantizedPayload quantize_upload(const std::vector<double>& values, const QuantizerConfig& cfg) {
    cfg.validate();
    for (double v : values)
        if (!std::isfinite(v)) fail("quantize_upload: non-finite payload value");

    QuantizedPayload p;
    p.bits = cfg.bits;
    p.count = values.size();
    if (cfg.bits == 32) {
        p.raw = values;
        p.bit_count = static_cast<uint64_t>(values.size()) * 64;
        return p;
    }
    double lo = 0.0, hi = 0.0;
    if (!values.empty()) {
        lo = hi = values[0];
        for (double v : values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    p.lo = lo;
    p.hi = hi;
    const double span = hi - lo;
    const uint32_t top = (1u << cfg.bits) - 1u;
    p.levels.resize(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        if (span == 0.0) {
            p.levels[i] = 0;
        } else {
            const double t = (values[i] - lo) / span * static_cast<double>(top);
            p.levels[i] = static_cast<uint32_t>(std::llround(t));
        }
    }
    // components + scale/offset + fixed header word
    p.bit_count = static_cast<uint64_t>(values.size()) * cfg.bits + 2 * 64 + 64;
    return p;
}

std::vector<double> QuantizedPayload::dequantize() const {
    if (bits == 32) return raw;
    std::vector<double> out(levels.size());
    const double span = hi - lo;
    if (span == 0.0) {
        std::fill(out.begin(), out.end(), lo);
        return out;
    }
    const double step = span / static_cast<double>((1u << bits) - 1u);
    for (size_t i = 0; i < levels.size(); ++i) out[i] = lo + levels[i] * step;
    return out;
}

uint64_t quantize_local_set(LocalPrototypeSet& set, const QuantizerConfig& cfg) {
    std::vector<double> payload;
    for (const auto& [key, entry] : set.entries)
        payload.insert(payload.end(), entry.vec.begin(), entry.vec.end());
    const QuantizedPayload q = quantize_upload(payload, cfg);
    const std::vector<double> back = q.dequantize();
    size_t off = 0;
    for (auto& [key, entry] : set.entries) {
        std::copy(back.begin() + off, back.begin() + off + entry.vec.size(), entry.vec.begin());
        off += entry.vec.size();
    }
    // 32 bits of (modality, class, support) metadata per entry
    return q.bit_count + 32ull * set.entries.size();
}

bool should_run_opc(DelayState& state, const DelayConfig& cfg, int modality, bool observed) {
    cfg.validate();
    if (!observed) return false;
    if (cfg.interval == 0) return true;
    int& n = state.occurrences[modality];
    ++n;
    if (n >= cfg.interval) {
        n = 0;
        return true;
    }
    return false;
}

SubstituteResult substitute(const PrototypeMatrix& matrix, const std::vector<int>& labels,
                            int modality, bool fallback_to_zero) {
    if (modality < 0 || modality >= matrix.num_modalities) fail("substitute: bad modality");
    SubstituteResult r;
    r.features = Matrix(labels.size(), matrix.dim);
    for (size_t i = 0; i < labels.size(); ++i) {
        const int c = labels[i];
        if (c < 0 || c >= matrix.num_classes) fail("substitute: label out of range");
        if (!matrix.initialized(modality, c)) {
            if (!fallback_to_zero)
                throw std::runtime_error("substitute: no prototype for modality " +
                                         std::to_string(modality) + " class " + std::to_string(c));
            ++r.fallback_rows;  // row stays zero
            continue;
        }
        const auto& cell = matrix.value[modality][c];
        std::copy(cell.begin(), cell.end(), r.features.row(i));
    }
    return r;
}

namespace {

constexpr char kCollectionMagic[8] = {'P', 'M', 'M', 'C', 'O', 'L', 'L', '1'};

class BitPacker {
public:
    void push(uint32_t code, int bits) {
        for (int i = bits - 1; i >= 0; --i) {
            cur_ = static_cast<uint8_t>((cur_ << 1) | ((code >> i) & 1u));
            if (++filled_ == 8) {
                bytes_.push_back(cur_);
                cur_ = 0;
                filled_ = 0;
            }
        }
    }
    std::vector<uint8_t> finish() {
        if (filled_ > 0) {
            bytes_.push_back(static_cast<uint8_t>(cur_ << (8 - filled_)));
            cur_ = 0;
            filled_ = 0;
        }
        return std::move(bytes_);
    }

private:
    std::vector<uint8_t> bytes_;
    uint8_t cur_ = 0;
    int filled_ = 0;
};

class BitUnpacker {
public:
    BitUnpacker(const uint8_t* data, size_t size) : data_(data), size_(size) {}
    uint32_t pull(int bits) {
        uint32_t code = 0;
        for (int i = 0; i < bits; ++i) {
            const size_t byte = pos_ / 8;
            if (byte >= size_) throw std::runtime_error("collection blob: bit stream truncated");
            const int shift = 7 - static_cast<int>(pos_ % 8);
            code = (code << 1) | ((data_[byte] >> shift) & 1u);
            ++pos_;
        }
        return code;
    }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize_collection(const PrototypeMatrix& matrix,
                                          const QuantizerConfig& cfg) {
    cfg.validate();
    ByteWriter w;
    w.magic(kCollectionMagic);
    w.u32(static_cast<uint32_t>(matrix.num_modalities));
    w.u32(static_cast<uint32_t>(matrix.num_classes));
    w.u32(static_cast<uint32_t>(matrix.dim));
    w.u32(static_cast<uint32_t>(cfg.bits));
    w.u8(matrix.normalized ? 1 : 0);

    std::vector<double> payload;
    uint32_t n_init = 0;
    for (int m = 0; m < matrix.num_modalities; ++m)
        for (int c = 0; c < matrix.num_classes; ++c)
            if (matrix.initialized(m, c)) {
                ++n_init;
                payload.insert(payload.end(), matrix.value[m][c].begin(),
                               matrix.value[m][c].end());
            }
    w.u32(n_init);
    for (int m = 0; m < matrix.num_modalities; ++m)
        for (int c = 0; c < matrix.num_classes; ++c) w.u32(matrix.update_count[m][c]);

    if (payload.empty()) return w.take();  // header-only blob

    if (cfg.bits == 32) {
        for (double v : payload) w.f64(v);
        return w.take();
    }
    const QuantizedPayload q = quantize_upload(payload, cfg);
    BitPacker packer;
    for (uint32_t code : q.levels) packer.push(code, cfg.bits);
    const std::vector<uint8_t> packed = packer.finish();
    w.bytes(packed.data(), packed.size());
    w.f64(q.lo);
    w.f64(q.hi);
    return w.take();
}

PrototypeMatrix deserialize_collection(const std::vector<uint8_t>& blob) {
    ByteReader r(blob);
    r.expect_magic(kCollectionMagic);
    const int M = static_cast<int>(r.u32());
    const int C = static_cast<int>(r.u32());
    const int d = static_cast<int>(r.u32());
    const int bits = static_cast<int>(r.u32());
    const bool norm = r.u8() != 0;
    if (M < 0 || C < 0 || d < 0 || bits < 2 || bits > 32)
        throw std::runtime_error("collection blob: bad header");
    const uint32_t n_init = r.u32();

    PrototypeMatrix matrix(M, C, d, norm);
    std::vector<std::pair<int, int>> init_cells;
    for (int m = 0; m < M; ++m)
        for (int c = 0; c < C; ++c) {
            matrix.update_count[m][c] = r.u32();
            if (matrix.update_count[m][c] > 0) init_cells.emplace_back(m, c);
        }
    if (init_cells.size() != n_init) throw std::runtime_error("collection blob: count mismatch");
    if (init_cells.empty()) {
        if (!r.done()) throw std::runtime_error("collection blob: trailing bytes");
        return matrix;
    }

    const size_t n_comp = init_cells.size() * static_cast<size_t>(d);
    std::vector<double> payload(n_comp);
    if (bits == 32) {
        for (auto& v : payload) v = r.f64();
    } else {
        const size_t packed_bytes = (n_comp * bits + 7) / 8;
        if (r.remaining() != packed_bytes + 16)
            throw std::runtime_error("collection blob: payload size mismatch");
        std::vector<uint8_t> packed(packed_bytes);
        for (auto& b : packed) b = r.u8();
        const double lo = r.f64();
        const double hi = r.f64();
        BitUnpacker unpacker(packed.data(), packed.size());
        const double span = hi - lo;
        const double step =
            span == 0.0 ? 0.0 : span / static_cast<double>((1u << bits) - 1u);
        for (auto& v : payload) v = lo + unpacker.pull(bits) * step;
    }
    if (!r.done()) throw std::runtime_error("collection blob: trailing bytes");

    size_t off = 0;
    for (const auto& [m, c] : init_cells) {
        std::copy(payload.begin() + off, payload.begin() + off + d, matrix.value[m][c].begin());
        off += d;
    }
    return matrix;
}

uint64_t collection_blob_bits(const PrototypeMatrix& matrix, const QuantizerConfig& cfg) {
    return static_cast<uint64_t>(serialize_collection(matrix, cfg).size()) * 8;
}

}  // namespace mmofl
