#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "mmofl/batch.hpp"
#include "mmofl/matrix.hpp"
#include "mmofl/model.hpp"

namespace mmofl {

// One client's class-mean feature vectors for one round; entries exist only
// for classes present in that round's batch.
struct LocalPrototypeSet {
    int client_id = 0;
    int round = 0;
    struct Entry {
        std::vector<double> vec;  // d reals
        int support = 0;          // samples behind the mean
    };
    std::map<std::pair<int, int>, Entry> entries;  // (modality, class) -> entry
};

// Persistent global prototype collection: an M x C grid of d-dim vectors plus
// per-cell update counters. Cells with count 0 are all-zero and count as
// uninitialized.
struct PrototypeMatrix {
    int num_modalities = 0;
    int num_classes = 0;
    int dim = 0;
    bool normalized = false;
    std::vector<std::vector<std::vector<double>>> value;  // [m][c][d]
    std::vector<std::vector<uint32_t>> update_count;      // [m][c]
    std::vector<int> round_of_last_update;                // per modality, -1 if never

    PrototypeMatrix() = default;
    PrototypeMatrix(int M, int C, int d, bool norm);
    bool initialized(int m, int c) const { return update_count[m][c] > 0; }
    bool empty() const;
};

struct QuantizerConfig {
    int bits = 32;  // 32 = full-precision bypass
    void validate() const;
};

struct DelayConfig {
    int interval = 0;  // 0 = prototype collection every round
    void validate() const;
};

// Per-modality occurrence counters driving delayed prototype collection.
struct DelayState {
    std::vector<int> occurrences;
    explicit DelayState(int num_modalities = 0) : occurrences(num_modalities, 0) {}
};

QuantizerConfig full_precision();

// ---- construction ------------------------------------------------------

// Per present class and every modality, the mean encoder feature,
// L2-normalized when enabled. Requires a full-modality batch.
LocalPrototypeSet build_local_prototypes(const ModelConfig& cfg, const ModelParams& params,
                                         const RoundBatch& batch, bool normalize);

// Unweighted mean over contributing clients per (modality, class). With
// normalization enabled a zero-norm mean is dropped instead of normalized.
using TemporalPrototypes = std::map<std::pair<int, int>, std::vector<double>>;
TemporalPrototypes aggregate_temporal(const std::vector<LocalPrototypeSet>& locals,
                                      bool normalize);

// Per-cell running mean over rounds: p <- ((n-1)p + v)/n, counter n. Cells
// absent from the temporal set are untouched.
void update_persistent(PrototypeMatrix& matrix, const TemporalPrototypes& temporal, int round);

// ---- transport ---------------------------------------------------------

struct QuantizedPayload {
    int bits = 32;
    size_t count = 0;
    double lo = 0.0, hi = 0.0;
    std::vector<uint32_t> levels;   // empty at bits == 32
    std::vector<double> raw;        // full-precision bypass payload
    uint64_t bit_count = 0;
    std::vector<double> dequantize() const;
};

// Uniform scalar quantizer over the whole payload: min/max scale, nearest of
// 2^b levels. bit_count = n*b + 2*64 (scale/offset) + 64 (header); b == 32
// bypasses with n*64.
QuantizedPayload quantize_upload(const std::vector<double>& values, const QuantizerConfig& cfg);

// Quantize-roundtrip a local upload in place (all entry vectors form one
// payload); returns transmitted bits including 32 per entry of
// (modality, class, support) metadata.
uint64_t quantize_local_set(LocalPrototypeSet& set, const QuantizerConfig& cfg);

// Occurrence-counting delay gate: increments when modality m is observed by
// at least one full-modality client this round, fires and resets at
// `interval`. interval == 0 always fires on observation.
bool should_run_opc(DelayState& state, const DelayConfig& cfg, int modality, bool observed);

// ---- substitution ------------------------------------------------------

struct SubstituteResult {
    Matrix features;    // N x d
    int fallback_rows = 0;  // rows that hit an uninitialized cell
};

// Row n = persistent prototype of (modality, label n). Uninitialized cells
// substitute zero vectors when fallback is enabled, otherwise throw.
SubstituteResult substitute(const PrototypeMatrix& matrix, const std::vector<int>& labels,
                            int modality, bool fallback_to_zero);

// Collection blob: magic, dims, bits, normalization flag, per-cell update
// counts, then initialized rows (packed big-endian codes, or raw f64 at
// b=32), then payload min/max.
std::vector<uint8_t> serialize_collection(const PrototypeMatrix& matrix,
                                          const QuantizerConfig& cfg);
PrototypeMatrix deserialize_collection(const std::vector<uint8_t>& blob);
uint64_t collection_blob_bits(const PrototypeMatrix& matrix, const QuantizerConfig& cfg);

}  // namespace mmofl
