#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "mmofl/batch.hpp"
#include "mmofl/matrix.hpp"

namespace mmofl {

enum class EncoderKind { Identity, Linear, Mlp1 };
enum class HeadKind { Linear, Mlp1 };

// Shapes of the multimodal model: M modality encoders feeding a head that
// consumes the concatenated d-wide feature blocks and emits C logits.
struct ModelConfig {
    int num_modalities = 0;
    std::vector<int> input_dims;
    int feature_dim = 0;
    int num_classes = 0;
    std::vector<EncoderKind> encoder_kinds;
    HeadKind head_kind = HeadKind::Linear;
    int hidden_dim = 0;  // mlp1 layers only
    // L2-normalize every encoded feature row so live features share the unit
    // sphere with normalized prototype substitutes; override blocks are
    // passed through verbatim either way.
    bool normalize_features = false;

    void validate() const;  // throws std::invalid_argument with the bad field
    size_t encoder_param_count(int m) const;
    size_t head_param_count() const;
    size_t total_param_count() const;
    // identity encoders + linear head + raw features: the loss is convex in
    // the trainable parameters
    bool convex_mode() const;
};

// Per-block flat parameter storage. Block 0 is the head, block m+1 is the
// encoder of modality m. Identity encoders own a zero-length block.
struct ModelParams {
    std::vector<double> head;
    std::vector<std::vector<double>> encoders;

    size_t total_size() const;
    bool same_layout(const ModelParams& o) const;
    bool bitwise_equal(const ModelParams& o) const;
};

enum class FeatureSource { Encoded, ZeroFilled, PrototypeSubstituted };

// All M feature blocks are always present; a missing modality shows up as a
// tagged substitute block, never as an absent one.
struct FeatureBlock {
    std::vector<Matrix> features;       // per modality, N x d
    std::vector<FeatureSource> source;  // per modality
};

struct FeatureOverride {
    Matrix features;  // N x d, used verbatim
    FeatureSource source = FeatureSource::ZeroFilled;
};
// keyed by modality index
using FeatureOverrides = std::map<int, FeatureOverride>;

// Same block layout as ModelParams plus the availability mask that produced
// it; masked blocks are hard zeros. Index 0 (head) is never masked.
struct GradientVector {
    std::vector<double> head;
    std::vector<std::vector<double>> encoders;
    std::vector<bool> block_mask;
};

struct ForwardResult {
    FeatureBlock features;
    Matrix logits;  // N x C
    double loss = 0.0;
};

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer; bit-identical per seed
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

// Mean softmax cross-entropy over the batch. Every modality must either be
// available in the batch or carry an override block.
ForwardResult forward(const ModelConfig& cfg, const ModelParams& params, const RoundBatch& batch,
                      const FeatureOverrides& overrides = {});

// Analytic gradient of the forward loss. `modality_available[m] == false`
// hard-zeroes encoder block m; overridden modalities must be masked (their
// features are constants, no gradient flows into the encoder).
GradientVector backward(const ModelConfig& cfg, const ModelParams& params, const RoundBatch& batch,
                        const FeatureOverrides& overrides, const std::vector<bool>& modality_available);

ModelParams sgd_step(const ModelParams& params, const GradientVector& grad, double eta);

// Element-wise mean; summation runs in ascending client-id order so the
// result does not depend on the order uploads arrive in.
ModelParams average_params(const std::vector<std::pair<int, const ModelParams*>>& uploads);

// Fraction of argmax-correct predictions on a full-modality batch; argmax
// ties break toward the lowest class index.
double predict_accuracy(const ModelConfig& cfg, const ModelParams& params, const RoundBatch& batch);

// Per-sample cross-entropy from logits; single home of the loss formula.
std::vector<double> cross_entropy_rows(const Matrix& logits, const std::vector<int>& labels);

// Flat little-endian f64 blob with magic header and block layout descriptor.
std::vector<uint8_t> serialize_params(const ModelParams& params);
ModelParams deserialize_params(const std::vector<uint8_t>& blob);
uint64_t params_blob_bits(const ModelParams& params);

}  // namespace mmofl
