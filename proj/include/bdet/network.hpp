#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdet/autodiff.hpp"
#include "bdet/geometry.hpp"
#include "bdet/loss.hpp"
#include "bdet/tensor.hpp"

namespace bdet {

struct DetectorConfig {
    int input_h = 64, input_w = 64;
    int num_classes = 2;
    std::vector<int> strides{4, 8};            // ascending; finest grid first
    int stem_channels = 8;
    std::vector<int> backbone_channels{16, 32};  // feature width per stride level
    int head_channels = 32;
    double dropout_rate = 0.1;
    int dropout_layers_per_head = 3;  // conv blocks per head, each with dropout
    bool aleatoric = false;

    GridLayout grid_layout() const { return GridLayout{kPriorsPerScale, num_classes, aleatoric}; }
    int out_channels_per_scale() const { return grid_layout().channels(); }
};

enum class ForwardMode { Deterministic, Stochastic };

// Per-layer record of batch statistics observed during a training forward;
// the training loop folds them into the running stats afterwards.
struct BnBatchStats {
    std::string prefix;  // parameter prefix, e.g. "backbone.2"
    Tensor mean;
    Tensor var;
};

// Multi-scale convolutional detector. Built once from a config + seed; the
// parameter store is the single source of truth for weights. Inference
// reads parameters only, so concurrent stochastic passes over one built
// network are safe.
class Network {
public:
    struct Layer {
        enum class Kind { Conv, BatchNorm, LeakyRelu, Dropout, Upsample, Concat };
        Kind kind;
        int in0 = -1, in1 = -1;  // producing layer ids; -1 = input image
        std::string prefix;      // parameter prefix for conv/bn layers
        int stride = 1;
        int factor = 1;          // upsample
        double rate = 0.0;       // dropout
        int out_scale = -1;      // >= 0 marks this conv as the output of a scale
    };

    static Network build(const DetectorConfig& config, std::uint64_t seed);

    const DetectorConfig& config() const { return config_; }
    const GridGeometry& geometry() const { return geom_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t trainable_parameter_count() const;

    // Inference forward (batch norm in eval mode). Deterministic mode turns
    // every dropout into the identity; stochastic mode draws masks from
    // (pass_seed, layer id, element).
    std::vector<Tensor> forward(const Tensor& image, ForwardMode mode, std::uint64_t pass_seed = 0) const;

    // T stochastic passes that evaluate the dropout-free backbone once. Pass
    // t uses pass seed base_seed + t, so outputs equal T independent
    // forward() calls exactly.
    std::vector<std::vector<Tensor>> forward_shared_backbone(const Tensor& image, int T,
                                                             std::uint64_t base_seed) const;

    // Training-time forward on a tape: batch norm in train mode, dropout per
    // `stochastic`. Parameters become tape leaves; observed batch statistics
    // are reported through bn_stats.
    std::vector<Var> forward_on_tape(Tape& tape, const Tensor& image, bool stochastic, std::uint64_t pass_seed,
                                     std::vector<BnBatchStats>* bn_stats) const;

    int backbone_layer_count() const { return backbone_end_; }
    int layer_count() const { return static_cast<int>(layers_.size()); }

private:
    void check_image(const Tensor& image) const;
    void eval_layer_range(std::vector<Tensor>& values, const Tensor& image, int from, int to, ForwardMode mode,
                          std::uint64_t pass_seed) const;

    DetectorConfig config_;
    GridGeometry geom_;
    ParameterStore params_;
    std::vector<Layer> layers_;
    std::vector<int> output_layer_; // per scale index
    int backbone_end_ = 0;          // layers below this index form the shared backbone
};

// Derives the dropout seed of one layer from the per-pass seed.
std::uint64_t layer_dropout_seed(std::uint64_t pass_seed, int layer_id);

// Copies parameters from a phase-1 network into a (possibly wider) phase-2
// network: identical names copy through; per-scale output convolutions gain
// zero-initialized log-variance rows when the target is aleatoric and the
// source is not. Returns the list of parameter names that were widened.
std::vector<std::string> adapt_parameters(const ParameterStore& src, const DetectorConfig& src_config,
                                          ParameterStore& dst, const DetectorConfig& dst_config);

}  // namespace bdet
