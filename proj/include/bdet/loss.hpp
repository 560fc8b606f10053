#pragma once

#include <array>
#include <vector>

#include "bdet/autodiff.hpp"
#include "bdet/geometry.hpp"
#include "bdet/tensor.hpp"

namespace bdet {

// Log-variance outputs are clipped to this interval before any use;
// exp(+/-40) spans a wide enough dynamic range and keeps the loss finite.
constexpr double kLogVarClip = 40.0;

// Channel layout of one output grid [P*E, H, W]: per prior the entries are
// 4 regression values, optionally 4 log-variances, 1 objectness logit and
// `classes` class logits.
struct GridLayout {
    int priors = kPriorsPerScale;
    int classes = 1;
    bool aleatoric = false;

    int entries() const { return 4 + (aleatoric ? 4 : 0) + 1 + classes; }
    int channels() const { return priors * entries(); }
    int reg_entry(int i) const { return i; }                       // i in 0..3
    int log_var_entry(int i) const { return 4 + i; }               // aleatoric only
    int obj_entry() const { return aleatoric ? 8 : 4; }
    int cls_entry(int c) const { return obj_entry() + 1 + c; }

    std::size_t flat_index(int prior, int entry, int grid_h, int grid_w, int cy, int cx) const {
        (void)grid_h;
        return (static_cast<std::size_t>(prior * entries() + entry) * grid_h + cy) * grid_w + cx;
    }
};

// One slot's raw outputs, unpacked. Log variances arrive already clipped.
struct RawBoxOutput {
    std::array<double, 4> reg{};       // y*_x, y*_y, y*_w, y*_h
    std::array<double, 4> log_var{};   // s_x..s_h (zeros when not predicted)
    double obj_logit = 0;
    std::vector<double> cls_logits;
};

RawBoxOutput extract_raw(const Tensor& grid, const GridLayout& layout, int prior, int cy, int cx);

// ---- scalar likelihood losses ----

// sum_i 0.5*exp(-s_i)*(y_i - f_i)^2 + 0.5*s_i. With s = 0 this is exactly
// 0.5*||y - f||^2. May be negative for s < 0 (it is a log density, not a
// metric).
double aleatoric_loc_loss(const std::array<double, 4>& target, const std::array<double, 4>& pred,
                          const std::array<double, 4>& log_var);

// Binary cross-entropy on the logit, evaluated in the overflow-safe form.
double objectness_loss(double y, double logit_value);

// -log softmax(logits)[true class]; the one-hot vector must contain exactly
// one 1 and zeros elsewhere.
double class_loss(const std::vector<double>& one_hot, const std::vector<double>& logits);

// 0.5 * lambda * sum of squared trainable conv weights. Biases and
// normalization parameters are excluded.
double weight_decay_value(const ParameterStore& params, double lambda);

// ---- combined training loss ----

struct LossBreakdown {
    double loc = 0, obj = 0, cls = 0, weight_decay = 0, total = 0;
    int positives = 0, negatives = 0;
};

enum class LossMode { Baseline, Aleatoric };

struct LossOptions {
    LossMode mode = LossMode::Baseline;
    double lambda = 0.0;
    double loc_weight = 1.0;
    double obj_weight = 1.0;
    double cls_weight = 1.0;
    // Reweights positive/negative objectness examples to equal mass. Off by
    // default: the unbalanced background dominance is part of the studied
    // behavior.
    bool balance_objectness = false;
};

struct TrainTargets {
    struct Positive {
        SlotRef slot;
        int global_prior_id = 0;
        int class_id = 0;
        std::array<double, 4> encoded{};  // y_x, y_y, y_w, y_h
        int gt_index = 0;
    };
    std::vector<Positive> positives;
    std::vector<Tensor> obj_targets;  // per scale, [P,H,W] of {0,1}
    Assignment assignment;
    int total_slots = 0;
};

TrainTargets build_targets(const std::vector<GroundTruth>& gts, const GridGeometry& geom,
                           const std::vector<PriorBox>& priors);

struct TotalLoss {
    Var total;
    LossBreakdown breakdown;
};

// Combines localization (assigned slots only), objectness (all slots),
// classification (assigned slots) and weight decay on a tape. Localization
// and classification are averaged over assigned ground truths, objectness
// over all slots. Baseline mode fixes s = 0 even when the grids carry
// log-variance channels.
TotalLoss total_loss(Tape& tape, const std::vector<Var>& raw_grids, const TrainTargets& targets,
                     const std::vector<Var>& decay_weights, const GridLayout& layout, const GridGeometry& geom,
                     const LossOptions& opts);

}  // namespace bdet
