#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bdet/tensor.hpp"

namespace bdet {

// Axis-aligned box, center + extents, in input-image pixels.
struct BBox {
    double cx = 0, cy = 0, w = 0, h = 0;

    double area() const { return w * h; }
    double x0() const { return cx - 0.5 * w; }
    double y0() const { return cy - 0.5 * h; }
    double x1() const { return cx + 0.5 * w; }
    double y1() const { return cy + 0.5 * h; }
};

struct PriorBox {
    double pw = 0, ph = 0;          // pixels
    int scale_index = 0;            // index into GridGeometry::scales
    int prior_index = 0;            // 0..2 within the scale
    int global_id = 0;              // scale_index * 3 + prior_index
};

constexpr int kPriorsPerScale = 3;

struct ScaleGrid {
    int stride = 0;  // input downsampling factor
    int h = 0, w = 0;
};

// Output-grid layout for a fixed input size. Scales are kept in ascending
// stride order (finest grid first), matching the ascending-area ordering of
// the fitted priors.
struct GridGeometry {
    int input_h = 0, input_w = 0;
    std::vector<ScaleGrid> scales;

    int num_scales() const { return static_cast<int>(scales.size()); }
    int total_slots() const;
};

GridGeometry make_grid_geometry(int input_h, int input_w, std::vector<int> strides);

enum class OcclusionLevel : int { None = 0, Low = 1, Mid = 2, Heavy = 3 };

OcclusionLevel occlusion_level_from_fraction(double fraction);

struct GroundTruth {
    BBox bbox;
    int class_id = 0;
    OcclusionLevel occlusion = OcclusionLevel::None;
    bool ignore = false;
};

// One slot of the output grid.
struct SlotRef {
    int scale_index = 0;
    int cell_y = 0, cell_x = 0;
    int prior_index = 0;  // within scale
};

struct Assignment {
    struct Entry {
        int gt_index = 0;
        SlotRef slot;
        int global_prior_id = 0;
    };
    std::vector<Entry> assigned;
    std::vector<int> dropped;  // gt indices that found no free slot
};

double iou(const BBox& a, const BBox& b);

// Raw grid entries -> pixel box. Cell offsets are in grid units; the stride
// maps them to pixels.
BBox decode_box(const std::array<double, 4>& raw, int cell_x, int cell_y, const PriorBox& prior, int stride);

// Inverse of decode_box. The fractional cell position is clamped to
// [1e-6, 1-1e-6] before the logit so boxes on cell borders stay finite.
std::array<double, 4> encode_ground_truth(const BBox& box, int cell_x, int cell_y, const PriorBox& prior, int stride);

// Greedy best-IoU assignment: every ground truth goes to the cell containing
// its center; the (scale, prior) candidate with the highest IoU against the
// prior box centered at the ground-truth center wins, falling through to the
// next best when a slot is taken. Ties break toward the lower global prior id.
Assignment assign_ground_truth(const std::vector<GroundTruth>& gts, const GridGeometry& geom,
                               const std::vector<PriorBox>& priors);

// Lloyd k-means over box sizes under the 1-IoU distance between sizes
// centered at the origin. Deterministic given the seed; returns centroids
// sorted ascending by area. Iteration stops as soon as the objective stops
// improving, so the objective is non-increasing across accepted iterations.
// objective_history, when given, receives the mean 1-IoU after seeding and
// after each accepted iteration.
std::vector<std::pair<double, double>> kmeans_priors(const std::vector<std::pair<double, double>>& boxes, int k,
                                                     int max_iters, std::uint64_t seed,
                                                     std::vector<double>* objective_history = nullptr);

// Distributes k-means centroids over the scales: 3 per scale, smallest areas
// to the finest stride (scale 0).
std::vector<PriorBox> priors_from_sizes(const std::vector<std::pair<double, double>>& sizes, int num_scales);

// 1 - IoU of two sizes centered at the origin.
double size_distance(double w1, double h1, double w2, double h2);

}  // namespace bdet
