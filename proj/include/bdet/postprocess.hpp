#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "bdet/bayes.hpp"
#include "bdet/geometry.hpp"

namespace bdet {

// Final detection. Variances stay in raw output space; the provenance tuple
// keeps every uncertainty attributable to its prior.
struct Detection {
    BBox bbox;
    int class_id = 0;
    double score = 0.0;       // objectness * class probability
    double objectness = 0.0;
    double class_prob = 0.0;
    std::array<double, 4> aleatoric_var{};
    std::array<double, 4> epistemic_var{};
    std::array<double, 4> total_var{};
    double class_mi = 0.0;
    double objectness_mi = 0.0;

    // provenance
    std::string image_id;
    int scale_index = 0;
    int cell_y = 0, cell_x = 0;
    int prior_index = 0;
    int global_prior_id = 0;

    double total_reg_var() const {
        return total_var[0] + total_var[1] + total_var[2] + total_var[3];
    }
};

// Every slot whose score reaches the threshold becomes a detection; boxes are
// decoded from the mean regression outputs.
std::vector<Detection> decode_all(const std::vector<SummaryGrid>& grids, const GridGeometry& geom,
                                  const std::vector<PriorBox>& priors, double score_threshold,
                                  const std::string& image_id = "");

struct NmsOptions {
    double iou_threshold = 0.5;
    // Experimental ranking that favors boxes with lower total regression
    // variance; off by default.
    bool variance_aware = false;
    double variance_weight = 1.0;
};

// Greedy per-class suppression: boxes sorted by score (ties by provenance),
// a kept box suppresses same-class boxes overlapping it with IoU > threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, const NmsOptions& opts);

// Sort order used for dumps and NMS tie-breaks: image id, then score
// descending, then provenance ascending.
bool detection_order(const Detection& a, const Detection& b);

void write_detections_csv_header(std::ostream& os);
void write_detections_csv(std::ostream& os, const std::vector<Detection>& dets);
void write_detections_jsonl(std::ostream& os, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_csv(std::istream& is);

}  // namespace bdet
