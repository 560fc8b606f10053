#include "bdet/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <tuple>

#include "bdet/errors.hpp"
#include "bdet/textio.hpp"

namespace bdet {

std::vector<Detection> decode_all(const std::vector<SummaryGrid>& grids, const GridGeometry& geom,
                                  const std::vector<PriorBox>& priors, double score_threshold,
                                  const std::string& image_id) {
    if (score_threshold < 0.0 || score_threshold > 1.0) throw DataError("score threshold must be in [0, 1]");
    if (static_cast<int>(grids.size()) != geom.num_scales()) {
        throw DataError("decode_all: summary grid count does not match geometry");
    }
    std::vector<Detection> out;
    for (const auto& grid : grids) {
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(grid.scale_index)];
        for (int prior = 0; prior < grid.priors; ++prior) {
            int global_id = grid.scale_index * kPriorsPerScale + prior;
            const PriorBox& pb = priors[static_cast<std::size_t>(global_id)];
            for (int cy = 0; cy < grid.h; ++cy) {
                for (int cx = 0; cx < grid.w; ++cx) {
                    const SlotSummary& s = grid.at(prior, cy, cx);
                    int best_class = 0;
                    for (std::size_t c = 1; c < s.cls_prob.size(); ++c) {
                        if (s.cls_prob[c] > s.cls_prob[static_cast<std::size_t>(best_class)]) {
                            best_class = static_cast<int>(c);
                        }
                    }
                    double class_prob = s.cls_prob[static_cast<std::size_t>(best_class)];
                    double score = s.obj_prob * class_prob;
                    if (score < score_threshold) continue;
                    Detection d;
                    d.bbox = decode_box(s.mean, cx, cy, pb, sg.stride);
                    d.class_id = best_class;
                    d.score = score;
                    d.objectness = s.obj_prob;
                    d.class_prob = class_prob;
                    d.aleatoric_var = s.aleatoric;
                    d.epistemic_var = s.epistemic;
                    d.total_var = s.total;
                    d.class_mi = s.cls_mi;
                    d.objectness_mi = s.obj_mi;
                    d.image_id = image_id;
                    d.scale_index = grid.scale_index;
                    d.cell_y = cy;
                    d.cell_x = cx;
                    d.prior_index = prior;
                    d.global_prior_id = global_id;
                    out.push_back(std::move(d));
                }
            }
        }
    }
    std::sort(out.begin(), out.end(), detection_order);
    return out;
}

bool detection_order(const Detection& a, const Detection& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.scale_index, a.cell_y, a.cell_x, a.prior_index) <
           std::tie(b.scale_index, b.cell_y, b.cell_x, b.prior_index);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, const NmsOptions& opts) {
    if (opts.iou_threshold <= 0.0 || opts.iou_threshold > 1.0) {
        throw DataError("nms iou threshold must be in (0, 1]");
    }
    std::vector<Detection> sorted = dets;
    if (opts.variance_aware) {
        std::sort(sorted.begin(), sorted.end(), [&](const Detection& a, const Detection& b) {
            double ka = a.score * std::exp(-opts.variance_weight * a.total_reg_var());
            double kb = b.score * std::exp(-opts.variance_weight * b.total_reg_var());
            if (ka != kb) return ka > kb;
            return detection_order(a, b);
        });
    } else {
        std::sort(sorted.begin(), sorted.end(), detection_order);
    }

    std::vector<Detection> kept;
    for (const Detection& d : sorted) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.image_id != d.image_id || k.class_id != d.class_id) continue;
            if (iou(k.bbox, d.bbox) > opts.iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

namespace {

constexpr const char* kCsvHeader =
    "image,class,score,objectness,class_prob,cx,cy,w,h,"
    "alea_x,alea_y,alea_w,alea_h,epi_x,epi_y,epi_w,epi_h,total_x,total_y,total_w,total_h,"
    "cls_mi,obj_mi,scale,cell_y,cell_x,prior,global_prior";

}  // namespace

void write_detections_csv_header(std::ostream& os) { os << kCsvHeader << "\n"; }

void write_detections_csv(std::ostream& os, const std::vector<Detection>& dets) {
    for (const Detection& d : dets) {
        os << d.image_id << ',' << d.class_id << ',' << format_double(d.score) << ','
           << format_double(d.objectness) << ',' << format_double(d.class_prob) << ',' << format_double(d.bbox.cx)
           << ',' << format_double(d.bbox.cy) << ',' << format_double(d.bbox.w) << ',' << format_double(d.bbox.h);
        for (double v : d.aleatoric_var) os << ',' << format_double(v);
        for (double v : d.epistemic_var) os << ',' << format_double(v);
        for (double v : d.total_var) os << ',' << format_double(v);
        os << ',' << format_double(d.class_mi) << ',' << format_double(d.objectness_mi) << ',' << d.scale_index << ','
           << d.cell_y << ',' << d.cell_x << ',' << d.prior_index << ',' << d.global_prior_id << '\n';
    }
}

void write_detections_jsonl(std::ostream& os, const std::vector<Detection>& dets) {
    for (const Detection& d : dets) {
        os << "{\"image\":\"" << d.image_id << "\",\"class\":" << d.class_id << ",\"score\":" << format_double(d.score)
           << ",\"objectness\":" << format_double(d.objectness) << ",\"class_prob\":" << format_double(d.class_prob)
           << ",\"box\":[" << format_double(d.bbox.cx) << ',' << format_double(d.bbox.cy) << ','
           << format_double(d.bbox.w) << ',' << format_double(d.bbox.h) << "]"
           << ",\"aleatoric\":[" << format_double(d.aleatoric_var[0]) << ',' << format_double(d.aleatoric_var[1])
           << ',' << format_double(d.aleatoric_var[2]) << ',' << format_double(d.aleatoric_var[3]) << "]"
           << ",\"epistemic\":[" << format_double(d.epistemic_var[0]) << ',' << format_double(d.epistemic_var[1])
           << ',' << format_double(d.epistemic_var[2]) << ',' << format_double(d.epistemic_var[3]) << "]"
           << ",\"cls_mi\":" << format_double(d.class_mi) << ",\"obj_mi\":" << format_double(d.objectness_mi)
           << ",\"slot\":[" << d.scale_index << ',' << d.cell_y << ',' << d.cell_x << ',' << d.prior_index << "]"
           << "}\n";
    }
}

std::vector<Detection> read_detections_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("detections csv: missing header");
    if (line != kCsvHeader) throw DataError("detections csv: unexpected header");
    std::vector<Detection> out;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 28) {
            throw DataError("detections csv line " + std::to_string(lineno) + ": expected 28 fields, got " +
                            std::to_string(f.size()));
        }
        Detection d;
        std::size_t k = 0;
        d.image_id = f[k++];
        d.class_id = std::stoi(f[k++]);
        d.score = std::stod(f[k++]);
        d.objectness = std::stod(f[k++]);
        d.class_prob = std::stod(f[k++]);
        d.bbox.cx = std::stod(f[k++]);
        d.bbox.cy = std::stod(f[k++]);
        d.bbox.w = std::stod(f[k++]);
        d.bbox.h = std::stod(f[k++]);
        for (int i = 0; i < 4; ++i) d.aleatoric_var[static_cast<std::size_t>(i)] = std::stod(f[k++]);
        for (int i = 0; i < 4; ++i) d.epistemic_var[static_cast<std::size_t>(i)] = std::stod(f[k++]);
        for (int i = 0; i < 4; ++i) d.total_var[static_cast<std::size_t>(i)] = std::stod(f[k++]);
        d.class_mi = std::stod(f[k++]);
        d.objectness_mi = std::stod(f[k++]);
        d.scale_index = std::stoi(f[k++]);
        d.cell_y = std::stoi(f[k++]);
        d.cell_x = std::stoi(f[k++]);
        d.prior_index = std::stoi(f[k++]);
        d.global_prior_id = std::stoi(f[k++]);
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace bdet
