#include "bdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "bdet/errors.hpp"
#include "bdet/kernels.hpp"
#include "bdet/rng.hpp"

namespace bdet {

int GridGeometry::total_slots() const {
    int n = 0;
    for (const auto& s : scales) n += s.h * s.w * kPriorsPerScale;
    return n;
}

GridGeometry make_grid_geometry(int input_h, int input_w, std::vector<int> strides) {
    if (strides.empty()) throw DataError("grid geometry needs at least one stride");
    std::sort(strides.begin(), strides.end());
    GridGeometry g;
    g.input_h = input_h;
    g.input_w = input_w;
    for (std::size_t i = 0; i < strides.size(); ++i) {
        int s = strides[i];
        if (s < 1) throw DataError("stride must be >= 1");
        if (i > 0 && strides[i] == strides[i - 1]) throw DataError("duplicate stride in pyramid");
        if (input_h % s != 0 || input_w % s != 0) {
            throw DataError("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                            " not divisible by stride " + std::to_string(s));
        }
        g.scales.push_back(ScaleGrid{s, input_h / s, input_w / s});
    }
    return g;
}

OcclusionLevel occlusion_level_from_fraction(double fraction) {
    if (fraction <= 0.10) return OcclusionLevel::None;
    if (fraction <= 0.40) return OcclusionLevel::Low;
    if (fraction <= 0.80) return OcclusionLevel::Mid;
    return OcclusionLevel::Heavy;
}

double iou(const BBox& a, const BBox& b) {
    double ix = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    double iy = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    double inter = ix * iy;
    double uni = a.area() + b.area() - inter;
    return inter / uni;
}

BBox decode_box(const std::array<double, 4>& raw, int cell_x, int cell_y, const PriorBox& prior, int stride) {
    BBox b;
    b.cx = (sigmoid(raw[0]) + cell_x) * stride;
    b.cy = (sigmoid(raw[1]) + cell_y) * stride;
    b.w = prior.pw * std::exp(raw[2]);
    b.h = prior.ph * std::exp(raw[3]);
    return b;
}

std::array<double, 4> encode_ground_truth(const BBox& box, int cell_x, int cell_y, const PriorBox& prior, int stride) {
    double fx = box.cx / stride - cell_x;
    double fy = box.cy / stride - cell_y;
    if (fx < 0.0 || fx > 1.0 || fy < 0.0 || fy > 1.0) {
        throw DataError("box center (" + std::to_string(box.cx) + "," + std::to_string(box.cy) +
                        ") lies outside cell (" + std::to_string(cell_x) + "," + std::to_string(cell_y) +
                        ") at stride " + std::to_string(stride));
    }
    constexpr double kEps = 1e-6;
    fx = std::clamp(fx, kEps, 1.0 - kEps);
    fy = std::clamp(fy, kEps, 1.0 - kEps);
    return {logit(fx), logit(fy), std::log(box.w / prior.pw), std::log(box.h / prior.ph)};
}

Assignment assign_ground_truth(const std::vector<GroundTruth>& gts, const GridGeometry& geom,
                               const std::vector<PriorBox>& priors) {
    if (static_cast<int>(priors.size()) != geom.num_scales() * kPriorsPerScale) {
        throw DataError("expected " + std::to_string(geom.num_scales() * kPriorsPerScale) + " priors, got " +
                        std::to_string(priors.size()));
    }
    Assignment out;
    std::set<std::tuple<int, int, int, int>> taken;  // (scale, cy, cx, prior)
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        const BBox& box = gts[gi].bbox;
        // candidates: (iou, global prior id) over all scales x priors
        std::vector<std::pair<double, int>> candidates;
        candidates.reserve(priors.size());
        for (const PriorBox& p : priors) {
            BBox pb{box.cx, box.cy, p.pw, p.ph};
            candidates.emplace_back(iou(box, pb), p.global_id);
        }
        std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        bool placed = false;
        for (const auto& [score, pid] : candidates) {
            const PriorBox& p = priors[static_cast<std::size_t>(pid)];
            const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(p.scale_index)];
            int cx = std::clamp(static_cast<int>(std::floor(box.cx / sg.stride)), 0, sg.w - 1);
            int cy = std::clamp(static_cast<int>(std::floor(box.cy / sg.stride)), 0, sg.h - 1);
            auto key = std::make_tuple(p.scale_index, cy, cx, p.prior_index);
            if (taken.count(key)) continue;
            taken.insert(key);
            out.assigned.push_back({static_cast<int>(gi), SlotRef{p.scale_index, cy, cx, p.prior_index}, pid});
            placed = true;
            break;
        }
        if (!placed) out.dropped.push_back(static_cast<int>(gi));
    }
    return out;
}

double size_distance(double w1, double h1, double w2, double h2) {
    double inter = std::min(w1, w2) * std::min(h1, h2);
    double uni = w1 * h1 + w2 * h2 - inter;
    return 1.0 - inter / uni;
}

namespace {

double kmeans_objective(const std::vector<std::pair<double, double>>& boxes, const std::vector<int>& labels,
                        const std::vector<std::pair<double, double>>& centroids) {
    double total = 0.0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& c = centroids[static_cast<std::size_t>(labels[i])];
        total += size_distance(boxes[i].first, boxes[i].second, c.first, c.second);
    }
    return total / static_cast<double>(boxes.size());
}

std::vector<int> assign_labels(const std::vector<std::pair<double, double>>& boxes,
                               const std::vector<std::pair<double, double>>& centroids) {
    std::vector<int> labels(boxes.size(), 0);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centroids.size(); ++c) {
            double d = size_distance(boxes[i].first, boxes[i].second, centroids[c].first, centroids[c].second);
            if (d < best) {
                best = d;
                labels[i] = static_cast<int>(c);
            }
        }
    }
    return labels;
}

}  // namespace

std::vector<std::pair<double, double>> kmeans_priors(const std::vector<std::pair<double, double>>& boxes, int k,
                                                     int max_iters, std::uint64_t seed,
                                                     std::vector<double>* objective_history) {
    if (k < 1) throw DataError("kmeans k must be >= 1");
    std::set<std::pair<double, double>> distinct(boxes.begin(), boxes.end());
    if (static_cast<std::size_t>(k) > distinct.size()) {
        throw DataError("kmeans k=" + std::to_string(k) + " exceeds " + std::to_string(distinct.size()) +
                        " distinct box sizes");
    }
    for (const auto& [w, h] : boxes) {
        if (!(w > 0.0) || !(h > 0.0)) throw DataError("kmeans boxes must have positive extents");
    }

    // Several deterministic k-means++ restarts; the best final objective
    // wins. Within a restart the best solution seen so far is kept, so the
    // reported objective sequence is non-increasing even though an
    // intermediate Lloyd step may transiently regress under the 1-IoU metric.
    constexpr int kRestarts = 8;
    std::vector<std::pair<double, double>> best_centroids;
    std::vector<double> best_history;
    double best_final = std::numeric_limits<double>::infinity();

    for (int restart = 0; restart < kRestarts; ++restart) {
        Rng rng(hash_combine(seed, static_cast<std::uint64_t>(restart)));
        // seeding: first centroid uniform, the rest proportional to squared
        // distance to the nearest chosen centroid
        std::vector<std::pair<double, double>> centroids;
        centroids.push_back(boxes[rng.uniform_index(boxes.size())]);
        while (static_cast<int>(centroids.size()) < k) {
            std::vector<double> d2(boxes.size());
            double total = 0.0;
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& c : centroids) {
                    best = std::min(best, size_distance(boxes[i].first, boxes[i].second, c.first, c.second));
                }
                d2[i] = best * best;
                total += d2[i];
            }
            if (total <= 0.0) {
                // all remaining boxes coincide with centroids; pick any unused size
                for (const auto& b : distinct) {
                    if (std::find(centroids.begin(), centroids.end(), b) == centroids.end()) {
                        centroids.push_back(b);
                        break;
                    }
                }
                continue;
            }
            double r = rng.uniform() * total;
            std::size_t pick = boxes.size() - 1;
            double acc = 0.0;
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                acc += d2[i];
                if (r < acc) {
                    pick = i;
                    break;
                }
            }
            centroids.push_back(boxes[pick]);
        }

        std::vector<int> labels = assign_labels(boxes, centroids);
        double run_best = kmeans_objective(boxes, labels, centroids);
        std::vector<std::pair<double, double>> run_best_centroids = centroids;
        std::vector<double> history{run_best};

        for (int iter = 0; iter < max_iters; ++iter) {
            // centroid update: per-cluster mean of w and h
            std::vector<std::pair<double, double>> next(centroids.size(), {0.0, 0.0});
            std::vector<int> counts(centroids.size(), 0);
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                auto& c = next[static_cast<std::size_t>(labels[i])];
                c.first += boxes[i].first;
                c.second += boxes[i].second;
                counts[static_cast<std::size_t>(labels[i])]++;
            }
            for (std::size_t c = 0; c < next.size(); ++c) {
                if (counts[c] > 0) {
                    next[c].first /= counts[c];
                    next[c].second /= counts[c];
                } else {
                    // empty cluster: re-seed from the box farthest from its centroid
                    double worst = -1.0;
                    std::size_t worst_i = 0;
                    for (std::size_t i = 0; i < boxes.size(); ++i) {
                        const auto& cc = centroids[static_cast<std::size_t>(labels[i])];
                        double d = size_distance(boxes[i].first, boxes[i].second, cc.first, cc.second);
                        if (d > worst) {
                            worst = d;
                            worst_i = i;
                        }
                    }
                    next[c] = boxes[worst_i];
                }
            }
            std::vector<int> next_labels = assign_labels(boxes, next);
            double obj = kmeans_objective(boxes, next_labels, next);
            bool converged = next_labels == labels;
            centroids = std::move(next);
            labels = std::move(next_labels);
            if (obj < run_best) {
                run_best = obj;
                run_best_centroids = centroids;
                history.push_back(obj);
            }
            if (converged) break;
        }

        if (run_best < best_final) {
            best_final = run_best;
            best_centroids = std::move(run_best_centroids);
            best_history = std::move(history);
        }
    }

    if (objective_history) *objective_history = best_history;
    std::sort(best_centroids.begin(), best_centroids.end(), [](const auto& a, const auto& b) {
        double aa = a.first * a.second, bb = b.first * b.second;
        if (aa != bb) return aa < bb;
        return a < b;
    });
    return best_centroids;
}

std::vector<PriorBox> priors_from_sizes(const std::vector<std::pair<double, double>>& sizes, int num_scales) {
    if (static_cast<int>(sizes.size()) != num_scales * kPriorsPerScale) {
        throw DataError("prior count " + std::to_string(sizes.size()) + " does not match " +
                        std::to_string(num_scales) + " scales x 3");
    }
    std::vector<std::pair<double, double>> sorted = sizes;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first * a.second < b.first * b.second; });
    std::vector<PriorBox> out;
    out.reserve(sorted.size());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        PriorBox p;
        p.pw = sorted[i].first;
        p.ph = sorted[i].second;
        p.scale_index = static_cast<int>(i) / kPriorsPerScale;
        p.prior_index = static_cast<int>(i) % kPriorsPerScale;
        p.global_id = static_cast<int>(i);
        out.push_back(p);
    }
    return out;
}

}  // namespace bdet
