#include "bdet/loss.hpp"

#include <algorithm>
#include <cmath>

#include "bdet/errors.hpp"
#include "bdet/kernels.hpp"

namespace bdet {

RawBoxOutput extract_raw(const Tensor& grid, const GridLayout& layout, int prior, int cy, int cx) {
    if (grid.rank() != 3 || grid.dim(0) != layout.channels()) {
        throw DataError("grid shape " + grid.shape_str() + " does not match layout with " +
                        std::to_string(layout.channels()) + " channels");
    }
    const int H = grid.dim(1), W = grid.dim(2);
    RawBoxOutput out;
    for (int i = 0; i < 4; ++i) out.reg[static_cast<std::size_t>(i)] = grid[layout.flat_index(prior, layout.reg_entry(i), H, W, cy, cx)];
    if (layout.aleatoric) {
        for (int i = 0; i < 4; ++i) {
            double s = grid[layout.flat_index(prior, layout.log_var_entry(i), H, W, cy, cx)];
            out.log_var[static_cast<std::size_t>(i)] = std::clamp(s, -kLogVarClip, kLogVarClip);
        }
    }
    out.obj_logit = grid[layout.flat_index(prior, layout.obj_entry(), H, W, cy, cx)];
    out.cls_logits.resize(static_cast<std::size_t>(layout.classes));
    for (int c = 0; c < layout.classes; ++c) {
        out.cls_logits[static_cast<std::size_t>(c)] = grid[layout.flat_index(prior, layout.cls_entry(c), H, W, cy, cx)];
    }
    return out;
}

double aleatoric_loc_loss(const std::array<double, 4>& target, const std::array<double, 4>& pred,
                          const std::array<double, 4>& log_var) {
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
        double s = std::clamp(log_var[static_cast<std::size_t>(i)], -kLogVarClip, kLogVarClip);
        double r = target[static_cast<std::size_t>(i)] - pred[static_cast<std::size_t>(i)];
        total += 0.5 * std::exp(-s) * r * r + 0.5 * s;
    }
    return total;
}

double objectness_loss(double y, double logit_value) {
    return std::max(logit_value, 0.0) - logit_value * y + std::log1p(std::exp(-std::abs(logit_value)));
}

double class_loss(const std::vector<double>& one_hot, const std::vector<double>& logits) {
    if (one_hot.size() != logits.size() || logits.empty()) {
        throw DataError("class_loss: one-hot and logits lengths differ");
    }
    int true_index = -1;
    for (std::size_t i = 0; i < one_hot.size(); ++i) {
        if (one_hot[i] == 1.0) {
            if (true_index >= 0) throw DataError("class_loss: one-hot vector has multiple ones");
            true_index = static_cast<int>(i);
        } else if (one_hot[i] != 0.0) {
            throw DataError("class_loss: one-hot entries must be 0 or 1");
        }
    }
    if (true_index < 0) throw DataError("class_loss: one-hot vector has no 1");
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    return mx + std::log(sum) - logits[static_cast<std::size_t>(true_index)];
}

double weight_decay_value(const ParameterStore& params, double lambda) {
    if (lambda < 0.0) throw DataError("weight decay lambda must be >= 0");
    double acc = 0.0;
    for (const auto& p : params) {
        if (!p.trainable || p.kind != Parameter::Kind::Weight) continue;
        for (double v : p.tensor.values()) acc += v * v;
    }
    return 0.5 * lambda * acc;
}

TrainTargets build_targets(const std::vector<GroundTruth>& gts, const GridGeometry& geom,
                           const std::vector<PriorBox>& priors) {
    TrainTargets out;
    out.assignment = assign_ground_truth(gts, geom, priors);
    out.total_slots = geom.total_slots();
    for (const auto& sg : geom.scales) out.obj_targets.push_back(Tensor::zeros({kPriorsPerScale, sg.h, sg.w}));

    for (const auto& e : out.assignment.assigned) {
        const GroundTruth& gt = gts[static_cast<std::size_t>(e.gt_index)];
        const PriorBox& prior = priors[static_cast<std::size_t>(e.global_prior_id)];
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(e.slot.scale_index)];
        TrainTargets::Positive p;
        p.slot = e.slot;
        p.global_prior_id = e.global_prior_id;
        p.class_id = gt.class_id;
        p.gt_index = e.gt_index;
        p.encoded = encode_ground_truth(gt.bbox, e.slot.cell_x, e.slot.cell_y, prior, sg.stride);
        out.positives.push_back(p);
        out.obj_targets[static_cast<std::size_t>(e.slot.scale_index)].at3(e.slot.prior_index, e.slot.cell_y,
                                                                          e.slot.cell_x) = 1.0;
    }
    return out;
}

TotalLoss total_loss(Tape& tape, const std::vector<Var>& raw_grids, const TrainTargets& targets,
                     const std::vector<Var>& decay_weights, const GridLayout& layout, const GridGeometry& geom,
                     const LossOptions& opts) {
    if (static_cast<int>(raw_grids.size()) != geom.num_scales()) {
        throw DataError("total_loss: grid count does not match geometry");
    }
    for (int s = 0; s < geom.num_scales(); ++s) {
        const Tensor& g = raw_grids[static_cast<std::size_t>(s)].value();
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(s)];
        if (g.rank() != 3 || g.dim(0) != layout.channels() || g.dim(1) != sg.h || g.dim(2) != sg.w) {
            throw DataError("total_loss: grid " + g.shape_str() + " does not match geometry scale " +
                            std::to_string(s));
        }
        if (static_cast<int>(targets.obj_targets[static_cast<std::size_t>(s)].dim(0)) != layout.priors) {
            throw DataError("total_loss: target prior count mismatch");
        }
    }
    const bool use_aleatoric = opts.mode == LossMode::Aleatoric;
    if (use_aleatoric && !layout.aleatoric) {
        throw DataError("total_loss: aleatoric mode requires grids with log-variance channels");
    }

    const int n_pos = static_cast<int>(targets.positives.size());

    // localization and classification over assigned slots
    Var loc_sum, cls_sum;
    for (const auto& p : targets.positives) {
        const Var& grid = raw_grids[static_cast<std::size_t>(p.slot.scale_index)];
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(p.slot.scale_index)];
        std::vector<int> reg_idx(4);
        for (int i = 0; i < 4; ++i) {
            reg_idx[static_cast<std::size_t>(i)] =
                static_cast<int>(layout.flat_index(p.slot.prior_index, layout.reg_entry(i), sg.h, sg.w, p.slot.cell_y,
                                                   p.slot.cell_x));
        }
        Var pred = gather(grid, reg_idx);
        Var diff = vsub(pred, tape.constant(Tensor({4}, {p.encoded[0], p.encoded[1], p.encoded[2], p.encoded[3]})));
        Var sq = vmul(diff, diff);
        Var slot_loss;
        if (use_aleatoric) {
            std::vector<int> s_idx(4);
            for (int i = 0; i < 4; ++i) {
                s_idx[static_cast<std::size_t>(i)] =
                    static_cast<int>(layout.flat_index(p.slot.prior_index, layout.log_var_entry(i), sg.h, sg.w,
                                                       p.slot.cell_y, p.slot.cell_x));
            }
            Var s_clipped = vclip(gather(grid, s_idx), -kLogVarClip, kLogVarClip);
            Var attenuated = vmul(sq, vexp(vscale(s_clipped, -1.0)));
            slot_loss = vsum(vscale(vadd(attenuated, s_clipped), 0.5));
        } else {
            slot_loss = vscale(vsum(sq), 0.5);
        }
        loc_sum = loc_sum.valid() ? vadd(loc_sum, slot_loss) : slot_loss;

        std::vector<int> cls_idx(static_cast<std::size_t>(layout.classes));
        for (int c = 0; c < layout.classes; ++c) {
            cls_idx[static_cast<std::size_t>(c)] =
                static_cast<int>(layout.flat_index(p.slot.prior_index, layout.cls_entry(c), sg.h, sg.w, p.slot.cell_y,
                                                   p.slot.cell_x));
        }
        if (p.class_id < 0 || p.class_id >= layout.classes) {
            throw DataError("total_loss: class id " + std::to_string(p.class_id) + " out of range");
        }
        Var ce = cross_entropy_logits(gather(grid, cls_idx), p.class_id);
        cls_sum = cls_sum.valid() ? vadd(cls_sum, ce) : ce;
    }

    Var loc = loc_sum.valid() ? vscale(loc_sum, 1.0 / n_pos) : tape.constant(Tensor::scalar(0.0));
    Var cls = cls_sum.valid() ? vscale(cls_sum, 1.0 / n_pos) : tape.constant(Tensor::scalar(0.0));

    // objectness over every slot of every scale
    const int total_slots = targets.total_slots;
    const int n_neg = total_slots - n_pos;
    double w_pos = 1.0, w_neg = 1.0;
    if (opts.balance_objectness && n_pos > 0 && n_neg > 0) {
        w_pos = static_cast<double>(total_slots) / (2.0 * n_pos);
        w_neg = static_cast<double>(total_slots) / (2.0 * n_neg);
    }
    Var obj_sum;
    for (int s = 0; s < geom.num_scales(); ++s) {
        const Var& grid = raw_grids[static_cast<std::size_t>(s)];
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(s)];
        const Tensor& tgt_grid = targets.obj_targets[static_cast<std::size_t>(s)];
        int n = layout.priors * sg.h * sg.w;
        std::vector<int> obj_idx(static_cast<std::size_t>(n));
        Tensor tgt({n}), wgt({n});
        int k = 0;
        for (int prior = 0; prior < layout.priors; ++prior) {
            for (int cy = 0; cy < sg.h; ++cy) {
                for (int cx = 0; cx < sg.w; ++cx, ++k) {
                    obj_idx[static_cast<std::size_t>(k)] =
                        static_cast<int>(layout.flat_index(prior, layout.obj_entry(), sg.h, sg.w, cy, cx));
                    double y = tgt_grid.at3(prior, cy, cx);
                    tgt[static_cast<std::size_t>(k)] = y;
                    wgt[static_cast<std::size_t>(k)] = y > 0.5 ? w_pos : w_neg;
                }
            }
        }
        Var term = bce_with_logits_sum(gather(grid, obj_idx), std::move(tgt), std::move(wgt));
        obj_sum = obj_sum.valid() ? vadd(obj_sum, term) : term;
    }
    Var obj = vscale(obj_sum, 1.0 / total_slots);

    Var wd = weight_decay_term(tape, decay_weights, opts.lambda);

    Var total = vadd(vadd(vscale(loc, opts.loc_weight), vscale(obj, opts.obj_weight)),
                     vadd(vscale(cls, opts.cls_weight), wd));

    TotalLoss out{total, {}};
    out.breakdown.loc = opts.loc_weight * loc.value()[0];
    out.breakdown.obj = opts.obj_weight * obj.value()[0];
    out.breakdown.cls = opts.cls_weight * cls.value()[0];
    out.breakdown.weight_decay = wd.value()[0];
    out.breakdown.total = total.value()[0];
    out.breakdown.positives = n_pos;
    out.breakdown.negatives = n_neg;
    return out;
}

}  // namespace bdet
