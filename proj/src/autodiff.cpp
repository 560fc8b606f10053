#include "bdet/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "bdet/errors.hpp"

namespace bdet {

int ParameterStore::add(Parameter p) {
    if (index_.count(p.name)) throw DataError("duplicate parameter name: " + p.name);
    int id = static_cast<int>(params_.size());
    index_[p.name] = id;
    params_.push_back(std::move(p));
    return id;
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return params_[static_cast<std::size_t>(it->second)];
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return params_[static_cast<std::size_t>(it->second)];
}

std::size_t ParameterStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const Parameter& p) {
    Var v = leaf(p.tensor, p.trainable);
    named_leaves_.emplace_back(p.name, v.id);
    return v;
}

int Tape::emit(const char* op, std::vector<int> parents, Tensor value, BackwardFn fn) {
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.value = std::move(value);
    for (int p : n.parents) {
        if (nodes_[static_cast<std::size_t>(p)].requires_grad) {
            n.requires_grad = true;
            break;
        }
    }
    if (n.requires_grad) n.backward_fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Tape::value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

Tensor& Tape::grad_accum(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

Tensor Tape::gradient(const Var& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
}

void Tape::backward(const Var& loss) {
    if (loss.tape != this) throw DataError("backward: loss var belongs to a different tape");
    const Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (ln.value.numel() != 1) {
        throw DataError("backward requires a scalar loss, got shape " + ln.value.shape_str());
    }
    grad_accum(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.empty() || !n.backward_fn) continue;
        n.backward_fn(*this, id);
    }
}

std::map<std::string, Tensor> Tape::parameter_gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_leaves_) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        out[name] = n.grad.empty() ? Tensor::zeros(n.value.shape()) : n.grad;
    }
    return out;
}

namespace {

Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape != b.tape) throw DataError("operands belong to different tapes");
    return *a.tape;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value())) {
        throw DataError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                        b.value().shape_str());
    }
}

// Elementwise unary op with a pointwise derivative computed from (x, y).
template <typename FwdF, typename DerF>
Var unary_elementwise(const char* name, const Var& x, FwdF f, DerF dfdx) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
    require_finite(out, name);
    int xid = x.id;
    int id = t.emit(name, {xid}, std::move(out), [xid, dfdx](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& xval = tp.value_of(xid);
        const Tensor& yval = tp.value_of(self);
        Tensor& gx = tp.grad_accum(xid);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * dfdx(xval[i], yval[i]);
    });
    return Var{&t, id};
}

}  // namespace

Var vsigmoid(const Var& x) {
    return unary_elementwise("sigmoid", x, [](double v) { return sigmoid(v); },
                             [](double, double y) { return y * (1.0 - y); });
}

Var vexp(const Var& x) {
    return unary_elementwise("exp", x, [](double v) { return std::exp(v); },
                             [](double, double y) { return y; });
}

Var vlog(const Var& x) {
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        if (!(xv[i] > 0.0)) throw NumericError("log of non-positive value " + std::to_string(xv[i]));
    }
    return unary_elementwise("log", x, [](double v) { return std::log(v); },
                             [](double v, double) { return 1.0 / v; });
}

Var leaky_relu(const Var& x, double alpha) {
    return unary_elementwise("leaky_relu", x, [alpha](double v) { return v > 0.0 ? v : alpha * v; },
                             [alpha](double v, double) { return v > 0.0 ? 1.0 : alpha; });
}

// Straight-through inside [lo, hi], zero gradient outside.
Var vclip(const Var& x, double lo, double hi) {
    if (lo > hi) throw DataError("clip: lo > hi");
    return unary_elementwise("clip", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
                             [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var vadd(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b);
    check_same_shape(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    require_finite(out, "add");
    int aid = a.id, bid = b.id;
    int id = t.emit("add", {aid, bid}, std::move(out), [aid, bid](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.requires_grad(aid)) {
            Tensor& ga = tp.grad_accum(aid);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor& gb = tp.grad_accum(bid);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
    return Var{&t, id};
}

Var vsub(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b);
    check_same_shape(a, b, "sub");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
    require_finite(out, "sub");
    int aid = a.id, bid = b.id;
    int id = t.emit("sub", {aid, bid}, std::move(out), [aid, bid](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.requires_grad(aid)) {
            Tensor& ga = tp.grad_accum(aid);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor& gb = tp.grad_accum(bid);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
    return Var{&t, id};
}

Var vmul(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b);
    check_same_shape(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    require_finite(out, "mul");
    int aid = a.id, bid = b.id;
    int id = t.emit("mul", {aid, bid}, std::move(out), [aid, bid](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        const Tensor& av2 = tp.value_of(aid);
        const Tensor& bv2 = tp.value_of(bid);
        if (tp.requires_grad(aid)) {
            Tensor& ga = tp.grad_accum(aid);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor& gb = tp.grad_accum(bid);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
        }
    });
    return Var{&t, id};
}

Var vscale(const Var& a, double c) {
    return unary_elementwise("scale", a, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var vshift(const Var& a, double c) {
    return unary_elementwise("shift", a, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var vsum(const Var& a) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
    Tensor out = Tensor::scalar(s);
    require_finite(out, "sum");
    int aid = a.id;
    int id = t.emit("sum", {aid}, std::move(out), [aid](Tape& tp, int self) {
        double g = tp.grad_of(self)[0];
        Tensor& ga = tp.grad_accum(aid);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
    return Var{&t, id};
}

Var vmean(const Var& a) { return vscale(vsum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var conv2d(const Var& input, const Var& kernel, const Var& bias, int stride, Padding pad) {
    Tape& t = same_tape(input, kernel);
    same_tape(kernel, bias);
    Tensor out = conv2d_forward(input.value(), kernel.value(), bias.value(), stride, pad);
    require_finite(out, "conv2d output");
    int in_id = input.id, k_id = kernel.id, b_id = bias.id;
    int id = t.emit("conv2d", {in_id, k_id, b_id}, std::move(out), [in_id, k_id, b_id, stride, pad](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        conv2d_backward(tp.value_of(in_id), tp.value_of(k_id), stride, pad, g, tp.grad_accum(in_id),
                        tp.grad_accum(k_id), tp.grad_accum(b_id));
    });
    return Var{&t, id};
}

Var batch_norm(const Var& input, const Var& gamma, const Var& beta, const Tensor& running_mean,
               const Tensor& running_var, bool training, Tensor* batch_mean_out, Tensor* batch_var_out) {
    Tape& t = same_tape(input, gamma);
    same_tape(gamma, beta);
    Tensor mean, var;
    Tensor out = batch_norm_forward(input.value(), gamma.value(), beta.value(), running_mean, running_var, training,
                                    kBatchNormEps, &mean, &var);
    require_finite(out, "batch_norm output");
    if (batch_mean_out) *batch_mean_out = mean;
    if (batch_var_out) *batch_var_out = var;
    int x_id = input.id, g_id = gamma.id, b_id = beta.id;
    int id = t.emit("batch_norm", {x_id, g_id, b_id}, std::move(out),
                    [x_id, g_id, b_id, mean, var, training](Tape& tp, int self) {
                        const Tensor& g = tp.grad_of(self);
                        batch_norm_backward(tp.value_of(x_id), tp.value_of(g_id), mean, var, training, kBatchNormEps,
                                            g, tp.grad_accum(x_id), tp.grad_accum(g_id), tp.grad_accum(b_id));
                    });
    return Var{&t, id};
}

Var softmax_lastdim(const Var& logits) {
    Tape& t = *logits.tape;
    Tensor out = softmax_lastdim_forward(logits.value());
    int in_id = logits.id;
    int id = t.emit("softmax", {in_id}, std::move(out), [in_id](Tape& tp, int self) {
        softmax_lastdim_backward(tp.value_of(self), tp.grad_of(self), tp.grad_accum(in_id));
    });
    return Var{&t, id};
}

Var dropout(const Var& input, double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw DataError("dropout rate must be in [0, 1), got " + std::to_string(rate));
    if (rate == 0.0) return input;
    Tape& t = *input.tape;
    Tensor out = dropout_forward(input.value(), rate, seed);
    int in_id = input.id;
    int id = t.emit("dropout", {in_id}, std::move(out), [in_id, rate, seed](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        Tensor& gi = tp.grad_accum(in_id);
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * dropout_keep_factor(seed, i, rate);
    });
    return Var{&t, id};
}

Var upsample_nearest(const Var& input, int factor) {
    Tape& t = *input.tape;
    Tensor out = upsample_nearest_forward(input.value(), factor);
    int in_id = input.id;
    std::vector<int> in_shape = input.value().shape();
    int id = t.emit("upsample", {in_id}, std::move(out), [in_id, factor, in_shape](Tape& tp, int self) {
        upsample_nearest_backward(in_shape, factor, tp.grad_of(self), tp.grad_accum(in_id));
    });
    return Var{&t, id};
}

Var concat_channels(const Var& a, const Var& b) {
    Tape& t = same_tape(a, b);
    Tensor out = concat_channels_forward(a.value(), b.value());
    int aid = a.id, bid = b.id;
    std::size_t na = a.value().numel();
    int id = t.emit("concat", {aid, bid}, std::move(out), [aid, bid, na](Tape& tp, int self) {
        const Tensor& g = tp.grad_of(self);
        if (tp.requires_grad(aid)) {
            Tensor& ga = tp.grad_accum(aid);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(bid)) {
            Tensor& gb = tp.grad_accum(bid);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[na + i];
        }
    });
    return Var{&t, id};
}

Var gather(const Var& input, std::vector<int> flat_indices) {
    Tape& t = *input.tape;
    const Tensor& iv = input.value();
    Tensor out({static_cast<int>(flat_indices.size())});
    for (std::size_t i = 0; i < flat_indices.size(); ++i) {
        int idx = flat_indices[i];
        if (idx < 0 || static_cast<std::size_t>(idx) >= iv.numel()) {
            throw DataError("gather index out of range: " + std::to_string(idx));
        }
        out[i] = iv[static_cast<std::size_t>(idx)];
    }
    int in_id = input.id;
    int id = t.emit("gather", {in_id}, std::move(out),
                    [in_id, indices = std::move(flat_indices)](Tape& tp, int self) {
                        const Tensor& g = tp.grad_of(self);
                        Tensor& gi = tp.grad_accum(in_id);
                        for (std::size_t i = 0; i < indices.size(); ++i) {
                            gi[static_cast<std::size_t>(indices[i])] += g[i];
                        }
                    });
    return Var{&t, id};
}

Var bce_with_logits_sum(const Var& logits, Tensor targets, Tensor weights) {
    Tape& t = *logits.tape;
    const Tensor& z = logits.value();
    if (!z.same_shape(targets) || !z.same_shape(weights)) {
        throw DataError("bce_with_logits: logits/targets/weights shape mismatch");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
        double zi = z[i];
        loss += weights[i] * (std::max(zi, 0.0) - zi * targets[i] + std::log1p(std::exp(-std::abs(zi))));
    }
    Tensor out = Tensor::scalar(loss);
    require_finite(out, "bce_with_logits");
    int z_id = logits.id;
    int id = t.emit("bce_with_logits", {z_id}, std::move(out),
                    [z_id, targets = std::move(targets), weights = std::move(weights)](Tape& tp, int self) {
                        double g = tp.grad_of(self)[0];
                        const Tensor& zv = tp.value_of(z_id);
                        Tensor& gz = tp.grad_accum(z_id);
                        for (std::size_t i = 0; i < zv.numel(); ++i) {
                            gz[i] += g * weights[i] * (sigmoid(zv[i]) - targets[i]);
                        }
                    });
    return Var{&t, id};
}

Var cross_entropy_logits(const Var& logits, int true_index) {
    Tape& t = *logits.tape;
    const Tensor& z = logits.value();
    if (z.rank() != 1) throw DataError("cross_entropy_logits expects a 1-d logit vector");
    if (true_index < 0 || static_cast<std::size_t>(true_index) >= z.numel()) {
        throw DataError("cross_entropy_logits: class index out of range");
    }
    double mx = z[0];
    for (std::size_t i = 1; i < z.numel(); ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) sum += std::exp(z[i] - mx);
    double loss = mx + std::log(sum) - z[static_cast<std::size_t>(true_index)];
    Tensor out = Tensor::scalar(loss);
    require_finite(out, "cross_entropy_logits");
    int z_id = logits.id;
    int id = t.emit("cross_entropy", {z_id}, std::move(out), [z_id, true_index](Tape& tp, int self) {
        double g = tp.grad_of(self)[0];
        const Tensor& zv = tp.value_of(z_id);
        Tensor p = softmax_lastdim_forward(zv);
        Tensor& gz = tp.grad_accum(z_id);
        for (std::size_t i = 0; i < zv.numel(); ++i) {
            gz[i] += g * (p[i] - (static_cast<int>(i) == true_index ? 1.0 : 0.0));
        }
    });
    return Var{&t, id};
}

Var weight_decay_term(Tape& tape, const std::vector<Var>& weights, double lambda) {
    if (lambda < 0.0) throw DataError("weight decay lambda must be >= 0");
    double acc = 0.0;
    std::vector<int> parents;
    parents.reserve(weights.size());
    for (const Var& w : weights) {
        if (w.tape != &tape) throw DataError("weight_decay_term: var from a different tape");
        parents.push_back(w.id);
        const Tensor& wv = w.value();
        for (std::size_t i = 0; i < wv.numel(); ++i) acc += wv[i] * wv[i];
    }
    Tensor out = Tensor::scalar(0.5 * lambda * acc);
    std::vector<int> parent_copy = parents;
    int id = tape.emit("weight_decay", std::move(parents), std::move(out),
                       [lambda, ids = std::move(parent_copy)](Tape& tp, int self) {
                           double g = tp.grad_of(self)[0];
                           for (int pid : ids) {
                               if (!tp.requires_grad(pid)) continue;
                               const Tensor& wv = tp.value_of(pid);
                               Tensor& gw = tp.grad_accum(pid);
                               for (std::size_t i = 0; i < wv.numel(); ++i) gw[i] += g * lambda * wv[i];
                           }
                       });
    return Var{&tape, id};
}

}  // namespace bdet
