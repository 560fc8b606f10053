#include "bdet/network.hpp"

#include <algorithm>
#include <cmath>

#include "bdet/errors.hpp"
#include "bdet/kernels.hpp"
#include "bdet/rng.hpp"

namespace bdet {

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::uint64_t layer_dropout_seed(std::uint64_t pass_seed, int layer_id) {
    return hash_combine(pass_seed, static_cast<std::uint64_t>(layer_id) + 0x5151ULL);
}

namespace {

// Builder that appends conv / bn / activation layers and registers their
// parameters with He fan-in initialization derived from (seed, name).
struct NetBuilder {
    std::vector<Network::Layer> layers;
    ParameterStore* params;
    std::uint64_t seed;
    double dropout_rate;

    int add_conv(int input, const std::string& prefix, int in_ch, int out_ch, int ksize, int stride,
                 int out_scale = -1) {
        Tensor w({out_ch, in_ch, ksize, ksize});
        Rng rng(hash_combine(seed, fnv1a(prefix + ".weight")));
        double stddev = std::sqrt(2.0 / (in_ch * ksize * ksize));
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, stddev);
        params->add({prefix + ".weight", std::move(w), true, Parameter::Kind::Weight});
        params->add({prefix + ".bias", Tensor::zeros({out_ch}), true, Parameter::Kind::Bias});
        Network::Layer l;
        l.kind = Network::Layer::Kind::Conv;
        l.in0 = input;
        l.prefix = prefix;
        l.stride = stride;
        l.out_scale = out_scale;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    int add_bn(int input, const std::string& prefix, int ch) {
        params->add({prefix + ".gamma", Tensor::full({ch}, 1.0), true, Parameter::Kind::Gamma});
        params->add({prefix + ".beta", Tensor::zeros({ch}), true, Parameter::Kind::Beta});
        params->add({prefix + ".running_mean", Tensor::zeros({ch}), false, Parameter::Kind::RunningStat});
        params->add({prefix + ".running_var", Tensor::full({ch}, 1.0), false, Parameter::Kind::RunningStat});
        Network::Layer l;
        l.kind = Network::Layer::Kind::BatchNorm;
        l.in0 = input;
        l.prefix = prefix;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    int add_lrelu(int input) {
        Network::Layer l;
        l.kind = Network::Layer::Kind::LeakyRelu;
        l.in0 = input;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    int add_dropout(int input) {
        Network::Layer l;
        l.kind = Network::Layer::Kind::Dropout;
        l.in0 = input;
        l.rate = dropout_rate;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    int add_upsample(int input, int factor) {
        Network::Layer l;
        l.kind = Network::Layer::Kind::Upsample;
        l.in0 = input;
        l.factor = factor;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    int add_concat(int a, int b) {
        Network::Layer l;
        l.kind = Network::Layer::Kind::Concat;
        l.in0 = a;
        l.in1 = b;
        layers.push_back(l);
        return static_cast<int>(layers.size()) - 1;
    }

    // conv + BN + leaky relu, no dropout (backbone / lateral use)
    int conv_block(int input, const std::string& prefix, int in_ch, int out_ch, int ksize, int stride) {
        int c = add_conv(input, prefix + ".conv", in_ch, out_ch, ksize, stride);
        int b = add_bn(c, prefix + ".bn", out_ch);
        return add_lrelu(b);
    }

    // conv + dropout + BN + leaky relu (head blocks); dropout sits right
    // after the convolution and before the normalization
    int head_block(int input, const std::string& prefix, int in_ch, int out_ch) {
        int c = add_conv(input, prefix + ".conv", in_ch, out_ch, 3, 1);
        int d = add_dropout(c);
        int b = add_bn(d, prefix + ".bn", out_ch);
        return add_lrelu(b);
    }
};

}  // namespace

Network Network::build(const DetectorConfig& config, std::uint64_t seed) {
    if (config.num_classes < 1) throw DataError("detector needs at least one class");
    if (config.strides.size() != config.backbone_channels.size()) {
        throw DataError("backbone_channels must list one width per stride");
    }
    if (config.dropout_layers_per_head < 0) throw DataError("dropout_layers_per_head must be >= 0");
    if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) {
        throw DataError("dropout_rate must be in [0, 1)");
    }

    Network net;
    net.config_ = config;
    net.geom_ = make_grid_geometry(config.input_h, config.input_w, config.strides);
    const int S = net.geom_.num_scales();
    std::vector<int> strides;
    std::vector<int> widths = config.backbone_channels;
    for (const auto& sg : net.geom_.scales) strides.push_back(sg.stride);
    std::sort(widths.begin(), widths.end());  // keep width aligned with ascending stride

    for (int s : strides) {
        if ((s & (s - 1)) != 0) throw DataError("strides must be powers of two, got " + std::to_string(s));
    }

    NetBuilder b;
    b.params = &net.params_;
    b.seed = seed;
    b.dropout_rate = config.dropout_rate;

    // backbone: stem at stride 1, then stride-2 stages; one refine block and a
    // route tap per configured scale
    int cur = b.conv_block(-1, "backbone.stem", 1, config.stem_channels, 3, 1);
    int cur_stride = 1;
    int cur_ch = config.stem_channels;
    int stage = 0;
    std::vector<int> route(static_cast<std::size_t>(S), -1);
    for (int level = 0; level < S; ++level) {
        int target_stride = strides[static_cast<std::size_t>(level)];
        int target_ch = widths[static_cast<std::size_t>(level)];
        while (cur_stride < target_stride) {
            cur_stride *= 2;
            int out_ch = (cur_stride == target_stride) ? target_ch : std::min(target_ch, cur_ch * 2);
            cur = b.conv_block(cur, "backbone.down" + std::to_string(stage++), cur_ch, out_ch, 3, 2);
            cur_ch = out_ch;
        }
        cur = b.conv_block(cur, "backbone.refine" + std::to_string(level), cur_ch, target_ch, 3, 1);
        cur_ch = target_ch;
        route[static_cast<std::size_t>(level)] = cur;
    }
    net.backbone_end_ = static_cast<int>(b.layers.size());

    // heads, coarsest scale first, with upsample+concat hand-off to the finer
    const int out_ch = config.out_channels_per_scale();
    net.output_layer_.assign(static_cast<std::size_t>(S), -1);
    int carry = -1;      // lateral tap from the coarser head
    int carry_ch = 0;
    for (int scale = S - 1; scale >= 0; --scale) {
        std::string head = "head" + std::to_string(strides[static_cast<std::size_t>(scale)]);
        int feat = route[static_cast<std::size_t>(scale)];
        int feat_ch = widths[static_cast<std::size_t>(scale)];
        if (carry >= 0) {
            int ratio = strides[static_cast<std::size_t>(scale) + 1] / strides[static_cast<std::size_t>(scale)];
            int lat_ch = std::max(config.head_channels / 2, 1);
            int lat = b.conv_block(carry, head + ".lateral", carry_ch, lat_ch, 1, 1);
            int up = b.add_upsample(lat, ratio);
            feat = b.add_concat(up, feat);
            feat_ch += lat_ch;
        }
        int tap = feat, tap_ch = feat_ch;
        int x = feat, x_ch = feat_ch;
        for (int blk = 0; blk < config.dropout_layers_per_head; ++blk) {
            x = b.head_block(x, head + ".block" + std::to_string(blk), x_ch, config.head_channels);
            x_ch = config.head_channels;
            if (blk == 0) {
                tap = x;
                tap_ch = x_ch;
            }
        }
        net.output_layer_[static_cast<std::size_t>(scale)] = b.add_conv(x, head + ".out", x_ch, out_ch, 1, 1, scale);
        carry = tap;
        carry_ch = tap_ch;
    }

    net.layers_ = std::move(b.layers);
    return net;
}

std::size_t Network::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.trainable) n += p.tensor.numel();
    }
    return n;
}

void Network::check_image(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != config_.input_h || image.dim(2) != config_.input_w) {
        throw DataError("image shape " + image.shape_str() + " does not match configured input [1," +
                        std::to_string(config_.input_h) + "," + std::to_string(config_.input_w) + "]");
    }
}

void Network::eval_layer_range(std::vector<Tensor>& values, const Tensor& image, int from, int to, ForwardMode mode,
                               std::uint64_t pass_seed) const {
    auto input_of = [&](int id) -> const Tensor& { return id < 0 ? image : values[static_cast<std::size_t>(id)]; };
    for (int li = from; li < to; ++li) {
        const Layer& l = layers_[static_cast<std::size_t>(li)];
        Tensor& out = values[static_cast<std::size_t>(li)];
        switch (l.kind) {
            case Layer::Kind::Conv:
                out = conv2d_forward(input_of(l.in0), params_.at(l.prefix + ".weight").tensor,
                                     params_.at(l.prefix + ".bias").tensor, l.stride, Padding::Same);
                break;
            case Layer::Kind::BatchNorm:
                // inference always normalizes with the running statistics
                out = batch_norm_forward(input_of(l.in0), params_.at(l.prefix + ".gamma").tensor,
                                         params_.at(l.prefix + ".beta").tensor,
                                         params_.at(l.prefix + ".running_mean").tensor,
                                         params_.at(l.prefix + ".running_var").tensor, false, kBatchNormEps, nullptr,
                                         nullptr);
                break;
            case Layer::Kind::LeakyRelu: {
                const Tensor& in = input_of(l.in0);
                Tensor act(in.shape());
                for (std::size_t i = 0; i < in.numel(); ++i) act[i] = in[i] > 0.0 ? in[i] : 0.1 * in[i];
                out = std::move(act);
                break;
            }
            case Layer::Kind::Dropout:
                if (mode == ForwardMode::Stochastic && l.rate > 0.0) {
                    out = dropout_forward(input_of(l.in0), l.rate, layer_dropout_seed(pass_seed, li));
                } else {
                    out = input_of(l.in0);
                }
                break;
            case Layer::Kind::Upsample:
                out = upsample_nearest_forward(input_of(l.in0), l.factor);
                break;
            case Layer::Kind::Concat:
                out = concat_channels_forward(input_of(l.in0), input_of(l.in1));
                break;
        }
    }
}

std::vector<Tensor> Network::forward(const Tensor& image, ForwardMode mode, std::uint64_t pass_seed) const {
    check_image(image);
    std::vector<Tensor> values(layers_.size());
    eval_layer_range(values, image, 0, static_cast<int>(layers_.size()), mode, pass_seed);
    std::vector<Tensor> grids;
    grids.reserve(output_layer_.size());
    for (int id : output_layer_) grids.push_back(values[static_cast<std::size_t>(id)]);
    return grids;
}

std::vector<std::vector<Tensor>> Network::forward_shared_backbone(const Tensor& image, int T,
                                                                  std::uint64_t base_seed) const {
    if (T < 1) throw DataError("forward_shared_backbone requires T >= 1");
    check_image(image);
    std::vector<Tensor> values(layers_.size());
    // the backbone carries no dropout, so one evaluation serves every pass
    eval_layer_range(values, image, 0, backbone_end_, ForwardMode::Deterministic, 0);

    std::vector<std::vector<Tensor>> passes;
    passes.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        std::uint64_t pass_seed = base_seed + static_cast<std::uint64_t>(t);
        eval_layer_range(values, image, backbone_end_, static_cast<int>(layers_.size()), ForwardMode::Stochastic,
                         pass_seed);
        std::vector<Tensor> grids;
        grids.reserve(output_layer_.size());
        for (int id : output_layer_) grids.push_back(values[static_cast<std::size_t>(id)]);
        passes.push_back(std::move(grids));
    }
    return passes;
}

std::vector<Var> Network::forward_on_tape(Tape& tape, const Tensor& image, bool stochastic, std::uint64_t pass_seed,
                                          std::vector<BnBatchStats>* bn_stats) const {
    check_image(image);
    Var img = tape.constant(image);
    std::vector<Var> values(layers_.size());
    auto input_of = [&](int id) -> const Var& { return id < 0 ? img : values[static_cast<std::size_t>(id)]; };
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const Layer& l = layers_[li];
        switch (l.kind) {
            case Layer::Kind::Conv:
                values[li] = conv2d(input_of(l.in0), tape.parameter(params_.at(l.prefix + ".weight")),
                                    tape.parameter(params_.at(l.prefix + ".bias")), l.stride, Padding::Same);
                break;
            case Layer::Kind::BatchNorm: {
                Tensor bmean, bvar;
                values[li] = batch_norm(input_of(l.in0), tape.parameter(params_.at(l.prefix + ".gamma")),
                                        tape.parameter(params_.at(l.prefix + ".beta")),
                                        params_.at(l.prefix + ".running_mean").tensor,
                                        params_.at(l.prefix + ".running_var").tensor, true, &bmean, &bvar);
                if (bn_stats) bn_stats->push_back({l.prefix, std::move(bmean), std::move(bvar)});
                break;
            }
            case Layer::Kind::LeakyRelu:
                values[li] = leaky_relu(input_of(l.in0), 0.1);
                break;
            case Layer::Kind::Dropout:
                if (stochastic && l.rate > 0.0) {
                    values[li] = dropout(input_of(l.in0), l.rate, layer_dropout_seed(pass_seed, static_cast<int>(li)));
                } else {
                    values[li] = input_of(l.in0);
                }
                break;
            case Layer::Kind::Upsample:
                values[li] = upsample_nearest(input_of(l.in0), l.factor);
                break;
            case Layer::Kind::Concat:
                values[li] = concat_channels(input_of(l.in0), input_of(l.in1));
                break;
        }
    }
    std::vector<Var> grids;
    grids.reserve(output_layer_.size());
    for (int id : output_layer_) grids.push_back(values[static_cast<std::size_t>(id)]);
    return grids;
}

std::vector<std::string> adapt_parameters(const ParameterStore& src, const DetectorConfig& src_config,
                                          ParameterStore& dst, const DetectorConfig& dst_config) {
    const GridLayout src_layout = src_config.grid_layout();
    const GridLayout dst_layout = dst_config.grid_layout();
    std::vector<std::string> widened;
    for (auto& p : dst) {
        if (!src.contains(p.name)) throw DataError("adapt_parameters: source is missing " + p.name);
        const Parameter& s = src.at(p.name);
        if (s.tensor.same_shape(p.tensor)) {
            p.tensor = s.tensor;
            continue;
        }
        // only the per-scale output convolutions may change shape, and only by
        // gaining the log-variance entries
        bool is_out = p.name.find(".out.") != std::string::npos;
        if (!is_out || src_layout.aleatoric || !dst_layout.aleatoric) {
            throw DataError("adapt_parameters: incompatible shapes for " + p.name + ": " + s.tensor.shape_str() +
                            " vs " + p.tensor.shape_str());
        }
        const int e_src = src_layout.entries(), e_dst = dst_layout.entries();
        Tensor grown = Tensor::zeros(p.tensor.shape());
        const std::size_t row = p.tensor.numel() / static_cast<std::size_t>(p.tensor.dim(0));
        for (int prior = 0; prior < kPriorsPerScale; ++prior) {
            for (int j = 0; j < e_dst; ++j) {
                int sj;
                if (j < 4) {
                    sj = j;  // regression entries
                } else if (j < 8) {
                    continue;  // new log-variance rows stay zero
                } else {
                    sj = j - 4;  // objectness and class entries
                }
                std::size_t dst_off = static_cast<std::size_t>(prior * e_dst + j) * row;
                std::size_t src_off = static_cast<std::size_t>(prior * e_src + sj) * row;
                std::copy(s.tensor.data() + src_off, s.tensor.data() + src_off + row, grown.data() + dst_off);
            }
        }
        p.tensor = std::move(grown);
        widened.push_back(p.name);
    }
    return widened;
}

}  // namespace bdet
