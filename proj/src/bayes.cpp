#include "bdet/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "bdet/errors.hpp"
#include "bdet/kernels.hpp"
#include "bdet/textio.hpp"

namespace bdet {

std::vector<double> predictive_mean_reg(const std::vector<std::vector<double>>& samples) {
    if (samples.empty()) throw DataError("predictive_mean_reg needs at least one sample");
    const std::size_t dims = samples[0].size();
    // anchored mean: exact when all samples coincide, well conditioned otherwise
    std::vector<double> mean(dims, 0.0);
    for (const auto& s : samples) {
        if (s.size() != dims) throw DataError("predictive_mean_reg: ragged samples");
        for (std::size_t d = 0; d < dims; ++d) mean[d] += s[d] - samples[0][d];
    }
    for (std::size_t d = 0; d < dims; ++d) mean[d] = samples[0][d] + mean[d] / static_cast<double>(samples.size());
    return mean;
}

VarianceDecomposition variance_decomposition(const std::vector<std::vector<double>>& samples,
                                             const std::vector<std::vector<double>>& aleatoric_samples,
                                             bool unbiased) {
    if (samples.empty()) throw DataError("variance_decomposition needs at least one sample");
    if (aleatoric_samples.size() != samples.size()) {
        throw DataError("variance_decomposition: sample counts differ");
    }
    const std::size_t T = samples.size();
    const std::size_t dims = samples[0].size();
    std::vector<double> mean = predictive_mean_reg(samples);

    VarianceDecomposition out;
    out.epistemic.assign(dims, 0.0);
    out.aleatoric.assign(dims, 0.0);
    out.total.assign(dims, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t d = 0; d < dims; ++d) {
            double dev = samples[t][d] - mean[d];
            out.epistemic[d] += dev * dev;
            double a = aleatoric_samples[t][d];
            if (a < 0.0) throw DataError("variance_decomposition: negative aleatoric variance");
            out.aleatoric[d] += a;
        }
    }
    double norm = unbiased && T > 1 ? static_cast<double>(T - 1) : static_cast<double>(T);
    for (std::size_t d = 0; d < dims; ++d) {
        out.epistemic[d] /= norm;
        out.aleatoric[d] /= static_cast<double>(T);
        out.total[d] = out.epistemic[d] + out.aleatoric[d];
    }
    return out;
}

std::vector<double> predictive_cls(const std::vector<std::vector<double>>& prob_samples) {
    if (prob_samples.empty()) throw DataError("predictive_cls needs at least one sample");
    const std::size_t n = prob_samples[0].size();
    std::vector<double> mean(n, 0.0);
    for (const auto& row : prob_samples) {
        if (row.size() != n) throw DataError("predictive_cls: ragged samples");
        double sum = 0.0;
        for (double p : row) sum += p;
        if (std::abs(sum - 1.0) > 1e-6) {
            throw DataError("predictive_cls: sample row sums to " + format_double(sum) + ", not 1");
        }
        for (std::size_t i = 0; i < n; ++i) mean[i] += row[i] - prob_samples[0][i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        mean[i] = prob_samples[0][i] + mean[i] / static_cast<double>(prob_samples.size());
    }
    return mean;
}

double entropy(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v < 0.0) throw DataError("entropy: negative probability " + format_double(v));
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

double mutual_information(const std::vector<std::vector<double>>& prob_samples) {
    if (prob_samples.empty()) throw DataError("mutual_information needs at least one sample");
    const std::size_t n = prob_samples[0].size();
    const double T = static_cast<double>(prob_samples.size());
    // anchored means keep MI at exactly 0 for identical samples
    std::vector<double> mean(n, 0.0);
    const double h0 = entropy(prob_samples[0]);
    double mean_entropy = 0.0;
    for (const auto& row : prob_samples) {
        if (row.size() != n) throw DataError("mutual_information: ragged samples");
        for (std::size_t i = 0; i < n; ++i) mean[i] += row[i] - prob_samples[0][i];
        mean_entropy += entropy(row) - h0;
    }
    for (std::size_t i = 0; i < n; ++i) mean[i] = prob_samples[0][i] + mean[i] / T;
    mean_entropy = h0 + mean_entropy / T;
    double mi = entropy(mean) - mean_entropy;
    return mi < 0.0 ? 0.0 : mi;
}

double mutual_information_binary(const std::vector<double>& prob_samples) {
    std::vector<std::vector<double>> rows;
    rows.reserve(prob_samples.size());
    for (double p : prob_samples) rows.push_back({p, 1.0 - p});
    return mutual_information(rows);
}

namespace {

std::vector<SummaryGrid> aggregate_passes(const Network& net, const std::vector<std::vector<Tensor>>& passes) {
    const GridLayout layout = net.config().grid_layout();
    const GridGeometry& geom = net.geometry();
    const std::size_t T = passes.size();

    std::vector<SummaryGrid> out;
    for (int s = 0; s < geom.num_scales(); ++s) {
        const ScaleGrid& sg = geom.scales[static_cast<std::size_t>(s)];
        SummaryGrid grid;
        grid.scale_index = s;
        grid.h = sg.h;
        grid.w = sg.w;
        grid.priors = layout.priors;
        grid.classes = layout.classes;
        grid.slots.resize(static_cast<std::size_t>(layout.priors) * sg.h * sg.w);

        std::vector<std::vector<double>> reg(T, std::vector<double>(4));
        std::vector<std::vector<double>> alea(T, std::vector<double>(4));
        std::vector<std::vector<double>> cls(T, std::vector<double>(static_cast<std::size_t>(layout.classes)));
        std::vector<double> obj(T);

        for (int prior = 0; prior < layout.priors; ++prior) {
            for (int cy = 0; cy < sg.h; ++cy) {
                for (int cx = 0; cx < sg.w; ++cx) {
                    for (std::size_t t = 0; t < T; ++t) {
                        const Tensor& g = passes[t][static_cast<std::size_t>(s)];
                        RawBoxOutput raw = extract_raw(g, layout, prior, cy, cx);
                        for (int d = 0; d < 4; ++d) {
                            reg[t][static_cast<std::size_t>(d)] = raw.reg[static_cast<std::size_t>(d)];
                            alea[t][static_cast<std::size_t>(d)] =
                                layout.aleatoric ? std::exp(raw.log_var[static_cast<std::size_t>(d)]) : 0.0;
                        }
                        obj[t] = sigmoid(raw.obj_logit);
                        Tensor logits({layout.classes});
                        for (int c = 0; c < layout.classes; ++c) logits[static_cast<std::size_t>(c)] = raw.cls_logits[static_cast<std::size_t>(c)];
                        Tensor probs = softmax_lastdim_forward(logits);
                        for (int c = 0; c < layout.classes; ++c) cls[t][static_cast<std::size_t>(c)] = probs[static_cast<std::size_t>(c)];
                    }

                    SlotSummary& slot = grid.at(prior, cy, cx);
                    auto mean = predictive_mean_reg(reg);
                    auto var = variance_decomposition(reg, alea);
                    for (int d = 0; d < 4; ++d) {
                        slot.mean[static_cast<std::size_t>(d)] = mean[static_cast<std::size_t>(d)];
                        slot.epistemic[static_cast<std::size_t>(d)] = var.epistemic[static_cast<std::size_t>(d)];
                        slot.aleatoric[static_cast<std::size_t>(d)] = var.aleatoric[static_cast<std::size_t>(d)];
                        slot.total[static_cast<std::size_t>(d)] = var.total[static_cast<std::size_t>(d)];
                    }
                    slot.cls_prob = predictive_cls(cls);
                    slot.cls_mi = mutual_information(cls);
                    double obj_mean = 0.0;
                    for (double p : obj) obj_mean += p;
                    slot.obj_prob = obj_mean / static_cast<double>(T);
                    slot.obj_mi = mutual_information_binary(obj);
                }
            }
        }
        out.push_back(std::move(grid));
    }
    return out;
}

}  // namespace

std::vector<SummaryGrid> summarize(const Network& net, const Tensor& image, const McConfig& mc) {
    if (mc.T < 1) throw DataError("summarize requires T >= 1");
    auto passes = net.forward_shared_backbone(image, mc.T, mc.base_seed);
    return aggregate_passes(net, passes);
}

std::vector<SummaryGrid> summarize_deterministic(const Network& net, const Tensor& image) {
    std::vector<std::vector<Tensor>> passes;
    passes.push_back(net.forward(image, ForwardMode::Deterministic));
    return aggregate_passes(net, passes);
}

void write_summary_csv_header(std::ostream& os, int classes) {
    os << "image,scale,cell_y,cell_x,prior,global_prior";
    const char* dims[4] = {"x", "y", "w", "h"};
    for (const char* d : dims) os << ",mean_" << d;
    for (const char* d : dims) os << ",epi_" << d;
    for (const char* d : dims) os << ",alea_" << d;
    for (const char* d : dims) os << ",total_" << d;
    os << ",obj_prob,obj_mi,cls_mi";
    for (int c = 0; c < classes; ++c) os << ",cls_prob_" << c;
    os << "\n";
}

void write_summary_csv_rows(std::ostream& os, const std::string& image_id, const std::vector<SummaryGrid>& grids) {
    for (const auto& grid : grids) {
        for (int prior = 0; prior < grid.priors; ++prior) {
            for (int cy = 0; cy < grid.h; ++cy) {
                for (int cx = 0; cx < grid.w; ++cx) {
                    const SlotSummary& s = grid.at(prior, cy, cx);
                    os << image_id << ',' << grid.scale_index << ',' << cy << ',' << cx << ',' << prior << ','
                       << grid.scale_index * kPriorsPerScale + prior;
                    for (double v : s.mean) os << ',' << format_double(v);
                    for (double v : s.epistemic) os << ',' << format_double(v);
                    for (double v : s.aleatoric) os << ',' << format_double(v);
                    for (double v : s.total) os << ',' << format_double(v);
                    os << ',' << format_double(s.obj_prob) << ',' << format_double(s.obj_mi) << ','
                       << format_double(s.cls_mi);
                    for (double v : s.cls_prob) os << ',' << format_double(v);
                    os << '\n';
                }
            }
        }
    }
}

std::vector<SummaryRow> read_summary_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("summary csv: missing header");
    auto header = split_csv_line(line);
    if (header.size() < 25 || header[0] != "image") throw DataError("summary csv: unexpected header");
    int classes = static_cast<int>(header.size()) - 25;
    if (classes < 1) throw DataError("summary csv: no class columns");

    std::vector<SummaryRow> rows;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != header.size()) {
            throw DataError("summary csv line " + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
        }
        SummaryRow r;
        std::size_t k = 0;
        r.image_id = f[k++];
        r.scale_index = std::stoi(f[k++]);
        r.cell_y = std::stoi(f[k++]);
        r.cell_x = std::stoi(f[k++]);
        r.prior_index = std::stoi(f[k++]);
        r.global_prior_id = std::stoi(f[k++]);
        for (int d = 0; d < 4; ++d) r.summary.mean[static_cast<std::size_t>(d)] = std::stod(f[k++]);
        for (int d = 0; d < 4; ++d) r.summary.epistemic[static_cast<std::size_t>(d)] = std::stod(f[k++]);
        for (int d = 0; d < 4; ++d) r.summary.aleatoric[static_cast<std::size_t>(d)] = std::stod(f[k++]);
        for (int d = 0; d < 4; ++d) r.summary.total[static_cast<std::size_t>(d)] = std::stod(f[k++]);
        r.summary.obj_prob = std::stod(f[k++]);
        r.summary.obj_mi = std::stod(f[k++]);
        r.summary.cls_mi = std::stod(f[k++]);
        r.summary.cls_prob.resize(static_cast<std::size_t>(classes));
        for (int c = 0; c < classes; ++c) r.summary.cls_prob[static_cast<std::size_t>(c)] = std::stod(f[k++]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace bdet
