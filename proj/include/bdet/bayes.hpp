#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bdet/network.hpp"

namespace bdet {

struct McConfig {
    int T = 8;                       // stochastic passes
    std::uint64_t base_seed = 0;
    bool unbiased_variance = false;  // population (1/T) by default
};

// Aggregated prediction of one (scale, cell, prior) slot across T passes.
// Regression statistics live in raw output space.
struct SlotSummary {
    std::array<double, 4> mean{};
    std::array<double, 4> epistemic{};
    std::array<double, 4> aleatoric{};
    std::array<double, 4> total{};
    double obj_prob = 0.0;
    double obj_mi = 0.0;
    std::vector<double> cls_prob;
    double cls_mi = 0.0;
};

struct SummaryGrid {
    int scale_index = 0;
    int h = 0, w = 0;
    int priors = kPriorsPerScale;
    int classes = 1;
    std::vector<SlotSummary> slots;  // indexed (prior * h + cy) * w + cx

    SlotSummary& at(int prior, int cy, int cx) {
        return slots[(static_cast<std::size_t>(prior) * h + cy) * w + cx];
    }
    const SlotSummary& at(int prior, int cy, int cx) const {
        return slots[(static_cast<std::size_t>(prior) * h + cy) * w + cx];
    }
};

// ---- aggregation primitives over T samples ----

// Arithmetic mean over passes, per dimension. samples[t] is one pass.
std::vector<double> predictive_mean_reg(const std::vector<std::vector<double>>& samples);

struct VarianceDecomposition {
    std::vector<double> epistemic;  // spread of the samples
    std::vector<double> aleatoric;  // mean of the predicted variances
    std::vector<double> total;      // sum of the two
};

// aleatoric_samples[t][d] are predicted variances (>= 0). The epistemic part
// is the population variance over passes unless `unbiased` asks for 1/(T-1).
VarianceDecomposition variance_decomposition(const std::vector<std::vector<double>>& samples,
                                             const std::vector<std::vector<double>>& aleatoric_samples,
                                             bool unbiased = false);

// Mean of per-pass probability vectors (mean of s(f), not s of the mean).
// Every row must sum to 1 within 1e-6.
std::vector<double> predictive_cls(const std::vector<std::vector<double>>& prob_samples);

// Shannon entropy in nats; 0*log 0 := 0. Negative entries are an error.
double entropy(const std::vector<double>& p);

// H[mean over samples] - mean over samples of H[sample]; tiny negative
// rounding residue is clamped to 0.
double mutual_information(const std::vector<std::vector<double>>& prob_samples);

// Binary specialization: each sample is P(positive).
double mutual_information_binary(const std::vector<double>& prob_samples);

// ---- whole-image aggregation ----

// Runs T stochastic passes (backbone shared) and aggregates every slot.
// Aleatoric variances come from exp(clipped s); networks without the
// log-variance head contribute zeros.
std::vector<SummaryGrid> summarize(const Network& net, const Tensor& image, const McConfig& mc);

// The single deterministic pass: epistemic variance and mutual information
// are identically zero, aleatoric passes through.
std::vector<SummaryGrid> summarize_deterministic(const Network& net, const Tensor& image);

// CSV dump, one row per (image, scale, cell_y, cell_x, prior).
void write_summary_csv_header(std::ostream& os, int classes);
void write_summary_csv_rows(std::ostream& os, const std::string& image_id, const std::vector<SummaryGrid>& grids);

struct SummaryRow {
    std::string image_id;
    int scale_index = 0, cell_y = 0, cell_x = 0, prior_index = 0, global_prior_id = 0;
    SlotSummary summary;
};

std::vector<SummaryRow> read_summary_csv(std::istream& is);

}  // namespace bdet
