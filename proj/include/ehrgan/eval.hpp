#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ehrgan/cohort.hpp"

namespace ehrgan {

/// Mann-Whitney estimate P(s+ > s-) + P(tie)/2 from mid-ranks. Labels are 0/1.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
    double threshold = 0;
    double fpr = 0;
    double tpr = 0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // starts at (0,0), ends at (1,1)
    double auroc = 0;              // trapezoidal area, equals auroc()
};
RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels);

/// Fraction of examples whose prediction (score > threshold means case) matches the label.
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

double pearson(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of mid-ranks.
double spearman(std::span<const double> a, std::span<const double> b);
double median(std::vector<double> values);

struct FidelityOptions {
    std::size_t top_k_freq = 100;
    std::size_t top_k_cooc = 20;
    /// Restrict the co-occurrence panel to diagnosis codes.
    bool cooc_diagnosis_only = true;
};

struct LengthHistogram {
    /// Bin i covers [edges[i], edges[i+1]); the last regular bin is closed at 250.
    /// Bin 0 collects lengths under 50, the final bin lengths over 250.
    std::vector<double> edges;
    std::vector<double> original;
    std::vector<double> generated;
    double tv_distance = 0;
};

struct FidelityReport {
    LengthHistogram lengths;

    std::vector<std::int32_t> freq_codes;  // ranked by original frequency
    std::vector<double> freq_original;     // occurrences / total events
    std::vector<double> freq_generated;
    double freq_spearman = 0;

    std::vector<std::int32_t> cooc_codes;
    std::vector<double> cooc_original;   // k*k, co-present records / record count
    std::vector<double> cooc_generated;
    std::vector<double> cooc_original_raw;   // co-present record counts
    std::vector<double> cooc_generated_raw;
    double cooc_correlation = 0;  // Pearson over pairs i<j

    std::string to_text() const;
};

/// Label-blind comparison of a generated corpus against the original one.
FidelityReport fidelity(const std::vector<const PatientRecord*>& original,
                        const std::vector<const PatientRecord*>& generated, const Vocabulary& vocab,
                        const FidelityOptions& opt = {});
FidelityReport fidelity(const Cohort& original, const Cohort& generated, const FidelityOptions& opt = {});

/// Length histogram with the fixed bin layout of FidelityReport.
std::vector<double> length_histogram(const std::vector<const PatientRecord*>& records);
double total_variation(std::span<const double> p, std::span<const double> q);

/// Final metrics of one run (one mode or hyper-parameter setting, one seed).
struct RunResult {
    std::string group;
    std::uint64_t seed = 0;
    std::map<std::string, double> metrics;
};

struct ComparisonRow {
    std::string group;
    std::string metric;
    std::size_t runs = 0;
    double median = 0;
    double min = 0;
    double max = 0;
    double spread() const { return max - min; }
};

/// One row per (group, metric), groups in first-seen order.
std::vector<ComparisonRow> compare_runs(const std::vector<RunResult>& runs);
std::string format_table(const std::vector<ComparisonRow>& rows);
/// One JSON object per line.
std::string format_jsonl(const std::vector<ComparisonRow>& rows);

}  // namespace ehrgan
