#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace octcvd {

struct ConfusionCounts {
    std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    std::int64_t total() const { return tp + tn + fp + fn; }
};

struct MetricsReport {
    std::string name;
    double threshold = 0.5;
    ConfusionCounts confusion;
    double accuracy = 0.0;
    // Undefined when the relevant class is absent (never silently 0).
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> auc;
};

// Threshold rule: probability >= threshold classifies as positive.
MetricsReport confusion_metrics(const std::vector<double>& probs, const std::vector<int>& labels,
                                double threshold = 0.5, const std::string& name = "");

// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), via average ranks.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct McNemarResult {
    std::int64_t b = 0;  // A correct, B wrong
    std::int64_t c = 0;  // A wrong, B correct
    double chi2 = 0.0;
    double p = 1.0;
    int df = 1;
};

// Chi-squared McNemar test on paired correctness vectors. The default is the
// uncorrected statistic (b-c)^2/(b+c); continuity applies (|b-c|-1)^2/(b+c).
McNemarResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b,
                      bool continuity_correction = false);

// Survival function of the chi-squared distribution with df=1:
// p = erfc(sqrt(x/2)).
double chi2_sf(double x, int df = 1);

void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> read_metrics_json(const std::filesystem::path& path);

struct McNemarRow {
    std::string name_a, name_b;
    McNemarResult result;
};
void write_mcnemar_csv(const std::filesystem::path& path, const std::vector<McNemarRow>& rows);

}  // namespace octcvd
