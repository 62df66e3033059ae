#include "octcvd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "octcvd/ioutil.hpp"

namespace octcvd {

using nlohmann::json;

MetricsReport confusion_metrics(const std::vector<double>& probs, const std::vector<int>& labels,
                                double threshold, const std::string& name) {
    if (probs.size() != labels.size())
        throw std::invalid_argument("confusion_metrics: probs/labels length mismatch");
    if (probs.empty()) throw std::invalid_argument("confusion_metrics: empty input");
    MetricsReport rep;
    rep.name = name;
    rep.threshold = threshold;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw std::invalid_argument("confusion_metrics: labels must be 0/1");
        const bool pred = probs[i] >= threshold;
        if (pred && labels[i] == 1) ++rep.confusion.tp;
        else if (pred && labels[i] == 0) ++rep.confusion.fp;
        else if (!pred && labels[i] == 1) ++rep.confusion.fn;
        else ++rep.confusion.tn;
    }
    const auto& c = rep.confusion;
    rep.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0) rep.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (c.tn + c.fp > 0) rep.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    return rep;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: length mismatch");
    std::int64_t n1 = 0, n0 = 0;
    for (int l : labels) {
        if (l == 1) ++n1;
        else if (l == 0) ++n0;
        else throw std::invalid_argument("roc_auc: labels must be 0/1");
    }
    if (n1 == 0 || n0 == 0) throw std::invalid_argument("roc_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over ties
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - static_cast<double>(n1) * (static_cast<double>(n1) + 1.0) / 2.0;
    return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

McNemarResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b,
                      bool continuity_correction) {
    if (correct_a.size() != correct_b.size()) throw std::invalid_argument("mcnemar: length mismatch");
    McNemarResult r;
    for (std::size_t i = 0; i < correct_a.size(); ++i) {
        if (correct_a[i] && !correct_b[i]) ++r.b;
        if (!correct_a[i] && correct_b[i]) ++r.c;
    }
    if (r.b + r.c == 0) throw std::runtime_error("mcnemar: no discordant pairs");
    const double diff = continuity_correction
                            ? std::max(0.0, std::fabs(static_cast<double>(r.b - r.c)) - 1.0)
                            : static_cast<double>(r.b - r.c);
    r.chi2 = diff * diff / static_cast<double>(r.b + r.c);
    r.p = chi2_sf(r.chi2, 1);
    return r;
}

double chi2_sf(double x, int df) {
    if (x < 0) throw std::invalid_argument("chi2_sf: x must be nonnegative");
    if (df != 1) throw std::invalid_argument("chi2_sf: only df=1 is supported");
    return std::erfc(std::sqrt(x / 2.0));
}

namespace {

json report_to_json(const MetricsReport& r) {
    json j;
    j["name"] = r.name;
    j["threshold"] = r.threshold;
    j["tp"] = r.confusion.tp;
    j["tn"] = r.confusion.tn;
    j["fp"] = r.confusion.fp;
    j["fn"] = r.confusion.fn;
    j["accuracy"] = r.accuracy;
    j["sensitivity"] = r.sensitivity ? json(*r.sensitivity) : json(nullptr);
    j["specificity"] = r.specificity ? json(*r.specificity) : json(nullptr);
    j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
    return j;
}

}  // namespace

void write_metrics_json(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
    json j = json::array();
    for (const auto& r : reports) j.push_back(report_to_json(r));
    write_text_file(path, j.dump(2) + "\n");
}

std::vector<MetricsReport> read_metrics_json(const std::filesystem::path& path) {
    json j = json::parse(read_text_file(path));
    std::vector<MetricsReport> out;
    for (const auto& e : j) {
        MetricsReport r;
        r.name = e.at("name").get<std::string>();
        r.threshold = e.at("threshold").get<double>();
        r.confusion.tp = e.at("tp").get<std::int64_t>();
        r.confusion.tn = e.at("tn").get<std::int64_t>();
        r.confusion.fp = e.at("fp").get<std::int64_t>();
        r.confusion.fn = e.at("fn").get<std::int64_t>();
        r.accuracy = e.at("accuracy").get<double>();
        if (!e.at("sensitivity").is_null()) r.sensitivity = e.at("sensitivity").get<double>();
        if (!e.at("specificity").is_null()) r.specificity = e.at("specificity").get<double>();
        if (!e.at("auc").is_null()) r.auc = e.at("auc").get<double>();
        out.push_back(std::move(r));
    }
    return out;
}

void write_mcnemar_csv(const std::filesystem::path& path, const std::vector<McNemarRow>& rows) {
    std::string text = "name_a,name_b,b,c,chi2,p\n";
    for (const auto& r : rows) {
        text += r.name_a + "," + r.name_b + "," + std::to_string(r.result.b) + "," +
                std::to_string(r.result.c) + "," + format_double(r.result.chi2) + "," +
                format_double(r.result.p) + "\n";
    }
    write_text_file(path, text);
}

}  // namespace octcvd
