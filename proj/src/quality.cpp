#include "octcvd/quality.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "octcvd/cohort.hpp"
#include "octcvd/ioutil.hpp"

namespace octcvd {

namespace {

struct ScanQi {
    double ir, tsr, qi;
};

ScanQi scan_qi(const double* px, std::int64_t n) {
    std::vector<double> sorted(px, px + n);
    std::sort(sorted.begin(), sorted.end());
    const std::int64_t k = std::max<std::int64_t>(1, n / 100);  // darkest 1%
    double dark_sum = 0.0;
    for (std::int64_t i = 0; i < k; ++i) dark_sum += sorted[static_cast<std::size_t>(i)];
    const double nu_raw = dark_sum / static_cast<double>(k);
    const double nu = std::max(nu_raw, 1e-6);
    double dark_var = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
        const double d = sorted[static_cast<std::size_t>(i)] - nu_raw;
        dark_var += d * d;
    }
    const double dark_std = std::sqrt(dark_var / static_cast<double>(k));

    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mean += px[i];
    mean /= static_cast<double>(n);

    const double threshold = nu + 3.0 * dark_std;
    std::int64_t above = 0;
    for (std::int64_t i = 0; i < n; ++i)
        if (px[i] > threshold) ++above;
    const std::int64_t below = n - above;

    ScanQi out;
    out.ir = mean / nu;
    out.tsr = static_cast<double>(above) / static_cast<double>(std::max<std::int64_t>(1, below));
    out.qi = out.ir * out.tsr;
    return out;
}

}  // namespace

QualityReport compute_qi(const OctVolume& volume) {
    const std::int64_t C = volume.scans.dim(0);
    const std::int64_t plane = volume.scans.dim(1) * volume.scans.dim(2);
    if (C * plane == 0) throw std::invalid_argument("compute_qi: empty volume");

    const double first = volume.scans.data[0];
    bool constant = true;
    for (double v : volume.scans.data)
        if (v != first) {
            constant = false;
            break;
        }
    if (constant) throw std::runtime_error("compute_qi: degenerate histogram (constant image)");

    QualityReport rep;
    rep.volume_id = volume.volume_id();
    for (std::int64_t c = 0; c < C; ++c) {
        ScanQi s = scan_qi(&volume.scans.data[static_cast<std::size_t>(c * plane)], plane);
        rep.ir += s.ir;
        rep.qi += s.qi;
    }
    rep.ir /= static_cast<double>(C);
    rep.qi /= static_cast<double>(C);
    // The volume QI is the mean of per-scan QI; the reported TSR is the
    // implied ratio so qi == ir * tsr holds exactly at the volume level.
    rep.tsr = rep.qi / rep.ir;
    return rep;
}

std::pair<std::vector<std::string>, std::vector<std::string>> percentile_filter(
    const std::vector<QualityReport>& reports, double fraction) {
    if (reports.empty()) throw std::invalid_argument("percentile_filter: empty report list");
    if (fraction <= 0.0 || fraction >= 1.0)
        throw std::invalid_argument("percentile_filter: fraction must be in (0,1)");
    std::vector<const QualityReport*> order;
    order.reserve(reports.size());
    for (const auto& r : reports) order.push_back(&r);
    std::sort(order.begin(), order.end(), [](const QualityReport* a, const QualityReport* b) {
        if (a->qi != b->qi) return a->qi < b->qi;
        return a->volume_id < b->volume_id;
    });
    const std::size_t n_remove =
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(reports.size())));
    std::vector<std::string> removed, kept;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_remove ? removed : kept).push_back(order[i]->volume_id);
    return {kept, removed};
}

void write_qi_csv(const std::filesystem::path& path, const std::vector<QualityReport>& reports) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "volume_id,ir,tsr,qi\n";
    for (const auto& r : reports)
        os << r.volume_id << ',' << format_double(r.ir) << ',' << format_double(r.tsr) << ','
           << format_double(r.qi) << "\n";
}

std::vector<QualityReport> read_qi_csv(const std::filesystem::path& path) {
    auto rows = read_csv(path);
    std::vector<QualityReport> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 4) throw std::runtime_error("qi csv: bad row in " + path.string());
        QualityReport r;
        r.volume_id = rows[i][0];
        r.ir = std::stod(rows[i][1]);
        r.tsr = std::stod(rows[i][2]);
        r.qi = std::stod(rows[i][3]);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace octcvd
