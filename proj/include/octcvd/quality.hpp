#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace octcvd {

struct OctVolume;

// QI = IR * TSR, computed per B-scan and averaged over the volume.
//   noise floor nu = mean of the darkest 1% of pixels (clamped below by 1e-6)
//   IR  = mean intensity / nu
//   T   = nu + 3 * std of the darkest 1%
//   TSR = #(pixels > T) / max(1, #(pixels <= T))
struct QualityReport {
    std::string volume_id;
    double ir = 0.0;
    double tsr = 0.0;
    double qi = 0.0;
};

QualityReport compute_qi(const OctVolume& volume);

// Removes the floor(fraction * n) lowest-QI entries; ties broken by volume id
// ascending. Returns (kept ids, removed ids).
std::pair<std::vector<std::string>, std::vector<std::string>> percentile_filter(
    const std::vector<QualityReport>& reports, double fraction);

void write_qi_csv(const std::filesystem::path& path, const std::vector<QualityReport>& reports);
std::vector<QualityReport> read_qi_csv(const std::filesystem::path& path);

}  // namespace octcvd
