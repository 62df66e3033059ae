#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "octcvd/quality.hpp"
#include "octcvd/tensor.hpp"

namespace octcvd {

struct PatientRecord {
    std::string id;
    std::string sex;  // "F" or "M"
    double age = 0.0;
    std::string ethnicity;
    double bmi = 0.0;
    double sbp = 0.0;
    double dbp = 0.0;
    double hba1c_mmol = 0.0;
    double hba1c_pct = 0.0;
    std::string alcohol;  // Never / Previous / Current / NotAnswered
    bool diabetes_flag = false;
    bool cardiomyopathy_flag = false;
    std::string cvd_label;  // "CVD+" or "CVD-"
    std::optional<double> event_offset_years;  // present iff CVD+
    std::string event_source;                  // empty for controls
};

// Mask classes for one A-scan column, top to bottom: background (vitreous and
// sclera), the ten named retinal bands, then choroid.
enum class LayerClass : std::uint8_t {
    background = 0,
    ILM = 1,
    RNFL = 2,
    GCL = 3,
    IPL = 4,
    INL = 5,
    OPL = 6,
    BMEIS = 7,
    IB_OPR = 8,
    IB_RPE = 9,
    OB_RPE = 10,
    choroid = 11,
};
constexpr int kLayerClassCount = 12;
const std::vector<std::string>& layer_class_names();

struct OctVolume {
    std::string subject_id;
    std::string eye;  // "left" or "right"
    Tensor scans;     // [C,H,W], values in [0,1]
    std::vector<std::uint8_t> layer_mask;  // C*H*W, LayerClass codes
    double noise_sigma = 0.0;              // acquisition-noise parameter used
    std::string volume_id() const { return subject_id + "_" + eye; }
};

struct PlantedEffectSpec {
    double choroid_px = 4.0;        // extra choroid thickness for CVD+ volumes
    double left_multiplier = 1.5;   // left-eye effect scale
    double texture_delta = 0.05;    // extra choroid speckle contrast for CVD+
};

struct ArmMarginals {
    double age_mean = 0.0, age_sd = 1.0;
    double bmi_mean = 0.0, bmi_sd = 1.0;
    double sbp_mean = 0.0, sbp_sd = 1.0;
    double dbp_mean = 0.0, dbp_sd = 1.0;
    double hba1c_mean = 0.0, hba1c_sd = 1.0;
    double hba1c_pct_mean = 0.0;
    std::vector<double> ethnicity_pct;  // over ethnicity_categories()
    std::vector<double> alcohol_pct;    // over alcohol_categories()
};

ArmMarginals default_case_marginals();
ArmMarginals default_control_marginals();
const std::vector<std::string>& ethnicity_categories();
const std::vector<std::string>& alcohol_categories();
const std::vector<std::string>& event_source_categories();

enum class SubjectRole {
    classification_case,
    classification_control,
    pretrain_control,
    event_reject,   // CVD event before imaging; removed by the filter
    flag_reject,    // diabetes / cardiomyopathy; removed by the filter
    qi_reject,      // low-quality acquisition; removed by the QI step
};
std::string role_name(SubjectRole role);

struct CohortConfig {
    std::int64_t n_cases = 612;
    std::int64_t n_controls = 2234;
    std::int64_t n_pretrain = 256;
    std::int64_t n_event_reject = 47;
    std::int64_t n_flag_reject = 51;
    // -1: sized so the bottom-20% QI step removes exactly these subjects.
    std::int64_t n_qi_reject = -1;

    std::int64_t scans = 16;
    std::int64_t height = 64;
    std::int64_t width = 64;

    ArmMarginals cases = default_case_marginals();
    ArmMarginals controls = default_control_marginals();
    double sex_f_fraction = 0.2974;

    PlantedEffectSpec effect;
    double noise_lo = 0.02, noise_hi = 0.12;                // clean acquisitions
    double reject_noise_lo = 0.80, reject_noise_hi = 1.00;  // planted QI rejects
    std::uint64_t seed = 1;

    std::int64_t resolved_qi_reject() const;
    void validate() const;
};

struct GeneratedPatients {
    std::vector<PatientRecord> patients;
    std::vector<SubjectRole> roles;  // parallel to patients
};

GeneratedPatients generate_patients(const CohortConfig& config);

// Renders one eye's phantom volume. low_quality selects the planted
// acquisition-noise range used for QI rejects.
OctVolume generate_volume(const PatientRecord& record, const std::string& eye,
                          const CohortConfig& config, bool low_quality = false);

struct Cohort {
    std::vector<PatientRecord> patients;
    std::vector<SubjectRole> roles;
    std::vector<OctVolume> volumes;  // per patient: left then right
};

Cohort generate_cohort(const CohortConfig& config);

// Mask-measured mean choroid band height in pixels.
double mean_choroid_thickness_px(const OctVolume& volume);

struct StrobeStage {
    std::string stage;
    std::int64_t removed = 0;
    std::int64_t retained = 0;
};

struct StrobeResult {
    std::vector<std::string> retained_ids;
    std::vector<StrobeStage> audit;
};

// Applies, in order: per-eye bottom-`fraction` QI exclusion, event-before-
// imaging exclusion (keep event_offset_years > 0), then the diabetes /
// cardiomyopathy exclusion. Emits one audit row per stage.
StrobeResult strobe_filter(const std::vector<PatientRecord>& patients,
                           const std::vector<QualityReport>& qi_reports, double fraction = 0.2);

struct DatasetSplit {
    std::vector<std::string> train, validation, test;
};

// Subject-level disjoint partition, stratified by label so each split keeps
// the cohort's class ratio. Deterministic under seed.
DatasetSplit split_dataset(const std::vector<std::string>& ids, const std::vector<int>& labels,
                           const std::vector<double>& ratios, std::uint64_t seed);

void write_patients_csv(const std::filesystem::path& path, const std::vector<PatientRecord>& patients);
std::vector<PatientRecord> read_patients_csv(const std::filesystem::path& path);
void write_roles_csv(const std::filesystem::path& path, const std::vector<PatientRecord>& patients,
                     const std::vector<SubjectRole>& roles);
std::vector<std::pair<std::string, std::string>> read_roles_csv(const std::filesystem::path& path);

// Volume file: magic "OCT1", dims as three little-endian u32, raw f64 scans,
// then one mask byte per pixel.
void write_volume(const std::filesystem::path& path, const OctVolume& volume);
OctVolume read_volume(const std::filesystem::path& path, const std::string& subject_id,
                      const std::string& eye);

void write_strobe_audit_json(const std::filesystem::path& path, const std::vector<StrobeStage>& audit);

}  // namespace octcvd
