#include "octcvd/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "octcvd/ioutil.hpp"
#include "octcvd/rng.hpp"

namespace octcvd {

const std::vector<std::string>& layer_class_names() {
    static const std::vector<std::string> names = {
        "background", "ILM", "RNFL", "GCL", "IPL", "INL", "OPL",
        "BMEIS", "IB_OPR", "IB_RPE", "OB_RPE", "choroid"};
    return names;
}

const std::vector<std::string>& ethnicity_categories() {
    static const std::vector<std::string> cats = {
        "White", "Mixed", "Asian or Asian British", "Black or Black British", "Chinese",
        "Other ethnic group"};
    return cats;
}

const std::vector<std::string>& alcohol_categories() {
    static const std::vector<std::string> cats = {"Never", "Previous", "Current", "NotAnswered"};
    return cats;
}

const std::vector<std::string>& event_source_categories() {
    static const std::vector<std::string> cats = {"hospital_primary", "hospital_secondary", "death_record"};
    return cats;
}

ArmMarginals default_case_marginals() {
    ArmMarginals m;
    m.age_mean = 60.78;
    m.age_sd = 6.47;
    m.bmi_mean = 28.31;
    m.bmi_sd = 4.45;
    m.sbp_mean = 147.26;
    m.sbp_sd = 19.57;
    m.dbp_mean = 84.75;
    m.dbp_sd = 10.23;
    m.hba1c_mean = 36.52;
    m.hba1c_sd = 4.32;
    m.hba1c_pct_mean = 2.43;
    m.ethnicity_pct = {90.18, 4.26, 3.93, 0.33, 0.16, 1.15};
    m.alcohol_pct = {3.59, 5.72, 90.69, 0.0};
    return m;
}

ArmMarginals default_control_marginals() {
    ArmMarginals m;
    m.age_mean = 60.78;
    m.age_sd = 6.47;
    m.bmi_mean = 27.43;
    m.bmi_sd = 4.33;
    m.sbp_mean = 145.1;
    m.sbp_sd = 18.75;
    m.dbp_mean = 83.22;
    m.dbp_sd = 9.73;
    m.hba1c_mean = 36.59;
    m.hba1c_sd = 6.61;
    m.hba1c_pct_mean = 2.44;
    m.ethnicity_pct = {89.22, 4.25, 4.41, 0.82, 0.49, 0.82};
    m.alcohol_pct = {3.92, 3.92, 91.83, 0.33};
    return m;
}

std::string role_name(SubjectRole role) {
    switch (role) {
        case SubjectRole::classification_case: return "classification_case";
        case SubjectRole::classification_control: return "classification_control";
        case SubjectRole::pretrain_control: return "pretrain_control";
        case SubjectRole::event_reject: return "event_reject";
        case SubjectRole::flag_reject: return "flag_reject";
        case SubjectRole::qi_reject: return "qi_reject";
    }
    throw std::logic_error("unknown subject role");
}

std::int64_t CohortConfig::resolved_qi_reject() const {
    if (n_qi_reject >= 0) return n_qi_reject;
    const std::int64_t keep = n_cases + n_controls + n_pretrain + n_event_reject + n_flag_reject;
    // With q = floor(keep/4), floor(0.2 * (keep + q)) == q, so the bottom-20%
    // step removes exactly the planted low-quality subjects.
    return keep / 4;
}

void CohortConfig::validate() const {
    if (n_cases < 1 || n_controls < 1)
        throw std::invalid_argument("cohort config: n_cases and n_controls must be >= 1");
    if (n_pretrain < 0 || n_event_reject < 0 || n_flag_reject < 0)
        throw std::invalid_argument("cohort config: block sizes must be nonnegative");
    if (scans < 1 || height < 16 || width < 16)
        throw std::invalid_argument("cohort config: volume dims too small (need height/width >= 16)");
    if (effect.choroid_px < 0 || effect.left_multiplier < 0 || effect.texture_delta < 0)
        throw std::invalid_argument("cohort config: effect sizes must be nonnegative");
    auto check_marg = [](const ArmMarginals& m, const char* arm) {
        if (m.age_sd < 0 || m.bmi_sd < 0 || m.sbp_sd < 0 || m.dbp_sd < 0 || m.hba1c_sd < 0) {
            std::ostringstream os;
            os << "cohort config: negative standard deviation in " << arm << " marginals";
            throw std::invalid_argument(os.str());
        }
        if (m.ethnicity_pct.size() != ethnicity_categories().size() ||
            m.alcohol_pct.size() != alcohol_categories().size())
            throw std::invalid_argument("cohort config: categorical percentage lists have wrong length");
    };
    check_marg(cases, "case");
    check_marg(controls, "control");
    if (noise_lo < 0 || noise_hi < noise_lo || reject_noise_lo <= noise_hi ||
        reject_noise_hi < reject_noise_lo)
        throw std::invalid_argument(
            "cohort config: noise ranges must satisfy 0 <= lo <= hi < reject_lo <= reject_hi");
}

namespace {

// Integer apportionment by largest remainder; ties go to the lower index.
std::vector<std::int64_t> apportion(std::int64_t n, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0) throw std::invalid_argument("apportion: negative weight");
        total += w;
    }
    if (total <= 0) throw std::invalid_argument("apportion: weights sum to zero");
    std::vector<std::int64_t> counts(weights.size(), 0);
    std::vector<std::pair<double, std::size_t>> rema;
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = static_cast<double>(n) * weights[i] / total;
        counts[i] = static_cast<std::int64_t>(std::floor(exact));
        assigned += counts[i];
        rema.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rema.begin(), rema.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[rema[k % rema.size()].second] += 1;
    return counts;
}

// Standard-normal draws affinely adjusted so the block hits the target mean
// and population sd exactly, keeping both arms matched at any n.
std::vector<double> exact_normals(Rng& rng, std::int64_t n, double mean, double sd) {
    std::vector<double> v(static_cast<std::size_t>(n));
    if (n == 1) {
        v[0] = mean;
        return v;
    }
    for (double& x : v) x = rng.normal();
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(n);
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    const double s = std::sqrt(s2 / static_cast<double>(n));
    if (s < 1e-12) {
        for (double& x : v) x = mean;
        return v;
    }
    for (double& x : v) x = mean + (x - m) / s * sd;
    return v;
}

std::vector<std::string> categorical_block(Rng& rng, std::int64_t n, const std::vector<double>& pct,
                                           const std::vector<std::string>& cats) {
    const auto counts = apportion(n, pct);
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < counts.size(); ++i)
        for (std::int64_t k = 0; k < counts[i]; ++k) out.push_back(cats[i]);
    rng.shuffle(out);
    return out;
}

}  // namespace

GeneratedPatients generate_patients(const CohortConfig& cfg) {
    cfg.validate();
    GeneratedPatients out;
    std::int64_t id_counter = 0;
    auto next_id = [&id_counter]() {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "S%05lld", static_cast<long long>(id_counter++));
        return std::string(buf);
    };

    auto add_block = [&](std::int64_t n, SubjectRole role, std::uint64_t block_tag) {
        if (n == 0) return;
        const bool case_like = role == SubjectRole::classification_case ||
                               role == SubjectRole::event_reject || role == SubjectRole::flag_reject;
        const ArmMarginals& m = case_like ? cfg.cases : cfg.controls;
        Rng rng = Rng::derive(cfg.seed, {0xC0404F4254ULL, block_tag});

        auto ages = exact_normals(rng, n, m.age_mean, m.age_sd);
        auto bmis = exact_normals(rng, n, m.bmi_mean, m.bmi_sd);
        auto sbps = exact_normals(rng, n, m.sbp_mean, m.sbp_sd);
        auto dbps = exact_normals(rng, n, m.dbp_mean, m.dbp_sd);
        auto hbas = exact_normals(rng, n, m.hba1c_mean, m.hba1c_sd);

        const std::int64_t n_f =
            static_cast<std::int64_t>(std::llround(cfg.sex_f_fraction * static_cast<double>(n)));
        std::vector<std::string> sexes(static_cast<std::size_t>(n), "M");
        for (std::int64_t i = 0; i < n_f && i < n; ++i) sexes[static_cast<std::size_t>(i)] = "F";
        rng.shuffle(sexes);

        auto ethnicities = categorical_block(rng, n, m.ethnicity_pct, ethnicity_categories());
        auto alcohols = categorical_block(rng, n, m.alcohol_pct, alcohol_categories());
        std::vector<std::string> sources;
        if (case_like) sources = categorical_block(rng, n, {0.57, 0.30, 0.13}, event_source_categories());

        for (std::int64_t i = 0; i < n; ++i) {
            PatientRecord r;
            r.id = next_id();
            r.sex = sexes[static_cast<std::size_t>(i)];
            r.age = ages[static_cast<std::size_t>(i)];
            r.ethnicity = ethnicities[static_cast<std::size_t>(i)];
            r.bmi = bmis[static_cast<std::size_t>(i)];
            r.sbp = sbps[static_cast<std::size_t>(i)];
            r.dbp = dbps[static_cast<std::size_t>(i)];
            r.hba1c_mmol = hbas[static_cast<std::size_t>(i)];
            r.hba1c_pct = m.hba1c_pct_mean + 0.0915 * (r.hba1c_mmol - m.hba1c_mean);
            r.alcohol = alcohols[static_cast<std::size_t>(i)];
            r.cvd_label = case_like ? "CVD+" : "CVD-";
            if (case_like) {
                if (role == SubjectRole::event_reject) {
                    r.event_offset_years = -2.0 * rng.uniform();  // event at or before imaging
                } else {
                    r.event_offset_years = 5.0 * (1.0 - rng.uniform());  // (0, 5]
                }
                r.event_source = sources[static_cast<std::size_t>(i)];
            }
            if (role == SubjectRole::flag_reject) {
                r.diabetes_flag = rng.uniform() < 0.7;
                r.cardiomyopathy_flag = rng.uniform() < 0.45;
                if (!r.diabetes_flag && !r.cardiomyopathy_flag) r.diabetes_flag = true;
            }
            out.patients.push_back(std::move(r));
            out.roles.push_back(role);
        }
    };

    add_block(cfg.n_cases, SubjectRole::classification_case, 1);
    add_block(cfg.n_controls, SubjectRole::classification_control, 2);
    add_block(cfg.n_pretrain, SubjectRole::pretrain_control, 3);
    add_block(cfg.n_event_reject, SubjectRole::event_reject, 4);
    add_block(cfg.n_flag_reject, SubjectRole::flag_reject, 5);
    add_block(cfg.resolved_qi_reject(), SubjectRole::qi_reject, 6);
    return out;
}

namespace {

struct LayerStyle {
    double thickness_frac;  // of image height
    double intensity;
};

// Band order matches LayerClass 1..10.
const LayerStyle kBands[10] = {
    {0.030, 0.85},  // ILM
    {0.045, 0.75},  // RNFL
    {0.045, 0.32},  // GCL
    {0.030, 0.52},  // IPL
    {0.030, 0.28},  // INL
    {0.030, 0.50},  // OPL
    {0.030, 0.62},  // BMEIS
    {0.030, 0.70},  // IB_OPR
    {0.030, 0.80},  // IB_RPE
    {0.030, 0.88},  // OB_RPE
};

constexpr double kPi = 3.14159265358979323846;
constexpr double kVitreousBase = 0.04;
constexpr double kScleraBase = 0.10;
constexpr double kChoroidTop = 0.60;
constexpr double kChoroidBottom = 0.22;
constexpr double kSpeckleBackground = 0.05;
constexpr double kSpeckleBand = 0.08;
constexpr double kSpeckleChoroid = 0.12;

}  // namespace

OctVolume generate_volume(const PatientRecord& record, const std::string& eye, const CohortConfig& cfg,
                          bool low_quality) {
    if (eye != "left" && eye != "right")
        throw std::invalid_argument("generate_volume: eye must be left/right");
    const std::int64_t C = cfg.scans, H = cfg.height, W = cfg.width;
    const std::uint64_t id_hash = fnv1a64(record.id.data(), record.id.size());
    const std::uint64_t eye_tag = eye == "left" ? 1 : 2;
    Rng anat = Rng::derive(cfg.seed, {0xA11A70ULL, id_hash, eye_tag, 1});
    Rng noise = Rng::derive(cfg.seed, {0xA11A70ULL, id_hash, eye_tag, 2});

    const double h = static_cast<double>(H);
    const double ilm0 = h * anat.uniform(0.12, 0.18);
    const double amp = h * anat.uniform(0.015, 0.04);
    const double freq = anat.uniform(0.8, 1.6);
    const double phase = anat.uniform(0.0, 2.0 * kPi);
    const double drift = anat.uniform(0.05, 0.15);
    const double tilt = anat.uniform(-0.04, 0.04);

    double band_px[10];
    for (int k = 0; k < 10; ++k) band_px[k] = h * kBands[k].thickness_frac * anat.uniform(0.9, 1.1);
    double band_intensity[10];
    for (int k = 0; k < 10; ++k)
        band_intensity[k] = std::clamp(kBands[k].intensity * (1.0 + 0.05 * anat.normal()), 0.10, 0.95);

    double choroid_t = std::clamp(h * 0.22 + h * 0.03 * anat.normal(), 0.15 * h, 0.28 * h);
    const bool cvd = record.cvd_label == "CVD+";
    double speckle_choroid = kSpeckleChoroid;
    if (cvd) {
        choroid_t += cfg.effect.choroid_px * (eye == "left" ? cfg.effect.left_multiplier : 1.0);
        speckle_choroid += cfg.effect.texture_delta;
    }
    const double chor_top_i = std::clamp(kChoroidTop * (1.0 + 0.05 * anat.normal()), 0.35, 0.80);
    const double chor_bot_i = std::clamp(kChoroidBottom * (1.0 + 0.05 * anat.normal()), 0.12, 0.35);

    const double sigma = low_quality ? noise.uniform(cfg.reject_noise_lo, cfg.reject_noise_hi)
                                     : noise.uniform(cfg.noise_lo, cfg.noise_hi);

    OctVolume vol;
    vol.subject_id = record.id;
    vol.eye = eye;
    vol.noise_sigma = sigma;
    vol.scans = Tensor({C, H, W});
    vol.layer_mask.assign(static_cast<std::size_t>(C * H * W), 0);

    for (std::int64_t c = 0; c < C; ++c) {
        const double ph = phase + static_cast<double>(c) * drift;
        for (std::int64_t x = 0; x < W; ++x) {
            const double xf = static_cast<double>(x);
            double bounds[12];
            bounds[0] = ilm0 + amp * std::sin(2.0 * kPi * freq * xf / static_cast<double>(W) + ph) +
                        tilt * (xf - static_cast<double>(W) / 2.0);
            for (int k = 0; k < 10; ++k) bounds[k + 1] = bounds[k] + band_px[k];
            bounds[11] = bounds[10] + choroid_t;

            for (std::int64_t y = 0; y < H; ++y) {
                const double yc = static_cast<double>(y) + 0.5;
                double base;
                std::uint8_t cls;
                double speckle;
                if (yc < bounds[0]) {
                    base = kVitreousBase;
                    cls = 0;
                    speckle = kSpeckleBackground;
                } else if (yc < bounds[10]) {
                    int k = 0;
                    while (k < 9 && yc >= bounds[k + 1]) ++k;
                    base = band_intensity[k];
                    cls = static_cast<std::uint8_t>(k + 1);
                    speckle = kSpeckleBand;
                } else if (yc < bounds[11]) {
                    const double frac = (yc - bounds[10]) / choroid_t;
                    base = chor_top_i + (chor_bot_i - chor_top_i) * frac;
                    cls = static_cast<std::uint8_t>(LayerClass::choroid);
                    speckle = speckle_choroid;
                } else {
                    base = kScleraBase;
                    cls = 0;
                    speckle = kSpeckleBackground;
                }
                const double g = noise.normal();
                const double u = noise.uniform();
                // Additive pedestal with bounded spread: raises the dark floor
                // roughly linearly in sigma, which keeps QI = IR * TSR
                // strictly decreasing in the acquisition-noise parameter.
                double val = base * (1.0 + speckle * g) + sigma * (0.75 + 0.25 * u);
                vol.scans.data[static_cast<std::size_t>((c * H + y) * W + x)] = std::clamp(val, 0.0, 1.0);
                vol.layer_mask[static_cast<std::size_t>((c * H + y) * W + x)] = cls;
            }
        }
    }
    return vol;
}

Cohort generate_cohort(const CohortConfig& cfg) {
    Cohort cohort;
    GeneratedPatients gp = generate_patients(cfg);
    cohort.patients = std::move(gp.patients);
    cohort.roles = std::move(gp.roles);
    cohort.volumes.reserve(cohort.patients.size() * 2);
    for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
        const bool lowq = cohort.roles[i] == SubjectRole::qi_reject;
        cohort.volumes.push_back(generate_volume(cohort.patients[i], "left", cfg, lowq));
        cohort.volumes.push_back(generate_volume(cohort.patients[i], "right", cfg, lowq));
    }
    return cohort;
}

double mean_choroid_thickness_px(const OctVolume& volume) {
    const std::int64_t C = volume.scans.dim(0), W = volume.scans.dim(2);
    std::int64_t count = 0;
    for (std::uint8_t v : volume.layer_mask)
        if (v == static_cast<std::uint8_t>(LayerClass::choroid)) ++count;
    return static_cast<double>(count) / static_cast<double>(C * W);
}

StrobeResult strobe_filter(const std::vector<PatientRecord>& patients,
                           const std::vector<QualityReport>& qi_reports, double fraction) {
    StrobeResult res;
    std::set<std::string> alive;
    for (const auto& p : patients) alive.insert(p.id);
    res.audit.push_back({"initial", 0, static_cast<std::int64_t>(alive.size())});

    // Stage 1: per-eye bottom-fraction QI exclusion; a subject is excluded if
    // either eye's volume falls in the bottom slice.
    std::vector<QualityReport> left, right;
    for (const auto& r : qi_reports) {
        if (r.volume_id.size() > 5 && r.volume_id.substr(r.volume_id.size() - 5) == "_left")
            left.push_back(r);
        else if (r.volume_id.size() > 6 && r.volume_id.substr(r.volume_id.size() - 6) == "_right")
            right.push_back(r);
        else
            throw std::invalid_argument("strobe_filter: volume id without eye suffix: " + r.volume_id);
    }
    auto strip_eye = [](const std::string& vid) { return vid.substr(0, vid.rfind('_')); };
    std::set<std::string> qi_removed;
    for (auto* side : {&left, &right}) {
        if (side->empty()) continue;
        auto [kept, removed] = percentile_filter(*side, fraction);
        for (const auto& vid : removed) qi_removed.insert(strip_eye(vid));
    }
    std::int64_t removed1 = 0;
    for (const auto& id : qi_removed)
        if (alive.erase(id) > 0) ++removed1;
    res.audit.push_back({"quality_index", removed1, static_cast<std::int64_t>(alive.size())});

    // Stage 2: keep CVD+ subjects only when the event postdates imaging.
    std::int64_t removed2 = 0;
    for (const auto& p : patients) {
        if (!alive.count(p.id)) continue;
        if (p.cvd_label == "CVD+" && (!p.event_offset_years.has_value() || *p.event_offset_years <= 0.0)) {
            alive.erase(p.id);
            ++removed2;
        }
    }
    res.audit.push_back({"event_before_imaging", removed2, static_cast<std::int64_t>(alive.size())});

    // Stage 3: diabetes / cardiomyopathy exclusion.
    std::int64_t removed3 = 0;
    for (const auto& p : patients) {
        if (!alive.count(p.id)) continue;
        if (p.diabetes_flag || p.cardiomyopathy_flag) {
            alive.erase(p.id);
            ++removed3;
        }
    }
    res.audit.push_back({"diabetes_cardiomyopathy", removed3, static_cast<std::int64_t>(alive.size())});

    for (const auto& p : patients)
        if (alive.count(p.id)) res.retained_ids.push_back(p.id);
    return res;
}

DatasetSplit split_dataset(const std::vector<std::string>& ids, const std::vector<int>& labels,
                           const std::vector<double>& ratios, std::uint64_t seed) {
    if (ids.size() != labels.size()) throw std::invalid_argument("split_dataset: ids/labels length mismatch");
    if (ratios.size() != 3) throw std::invalid_argument("split_dataset: need exactly 3 ratios");
    for (double r : ratios)
        if (r <= 0) throw std::invalid_argument("split_dataset: ratios must be positive");

    std::vector<int> classes;
    for (int l : labels)
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    std::sort(classes.begin(), classes.end());

    DatasetSplit split;
    for (int cls : classes) {
        std::vector<std::string> members;
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (labels[i] == cls) members.push_back(ids[i]);
        Rng rng = Rng::derive(seed, {0x53504C4954ULL, static_cast<std::uint64_t>(cls)});
        rng.shuffle(members);
        auto counts = apportion(static_cast<std::int64_t>(members.size()), ratios);
        std::size_t pos = 0;
        for (std::int64_t k = 0; k < counts[0]; ++k) split.train.push_back(members[pos++]);
        for (std::int64_t k = 0; k < counts[1]; ++k) split.validation.push_back(members[pos++]);
        for (std::int64_t k = 0; k < counts[2]; ++k) split.test.push_back(members[pos++]);
    }
    if (split.train.empty() || split.validation.empty() || split.test.empty())
        throw std::runtime_error("split_dataset: a split would be empty");
    return split;
}

namespace {
const char* kPatientsHeader =
    "id,sex,age,ethnicity,bmi,sbp,dbp,hba1c_mmol,hba1c_pct,alcohol,diabetes_flag,cardiomyopathy_flag,"
    "cvd_label,event_offset_years,event_source";
}

void write_patients_csv(const std::filesystem::path& path, const std::vector<PatientRecord>& patients) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << kPatientsHeader << "\n";
    for (const auto& p : patients) {
        os << p.id << ',' << p.sex << ',' << format_double(p.age) << ',' << p.ethnicity << ','
           << format_double(p.bmi) << ',' << format_double(p.sbp) << ',' << format_double(p.dbp) << ','
           << format_double(p.hba1c_mmol) << ',' << format_double(p.hba1c_pct) << ',' << p.alcohol << ','
           << (p.diabetes_flag ? 1 : 0) << ',' << (p.cardiomyopathy_flag ? 1 : 0) << ',' << p.cvd_label << ','
           << (p.event_offset_years ? format_double(*p.event_offset_years) : std::string()) << ','
           << p.event_source << "\n";
    }
}

std::vector<PatientRecord> read_patients_csv(const std::filesystem::path& path) {
    auto rows = read_csv(path);
    if (rows.empty() || split_csv_line(kPatientsHeader) != rows[0])
        throw std::runtime_error("patients csv: unexpected header in " + path.string());
    std::vector<PatientRecord> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (r.size() != 15) throw std::runtime_error("patients csv: bad row in " + path.string());
        PatientRecord p;
        p.id = r[0];
        p.sex = r[1];
        p.age = std::stod(r[2]);
        p.ethnicity = r[3];
        p.bmi = std::stod(r[4]);
        p.sbp = std::stod(r[5]);
        p.dbp = std::stod(r[6]);
        p.hba1c_mmol = std::stod(r[7]);
        p.hba1c_pct = std::stod(r[8]);
        p.alcohol = r[9];
        p.diabetes_flag = r[10] == "1";
        p.cardiomyopathy_flag = r[11] == "1";
        p.cvd_label = r[12];
        if (!r[13].empty()) p.event_offset_years = std::stod(r[13]);
        p.event_source = r[14];
        out.push_back(std::move(p));
    }
    return out;
}

void write_roles_csv(const std::filesystem::path& path, const std::vector<PatientRecord>& patients,
                     const std::vector<SubjectRole>& roles) {
    if (patients.size() != roles.size()) throw std::invalid_argument("write_roles_csv: length mismatch");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "id,role\n";
    for (std::size_t i = 0; i < patients.size(); ++i)
        os << patients[i].id << ',' << role_name(roles[i]) << "\n";
}

std::vector<std::pair<std::string, std::string>> read_roles_csv(const std::filesystem::path& path) {
    auto rows = read_csv(path);
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 1; i < rows.size(); ++i) out.emplace_back(rows[i][0], rows[i][1]);
    return out;
}

void write_volume(const std::filesystem::path& path, const OctVolume& volume) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write volume " + path.string());
    os.write("OCT1", 4);
    write_u32_le(os, static_cast<std::uint32_t>(volume.scans.dim(0)));
    write_u32_le(os, static_cast<std::uint32_t>(volume.scans.dim(1)));
    write_u32_le(os, static_cast<std::uint32_t>(volume.scans.dim(2)));
    write_f64_block_le(os, volume.scans.data);
    os.write(reinterpret_cast<const char*>(volume.layer_mask.data()),
             static_cast<std::streamsize>(volume.layer_mask.size()));
    if (!os) throw std::runtime_error("short write for volume " + path.string());
}

OctVolume read_volume(const std::filesystem::path& path, const std::string& subject_id,
                      const std::string& eye) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open volume " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "OCT1")
        throw std::runtime_error("bad volume magic in " + path.string());
    const std::int64_t c = read_u32_le(is), h = read_u32_le(is), w = read_u32_le(is);
    OctVolume vol;
    vol.subject_id = subject_id;
    vol.eye = eye;
    vol.scans = Tensor({c, h, w});
    vol.scans.data = read_f64_block_le(is, static_cast<std::size_t>(c * h * w));
    vol.layer_mask.resize(static_cast<std::size_t>(c * h * w));
    is.read(reinterpret_cast<char*>(vol.layer_mask.data()),
            static_cast<std::streamsize>(vol.layer_mask.size()));
    if (!is) throw std::runtime_error("truncated volume " + path.string());
    return vol;
}

void write_strobe_audit_json(const std::filesystem::path& path, const std::vector<StrobeStage>& audit) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : audit)
        j.push_back({{"stage", s.stage}, {"removed", s.removed}, {"retained", s.retained}});
    write_text_file(path, j.dump(2) + "\n");
}

}  // namespace octcvd
