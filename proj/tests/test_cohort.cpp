#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "octcvd/cohort.hpp"
#include "octcvd/ioutil.hpp"

using namespace octcvd;

namespace {

CohortConfig small_config() {
    CohortConfig cfg;
    cfg.n_cases = 40;
    cfg.n_controls = 120;
    cfg.n_pretrain = 20;
    cfg.n_event_reject = 6;
    cfg.n_flag_reject = 6;
    cfg.scans = 4;
    cfg.height = 64;
    cfg.width = 64;
    cfg.seed = 7;
    return cfg;
}

struct ArmStats {
    double age_mean = 0, age_sd = 0, f_frac = 0, bmi_mean = 0, sbp_mean = 0, dbp_mean = 0,
           hba1c_mean = 0, pct_mean = 0;
};

ArmStats arm_stats(const std::vector<PatientRecord>& ps, const std::vector<SubjectRole>& roles,
                   SubjectRole want) {
    ArmStats s;
    std::int64_t n = 0, nf = 0;
    double sum = 0, sumsq = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (roles[i] != want) continue;
        ++n;
        sum += ps[i].age;
        sumsq += ps[i].age * ps[i].age;
        if (ps[i].sex == "F") ++nf;
        s.bmi_mean += ps[i].bmi;
        s.sbp_mean += ps[i].sbp;
        s.dbp_mean += ps[i].dbp;
        s.hba1c_mean += ps[i].hba1c_mmol;
        s.pct_mean += ps[i].hba1c_pct;
    }
    s.age_mean = sum / n;
    s.age_sd = std::sqrt(std::max(0.0, sumsq / n - s.age_mean * s.age_mean));
    s.f_frac = static_cast<double>(nf) / n;
    s.bmi_mean /= n;
    s.sbp_mean /= n;
    s.dbp_mean /= n;
    s.hba1c_mean /= n;
    s.pct_mean /= n;
    return s;
}

}  // namespace

TEST_CASE("default config reproduces the cohort shape (612 cases / 2234 controls)") {
    CohortConfig cfg;  // defaults
    cfg.validate();
    GeneratedPatients gp = generate_patients(cfg);
    std::int64_t cases = 0, controls = 0;
    for (std::size_t i = 0; i < gp.patients.size(); ++i) {
        if (gp.roles[i] == SubjectRole::classification_case) ++cases;
        if (gp.roles[i] == SubjectRole::classification_control) ++controls;
    }
    CHECK(cases == 612);
    CHECK(controls == 2234);

    // matching invariance and Table-target tracking on the classification arms
    ArmStats cs = arm_stats(gp.patients, gp.roles, SubjectRole::classification_case);
    ArmStats xs = arm_stats(gp.patients, gp.roles, SubjectRole::classification_control);
    CHECK(std::fabs(cs.age_mean - xs.age_mean) <= 0.1);
    CHECK(std::fabs(cs.age_sd - xs.age_sd) <= 0.1);
    CHECK(std::fabs(cs.f_frac - xs.f_frac) <= 0.005);
    CHECK(std::fabs(cs.bmi_mean - 28.31) / 28.31 <= 0.02);
    CHECK(std::fabs(xs.bmi_mean - 27.43) / 27.43 <= 0.02);
    CHECK(std::fabs(cs.sbp_mean - 147.26) / 147.26 <= 0.02);
    CHECK(std::fabs(xs.sbp_mean - 145.1) / 145.1 <= 0.02);
    CHECK(std::fabs(cs.dbp_mean - 84.75) / 84.75 <= 0.02);
    CHECK(std::fabs(xs.dbp_mean - 83.22) / 83.22 <= 0.02);
    CHECK(std::fabs(cs.hba1c_mean - 36.52) / 36.52 <= 0.02);
    CHECK(std::fabs(xs.hba1c_mean - 36.59) / 36.59 <= 0.02);
    CHECK(std::fabs(cs.pct_mean - 2.43) / 2.43 <= 0.02);
    CHECK(std::fabs(xs.pct_mean - 2.44) / 2.44 <= 0.02);
}

TEST_CASE("patient generation is deterministic under the seed") {
    CohortConfig cfg = small_config();
    GeneratedPatients a = generate_patients(cfg);
    GeneratedPatients b = generate_patients(cfg);
    REQUIRE(a.patients.size() == b.patients.size());
    for (std::size_t i = 0; i < a.patients.size(); ++i) {
        CHECK(a.patients[i].id == b.patients[i].id);
        CHECK(a.patients[i].age == b.patients[i].age);
        CHECK(a.patients[i].bmi == b.patients[i].bmi);
        CHECK(a.patients[i].sex == b.patients[i].sex);
        CHECK(a.patients[i].ethnicity == b.patients[i].ethnicity);
    }
    OctVolume va = generate_volume(a.patients[0], "left", cfg);
    OctVolume vb = generate_volume(b.patients[0], "left", cfg);
    CHECK(va.scans.data == vb.scans.data);
    CHECK(va.layer_mask == vb.layer_mask);
}

TEST_CASE("retained-cohort invariants hold for classification subjects") {
    CohortConfig cfg = small_config();
    GeneratedPatients gp = generate_patients(cfg);
    for (std::size_t i = 0; i < gp.patients.size(); ++i) {
        const auto& p = gp.patients[i];
        CHECK((p.cvd_label == "CVD+") == p.event_offset_years.has_value());
        if (gp.roles[i] == SubjectRole::classification_case) {
            CHECK(*p.event_offset_years > 0.0);
            CHECK(*p.event_offset_years <= 5.0);
            CHECK_FALSE(p.diabetes_flag);
            CHECK_FALSE(p.cardiomyopathy_flag);
        }
        if (gp.roles[i] == SubjectRole::event_reject) CHECK(*p.event_offset_years <= 0.0);
        if (gp.roles[i] == SubjectRole::flag_reject)
            CHECK((p.diabetes_flag || p.cardiomyopathy_flag));
    }
}

TEST_CASE("volume phantom: pixel range, mask ordering, planted effect") {
    CohortConfig cfg = small_config();
    cfg.effect.choroid_px = 4.0;
    cfg.effect.left_multiplier = 1.0;
    GeneratedPatients gp = generate_patients(cfg);

    // pixel range + mask band ordering in every column
    OctVolume vol = generate_volume(gp.patients[0], "left", cfg);
    for (double v : vol.scans.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    const std::int64_t C = cfg.scans, H = cfg.height, W = cfg.width;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t x = 0; x < W; ++x) {
            int last = -1;
            bool closed = false;  // saw background after the stack
            for (std::int64_t y = 0; y < H; ++y) {
                const int cls = vol.layer_mask[static_cast<std::size_t>((c * H + y) * W + x)];
                if (cls == 0) {
                    if (last > 0) closed = true;
                    continue;
                }
                CHECK_FALSE(closed);  // no band below the sclera
                CHECK(cls >= last);
                last = cls;
            }
        }

    // planted effect: mean mask thickness gap of ~4 px over 100 subjects/arm
    double cvd_sum = 0.0, ctl_sum = 0.0;
    int cvd_n = 0, ctl_n = 0;
    for (std::size_t i = 0; i < gp.patients.size() && (cvd_n < 100 || ctl_n < 100); ++i) {
        if (gp.roles[i] == SubjectRole::classification_case && cvd_n < 100) {
            cvd_sum += mean_choroid_thickness_px(generate_volume(gp.patients[i], "right", cfg));
            ++cvd_n;
        } else if (gp.roles[i] == SubjectRole::classification_control && ctl_n < 100) {
            ctl_sum += mean_choroid_thickness_px(generate_volume(gp.patients[i], "right", cfg));
            ++ctl_n;
        }
    }
    const double diff = cvd_sum / cvd_n - ctl_sum / ctl_n;
    CHECK(std::fabs(diff - 4.0) <= 0.5);
}

TEST_CASE("zero planted effect leaves arms statistically indistinguishable") {
    CohortConfig cfg = small_config();
    cfg.n_cases = 100;
    cfg.n_controls = 100;
    cfg.effect.choroid_px = 0.0;
    cfg.effect.texture_delta = 0.0;
    GeneratedPatients gp = generate_patients(cfg);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < gp.patients.size(); ++i) {
        if (gp.roles[i] == SubjectRole::classification_case)
            a.push_back(mean_choroid_thickness_px(generate_volume(gp.patients[i], "left", cfg)));
        else if (gp.roles[i] == SubjectRole::classification_control)
            b.push_back(mean_choroid_thickness_px(generate_volume(gp.patients[i], "left", cfg)));
    }
    auto mv = [](const std::vector<double>& v) {
        double m = 0, s = 0;
        for (double x : v) m += x;
        m /= v.size();
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<double, double>(m, s / (v.size() - 1));
    };
    auto [ma, va] = mv(a);
    auto [mb, vb] = mv(b);
    const double t = (ma - mb) / std::sqrt(va / a.size() + vb / b.size());
    // two-sided p > 0.01 at ~198 dof <=> |t| below the 0.995 quantile
    CHECK(std::fabs(t) < 2.601);
}

TEST_CASE("planted-effect monotonicity over the effect grid") {
    const double grid[5] = {0, 1, 2, 4, 8};
    std::vector<double> estimate;
    for (double e : grid) {
        CohortConfig cfg = small_config();
        cfg.n_cases = 30;
        cfg.n_controls = 30;
        cfg.scans = 2;
        cfg.effect.choroid_px = e;
        cfg.effect.left_multiplier = 1.0;
        GeneratedPatients gp = generate_patients(cfg);
        double cs = 0, xs = 0;
        int cn = 0, xn = 0;
        for (std::size_t i = 0; i < gp.patients.size(); ++i) {
            if (gp.roles[i] == SubjectRole::classification_case) {
                cs += mean_choroid_thickness_px(generate_volume(gp.patients[i], "left", cfg));
                ++cn;
            } else if (gp.roles[i] == SubjectRole::classification_control) {
                xs += mean_choroid_thickness_px(generate_volume(gp.patients[i], "left", cfg));
                ++xn;
            }
        }
        estimate.push_back(cs / cn - xs / xn);
    }
    // strictly increasing estimates give Spearman rho == 1 > 0.9
    for (std::size_t i = 1; i < estimate.size(); ++i) CHECK(estimate[i] > estimate[i - 1]);
}

TEST_CASE("left eye carries the multiplied effect") {
    CohortConfig cfg = small_config();
    cfg.effect.choroid_px = 4.0;
    cfg.effect.left_multiplier = 1.5;
    GeneratedPatients gp = generate_patients(cfg);
    double dl = 0, dr = 0;
    int n = 0;
    for (std::size_t i = 0; i < gp.patients.size() && n < 60; ++i) {
        if (gp.roles[i] != SubjectRole::classification_case) continue;
        dl += mean_choroid_thickness_px(generate_volume(gp.patients[i], "left", cfg));
        dr += mean_choroid_thickness_px(generate_volume(gp.patients[i], "right", cfg));
        ++n;
    }
    CHECK(dl / n > dr / n + 1.0);  // 6 px vs 4 px planted difference
}

TEST_CASE("strobe filter applies the three stages in order with a conserving audit") {
    CohortConfig cfg = small_config();
    Cohort cohort = generate_cohort(cfg);
    std::vector<QualityReport> reports;
    for (const auto& v : cohort.volumes) reports.push_back(compute_qi(v));

    StrobeResult res = strobe_filter(cohort.patients, reports, 0.2);
    REQUIRE(res.audit.size() == 4);
    CHECK(res.audit[0].stage == "initial");
    for (std::size_t i = 1; i < res.audit.size(); ++i)
        CHECK(res.audit[i - 1].retained - res.audit[i].removed == res.audit[i].retained);

    // the planted rejects are exactly the removals
    std::set<std::string> retained(res.retained_ids.begin(), res.retained_ids.end());
    for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
        const bool kept = retained.count(cohort.patients[i].id) > 0;
        switch (cohort.roles[i]) {
            case SubjectRole::qi_reject:
            case SubjectRole::event_reject:
            case SubjectRole::flag_reject: CHECK_FALSE(kept); break;
            default: CHECK(kept);
        }
    }
    const std::int64_t expect_kept = cfg.n_cases + cfg.n_controls + cfg.n_pretrain;
    CHECK(static_cast<std::int64_t>(res.retained_ids.size()) == expect_kept);
}

TEST_CASE("strobe removes a subject whose event predates imaging") {
    CohortConfig cfg = small_config();
    GeneratedPatients gp = generate_patients(cfg);
    std::vector<PatientRecord> two{gp.patients[0], gp.patients[1]};
    two[0].cvd_label = "CVD+";
    two[0].event_offset_years = -1.0;
    two[1].cvd_label = "CVD-";
    two[1].event_offset_years.reset();
    std::vector<QualityReport> reports;
    for (const auto& p : two)
        for (const std::string eye : {"left", "right"}) {
            QualityReport r;
            r.volume_id = p.id + "_" + eye;
            r.qi = 1.0;
            reports.push_back(r);
        }
    // fraction small enough that the QI stage removes nobody
    StrobeResult res = strobe_filter(two, reports, 0.2);
    CHECK(res.audit[1].removed == 0);
    CHECK(res.audit[2].removed == 1);
    REQUIRE(res.retained_ids.size() == 1);
    CHECK(res.retained_ids[0] == two[1].id);
}

TEST_CASE("split_dataset reproduces the canonical 1423/459/964 partition") {
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (int i = 0; i < 2846; ++i) {
        ids.push_back("P" + std::to_string(i));
        labels.push_back(i < 612 ? 1 : 0);
    }
    const std::vector<double> ratios{1423.0 / 2846.0, 459.0 / 2846.0, 964.0 / 2846.0};
    DatasetSplit s = split_dataset(ids, labels, ratios, 99);
    CHECK(s.train.size() == 1423);
    CHECK(s.validation.size() == 459);
    CHECK(s.test.size() == 964);

    // subject-level disjointness
    std::set<std::string> seen;
    for (const auto* part : {&s.train, &s.validation, &s.test})
        for (const auto& id : *part) CHECK(seen.insert(id).second);
    CHECK(seen.size() == ids.size());

    // stratification within 1 percentage point
    auto pos_frac = [&](const std::vector<std::string>& part) {
        std::int64_t pos = 0;
        for (const auto& id : part)
            if (std::stoi(id.substr(1)) < 612) ++pos;
        return static_cast<double>(pos) / static_cast<double>(part.size());
    };
    const double cohort_frac = 612.0 / 2846.0;
    CHECK(std::fabs(pos_frac(s.train) - cohort_frac) <= 0.01);
    CHECK(std::fabs(pos_frac(s.validation) - cohort_frac) <= 0.01);
    CHECK(std::fabs(pos_frac(s.test) - cohort_frac) <= 0.01);

    // determinism
    DatasetSplit s2 = split_dataset(ids, labels, ratios, 99);
    CHECK(s.train == s2.train);
    CHECK(s.test == s2.test);
}

TEST_CASE("split_dataset handles 6:2:2 and rejects empty splits") {
    std::vector<std::string> ids;
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) {
        ids.push_back("P" + std::to_string(i));
        labels.push_back(i % 2);
    }
    DatasetSplit s = split_dataset(ids, labels, {6, 2, 2}, 5);
    CHECK(s.train.size() == 6);
    CHECK(s.validation.size() == 2);
    CHECK(s.test.size() == 2);

    CHECK_THROWS_AS(split_dataset({"a", "b"}, {0, 1}, {6, 2, 2}, 5), std::runtime_error);
}

TEST_CASE("patients csv and volume files round-trip") {
    namespace fs = std::filesystem;
    CohortConfig cfg = small_config();
    cfg.n_cases = 3;
    cfg.n_controls = 3;
    cfg.n_pretrain = 0;
    cfg.n_event_reject = 1;
    cfg.n_flag_reject = 0;
    cfg.n_qi_reject = 0;
    GeneratedPatients gp = generate_patients(cfg);

    fs::path dir = fs::temp_directory_path() / "octcvd_cohort_test";
    fs::create_directories(dir);
    write_patients_csv(dir / "patients.csv", gp.patients);
    auto back = read_patients_csv(dir / "patients.csv");
    REQUIRE(back.size() == gp.patients.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == gp.patients[i].id);
        CHECK(back[i].age == gp.patients[i].age);
        CHECK(back[i].hba1c_pct == gp.patients[i].hba1c_pct);
        CHECK(back[i].ethnicity == gp.patients[i].ethnicity);
        CHECK(back[i].event_offset_years.has_value() == gp.patients[i].event_offset_years.has_value());
        if (back[i].event_offset_years)
            CHECK(*back[i].event_offset_years == *gp.patients[i].event_offset_years);
    }

    OctVolume vol = generate_volume(gp.patients[0], "left", cfg);
    write_volume(dir / "v.oct", vol);
    OctVolume rv = read_volume(dir / "v.oct", vol.subject_id, vol.eye);
    CHECK(rv.scans.data == vol.scans.data);
    CHECK(rv.layer_mask == vol.layer_mask);

    // pinned header bytes: magic then three little-endian u32 dims
    std::string bytes = read_text_file(dir / "v.oct");
    REQUIRE(bytes.size() > 16);
    CHECK(bytes.substr(0, 4) == "OCT1");
    CHECK(static_cast<unsigned char>(bytes[4]) == cfg.scans);
    CHECK(static_cast<unsigned char>(bytes[8]) == cfg.height);
    CHECK(static_cast<unsigned char>(bytes[12]) == cfg.width);
    fs::remove_all(dir);
}

TEST_CASE("infeasible marginals are rejected") {
    CohortConfig cfg = small_config();
    cfg.cases.age_sd = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
