#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include "cogmap/corpus.hpp"
#include "cogmap/synth.hpp"

using namespace cogmap;
using synth::SynthConfig;

namespace fs = std::filesystem;

namespace {

corpus::Taxonomy small_taxonomy() {
    corpus::Taxonomy tax;
    tax.categories = {"stimulus", "task"};
    tax.terms_by_category = {{"alpha", "beta"}, {"gamma", "delta"}};
    return tax;
}

std::array<double, 3> voxel_xyz(const vol::BrainMask& mask, int v) {
    const auto& g = mask.grid();
    const int cell = mask.voxel_cell(v);
    return {static_cast<double>(cell / (g.ny * g.nz)),
            static_cast<double>((cell / g.nz) % g.ny),
            static_cast<double>(cell % g.nz)};
}

// Number of maps whose condition carries `term`, computed from the corpus.
int realized_count(const corpus::Corpus& c, const std::string& term) {
    int count = 0;
    for (int i = 0; i < c.n_maps(); ++i)
        if (c.map_has_term(i, term)) ++count;
    return count;
}

// Studies whose condition list mentions `term`.
int study_span(const corpus::Corpus& c, const std::string& term) {
    int span = 0;
    for (const auto& st : c.studies()) {
        bool hit = false;
        for (const auto& cond : st.conditions)
            hit = hit || std::find(cond.terms.begin(), cond.terms.end(), term) != cond.terms.end();
        span += hit ? 1 : 0;
    }
    return span;
}

} // namespace

TEST_CASE("ellipsoid mask matches the documented default size") {
    const vol::VolumeGrid grid{24, 24, 18, 3.0, 3.0, 3.0};
    auto mask = synth::make_ellipsoid_mask(grid);
    CHECK(mask->p() == 6200);

    // Grid center is inside, the corner is cut off.
    CHECK(mask->grid().cells() == 24 * 24 * 18);
    CHECK(mask->in_mask_cell(grid.cell(12, 12, 9)));
    CHECK_FALSE(mask->in_mask_cell(grid.cell(0, 0, 0)));

    auto small = synth::make_ellipsoid_mask(vol::VolumeGrid{10, 10, 8, 3.0, 3.0, 3.0});
    CHECK(small->p() > 8);
    CHECK(small->p() < 800);
}

TEST_CASE("ground truth geometry: blob counts, supports, and effect values") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{24, 24, 18, 3.0, 3.0, 3.0});
    SynthConfig cfg; // defaults: 1..3 blobs, sigma 2.2, amplitude 1
    auto truth = synth::make_ground_truth(corpus::default_taxonomy(), mask, cfg, 77);

    REQUIRE(truth.terms.size() == 19);
    REQUIRE(truth.blobs.size() == truth.terms.size());
    REQUIRE(truth.effect_maps.size() == truth.terms.size());
    REQUIRE(truth.support.size() == truth.terms.size());

    // All centers (across every term) keep the minimum separation.
    std::vector<std::array<double, 3>> centers;
    for (const auto& blobs : truth.blobs)
        for (const auto& b : blobs) centers.push_back({b.cx, b.cy, b.cz});
    for (std::size_t i = 0; i < centers.size(); ++i)
        for (std::size_t j = i + 1; j < centers.size(); ++j) {
            const double dx = centers[i][0] - centers[j][0];
            const double dy = centers[i][1] - centers[j][1];
            const double dz = centers[i][2] - centers[j][2];
            CHECK(dx * dx + dy * dy + dz * dz >= 4.0 - 1e-12);
        }

    for (std::size_t t = 0; t < truth.terms.size(); ++t) {
        const auto& blobs = truth.blobs[t];
        CHECK(blobs.size() >= 1);
        CHECK(blobs.size() <= 3);
        for (const auto& b : blobs) {
            CHECK(b.sigma == cfg.blob_sigma);
            CHECK(b.amplitude == cfg.effect_amplitude);
        }

        // Recompute the rasterization: truncated at 3 sigma, support at 2.
        std::vector<int> support;
        for (int v = 0; v < mask->p(); ++v) {
            const auto c = voxel_xyz(*mask, v);
            double val = 0;
            bool in_support = false;
            for (const auto& b : blobs) {
                const double dx = c[0] - b.cx, dy = c[1] - b.cy, dz = c[2] - b.cz;
                const double r2 = dx * dx + dy * dy + dz * dz;
                const double s2 = b.sigma * b.sigma;
                if (r2 <= 9.0 * s2) val += b.amplitude * std::exp(-r2 / (2.0 * s2));
                if (r2 <= 4.0 * s2) in_support = true;
            }
            if (val == 0.0)
                CHECK(truth.effect_maps[t][v] == 0.0);
            else
                CHECK(truth.effect_maps[t][v] == doctest::Approx(val).epsilon(1e-12));
            if (in_support) support.push_back(v);
        }
        CHECK(truth.support[t] == support);
        CHECK_FALSE(support.empty());
    }
}

TEST_CASE("forbid_overlap separates supports across terms") {
    corpus::Taxonomy tax;
    tax.categories = {"stimulus", "task"};
    tax.terms_by_category = {{"alpha"}, {"gamma"}};

    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{24, 24, 18, 3.0, 3.0, 3.0});
    SynthConfig cfg;
    cfg.min_blobs = 2;
    cfg.max_blobs = 2;
    cfg.blob_sigma = 2.0;
    cfg.forbid_overlap = true;
    auto truth = synth::make_ground_truth(tax, mask, cfg, 5);

    REQUIRE(truth.terms.size() == 2);
    for (const auto& blobs : truth.blobs) CHECK(blobs.size() == 2);

    // Pairwise center separation of at least 4 sigma...
    std::vector<std::array<double, 3>> centers;
    for (const auto& blobs : truth.blobs)
        for (const auto& b : blobs) centers.push_back({b.cx, b.cy, b.cz});
    for (std::size_t i = 0; i < centers.size(); ++i)
        for (std::size_t j = i + 1; j < centers.size(); ++j) {
            const double dx = centers[i][0] - centers[j][0];
            const double dy = centers[i][1] - centers[j][1];
            const double dz = centers[i][2] - centers[j][2];
            CHECK(std::sqrt(dx * dx + dy * dy + dz * dz) >= 4.0 * cfg.blob_sigma);
        }

    // ...which makes the 2-sigma supports disjoint across terms.
    std::set<int> s0(truth.support[0].begin(), truth.support[0].end());
    CHECK_FALSE(truth.support[0].empty());
    CHECK_FALSE(truth.support[1].empty());
    for (int v : truth.support[1]) CHECK(s0.count(v) == 0);
}

TEST_CASE("zero amplitudes produce an identically zero corpus") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{10, 10, 8, 3.0, 3.0, 3.0});
    SynthConfig cfg;
    cfg.effect_amplitude = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.study_effect_amplitude = 0.0;
    cfg.subjects_per_study = {3, 2, 2};
    cfg.conditions_per_study = {3, 2, 2};

    auto truth = synth::make_ground_truth(small_taxonomy(), mask, cfg, 21);
    for (const auto& m : truth.effect_maps) CHECK(m.isZero(0.0));
    for (const auto& s : truth.support) CHECK_FALSE(s.empty()); // geometry survives

    auto corpus = synth::generate_corpus(truth, 21);
    CHECK(corpus.n_maps() == 3 * 3 + 2 * 2 + 2 * 2);
    CHECK(corpus.data().isZero(0.0f));
}

TEST_CASE("noiseless maps equal the sum of their term effects") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0});
    SynthConfig cfg;
    cfg.effect_amplitude = 1.5;
    cfg.noise_sigma = 0.0;
    cfg.study_effect_amplitude = 0.0;
    cfg.subjects_per_study = {3, 3, 2};
    cfg.conditions_per_study = {3, 3, 3};

    const auto tax = small_taxonomy();
    auto truth = synth::make_ground_truth(tax, mask, cfg, 9);
    auto corpus = synth::generate_corpus(truth, 9);

    std::map<std::string, int> index;
    for (std::size_t t = 0; t < truth.terms.size(); ++t)
        index[truth.terms[t]] = static_cast<int>(t);

    for (int i = 0; i < corpus.n_maps(); ++i) {
        Eigen::VectorXd expected = Eigen::VectorXd::Zero(corpus.p());
        for (const auto& term : corpus.map_terms(i))
            expected += truth.effect_maps[static_cast<std::size_t>(index.at(term))];
        const Eigen::VectorXd got = corpus.data().row(i).cast<double>();
        CHECK((got - expected).lpNorm<Eigen::Infinity>() <= 1e-5);
    }
}

TEST_CASE("study confound fields are constant within study with the requested RMS") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0});
    SynthConfig cfg;
    cfg.effect_amplitude = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.study_effect_amplitude = 3.0;
    cfg.subjects_per_study = {4, 3};
    cfg.conditions_per_study = {3, 3};

    auto truth = synth::make_ground_truth(small_taxonomy(), mask, cfg, 31);
    auto corpus = synth::generate_corpus(truth, 31);
    REQUIRE(corpus.n_maps() == 4 * 3 + 3 * 3);

    // Every map of a study is the same field; the field RMS equals the knob.
    Eigen::VectorXf first_of_study[2] = {corpus.data().row(0), Eigen::VectorXf()};
    for (int i = 0; i < corpus.n_maps(); ++i) {
        const int s = corpus.maps()[static_cast<std::size_t>(i)].study;
        Eigen::VectorXf row = corpus.data().row(i);
        if (first_of_study[s].size() == 0) first_of_study[s] = row;
        CHECK((row.array() == first_of_study[s].array()).all());
    }
    for (int s = 0; s < 2; ++s) {
        const Eigen::VectorXd field = first_of_study[s].cast<double>();
        const double rms = std::sqrt(field.squaredNorm() / corpus.p());
        CHECK(rms == doctest::Approx(3.0).epsilon(1e-5));
    }
    CHECK_FALSE((first_of_study[0].array() == first_of_study[1].array()).all());
}

TEST_CASE("per-map noise is rescaled to the requested sigma") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0});
    SynthConfig cfg;
    cfg.effect_amplitude = 0.0;
    cfg.study_effect_amplitude = 0.0;
    cfg.noise_sigma = 2.5;
    cfg.subjects_per_study = {3, 2};
    cfg.conditions_per_study = {2, 2};

    auto truth = synth::make_ground_truth(small_taxonomy(), mask, cfg, 13);
    auto corpus = synth::generate_corpus(truth, 13);

    for (int i = 0; i < corpus.n_maps(); ++i) {
        const Eigen::VectorXd row = corpus.data().row(i).cast<double>();
        const double mean = row.mean();
        const double sd = std::sqrt((row.array() - mean).square().sum() / corpus.p());
        CHECK(sd == doctest::Approx(2.5).epsilon(1e-4));
    }

    // Noise differs between subjects and between conditions.
    CHECK_FALSE((corpus.data().row(0).array() == corpus.data().row(1).array()).all());
    CHECK_FALSE((corpus.data().row(0).array() == corpus.data().row(2).array()).all());
}

TEST_CASE("default corpus realizes the documented plan totals") {
    SynthConfig cfg;
    auto mask = synth::make_ellipsoid_mask(cfg.grid);
    auto truth = synth::make_ground_truth(corpus::default_taxonomy(), mask, cfg, 42);
    auto corpus = synth::generate_corpus(truth, 42);

    CHECK(corpus.p() == 6200);
    REQUIRE(corpus.studies().size() == 19);

    int total_subjects = 0, total_conditions = 0, expected_maps = 0;
    for (const auto& st : corpus.studies()) {
        total_subjects += static_cast<int>(st.subjects.size());
        total_conditions += static_cast<int>(st.conditions.size());
        expected_maps += static_cast<int>(st.subjects.size() * st.conditions.size());
    }
    CHECK(total_subjects == 486);
    CHECK(total_conditions == 131);
    CHECK(expected_maps == 3826);
    CHECK(corpus.n_maps() == 3826);

    // Naming and lab assignment.
    CHECK(corpus.studies()[0].id == "study01");
    CHECK(corpus.studies()[18].id == "study19");
    CHECK(corpus.studies()[0].laboratory == "lab_a");
    CHECK(corpus.studies()[1].laboratory == "lab_b");
    CHECK(corpus.studies()[2].laboratory == "lab_a");
    CHECK(corpus.map_id(0) == "study01/sub01/c01");

    // Map ordering: study-major, then subject, then condition.
    CHECK(corpus.maps()[0].condition == 0);
    CHECK(corpus.maps()[1].condition == 1);
    int at = 0;
    for (std::size_t s = 0; s < corpus.studies().size(); ++s) {
        const auto& st = corpus.studies()[s];
        for (std::size_t u = 0; u < st.subjects.size(); ++u)
            for (std::size_t k = 0; k < st.conditions.size(); ++k, ++at) {
                REQUIRE(corpus.maps()[static_cast<std::size_t>(at)].study ==
                        static_cast<int>(s));
                REQUIRE(corpus.maps()[static_cast<std::size_t>(at)].subject ==
                        static_cast<int>(u));
                REQUIRE(corpus.maps()[static_cast<std::size_t>(at)].condition ==
                        static_cast<int>(k));
            }
    }

    // Conditions respect the one-term-per-category contract.
    CHECK_NOTHROW(corpus.validate_strict_categories());

    // The frequency plan matches the realized per-term map counts, every term
    // is present with a workable count, and spans at least 3 studies.
    REQUIRE(truth.frequency_plan.size() == 19);
    for (const auto& [term, planned] : truth.frequency_plan) {
        CHECK(planned == realized_count(corpus, term));
        CHECK(planned >= 20);
        CHECK(study_span(corpus, term) >= 3);
    }
    for (const auto& [term, count] : corpus::term_frequencies(corpus))
        CHECK(count == truth.frequency_plan.at(term));

    // Tail terms live in exactly three of the smallest studies; their counts
    // are pinned by the deterministic placement rule.
    const std::map<std::string, int> tail_counts = {
        {"scramble", 25}, {"saccades", 30}, {"inhibit", 38}, {"non-vocal sounds", 46}};
    for (const auto& [term, count] : tail_counts) {
        CHECK(truth.frequency_plan.at(term) == count);
        CHECK(study_span(corpus, term) == 3);
        CHECK(count < 100);
    }

    for (const auto& span : corpus::validate_term_span(corpus)) CHECK(span.usable);

    // The realized term design (with intercept) must be full rank, or forward
    // inference could not run on the flagship corpus.
    auto design = corpus::build_design_matrix(corpus, {});
    Eigen::FullPivLU<Eigen::MatrixXd> lu(design.Y);
    lu.setThreshold(1e-10);
    CHECK(lu.rank() == design.Y.cols());
}

TEST_CASE("generation is deterministic in seed and jobs, varies across seeds") {
    SynthConfig cfg;
    cfg.grid = vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0};
    cfg.subjects_per_study = {6, 5, 4, 4, 3, 3};
    cfg.conditions_per_study = {8, 7, 6, 6, 5, 4};
    auto mask = synth::make_ellipsoid_mask(cfg.grid);
    const auto tax = corpus::default_taxonomy();

    auto t1 = synth::make_ground_truth(tax, mask, cfg, 11);
    auto c1 = synth::generate_corpus(t1, 11);
    auto t2 = synth::make_ground_truth(tax, mask, cfg, 11);
    auto c2 = synth::generate_corpus(t2, 11);
    auto t3 = synth::make_ground_truth(tax, mask, cfg, 11);
    auto c3 = synth::generate_corpus(t3, 11, /*jobs=*/3);
    auto t4 = synth::make_ground_truth(tax, mask, cfg, 12);
    auto c4 = synth::generate_corpus(t4, 12);

    CHECK((c1.data().array() == c2.data().array()).all());
    CHECK((c1.data().array() == c3.data().array()).all()); // jobs must not matter
    CHECK_FALSE((c1.data().array() == c4.data().array()).all());

    CHECK(t1.frequency_plan == t2.frequency_plan);
    CHECK(t1.study_ids == t2.study_ids);
    for (std::size_t s = 0; s < c1.studies().size(); ++s)
        for (std::size_t k = 0; k < c1.studies()[s].conditions.size(); ++k)
            CHECK(c1.studies()[s].conditions[k].terms == c2.studies()[s].conditions[k].terms);

    // Tail placement is deterministic: each tail condition goes to three of
    // the smallest studies, so the realized counts are pinned by the subject
    // counts alone.
    const std::map<std::string, int> tail_counts = {
        {"scramble", 10}, {"saccades", 11}, {"inhibit", 13}, {"non-vocal sounds", 15}};
    for (const auto& [term, count] : tail_counts) {
        CHECK(t1.frequency_plan.at(term) == count);
        CHECK(study_span(c1, term) == 3);
    }
}

TEST_CASE("generic taxonomies get a full-rank plan under the span rule") {
    corpus::Taxonomy tax;
    tax.categories = {"stimulus", "task", "response"};
    tax.terms_by_category = {{"alpha", "beta"}, {"gamma", "delta"}, {"epsilon"}};

    SynthConfig cfg;
    cfg.grid = vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0};
    cfg.subjects_per_study = {4, 3, 3, 2, 2};
    cfg.conditions_per_study = {4, 4, 3, 3, 3};
    auto mask = synth::make_ellipsoid_mask(cfg.grid);

    auto truth = synth::make_ground_truth(tax, mask, cfg, 3);
    auto corpus = synth::generate_corpus(truth, 3);

    // Every present term spans at least min(3, n_studies) studies.
    for (const auto& [term, count] : truth.frequency_plan) {
        CHECK(count > 0);
        CHECK(study_span(corpus, term) >= 3);
    }

    auto design = corpus::build_design_matrix(corpus, {});
    Eigen::FullPivLU<Eigen::MatrixXd> lu(design.Y);
    lu.setThreshold(1e-10);
    CHECK(lu.rank() == design.Y.cols());
}

TEST_CASE("ledger records the sampled ground truth") {
    SynthConfig cfg;
    cfg.grid = vol::VolumeGrid{12, 12, 10, 3.0, 3.0, 3.0};
    cfg.subjects_per_study = {6, 5, 4, 4, 3, 3};
    cfg.conditions_per_study = {8, 7, 6, 6, 5, 4};
    auto mask = synth::make_ellipsoid_mask(cfg.grid);
    auto truth = synth::make_ground_truth(corpus::default_taxonomy(), mask, cfg, 11);
    auto corpus = synth::generate_corpus(truth, 11);
    (void)corpus;

    const auto path = (fs::temp_directory_path() / "cogmap_test_ledger.json").string();
    synth::save_ledger(truth, path);

    std::ifstream in(path);
    REQUIRE(in.good());
    const auto j = nlohmann::json::parse(in);

    CHECK(j.at("seed").get<std::uint64_t>() == 11);
    CHECK(j.at("config").at("n_studies").get<int>() == 19); // knob, not the realized count
    CHECK(j.at("config").at("noise_sigma").get<double>() == 1.0);
    CHECK(j.at("config").at("study_effect_amplitude").get<double>() == 2.0);

    // One frequency entry per taxonomy term; absent terms are explicit zeros.
    const auto& freq = j.at("frequency_plan");
    CHECK(freq.size() == 19);
    for (const auto& term : truth.terms)
        CHECK(freq.at(term).get<int>() ==
              (truth.frequency_plan.count(term) ? truth.frequency_plan.at(term) : 0));

    const auto& terms = j.at("terms");
    REQUIRE(terms.size() == truth.terms.size());
    for (std::size_t t = 0; t < truth.terms.size(); ++t) {
        CHECK(terms[t].at("term").get<std::string>() == truth.terms[t]);
        CHECK(terms[t].at("support_size").get<std::size_t>() == truth.support[t].size());
        REQUIRE(terms[t].at("blobs").size() == truth.blobs[t].size());
        const auto& b0 = terms[t].at("blobs")[0];
        CHECK(b0.at("center").size() == 3);
        CHECK(b0.at("sigma").get<double>() == truth.blobs[t][0].sigma);
        CHECK(b0.at("amplitude").get<double>() == truth.blobs[t][0].amplitude);
    }

    CHECK(j.at("study_ids").size() == truth.study_ids.size());
    fs::remove(path);
}

TEST_CASE("synthesis rejects invalid configurations") {
    auto mask = synth::make_ellipsoid_mask(vol::VolumeGrid{10, 10, 8, 3.0, 3.0, 3.0});
    const auto tax = small_taxonomy();

    SynthConfig bad;
    bad.min_blobs = 0;
    CHECK_THROWS_WITH_AS(synth::make_ground_truth(tax, mask, bad, 1),
                         doctest::Contains("blob count"), ValidationError);
    bad = SynthConfig{};
    bad.max_blobs = 0;
    CHECK_THROWS_WITH_AS(synth::make_ground_truth(tax, mask, bad, 1),
                         doctest::Contains("blob count"), ValidationError);
    bad = SynthConfig{};
    bad.blob_sigma = 0.0;
    CHECK_THROWS_WITH_AS(synth::make_ground_truth(tax, mask, bad, 1),
                         doctest::Contains("sigma"), ValidationError);
    bad = SynthConfig{};
    bad.noise_sigma = -1.0;
    CHECK_THROWS_WITH_AS(synth::make_ground_truth(tax, mask, bad, 1),
                         doctest::Contains("amplitudes"), ValidationError);

    // Mask too small for ground-truth placement.
    vol::VolumeGrid tiny{2, 2, 1, 3.0, 3.0, 3.0};
    auto tiny_mask =
        std::make_shared<vol::BrainMask>(tiny, std::vector<std::uint8_t>(tiny.cells(), 1));
    CHECK_THROWS_WITH_AS(synth::make_ground_truth(tax, tiny_mask, SynthConfig{}, 1),
                         doctest::Contains("p >= 8"), ValidationError);

    auto check_corpus_throws = [&](SynthConfig cfg, const char* what) {
        auto truth = synth::make_ground_truth(tax, mask, cfg, 1);
        CHECK_THROWS_WITH_AS(synth::generate_corpus(truth, 1), doctest::Contains(what),
                             ValidationError);
    };

    SynthConfig cfg;
    cfg.subjects_per_study = {3};
    cfg.conditions_per_study = {3, 3};
    check_corpus_throws(cfg, "equal");

    cfg = SynthConfig{};
    cfg.subjects_per_study = {4};
    cfg.conditions_per_study = {2};
    check_corpus_throws(cfg, "at least 2 studies");

    cfg = SynthConfig{};
    cfg.subjects_per_study = {0, 3};
    cfg.conditions_per_study = {2, 2};
    check_corpus_throws(cfg, ">= 1");

    cfg = SynthConfig{};
    cfg.subjects_per_study = {3, 3};
    cfg.conditions_per_study = {2, 2};
    cfg.n_labs = 0;
    check_corpus_throws(cfg, "n_labs");
    cfg.n_labs = 5;
    check_corpus_throws(cfg, "n_labs");
}
