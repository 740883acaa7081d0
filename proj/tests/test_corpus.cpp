#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "cogmap/corpus.hpp"
#include "cogmap/rng.hpp"

using namespace cogmap;
using corpus::Condition;
using corpus::Corpus;
using corpus::Study;

namespace fs = std::filesystem;

namespace {

vol::MaskPtr tiny_mask() {
    vol::VolumeGrid g{3, 2, 2, 2.0, 2.0, 2.0};
    return std::make_shared<vol::BrainMask>(g, std::vector<std::uint8_t>(g.cells(), 1));
}

Corpus two_study_corpus() {
    auto mask = tiny_mask();
    std::vector<Study> studies(2);
    studies[0].id = "s01";
    studies[0].laboratory = "lab_a";
    studies[0].subjects = {"sub01", "sub02"};
    studies[0].conditions = {{"c01", {"visual", "words", "read"}},
                             {"c02", {"auditory", "attend"}}};
    studies[1].id = "s02";
    studies[1].laboratory = "lab_b";
    studies[1].subjects = {"sub01"};
    studies[1].conditions = {{"c01", {"visual", "words", "read"}}, {"c02", {"visual", "face"}}};

    std::vector<corpus::MapEntry> maps;
    for (int sub = 0; sub < 2; ++sub)
        for (int c = 0; c < 2; ++c) maps.push_back({0, sub, c, ""});
    for (int c = 0; c < 2; ++c) maps.push_back({1, 0, c, ""});

    Rng rng(404);
    Eigen::MatrixXf data(static_cast<int>(maps.size()), mask->p());
    for (Eigen::Index i = 0; i < data.rows(); ++i)
        for (int v = 0; v < mask->p(); ++v) data(i, v) = static_cast<float>(rng.normal());
    return Corpus(corpus::default_taxonomy(), mask, studies, maps, data);
}

std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

} // namespace

TEST_CASE("default taxonomy matches the published term table") {
    const auto tax = corpus::default_taxonomy();
    REQUIRE(tax.categories.size() == 4);
    CHECK(tax.terms_by_category[0].size() == 2);
    CHECK(tax.terms_by_category[1].size() == 7);
    CHECK(tax.terms_by_category[2].size() == 7);
    CHECK(tax.terms_by_category[3].size() == 3);
    CHECK(tax.all_terms().size() == 19);
    CHECK(tax.has_term("non-vocal sounds"));
    CHECK(tax.category_name_of("saccades") == "overt response");
    CHECK(tax.category_of("nope") == -1);
}

TEST_CASE("taxonomy validation") {
    corpus::Taxonomy t;
    t.categories = {"a", "b"};
    t.terms_by_category = {{"x"}, {"x"}};
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t.terms_by_category = {{"x"}, {}};
    CHECK_THROWS_AS(t.validate(), ValidationError);
}

TEST_CASE("corpus accessors and strict mode") {
    const auto c = two_study_corpus();
    CHECK(c.n_maps() == 6);
    CHECK(c.p() == 12);
    CHECK(c.map_id(0) == "s01/sub01/c01");
    CHECK(c.map_has_term(0, "visual"));
    CHECK(c.map_has_term(0, "read"));
    CHECK_FALSE(c.map_has_term(0, "auditory"));
    CHECK(c.map_terms(1) == std::vector<std::string>{"attend", "auditory"});
    c.validate_strict_categories(); // at most one term per category everywhere

    // a condition with two same-category terms trips strict mode
    auto mask = tiny_mask();
    std::vector<Study> studies(1);
    studies[0].id = "s01";
    studies[0].laboratory = "lab";
    studies[0].subjects = {"sub01"};
    studies[0].conditions = {{"c01", {"visual", "auditory"}}};
    Eigen::MatrixXf data = Eigen::MatrixXf::Zero(1, mask->p());
    Corpus bad(corpus::default_taxonomy(), mask, studies, {{0, 0, 0, ""}}, data);
    CHECK_THROWS_WITH_AS(bad.validate_strict_categories(),
                         doctest::Contains("stimulus modality"), ValidationError);
}

TEST_CASE("unknown term is rejected naming the condition") {
    auto mask = tiny_mask();
    std::vector<Study> studies(1);
    studies[0].id = "s01";
    studies[0].laboratory = "lab";
    studies[0].subjects = {"sub01"};
    studies[0].conditions = {{"c07", {"smell"}}};
    Eigen::MatrixXf data = Eigen::MatrixXf::Zero(1, mask->p());
    CHECK_THROWS_WITH_AS(
        Corpus(corpus::default_taxonomy(), mask, studies, {{0, 0, 0, ""}}, data),
        doctest::Contains("s01/c07"), ValidationError);
}

TEST_CASE("term span report") {
    const auto c = two_study_corpus();
    bool checked_words = false, checked_face = false, checked_move = false;
    for (const auto& span : corpus::validate_term_span(c)) {
        if (span.term == "words") {
            CHECK(span.n_studies == 2);
            CHECK(span.usable);
            checked_words = true;
        } else if (span.term == "face") {
            CHECK(span.n_studies == 1);
            CHECK_FALSE(span.usable);
            checked_face = true;
        } else if (span.term == "move") {
            CHECK(span.n_studies == 0);
            CHECK_FALSE(span.usable);
            checked_move = true;
        }
    }
    CHECK(checked_words);
    CHECK(checked_face);
    CHECK(checked_move);
}

TEST_CASE("design matrix construction") {
    const auto c = two_study_corpus();
    SUBCASE("full taxonomy gives 19 term columns plus intercept") {
        const auto d = corpus::build_design_matrix(c, {}, true);
        CHECK(d.k_terms() == 19);
        CHECK(d.k_total() == 20);
        CHECK(d.intercept_included);
        CHECK(d.Y.col(19).minCoeff() == 1.0);
        // row 0 is {visual, words, read}
        const auto row = d.Y.row(0);
        int ones = 0;
        for (int j = 0; j < 19; ++j) ones += row[j] == 1.0;
        CHECK(ones == 3);
        CHECK(row[d.column_of("visual")] == 1.0);
        CHECK(row[d.column_of("words")] == 1.0);
        CHECK(row[d.column_of("read")] == 1.0);
        CHECK(row[d.column_of("auditory")] == 0.0);
    }
    SUBCASE("exclusions remove columns") {
        const auto d = corpus::build_design_matrix(c, {"visual", "digits"}, true);
        CHECK(d.k_terms() == 17);
        CHECK(d.column_of("visual") == -1);
        CHECK(d.column_of("digits") == -1);
    }
    SUBCASE("column sums equal term frequencies") {
        const auto d = corpus::build_design_matrix(c, {}, false);
        for (const auto& [term, count] : corpus::term_frequencies(c)) {
            const int col = d.column_of(term);
            CHECK(d.Y.col(col).sum() == doctest::Approx(count));
        }
    }
    SUBCASE("unknown exclusion and excluding everything rejected") {
        CHECK_THROWS_AS(corpus::build_design_matrix(c, {"nope"}, true), ValidationError);
        std::unordered_set<std::string> all;
        for (const auto& t : c.taxonomy().all_terms()) all.insert(t);
        CHECK_THROWS_AS(corpus::build_design_matrix(c, all, true), ValidationError);
    }
}

TEST_CASE("term frequencies count multi-label conditions") {
    const auto c = two_study_corpus();
    for (const auto& [term, count] : corpus::term_frequencies(c)) {
        if (term == "visual") CHECK(count == 4); // s01/c01 x2 subjects + s02/c01 + s02/c02
        if (term == "words") CHECK(count == 3);
        if (term == "auditory") CHECK(count == 2);
        if (term == "move") CHECK(count == 0);
    }
}

TEST_CASE("manifest round trip preserves payload bytes and structure") {
    const fs::path dir = fs::temp_directory_path() / "corpus_rt_test";
    fs::remove_all(dir);
    const auto c = two_study_corpus();
    corpus::save_corpus(c, dir.string());

    const auto c2 = corpus::load_corpus((dir / "manifest.json").string());
    CHECK(c2.n_maps() == c.n_maps());
    CHECK(c2.p() == c.p());
    CHECK(c2.mask()->grid().vx == 2.0);
    CHECK((c2.data() - c.data()).lpNorm<Eigen::Infinity>() == 0.0f);
    CHECK(c2.map_id(5) == c.map_id(5));
    CHECK(c2.taxonomy().all_terms() == c.taxonomy().all_terms());

    // saving the reloaded corpus reproduces byte-identical volumes
    const fs::path dir2 = fs::temp_directory_path() / "corpus_rt_test2";
    fs::remove_all(dir2);
    corpus::save_corpus(c2, dir2.string());
    int compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(dir / "maps")) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), dir);
        CHECK(read_bytes(entry.path()) == read_bytes(dir2 / rel));
        ++compared;
    }
    CHECK(compared == 6);
    CHECK(read_bytes(dir / "manifest.json") == read_bytes(dir2 / "manifest.json"));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("minimal hand-written manifest loads") {
    const fs::path dir = fs::temp_directory_path() / "corpus_minimal_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    // 1 study, 1 subject, 1 condition {visual, attend}, 1 map on a 2x1x1 grid
    vol::VolumeGrid g{2, 1, 1, 3.0, 3.0, 3.0};
    vol::BrainMask mask(g, {1, 1});
    vol::bmap::write_mask((dir / "mask.bmap").string(), mask);
    const float vals[2] = {0.5f, -1.5f};
    vol::bmap::write_masked((dir / "m.bmap").string(), g, "mask.bmap", vals, 2);
    std::ofstream os(dir / "manifest.json");
    os << R"({
      "taxonomy": {"stimulus modality": ["visual"], "instructions": ["attend"]},
      "grid": {"dims": [2,1,1], "voxel_size_mm": [3.0,3.0,3.0]},
      "mask_file": "mask.bmap",
      "studies": [{"id":"s01","laboratory":"lab","subjects":["sub01"],
                   "conditions":[{"id":"c01","terms":["visual","attend"]}]}],
      "maps": [{"file":"m.bmap","study":"s01","subject":"sub01","condition":"c01"}]
    })";
    os.close();
    const auto c = corpus::load_corpus((dir / "manifest.json").string());
    CHECK(c.n_maps() == 1);
    CHECK(c.p() == 2);
    CHECK(c.data()(0, 1) == -1.5f);
    CHECK(c.map_terms(0) == std::vector<std::string>{"attend", "visual"});
    fs::remove_all(dir);
}

TEST_CASE("manifest errors name the offending entity") {
    const fs::path dir = fs::temp_directory_path() / "corpus_err_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    vol::VolumeGrid g{2, 1, 1, 3.0, 3.0, 3.0};
    vol::BrainMask mask(g, {1, 1});
    vol::bmap::write_mask((dir / "mask.bmap").string(), mask);
    const float vals[2] = {0.0f, 0.0f};
    vol::bmap::write_masked((dir / "m.bmap").string(), g, "mask.bmap", vals, 2);
    auto write_manifest = [&](const std::string& study, const std::string& cond) {
        std::ofstream os(dir / "manifest.json");
        os << R"({"taxonomy": {"cat": ["visual"]},
                  "grid": {"dims": [2,1,1], "voxel_size_mm": [3,3,3]},
                  "mask_file": "mask.bmap",
                  "studies": [{"id":"s01","laboratory":"lab","subjects":["sub01"],
                               "conditions":[{"id":"c01","terms":["visual"]}]}],
                  "maps": [{"file":"m.bmap","study":")"
           << study << R"(","subject":"sub01","condition":")" << cond << R"("}]})";
    };
    write_manifest("ghost", "c01");
    CHECK_THROWS_WITH_AS(corpus::load_corpus((dir / "manifest.json").string()),
                         doctest::Contains("ghost"), ValidationError);
    write_manifest("s01", "c99");
    CHECK_THROWS_WITH_AS(corpus::load_corpus((dir / "manifest.json").string()),
                         doctest::Contains("c99"), ValidationError);
    fs::remove_all(dir);
}
