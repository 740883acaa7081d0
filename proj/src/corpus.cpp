#include "cogmap/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace cogmap::corpus {

void Taxonomy::validate() const {
    if (categories.size() != terms_by_category.size())
        throw ValidationError("taxonomy categories/terms misaligned");
    if (categories.empty()) throw ValidationError("taxonomy has no categories");
    std::unordered_set<std::string> seen;
    for (std::size_t c = 0; c < categories.size(); ++c) {
        if (terms_by_category[c].empty())
            throw ValidationError("taxonomy category '" + categories[c] + "' has no terms");
        for (const auto& t : terms_by_category[c]) {
            if (!seen.insert(t).second)
                throw ValidationError("taxonomy term '" + t + "' is not globally unique");
        }
    }
}

std::vector<std::string> Taxonomy::all_terms() const {
    std::vector<std::string> out;
    for (const auto& ts : terms_by_category)
        out.insert(out.end(), ts.begin(), ts.end());
    return out;
}

bool Taxonomy::has_term(const std::string& term) const { return category_of(term) >= 0; }

int Taxonomy::category_of(const std::string& term) const {
    for (std::size_t c = 0; c < terms_by_category.size(); ++c)
        for (const auto& t : terms_by_category[c])
            if (t == term) return static_cast<int>(c);
    return -1;
}

const std::string& Taxonomy::category_name_of(const std::string& term) const {
    const int c = category_of(term);
    if (c < 0) throw ValidationError("unknown term '" + term + "'");
    return categories[c];
}

Taxonomy default_taxonomy() {
    Taxonomy t;
    t.categories = {"stimulus modality", "explicit stimulus", "instructions", "overt response"};
    t.terms_by_category = {
        {"visual", "auditory"},
        {"words", "shapes", "digits", "abstract patterns", "non-vocal sounds", "scramble", "face"},
        {"attend", "read", "move", "track", "count", "discriminate", "inhibit"},
        {"saccades", "none", "button press"},
    };
    t.validate();
    return t;
}

std::string Condition::term_set_key() const {
    std::string key;
    for (const auto& t : terms) {
        key += t;
        key += '\x1f';
    }
    return key;
}

Corpus::Corpus(Taxonomy taxonomy, vol::MaskPtr mask, std::vector<Study> studies,
               std::vector<MapEntry> maps, Eigen::MatrixXf data)
    : taxonomy_(std::move(taxonomy)),
      mask_(std::move(mask)),
      studies_(std::move(studies)),
      maps_(std::move(maps)),
      data_(std::move(data)) {
    taxonomy_.validate();
    if (!mask_) throw ValidationError("corpus has no mask");
    if (data_.rows() != static_cast<Eigen::Index>(maps_.size()) || data_.cols() != mask_->p())
        throw ValidationError("corpus data matrix does not match maps x mask voxels");

    condition_base_.reserve(studies_.size());
    int flat = 0;
    for (auto& st : studies_) {
        std::unordered_set<std::string> cond_ids;
        for (auto& cond : st.conditions) {
            if (!cond_ids.insert(cond.id).second)
                throw ValidationError("study '" + st.id + "' has duplicate condition id '" +
                                      cond.id + "'");
            std::sort(cond.terms.begin(), cond.terms.end());
            cond.terms.erase(std::unique(cond.terms.begin(), cond.terms.end()),
                             cond.terms.end());
            if (cond.terms.empty())
                throw ValidationError("condition '" + st.id + "/" + cond.id + "' has no terms");
            for (const auto& t : cond.terms)
                if (!taxonomy_.has_term(t))
                    throw ValidationError("condition '" + st.id + "/" + cond.id +
                                          "' uses unknown term '" + t + "'");
        }
        condition_base_.push_back(flat);
        flat += static_cast<int>(st.conditions.size());
    }
    condition_term_sets_.resize(flat);
    for (std::size_t s = 0; s < studies_.size(); ++s)
        for (std::size_t c = 0; c < studies_[s].conditions.size(); ++c) {
            auto& set = condition_term_sets_[condition_base_[s] + c];
            for (const auto& t : studies_[s].conditions[c].terms) set.insert(t);
        }

    for (std::size_t i = 0; i < maps_.size(); ++i) {
        const MapEntry& m = maps_[i];
        if (m.study < 0 || m.study >= static_cast<int>(studies_.size()))
            throw ValidationError("map " + std::to_string(i) + " references a missing study");
        const Study& st = studies_[m.study];
        if (m.subject < 0 || m.subject >= static_cast<int>(st.subjects.size()))
            throw ValidationError("map " + std::to_string(i) + " references a missing subject");
        if (m.condition < 0 || m.condition >= static_cast<int>(st.conditions.size()))
            throw ValidationError("map " + std::to_string(i) + " references a missing condition");
    }
}

vol::MaskedVector Corpus::map_vector(int i) const {
    return {mask_, data_.row(i).cast<double>().transpose()};
}

const Condition& Corpus::map_condition(int i) const {
    const MapEntry& m = maps_[i];
    return studies_[m.study].conditions[m.condition];
}

const std::vector<std::string>& Corpus::map_terms(int i) const {
    return map_condition(i).terms;
}

bool Corpus::map_has_term(int i, const std::string& term) const {
    const MapEntry& m = maps_[i];
    return condition_term_sets_[condition_base_[m.study] + m.condition].count(term) > 0;
}

std::string Corpus::map_id(int i) const {
    const MapEntry& m = maps_[i];
    const Study& st = studies_[m.study];
    return st.id + "/" + st.subjects[m.subject] + "/" + st.conditions[m.condition].id;
}

void Corpus::validate_strict_categories() const {
    for (const auto& st : studies_)
        for (const auto& cond : st.conditions) {
            std::unordered_map<int, int> per_cat;
            for (const auto& t : cond.terms)
                if (++per_cat[taxonomy_.category_of(t)] > 1)
                    throw ValidationError("condition '" + st.id + "/" + cond.id +
                                          "' has more than one term in category '" +
                                          taxonomy_.category_name_of(t) + "'");
        }
}

// --- manifest I/O -------------------------------------------------------------

Corpus load_corpus(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw ValidationError("cannot open manifest: " + manifest_path);
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ValidationError("manifest parse error: " + std::string(e.what()));
    }
    const fs::path base = fs::path(manifest_path).parent_path();

    Taxonomy tax;
    if (!j.contains("taxonomy") || !j["taxonomy"].is_object())
        throw ValidationError("manifest missing taxonomy object");
    for (auto& [cat, terms] : j["taxonomy"].items()) {
        tax.categories.push_back(cat);
        std::vector<std::string> ts;
        for (auto& t : terms) ts.push_back(t.get<std::string>());
        tax.terms_by_category.push_back(std::move(ts));
    }
    tax.validate();

    vol::VolumeGrid grid;
    const auto& jg = j.at("grid");
    const auto dims = jg.at("dims");
    grid.nx = dims.at(0).get<int>();
    grid.ny = dims.at(1).get<int>();
    grid.nz = dims.at(2).get<int>();
    const auto vsz = jg.at("voxel_size_mm");
    grid.vx = vsz.at(0).get<double>();
    grid.vy = vsz.at(1).get<double>();
    grid.vz = vsz.at(2).get<double>();
    grid.validate();

    // BMAP1 volumes carry dims only; the manifest is authoritative for the
    // voxel size, so compare dims and rebuild the mask on the manifest grid.
    const std::string mask_file = j.at("mask_file").get<std::string>();
    const auto mask_raw = vol::bmap::read_mask((base / mask_file).string());
    if (mask_raw.grid().nx != grid.nx || mask_raw.grid().ny != grid.ny ||
        mask_raw.grid().nz != grid.nz)
        throw ValidationError("mask file dims do not match manifest grid");
    auto mask = std::make_shared<vol::BrainMask>(grid, mask_raw.cells());

    std::vector<Study> studies;
    std::unordered_map<std::string, int> study_index;
    for (const auto& js : j.at("studies")) {
        Study st;
        st.id = js.at("id").get<std::string>();
        st.laboratory = js.at("laboratory").get<std::string>();
        for (const auto& s : js.at("subjects")) st.subjects.push_back(s.get<std::string>());
        for (const auto& jc : js.at("conditions")) {
            Condition c;
            c.id = jc.at("id").get<std::string>();
            for (const auto& t : jc.at("terms")) c.terms.push_back(t.get<std::string>());
            st.conditions.push_back(std::move(c));
        }
        if (study_index.count(st.id))
            throw ValidationError("duplicate study id '" + st.id + "'");
        study_index[st.id] = static_cast<int>(studies.size());
        studies.push_back(std::move(st));
    }

    std::vector<MapEntry> maps;
    const auto& jmaps = j.at("maps");
    Eigen::MatrixXf data(static_cast<Eigen::Index>(jmaps.size()), mask->p());
    int row = 0;
    for (const auto& jm : jmaps) {
        MapEntry m;
        m.file = jm.at("file").get<std::string>();
        const std::string study_id = jm.at("study").get<std::string>();
        auto it = study_index.find(study_id);
        if (it == study_index.end())
            throw ValidationError("map '" + m.file + "' references unknown study '" + study_id +
                                  "'");
        m.study = it->second;
        const Study& st = studies[m.study];
        const std::string subj = jm.at("subject").get<std::string>();
        const auto sit = std::find(st.subjects.begin(), st.subjects.end(), subj);
        if (sit == st.subjects.end())
            throw ValidationError("map '" + m.file + "' references unknown subject '" + subj +
                                  "' in study '" + study_id + "'");
        m.subject = static_cast<int>(sit - st.subjects.begin());
        const std::string cond = jm.at("condition").get<std::string>();
        m.condition = -1;
        for (std::size_t c = 0; c < st.conditions.size(); ++c)
            if (st.conditions[c].id == cond) m.condition = static_cast<int>(c);
        if (m.condition < 0)
            throw ValidationError("map '" + m.file + "' references unknown condition '" + cond +
                                  "' in study '" + study_id + "'");

        const auto mf = vol::bmap::read_masked((base / m.file).string());
        if (mf.grid.nx != grid.nx || mf.grid.ny != grid.ny || mf.grid.nz != grid.nz)
            throw ValidationError("map '" + m.file + "' dims do not match manifest grid");
        if (static_cast<int>(mf.values.size()) != mask->p())
            throw ValidationError("map '" + m.file + "' has " +
                                  std::to_string(mf.values.size()) + " values, expected " +
                                  std::to_string(mask->p()));
        for (float v : mf.values)
            if (!std::isfinite(v))
                throw ValidationError("map '" + m.file + "' contains a non-finite value");
        data.row(row) = Eigen::Map<const Eigen::VectorXf>(mf.values.data(), mask->p());
        maps.push_back(std::move(m));
        ++row;
    }

    return Corpus(std::move(tax), std::move(mask), std::move(studies), std::move(maps),
                  std::move(data));
}

void save_corpus(const Corpus& corpus, const std::string& out_dir) {
    const fs::path base(out_dir);
    fs::create_directories(base);
    fs::create_directories(base / "maps");

    const std::string mask_file = "mask.bmap";
    vol::bmap::write_mask((base / mask_file).string(), *corpus.mask());

    ordered_json j;
    ordered_json jtax = ordered_json::object();
    const Taxonomy& tax = corpus.taxonomy();
    for (std::size_t c = 0; c < tax.categories.size(); ++c)
        jtax[tax.categories[c]] = tax.terms_by_category[c];
    j["taxonomy"] = std::move(jtax);
    const vol::VolumeGrid& g = corpus.mask()->grid();
    j["grid"] = {{"dims", {g.nx, g.ny, g.nz}}, {"voxel_size_mm", {g.vx, g.vy, g.vz}}};
    j["mask_file"] = mask_file;

    ordered_json jstudies = ordered_json::array();
    for (const auto& st : corpus.studies()) {
        ordered_json js;
        js["id"] = st.id;
        js["laboratory"] = st.laboratory;
        js["subjects"] = st.subjects;
        ordered_json jconds = ordered_json::array();
        for (const auto& c : st.conditions)
            jconds.push_back({{"id", c.id}, {"terms", c.terms}});
        js["conditions"] = std::move(jconds);
        jstudies.push_back(std::move(js));
    }
    j["studies"] = std::move(jstudies);

    ordered_json jmaps = ordered_json::array();
    std::vector<float> row(corpus.p());
    for (int i = 0; i < corpus.n_maps(); ++i) {
        const MapEntry& m = corpus.maps()[i];
        const Study& st = corpus.studies()[m.study];
        std::string file = m.file;
        if (file.empty())
            file = "maps/" + st.id + "_" + st.subjects[m.subject] + "_" +
                   st.conditions[m.condition].id + ".bmap";
        const fs::path target = base / file;
        fs::create_directories(target.parent_path());
        Eigen::Map<Eigen::VectorXf>(row.data(), corpus.p()) = corpus.data().row(i);
        vol::bmap::write_masked(target.string(), g, mask_file, row.data(), corpus.p());
        jmaps.push_back({{"file", file},
                         {"study", st.id},
                         {"subject", st.subjects[m.subject]},
                         {"condition", st.conditions[m.condition].id}});
    }
    j["maps"] = std::move(jmaps);

    std::ofstream os(base / "manifest.json");
    if (!os) throw ValidationError("cannot write manifest in " + out_dir);
    os << j.dump(2) << "\n";
}

std::vector<TermSpan> validate_term_span(const Corpus& corpus) {
    std::vector<TermSpan> out;
    for (const auto& term : corpus.taxonomy().all_terms()) {
        TermSpan span;
        span.term = term;
        for (const auto& st : corpus.studies()) {
            bool found = false;
            for (const auto& c : st.conditions)
                if (std::find(c.terms.begin(), c.terms.end(), term) != c.terms.end())
                    found = true;
            if (found) ++span.n_studies;
        }
        span.usable = span.n_studies >= 2;
        out.push_back(std::move(span));
    }
    return out;
}

DesignMatrix build_design_matrix(const Corpus& corpus,
                                 const std::unordered_set<std::string>& excluded_terms,
                                 bool intercept) {
    for (const auto& t : excluded_terms)
        if (!corpus.taxonomy().has_term(t))
            throw ValidationError("excluded term '" + t + "' is not in the taxonomy");
    DesignMatrix d;
    for (const auto& t : corpus.taxonomy().all_terms())
        if (!excluded_terms.count(t)) d.columns.push_back(t);
    if (d.columns.empty()) throw ValidationError("design matrix would exclude every term");
    d.intercept_included = intercept;
    const int n = corpus.n_maps();
    const int k = static_cast<int>(d.columns.size());
    d.Y.setZero(n, k + (intercept ? 1 : 0));
    for (int i = 0; i < n; ++i)
        for (int jcol = 0; jcol < k; ++jcol)
            if (corpus.map_has_term(i, d.columns[jcol])) d.Y(i, jcol) = 1.0;
    if (intercept) d.Y.col(k).setOnes();
    return d;
}

int DesignMatrix::column_of(const std::string& term) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == term) return static_cast<int>(i);
    return -1;
}

std::vector<std::pair<std::string, int>> term_frequencies(const Corpus& corpus) {
    std::vector<std::pair<std::string, int>> out;
    for (const auto& term : corpus.taxonomy().all_terms()) {
        int count = 0;
        for (int i = 0; i < corpus.n_maps(); ++i)
            if (corpus.map_has_term(i, term)) ++count;
        out.emplace_back(term, count);
    }
    return out;
}

} // namespace cogmap::corpus
