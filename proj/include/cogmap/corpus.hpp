#pragma once
// Ontology taxonomy, study/condition/map data model, manifest I/O, and the
// binary term-occurrence design matrix.

#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "cogmap/volume.hpp"

namespace cogmap::corpus {

struct Taxonomy {
    std::vector<std::string> categories;
    std::vector<std::vector<std::string>> terms_by_category; // aligned with categories

    void validate() const;
    // All terms in category order, then in-category order.
    std::vector<std::string> all_terms() const;
    bool has_term(const std::string& term) const;
    // Category index of a term, or -1.
    int category_of(const std::string& term) const;
    const std::string& category_name_of(const std::string& term) const;
};

// The default taxonomy: 4 categories, 19 terms.
Taxonomy default_taxonomy();

struct Condition {
    std::string id;
    std::vector<std::string> terms; // canonicalized: sorted, unique

    // Stable key for term-set equality across studies.
    std::string term_set_key() const;
};

struct Study {
    std::string id;
    std::string laboratory;
    std::vector<std::string> subjects;
    std::vector<Condition> conditions;
};

struct MapEntry {
    int study = -1;     // index into studies
    int subject = -1;   // index into study.subjects
    int condition = -1; // index into study.conditions
    std::string file;   // path relative to the manifest, empty for in-memory corpora
};

class Corpus {
  public:
    Corpus(Taxonomy taxonomy, vol::MaskPtr mask, std::vector<Study> studies,
           std::vector<MapEntry> maps, Eigen::MatrixXf data);

    const Taxonomy& taxonomy() const { return taxonomy_; }
    const vol::MaskPtr& mask() const { return mask_; }
    const std::vector<Study>& studies() const { return studies_; }
    const std::vector<MapEntry>& maps() const { return maps_; }
    int n_maps() const { return static_cast<int>(maps_.size()); }
    int p() const { return mask_->p(); }

    // Row-major access to map i's voxel data (float master copy).
    const Eigen::MatrixXf& data() const { return data_; }
    vol::MaskedVector map_vector(int i) const;

    const Condition& map_condition(int i) const;
    const std::vector<std::string>& map_terms(int i) const;
    bool map_has_term(int i, const std::string& term) const;
    std::string map_id(int i) const; // "<study>/<subject>/<condition>"

    // Enforce <= 1 term per category on every condition.
    void validate_strict_categories() const;

  private:
    Taxonomy taxonomy_;
    vol::MaskPtr mask_;
    std::vector<Study> studies_;
    std::vector<MapEntry> maps_;
    Eigen::MatrixXf data_; // n x p
    std::vector<std::unordered_set<std::string>> condition_term_sets_; // per (study, condition), flattened
    std::vector<int> condition_base_;                                  // study -> flat offset
};

struct DesignMatrix {
    std::vector<std::string> columns; // included term names, taxonomy order
    Eigen::MatrixXd Y;                // n x k (+1 intercept column last if included)
    bool intercept_included = true;

    int n() const { return static_cast<int>(Y.rows()); }
    int k_terms() const { return static_cast<int>(columns.size()); }
    int k_total() const { return static_cast<int>(Y.cols()); }
    int column_of(const std::string& term) const; // -1 if absent
};

struct TermSpan {
    std::string term;
    int n_studies = 0;
    bool usable = false; // false when present in fewer than 2 studies
};

Corpus load_corpus(const std::string& manifest_path);
void save_corpus(const Corpus& corpus, const std::string& out_dir);

std::vector<TermSpan> validate_term_span(const Corpus& corpus);

DesignMatrix build_design_matrix(const Corpus& corpus,
                                 const std::unordered_set<std::string>& excluded_terms,
                                 bool intercept = true);

// Per-term map counts, in taxonomy term order.
std::vector<std::pair<std::string, int>> term_frequencies(const Corpus& corpus);

} // namespace cogmap::corpus
