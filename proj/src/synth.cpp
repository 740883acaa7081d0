#include "cogmap/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <utility>

#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include "cogmap/rng.hpp"

namespace cogmap::synth {

using json = nlohmann::ordered_json;

const std::vector<std::pair<int, int>>& default_study_plan() {
    // (subjects, conditions) per study. Totals: 486 subjects, 131 conditions,
    // 3826 maps (sum of subjects*conditions). A long-tailed size distribution:
    // a few large consortium-style studies and many small ones.
    static const std::vector<std::pair<int, int>> plan = {
        {59, 12}, {57, 9}, {54, 9}, {35, 10}, {29, 9}, {27, 8}, {25, 8},
        {23, 8},  {22, 6}, {22, 2}, {21, 8},  {21, 2}, {20, 4}, {17, 4},
        {16, 9},  {13, 8}, {9, 6},  {8, 5},   {8, 4},
    };
    return plan;
}

const std::vector<std::string>& default_tail_terms() {
    // Placed in exactly three small studies each so their realized map counts
    // stay well under 100 while still satisfying the span rule.
    static const std::vector<std::string> tails = {
        "scramble",
        "saccades",
        "inhibit",
        "non-vocal sounds",
    };
    return tails;
}

vol::MaskPtr make_ellipsoid_mask(const vol::VolumeGrid& grid) {
    grid.validate();
    std::vector<std::uint8_t> cells(static_cast<std::size_t>(grid.cells()), 0);
    // Semi-axes slightly beyond the half-extents so the mask keeps most of
    // the grid volume (the default 24x24x18 grid yields p = 6200).
    const double cx = (grid.nx - 1) / 2.0, cy = (grid.ny - 1) / 2.0, cz = (grid.nz - 1) / 2.0;
    const double rx = (grid.nx + 1) / 2.0;
    const double ry = (grid.ny + 1) / 2.0;
    const double rz = (grid.nz + 1) / 2.0;
    for (int x = 0; x < grid.nx; ++x)
        for (int y = 0; y < grid.ny; ++y)
            for (int z = 0; z < grid.nz; ++z) {
                const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
                if (dx * dx + dy * dy + dz * dz <= 1.0)
                    cells[static_cast<std::size_t>(grid.cell(x, y, z))] = 1;
            }
    return std::make_shared<vol::BrainMask>(grid, std::move(cells));
}

namespace {

struct Template {
    std::vector<std::string> terms;
    double weight = 1.0;
};

// Curated condition templates over the default taxonomy. Covers every common
// (non-tail) term; modality indicators are strongly anti-correlated but not
// collinear because two templates carry no modality at all, and "count" nearly
// always co-occurs with "digits" (one decoupling template keeps the design
// full rank). The light templates that break exact dependencies are pinned by
// anchor_templates() below so small corpora realize them too.
std::vector<Template> curated_templates() {
    return {
        {{"visual", "words", "read", "none"}, 8},
        {{"visual", "words", "read", "button press"}, 7},
        {{"visual", "words", "attend", "none"}, 4},
        {{"visual", "shapes", "discriminate", "button press"}, 7},
        {{"visual", "shapes", "attend", "none"}, 4},
        {{"visual", "shapes", "move", "button press"}, 3},
        {{"visual", "digits", "count", "button press"}, 6},
        {{"visual", "digits", "count", "none"}, 3},
        {{"visual", "digits", "read", "button press"}, 1},
        {{"visual", "abstract patterns", "track", "none"}, 3},
        {{"visual", "abstract patterns", "attend", "none"}, 2},
        {{"visual", "face", "discriminate", "button press"}, 5},
        {{"visual", "face", "attend", "none"}, 3},
        {{"auditory", "words", "attend", "button press"}, 6},
        {{"auditory", "words", "discriminate", "button press"}, 4},
        {{"auditory", "words", "attend", "none"}, 4},
        {{"auditory", "words", "move", "button press"}, 2},
        {{"move", "button press"}, 2},
        {{"attend", "none"}, 2},
        // Passive / sparsely annotated tasks. These break the exact linear
        // dependencies a fully-crossed annotation scheme would create (each
        // category's indicators summing to the intercept, or modality and
        // stimulus always co-occurring), keeping the design full rank.
        {{"visual", "face", "none"}, 3},
        {{"visual", "attend", "none"}, 3},
        {{"auditory", "attend"}, 2},
        {{"visual", "abstract patterns", "attend"}, 2},
    };
}

// Rank anchors: the light templates that break the exact linear dependencies
// a heavy-template-only draw would leave behind (digits == count, track ==
// saccades, modality or response indicators summing to the intercept). One
// copy of each is reserved up front in the largest studies, so the realized
// term design stays full rank no matter how the remaining slots are drawn.
std::vector<std::vector<std::string>> anchor_templates() {
    return {
        {"visual", "digits", "read", "button press"},
        {"visual", "abstract patterns", "track", "none"},
        {"attend", "none"},
        {"auditory", "attend"},
    };
}

// Tail term -> full replacement condition.
std::vector<std::pair<std::string, std::vector<std::string>>> tail_templates() {
    return {
        {"scramble", {"visual", "scramble", "attend", "none"}},
        {"saccades", {"visual", "abstract patterns", "track", "saccades"}},
        {"inhibit", {"visual", "words", "inhibit", "button press"}},
        {"non-vocal sounds", {"auditory", "non-vocal sounds", "attend", "none"}},
    };
}

bool taxonomy_supports_templates(const corpus::Taxonomy& tax) {
    for (const auto& t : curated_templates())
        for (const auto& term : t.terms)
            if (!tax.has_term(term)) return false;
    for (const auto& [term, cond] : tail_templates()) {
        if (!tax.has_term(term)) return false;
        for (const auto& c : cond)
            if (!tax.has_term(c)) return false;
    }
    return true;
}

// Weighted draw without replacement; the pool refills when exhausted.
class TemplatePool {
  public:
    TemplatePool(const std::vector<Template>& all, Rng& rng) : all_(all), rng_(rng) { refill(); }

    int draw() {
        if (remaining_.empty()) refill();
        double total = 0;
        for (int i : remaining_) total += all_[static_cast<std::size_t>(i)].weight;
        double x = rng_.uniform() * total;
        std::size_t pick = remaining_.size() - 1;
        for (std::size_t j = 0; j < remaining_.size(); ++j) {
            x -= all_[static_cast<std::size_t>(remaining_[j])].weight;
            if (x < 0) {
                pick = j;
                break;
            }
        }
        int idx = remaining_[pick];
        remaining_.erase(remaining_.begin() + static_cast<std::ptrdiff_t>(pick));
        return idx;
    }

  private:
    void refill() {
        remaining_.resize(all_.size());
        std::iota(remaining_.begin(), remaining_.end(), 0);
    }
    const std::vector<Template>& all_;
    Rng& rng_;
    std::vector<int> remaining_;
};

struct Plan {
    // conditions[s][slot] = term set
    std::vector<std::vector<std::vector<std::string>>> conditions;
    // Flattened (study, slot) -> pinned by a tail term or a rank anchor; the
    // span repair below must never replace these.
    std::vector<std::uint8_t> reserved;
    std::vector<int> slot_base; // study -> flat offset
    int n_slots = 0;

    bool is_reserved(int s, int k) const {
        return reserved[static_cast<std::size_t>(slot_base[static_cast<std::size_t>(s)] + k)] != 0;
    }
    void mark_reserved(int s, int k) {
        reserved[static_cast<std::size_t>(slot_base[static_cast<std::size_t>(s)] + k)] = 1;
    }
};

std::map<std::string, std::set<int>> term_study_sets(const Plan& plan) {
    std::map<std::string, std::set<int>> sets;
    for (std::size_t s = 0; s < plan.conditions.size(); ++s)
        for (const auto& cond : plan.conditions[s])
            for (const auto& term : cond) sets[term].insert(static_cast<int>(s));
    return sets;
}

std::map<std::string, int> realized_counts(const Plan& plan, const std::vector<int>& subjects) {
    std::map<std::string, int> counts;
    for (std::size_t s = 0; s < plan.conditions.size(); ++s)
        for (const auto& cond : plan.conditions[s])
            for (const auto& term : cond) counts[term] += subjects[s];
    return counts;
}

// One attempt at a study/condition plan. Returns empty string on success,
// otherwise the name of the violating term.
std::string build_plan_attempt(const corpus::Taxonomy& tax, const std::vector<int>& subjects,
                               const std::vector<int>& n_conditions, bool curated, Rng& rng,
                               Plan& plan) {
    const int n_studies = static_cast<int>(subjects.size());
    const int min_span = std::max(2, std::min(3, n_studies));

    plan = Plan{};
    plan.conditions.assign(static_cast<std::size_t>(n_studies), {});
    plan.slot_base.assign(static_cast<std::size_t>(n_studies), 0);
    for (int s = 0; s < n_studies; ++s) {
        plan.slot_base[static_cast<std::size_t>(s)] = plan.n_slots;
        plan.n_slots += n_conditions[static_cast<std::size_t>(s)];
        plan.conditions[static_cast<std::size_t>(s)].assign(
            static_cast<std::size_t>(n_conditions[static_cast<std::size_t>(s)]), {});
    }
    plan.reserved.assign(static_cast<std::size_t>(plan.n_slots), 0);

    // Studies in ascending size; the tail terms live in the smallest ones.
    std::vector<int> by_size(static_cast<std::size_t>(n_studies));
    std::iota(by_size.begin(), by_size.end(), 0);
    std::sort(by_size.begin(), by_size.end(), [&](int a, int b) {
        if (subjects[static_cast<std::size_t>(a)] != subjects[static_cast<std::size_t>(b)])
            return subjects[static_cast<std::size_t>(a)] < subjects[static_cast<std::size_t>(b)];
        return a < b;
    });

    std::vector<int> slots_used(static_cast<std::size_t>(n_studies), 0);
    if (curated) {
        const auto tails = tail_templates();
        for (std::size_t ti = 0; ti < tails.size(); ++ti) {
            if (static_cast<int>(ti) + min_span > n_studies) break; // tail term left out
            int placed = 0;
            for (std::size_t pos = ti; pos < by_size.size() && placed < min_span; ++pos) {
                const int s = by_size[pos];
                int& used = slots_used[static_cast<std::size_t>(s)];
                if (used >= n_conditions[static_cast<std::size_t>(s)]) continue;
                const int slot = used++;
                plan.conditions[static_cast<std::size_t>(s)][static_cast<std::size_t>(slot)] =
                    tails[ti].second;
                plan.mark_reserved(s, slot);
                ++placed;
            }
            if (placed < min_span) return tails[ti].first; // not enough room
        }

        // Pin one copy of every rank anchor, walking the studies from largest
        // to smallest (the tails above walked from the smallest up).
        std::size_t cursor = 0;
        for (const auto& anchor : anchor_templates()) {
            for (std::size_t tries = 0; tries < by_size.size(); ++tries) {
                const int s = by_size[by_size.size() - 1 - cursor % by_size.size()];
                ++cursor;
                int& used = slots_used[static_cast<std::size_t>(s)];
                if (used >= n_conditions[static_cast<std::size_t>(s)]) continue;
                const int slot = used++;
                plan.conditions[static_cast<std::size_t>(s)][static_cast<std::size_t>(slot)] =
                    anchor;
                plan.mark_reserved(s, slot);
                break;
            }
            // No room anywhere: leave it out and let the rank check decide.
        }
    }

    // Fill the remaining slots from the template pool.
    const auto templates = curated_templates();
    const auto all_terms = tax.all_terms();
    for (int s = 0; s < n_studies; ++s) {
        TemplatePool pool(templates, rng);
        for (int k = 0; k < n_conditions[static_cast<std::size_t>(s)]; ++k) {
            auto& cond = plan.conditions[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
            if (!cond.empty()) continue; // tail slot
            if (curated) {
                cond = templates[static_cast<std::size_t>(pool.draw())].terms;
            } else {
                // Generic taxonomy: one uniform term per category, dropping
                // each category with 20% probability. Every category must be
                // droppable, or its indicators would sum to the intercept on
                // every row and the design could never be full rank.
                for (std::size_t c = 0; c < tax.categories.size(); ++c) {
                    const auto& terms = tax.terms_by_category[c];
                    if (rng.uniform() < 0.2) continue;
                    cond.push_back(terms[rng.uniform_int(terms.size())]);
                }
                if (cond.empty()) {
                    const auto& terms =
                        tax.terms_by_category[rng.uniform_int(tax.categories.size())];
                    cond.push_back(terms[rng.uniform_int(terms.size())]);
                }
            }
        }
    }

    // Span repair: every term present in the corpus must reach min_span.
    for (int pass = 0; pass < 8; ++pass) {
        bool changed = false;
        auto spans = term_study_sets(plan);
        for (const auto& term : all_terms) {
            auto it = spans.find(term);
            if (it == spans.end()) continue; // absent terms handled by caller
            while (static_cast<int>(it->second.size()) < min_span) {
                // Pick a replacement condition containing the term: a weighted
                // draw, so repeated repairs do not collapse the plan onto the
                // single heaviest template.
                std::vector<std::string> repl;
                if (curated) {
                    double total = 0;
                    for (const auto& t : templates)
                        if (std::find(t.terms.begin(), t.terms.end(), term) != t.terms.end())
                            total += t.weight;
                    double x = rng.uniform() * total;
                    for (const auto& t : templates) {
                        if (std::find(t.terms.begin(), t.terms.end(), term) == t.terms.end())
                            continue;
                        x -= t.weight;
                        repl = t.terms;
                        if (x < 0) break;
                    }
                } else {
                    const int tc = tax.category_of(term);
                    for (std::size_t c = 0; c < tax.categories.size(); ++c) {
                        if (static_cast<int>(c) == tc) {
                            repl.push_back(term);
                        } else {
                            const auto& terms = tax.terms_by_category[c];
                            repl.push_back(terms[rng.uniform_int(terms.size())]);
                        }
                    }
                }
                if (repl.empty()) return term;

                // Per-study slot counts so we never break another term's span.
                std::map<std::string, std::map<int, int>> slot_counts;
                for (std::size_t s2 = 0; s2 < plan.conditions.size(); ++s2)
                    for (const auto& cond : plan.conditions[s2])
                        for (const auto& t2 : cond) slot_counts[t2][static_cast<int>(s2)]++;

                bool placed = false;
                for (std::size_t pos = 0; pos < by_size.size() && !placed; ++pos) {
                    const int s = by_size[pos];
                    if (it->second.count(s)) continue;
                    auto& conds = plan.conditions[static_cast<std::size_t>(s)];
                    for (std::size_t k = 0; k < conds.size() && !placed; ++k) {
                        if (plan.is_reserved(s, static_cast<int>(k))) continue;
                        bool safe = true;
                        for (const auto& t2 : conds[k]) {
                            const int here = slot_counts[t2][s];
                            const int span2 = static_cast<int>(spans[t2].size());
                            if (here <= 1 && span2 - 1 < min_span) {
                                safe = false;
                                break;
                            }
                        }
                        if (!safe) continue;
                        conds[k] = repl;
                        placed = true;
                        changed = true;
                    }
                }
                if (!placed) return term;
                spans = term_study_sets(plan);
                it = spans.find(term);
            }
        }
        if (!changed) break;
    }

    // Final checks.
    const auto spans = term_study_sets(plan);
    for (const auto& [term, s] : spans)
        if (static_cast<int>(s.size()) < min_span) return term;

    // The realized term-indicator design (plus intercept) must be full rank,
    // or forward inference on this corpus would be impossible. Row
    // multiplicity does not change rank, so one row per condition suffices.
    {
        std::vector<std::string> present;
        for (const auto& term : all_terms)
            if (spans.count(term)) present.push_back(term);
        Eigen::MatrixXd Y(plan.n_slots, static_cast<int>(present.size()) + 1);
        Y.setZero();
        int row = 0;
        for (const auto& study : plan.conditions)
            for (const auto& cond : study) {
                for (std::size_t c = 0; c < present.size(); ++c)
                    if (std::find(cond.begin(), cond.end(), present[c]) != cond.end())
                        Y(row, static_cast<int>(c)) = 1.0;
                Y(row, static_cast<int>(present.size())) = 1.0;
                ++row;
            }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(Y);
        lu.setThreshold(1e-10);
        if (lu.rank() < Y.cols()) return "__design_rank__";
    }
    return "";
}

std::vector<double> voxel_center(const vol::BrainMask& mask, int v) {
    const auto& g = mask.grid();
    const int cell = mask.voxel_cell(v);
    const int x = cell / (g.ny * g.nz);
    const int y = (cell / g.nz) % g.ny;
    const int z = cell % g.nz;
    return {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
}

} // namespace

GroundTruth make_ground_truth(const corpus::Taxonomy& taxonomy, vol::MaskPtr mask,
                              const SynthConfig& config, std::uint64_t seed) {
    taxonomy.validate();
    if (!mask || mask->p() < 8) throw ValidationError("ground truth requires a mask with p >= 8");
    if (config.min_blobs < 1 || config.max_blobs < config.min_blobs)
        throw ValidationError("blob count range invalid");
    if (!(config.blob_sigma > 0)) throw ValidationError("blob sigma must be > 0");
    if (config.effect_amplitude < 0 || config.noise_sigma < 0 ||
        config.study_effect_amplitude < 0 || config.interaction_amplitude < 0)
        throw ValidationError("amplitudes must be >= 0");

    GroundTruth truth;
    truth.taxonomy = taxonomy;
    truth.mask = mask;
    truth.terms = taxonomy.all_terms();
    truth.config = config;
    truth.seed = seed;

    Rng rng(derive_seed(seed, "truth"));
    const double sigma = config.blob_sigma;
    // Disjoint 2-sigma supports need 4 sigma between centers.
    const double min_sep = config.forbid_overlap ? 4.0 * sigma + 1e-9 : 2.0;
    std::vector<std::array<double, 3>> centers;

    const int p = mask->p();
    for (const auto& term : truth.terms) {
        (void)term;
        const int n_blobs =
            config.min_blobs +
            static_cast<int>(rng.uniform_int(
                static_cast<std::uint64_t>(config.max_blobs - config.min_blobs + 1)));
        std::vector<Blob> blobs;
        for (int b = 0; b < n_blobs; ++b) {
            bool ok = false;
            for (int tries = 0; tries < 50000 && !ok; ++tries) {
                const int v = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(p)));
                const auto c = voxel_center(*mask, v);
                ok = true;
                for (const auto& e : centers) {
                    const double dx = c[0] - e[0], dy = c[1] - e[1], dz = c[2] - e[2];
                    if (dx * dx + dy * dy + dz * dz < min_sep * min_sep) {
                        ok = false;
                        break;
                    }
                }
                if (ok) {
                    centers.push_back({c[0], c[1], c[2]});
                    blobs.push_back(Blob{c[0], c[1], c[2], sigma, config.effect_amplitude});
                }
            }
            if (!ok)
                throw ValidationError(
                    "could not place blob centers with the requested separation; "
                    "use a larger mask or fewer/smaller blobs");
        }
        truth.blobs.push_back(std::move(blobs));
    }

    // Rasterize: hard cutoff at 3 sigma, support = within 2 sigma of a center.
    for (const auto& blobs : truth.blobs) {
        Eigen::VectorXd m = Eigen::VectorXd::Zero(p);
        std::vector<int> support;
        for (int v = 0; v < p; ++v) {
            const auto c = voxel_center(*mask, v);
            double val = 0;
            bool in_support = false;
            for (const auto& b : blobs) {
                const double dx = c[0] - b.cx, dy = c[1] - b.cy, dz = c[2] - b.cz;
                const double r2 = dx * dx + dy * dy + dz * dz;
                const double s2 = b.sigma * b.sigma;
                if (r2 <= 9.0 * s2) val += b.amplitude * std::exp(-r2 / (2.0 * s2));
                if (r2 <= 4.0 * s2) in_support = true;
            }
            m[v] = val;
            if (in_support) support.push_back(v);
        }
        truth.effect_maps.push_back(std::move(m));
        truth.support.push_back(std::move(support));
    }
    return truth;
}

corpus::Corpus generate_corpus(GroundTruth& truth, std::uint64_t seed, int jobs) {
    const SynthConfig& config = truth.config;
    const auto& taxonomy = truth.taxonomy;
    const auto mask = truth.mask;
    const int p = mask->p();

    // Resolve the study plan.
    std::vector<int> subjects = config.subjects_per_study;
    std::vector<int> n_conditions = config.conditions_per_study;
    if (subjects.empty() && n_conditions.empty()) {
        if (config.n_studies == 19) {
            for (const auto& [ns, nc] : default_study_plan()) {
                subjects.push_back(ns);
                n_conditions.push_back(nc);
            }
        } else {
            for (int s = 0; s < config.n_studies; ++s) {
                subjects.push_back(12 + (s * 5) % 14);
                n_conditions.push_back(5 + (s * 3) % 5);
            }
        }
    }
    if (subjects.size() != n_conditions.size() || subjects.empty())
        throw ValidationError("subjects_per_study and conditions_per_study must have equal, "
                              "nonzero length");
    const int n_studies = static_cast<int>(subjects.size());
    if (n_studies < 2) throw ValidationError("a corpus needs at least 2 studies (span rule)");
    for (int s = 0; s < n_studies; ++s)
        if (subjects[static_cast<std::size_t>(s)] < 1 || n_conditions[static_cast<std::size_t>(s)] < 1)
            throw ValidationError("per-study subject and condition counts must be >= 1");
    if (config.n_labs < 1 || config.n_labs > n_studies)
        throw ValidationError("n_labs must be in [1, n_studies]");
    const bool default_plan = (n_studies == 19 && config.subjects_per_study.empty() &&
                               config.conditions_per_study.empty());

    const bool curated = taxonomy_supports_templates(taxonomy);

    // Retry plan construction across derived seeds; the construction is
    // randomized, so a handful of attempts absorbs unlucky draws.
    Plan plan;
    std::string violator;
    bool ok = false;
    for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
        Rng rng(derive_seed(seed, "plan/" + std::to_string(attempt)));
        violator = build_plan_attempt(taxonomy, subjects, n_conditions, curated, rng, plan);
        if (!violator.empty()) continue;
        ok = true;
        if (default_plan) {
            // The flagship corpus must contain every term, respect the
            // long-tail caps, and give every term a workable map count.
            const auto counts = realized_counts(plan, subjects);
            for (const auto& term : truth.terms) {
                auto it = counts.find(term);
                const bool is_tail =
                    std::find(default_tail_terms().begin(), default_tail_terms().end(), term) !=
                    default_tail_terms().end();
                if (it == counts.end() || it->second < 20 || (is_tail && it->second >= 100)) {
                    ok = false;
                    violator = term;
                    break;
                }
            }
        }
    }
    if (!ok) {
        if (violator == "__design_rank__")
            throw ValidationError(
                "could not draw a plan with a full-rank term design; "
                "vary the seed or the per-study condition counts");
        throw ValidationError("frequency plan unsatisfiable under the span rule; violating term: '" +
                              violator + "'");
    }

    // Materialize studies / conditions / maps.
    std::vector<corpus::Study> studies;
    std::vector<corpus::MapEntry> maps;
    truth.study_ids.clear();
    char buf[64];
    for (int s = 0; s < n_studies; ++s) {
        corpus::Study st;
        std::snprintf(buf, sizeof(buf), "study%02d", s + 1);
        st.id = buf;
        std::snprintf(buf, sizeof(buf), "lab_%c", 'a' + s % config.n_labs);
        st.laboratory = buf;
        for (int u = 0; u < subjects[static_cast<std::size_t>(s)]; ++u) {
            std::snprintf(buf, sizeof(buf), "sub%02d", u + 1);
            st.subjects.push_back(buf);
        }
        for (int k = 0; k < n_conditions[static_cast<std::size_t>(s)]; ++k) {
            corpus::Condition cond;
            std::snprintf(buf, sizeof(buf), "c%02d", k + 1);
            cond.id = buf;
            cond.terms = plan.conditions[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
            st.conditions.push_back(std::move(cond));
        }
        truth.study_ids.push_back(st.id);
        studies.push_back(std::move(st));
    }
    for (int s = 0; s < n_studies; ++s)
        for (int u = 0; u < subjects[static_cast<std::size_t>(s)]; ++u)
            for (int k = 0; k < n_conditions[static_cast<std::size_t>(s)]; ++k)
                maps.push_back(corpus::MapEntry{s, u, k, ""});

    // Per-study additive confound fields: smoothed white noise, RMS-normalized
    // over the mask, scaled by the study-effect amplitude.
    std::vector<Eigen::VectorXd> study_effect(static_cast<std::size_t>(n_studies),
                                              Eigen::VectorXd::Zero(p));
    if (config.study_effect_amplitude > 0) {
        for (int s = 0; s < n_studies; ++s) {
            Rng rng(derive_seed(seed, "study/" + studies[static_cast<std::size_t>(s)].id));
            std::vector<double> cells(static_cast<std::size_t>(mask->grid().cells()));
            for (auto& c : cells) c = rng.normal();
            vol::smooth_full_grid(mask->grid(), cells, config.study_effect_smooth_sigma);
            Eigen::VectorXd v(p);
            for (int i = 0; i < p; ++i) v[i] = cells[static_cast<std::size_t>(mask->voxel_cell(i))];
            const double rms = std::sqrt(v.squaredNorm() / p);
            if (rms > 0) v *= config.study_effect_amplitude / rms;
            study_effect[static_cast<std::size_t>(s)] = std::move(v);
        }
    }

    // Per-(study, term) multiplicative gain jitter.
    const int n_terms = static_cast<int>(truth.terms.size());
    Eigen::MatrixXd gain = Eigen::MatrixXd::Ones(n_studies, n_terms);
    if (config.interaction_amplitude > 0) {
        for (int s = 0; s < n_studies; ++s)
            for (int t = 0; t < n_terms; ++t) {
                Rng rng(derive_seed(seed, "gain/" + studies[static_cast<std::size_t>(s)].id + "/" +
                                              truth.terms[static_cast<std::size_t>(t)]));
                gain(s, t) = 1.0 + config.interaction_amplitude * rng.normal();
            }
    }

    std::unordered_map<std::string, int> term_index;
    for (int t = 0; t < n_terms; ++t) term_index[truth.terms[static_cast<std::size_t>(t)]] = t;

    const int n_maps = static_cast<int>(maps.size());
    Eigen::MatrixXf data(n_maps, p);
    parallel_for(jobs, n_maps, [&](int i) {
        const auto& e = maps[static_cast<std::size_t>(i)];
        const auto& st = studies[static_cast<std::size_t>(e.study)];
        const auto& cond = st.conditions[static_cast<std::size_t>(e.condition)];

        Eigen::VectorXd v = study_effect[static_cast<std::size_t>(e.study)];
        for (const auto& term : cond.terms) {
            const int t = term_index.at(term);
            v += gain(e.study, t) * truth.effect_maps[static_cast<std::size_t>(t)];
        }
        if (config.noise_sigma > 0) {
            Rng rng(derive_seed(truth.seed, "map/" + st.id + "/" +
                                                st.subjects[static_cast<std::size_t>(e.subject)] +
                                                "/" + cond.id));
            std::vector<double> cells(static_cast<std::size_t>(mask->grid().cells()));
            for (auto& c : cells) c = rng.normal();
            vol::smooth_full_grid(mask->grid(), cells, config.noise_smooth_sigma);
            Eigen::VectorXd noise(p);
            for (int k = 0; k < p; ++k)
                noise[k] = cells[static_cast<std::size_t>(mask->voxel_cell(k))];
            // Rescale so the realized per-map noise SD equals noise_sigma.
            const double mean = noise.mean();
            const double sd = std::sqrt((noise.array() - mean).square().sum() / p);
            if (sd > 0) noise *= config.noise_sigma / sd;
            v += noise;
        }
        data.row(i) = v.cast<float>();
    });

    truth.frequency_plan.clear();
    for (auto& [term, count] : realized_counts(plan, subjects)) truth.frequency_plan[term] = count;

    return corpus::Corpus(taxonomy, mask, std::move(studies), std::move(maps), std::move(data));
}

void save_ledger(const GroundTruth& truth, const std::string& path) {
    json j;
    j["seed"] = truth.seed;
    const auto& c = truth.config;
    j["config"] = {{"n_studies", c.n_studies},
                   {"n_labs", c.n_labs},
                   {"grid", {c.grid.nx, c.grid.ny, c.grid.nz}},
                   {"voxel_size_mm", {c.grid.vx, c.grid.vy, c.grid.vz}},
                   {"effect_amplitude", c.effect_amplitude},
                   {"blob_sigma", c.blob_sigma},
                   {"min_blobs", c.min_blobs},
                   {"max_blobs", c.max_blobs},
                   {"forbid_overlap", c.forbid_overlap},
                   {"noise_sigma", c.noise_sigma},
                   {"noise_smooth_sigma", c.noise_smooth_sigma},
                   {"study_effect_amplitude", c.study_effect_amplitude},
                   {"study_effect_smooth_sigma", c.study_effect_smooth_sigma},
                   {"interaction_amplitude", c.interaction_amplitude}};
    j["frequency_plan"] = json::object();
    for (const auto& term : truth.terms) {
        auto it = truth.frequency_plan.find(term);
        j["frequency_plan"][term] = (it == truth.frequency_plan.end()) ? 0 : it->second;
    }
    j["terms"] = json::array();
    for (std::size_t t = 0; t < truth.terms.size(); ++t) {
        json jt;
        jt["term"] = truth.terms[t];
        jt["category"] = truth.taxonomy.category_name_of(truth.terms[t]);
        jt["support_size"] = truth.support[t].size();
        jt["blobs"] = json::array();
        for (const auto& b : truth.blobs[t])
            jt["blobs"].push_back({{"center", {b.cx, b.cy, b.cz}},
                                   {"sigma", b.sigma},
                                   {"amplitude", b.amplitude}});
        j["terms"].push_back(std::move(jt));
    }
    j["study_ids"] = truth.study_ids;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write ledger: " + path);
    out << j.dump(2) << "\n";
}

} // namespace cogmap::synth
