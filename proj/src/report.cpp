#include "cogmap/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "cogmap/evaluation.hpp"
#include "cogmap/glm.hpp"
#include "cogmap/volume.hpp"

namespace cogmap::report {

namespace fs = std::filesystem;

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", x);
    return buf;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path);
    out << content;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

void histogram_csv(std::ostringstream& out, const std::string& group,
                   const std::vector<double>& values, double lo, double hi, int bins) {
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    const double width = (hi - lo) > 0 ? (hi - lo) / bins : 1.0;
    for (double v : values) {
        int b = static_cast<int>((v - lo) / width);
        b = std::max(0, std::min(bins - 1, b));
        ++counts[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < bins; ++b)
        out << group << ',' << fmt(lo + b * width) << ',' << fmt(lo + (b + 1) * width) << ','
            << counts[static_cast<std::size_t>(b)] << '\n';
}

// Greyscale PGM (P5) of one z-slice; values min-max normalized over the mask.
void write_slice_pgm(const std::string& path, const vol::BrainMask& mask,
                     const std::vector<float>& values, int z) {
    const auto& g = mask.grid();
    double vmin = 0, vmax = 0;
    bool first = true;
    for (std::size_t v = 0; v < values.size(); ++v) {
        const double x = values[v];
        if (!std::isfinite(x)) continue;
        if (first || x < vmin) vmin = x;
        if (first || x > vmax) vmax = x;
        first = false;
    }
    const double span = vmax > vmin ? vmax - vmin : 1.0;

    std::ostringstream out;
    out << "P5\n" << g.nx << ' ' << g.ny << "\n255\n";
    for (int y = 0; y < g.ny; ++y)
        for (int x = 0; x < g.nx; ++x) {
            const int cell = g.cell(x, y, z);
            unsigned char px = 0;
            const int v = mask.cell_voxel(cell);
            if (v >= 0) {
                double val = values[static_cast<std::size_t>(v)];
                if (!std::isfinite(val)) val = val > 0 ? vmax : vmin;
                px = static_cast<unsigned char>(
                    std::lround(255.0 * (val - vmin) / span));
            }
            out << static_cast<char>(px);
        }
    write_text(path, out.str());
}

} // namespace

ReportSummary write_report(const corpus::Corpus& corpus, const std::string& run_dir,
                           const std::string& out_dir) {
    ReportSummary summary;
    fs::create_directories(out_dir);

    // Term frequency table, descending.
    {
        auto freq = corpus::term_frequencies(corpus);
        std::stable_sort(freq.begin(), freq.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        std::ostringstream out;
        out << "term,category,count\n";
        for (const auto& [term, count] : freq)
            out << term << ',' << corpus.taxonomy().category_name_of(term) << ',' << count << '\n';
        write_text(out_dir + "/term_frequencies.csv", out.str());
    }

    // Pairwise-distance diagnostics.
    {
        const auto diag = cv::distance_diagnostics(corpus);
        summary.median_same_study = diag.median_same_study;
        summary.median_same_term_set = diag.median_same_term_set;
        summary.median_same_condition = diag.median_same_condition;

        std::ostringstream med;
        med << "group,n_pairs,median\n";
        med << "same_study," << diag.same_study.size() << ',' << fmt(diag.median_same_study)
            << '\n';
        med << "same_term_set," << diag.same_term_set.size() << ','
            << fmt(diag.median_same_term_set) << '\n';
        med << "same_condition," << diag.same_condition.size() << ','
            << fmt(diag.median_same_condition) << '\n';
        write_text(out_dir + "/distance_medians.csv", med.str());

        double lo = 0, hi = 0;
        bool first = true;
        for (const auto* g : {&diag.same_study, &diag.same_term_set, &diag.same_condition})
            for (double v : *g) {
                if (first || v < lo) lo = v;
                if (first || v > hi) hi = v;
                first = false;
            }
        std::ostringstream hist;
        hist << "group,bin_lo,bin_hi,count\n";
        histogram_csv(hist, "same_study", diag.same_study, lo, hi, 64);
        histogram_csv(hist, "same_term_set", diag.same_term_set, lo, hi, 64);
        histogram_csv(hist, "same_condition", diag.same_condition, lo, hi, 64);
        write_text(out_dir + "/distance_histograms.csv", hist.str());

        std::ostringstream cs;
        cs << "term";
        for (const auto& t : diag.design_terms) cs << ',' << t;
        cs << '\n';
        for (std::size_t i = 0; i < diag.design_terms.size(); ++i) {
            cs << diag.design_terms[i];
            for (std::size_t j = 0; j < diag.design_terms.size(); ++j)
                cs << ','
                   << fmt(diag.design_correlation(static_cast<int>(i), static_cast<int>(j)));
            cs << '\n';
        }
        write_text(out_dir + "/design_correlation.csv", cs.str());
    }

    if (run_dir.empty()) return summary;

    // Recompute per-term metrics from the persisted fold predictions and check
    // them against the run's metrics.csv.
    const fs::path pred_dir = fs::path(run_dir) / "predictions";
    if (fs::exists(pred_dir)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(pred_dir))
            if (e.path().extension() == ".csv") files.push_back(e.path());
        std::sort(files.begin(), files.end());

        struct Counts {
            long long tp = 0, fp = 0, fn = 0, tn = 0;
        };
        std::map<std::string, Counts> counts;
        for (const auto& file : files) {
            std::ifstream in(file);
            if (!in) throw ValidationError("cannot open " + file.string());
            std::string line;
            std::getline(in, line); // header
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto f = split_csv(line);
                if (f.size() != 6)
                    throw ValidationError("malformed prediction row in " + file.string());
                const bool predicted = f[4] == "1";
                const bool truth = f[5] == "1";
                auto& c = counts[f[1]];
                if (predicted && truth) ++c.tp;
                else if (predicted) ++c.fp;
                else if (truth) ++c.fn;
                else ++c.tn;
                ++summary.n_prediction_rows;
            }
        }

        std::map<std::string, std::pair<std::string, std::string>> recomputed;
        std::ostringstream out;
        out << "term,support_test,precision,recall\n";
        for (const auto& [term, c] : counts) {
            const double precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
            const double recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
            out << term << ',' << (c.tp + c.fn) << ',' << fmt(precision) << ',' << fmt(recall)
                << '\n';
            recomputed[term] = {fmt(precision), fmt(recall)};
        }
        write_text(out_dir + "/metrics_recomputed.csv", out.str());

        const fs::path metrics = fs::path(run_dir) / "metrics.csv";
        if (fs::exists(metrics)) {
            std::ifstream in(metrics);
            std::string line;
            std::getline(in, line); // header
            std::size_t n_rows = 0;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto f = split_csv(line);
                if (f.size() < 11) throw ValidationError("malformed metrics.csv row");
                ++n_rows;
                auto it = recomputed.find(f[2]);
                if (it == recomputed.end() || it->second.first != f[6] ||
                    it->second.second != f[7]) {
                    summary.metrics_consistent = false;
                    Log::warn("metrics.csv row for term '" + f[2] +
                              "' disagrees with persisted predictions");
                }
            }
            if (n_rows != recomputed.size()) summary.metrics_consistent = false;
        }
    }

    // PGM slices for every atlas volume.
    const fs::path atlas_dir = fs::path(run_dir) / "atlas";
    if (fs::exists(atlas_dir)) {
        fs::create_directories(out_dir + "/slices");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(atlas_dir))
            if (e.path().extension() == ".bmap") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        const auto& mask = *corpus.mask();
        const auto& g = mask.grid();
        for (const auto& file : files) {
            const auto mf = vol::bmap::read_masked(file.string());
            if (mf.grid.nx != g.nx || mf.grid.ny != g.ny || mf.grid.nz != g.nz ||
                static_cast<int>(mf.values.size()) != mask.p()) {
                Log::warn("skipping atlas volume with mismatched geometry: " + file.string());
                continue;
            }
            for (int z : {g.nz / 4, g.nz / 2, (3 * g.nz) / 4}) {
                char suffix[32];
                std::snprintf(suffix, sizeof(suffix), "_z%02d.pgm", z);
                write_slice_pgm(out_dir + "/slices/" + file.stem().string() + suffix, mask,
                                mf.values, z);
            }
        }
    }
    return summary;
}

} // namespace cogmap::report
