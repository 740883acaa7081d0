// Python bindings: a thin numpy-friendly layer over the C++ core for
// interactive inspection and cross-checking against scipy/sklearn.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cogmap/classifiers.hpp"
#include "cogmap/corpus.hpp"
#include "cogmap/parcellation.hpp"
#include "cogmap/stats.hpp"
#include "cogmap/volume.hpp"

namespace py = pybind11;
using namespace cogmap;

namespace {

vol::MaskPtr make_mask(int nx, int ny, int nz, const std::vector<std::uint8_t>& cells) {
    vol::VolumeGrid grid{nx, ny, nz, 1.0, 1.0, 1.0};
    return std::make_shared<vol::BrainMask>(grid, cells);
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "cross-study activation-map meta-analysis (C++ core)";

    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

    m.def("default_taxonomy", [] {
        const auto tax = corpus::default_taxonomy();
        py::dict d;
        for (std::size_t c = 0; c < tax.categories.size(); ++c)
            d[py::str(tax.categories[c])] = tax.terms_by_category[c];
        return d;
    });

    m.def(
        "smooth",
        [](int nx, int ny, int nz, const std::vector<std::uint8_t>& mask_cells,
           const Eigen::VectorXd& values, double sigma) {
            vol::MaskedVector v{make_mask(nx, ny, nz, mask_cells), values};
            return vol::smooth(v, sigma).data;
        },
        py::arg("nx"), py::arg("ny"), py::arg("nz"), py::arg("mask_cells"), py::arg("values"),
        py::arg("sigma"), "Mask-aware Gaussian smoothing (normalized convolution).");

    m.def(
        "top_fraction_mask",
        [](int nx, int ny, int nz, const std::vector<std::uint8_t>& mask_cells,
           const Eigen::VectorXd& values, double fraction) {
            vol::MaskedVector v{make_mask(nx, ny, nz, mask_cells), values};
            return vol::top_fraction_mask(v, fraction);
        },
        py::arg("nx"), py::arg("ny"), py::arg("nz"), py::arg("mask_cells"), py::arg("values"),
        py::arg("fraction"));

    m.def(
        "ward_labels",
        [](int nx, int ny, int nz, const std::vector<std::uint8_t>& mask_cells,
           const Eigen::MatrixXd& maps, int n_parcels) {
            const auto mask = make_mask(nx, ny, nz, mask_cells);
            const auto adj = vol::build_adjacency(*mask);
            return parcel::ward_parcellate(maps, adj, n_parcels).assignment;
        },
        py::arg("nx"), py::arg("ny"), py::arg("nz"), py::arg("mask_cells"), py::arg("maps"),
        py::arg("n_parcels"),
        "Spatially-constrained Ward agglomeration; returns per-voxel parcel labels.");

    m.def(
        "anova_select",
        [](const Eigen::MatrixXd& features, const std::vector<int>& labels, double fraction) {
            const auto sel = parcel::anova_select(features, labels, fraction);
            return py::make_tuple(sel.f_scores, sel.selected);
        },
        py::arg("features"), py::arg("labels"), py::arg("fraction"));

    m.def(
        "fit_logistic",
        [](const Eigen::MatrixXd& X, const std::vector<int>& y, const Eigen::VectorXd& weights,
           double lam) {
            const auto model = clf::fit_logistic(X, y, weights, lam);
            py::dict d;
            d["weights"] = model.weights;
            d["intercept"] = model.intercept;
            d["rho"] = model.rho_term;
            return d;
        },
        py::arg("X"), py::arg("y"), py::arg("weights"), py::arg("lambda"),
        "Weighted L2-regularized logistic regression (unpenalized intercept).");

    m.def(
        "logistic_objective",
        [](const Eigen::MatrixXd& X, const std::vector<int>& y, const Eigen::VectorXd& weights,
           double lam, const Eigen::VectorXd& beta, double intercept) {
            return clf::logistic_objective(X, y, weights, lam, beta, intercept);
        },
        py::arg("X"), py::arg("y"), py::arg("weights"), py::arg("lambda"), py::arg("beta"),
        py::arg("intercept"));

    m.def("balance_weights", &clf::balance_weights, py::arg("y"));

    m.def(
        "biased_probability",
        [](double p, double rho, const std::string& mode) {
            clf::LogisticModel model;
            model.rho_term = rho;
            model.weights = Eigen::VectorXd::Zero(1);
            // Drive the linear score so sigmoid(z) == p.
            model.intercept = std::log(p / (1.0 - p));
            Eigen::VectorXd x = Eigen::VectorXd::Zero(1);
            const auto bp = clf::predict_biased(
                model, x, mode == "literal" ? clf::BiasMode::Literal : clf::BiasMode::Normalized);
            return py::make_tuple(bp.p_biased, bp.present);
        },
        py::arg("p"), py::arg("rho"), py::arg("mode") = "normalized");

    m.def("t_two_sided_p", &stats::t_two_sided_p, py::arg("t"), py::arg("dof"));
    m.def("t_two_sided_quantile", &stats::t_two_sided_quantile, py::arg("alpha"), py::arg("dof"));
    m.def("ibeta", &stats::ibeta, py::arg("a"), py::arg("b"), py::arg("x"));
}
