#pragma once
// Dimensionality reduction: spatially-constrained Ward feature agglomeration
// (voxels -> parcels), one-way ANOVA feature selection, and back-projection of
// parcel weights to voxel maps.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "cogmap/volume.hpp"

namespace cogmap::parcel {

struct Parcellation {
    int n_parcels = 0;
    std::vector<int> assignment; // p entries in [0, n_parcels)
    struct Merge {
        int a = 0, b = 0;  // cluster ids (new clusters numbered p, p+1, ...)
        double cost = 0.0; // Ward variance increase
    };
    std::vector<Merge> merge_tree;
};

// Greedy agglomeration minimizing the Ward variance increase
//   cost(A,B) = |A||B|/(|A|+|B|) * ||mean_A - mean_B||^2
// restricted to pairs adjacent in the (contracted) graph. Ties broken by the
// lexicographically smallest (cost, a, b) with a < b. Lance-Williams updates
// are used where both prior distances exist; otherwise costs are recomputed
// from maintained per-cluster sums. Stops at n_parcels clusters, or at the
// number of connected components (with a warning) if that is larger.
Parcellation ward_parcellate(const Eigen::MatrixXd& train_maps, const vol::AdjacencyGraph& adj,
                             int n_parcels);
Parcellation ward_parcellate(const Eigen::MatrixXf& train_maps, const vol::AdjacencyGraph& adj,
                             int n_parcels);

// Feature j = mean of map values over parcel j's voxels.
Eigen::MatrixXd reduce(const Eigen::MatrixXd& maps, const Parcellation& parc);
Eigen::MatrixXf reduce(const Eigen::MatrixXf& maps, const Parcellation& parc);

struct FeatureSelection {
    Eigen::VectorXd f_scores;  // per-parcel one-way ANOVA F
    std::vector<int> selected; // ceil(fraction * q) indices, sorted ascending
};

// Top ceil(fraction*q) features by F between the two label groups; F ties
// broken by lower index. labels are 0/1 per row.
FeatureSelection anova_select(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                              double fraction);
FeatureSelection anova_select(const Eigen::MatrixXf& features, const std::vector<int>& labels,
                              double fraction);

// Every voxel of a selected parcel receives that parcel's weight; voxels of
// unselected parcels get 0.
vol::MaskedVector backproject(const Eigen::VectorXd& weights, const FeatureSelection& sel,
                              const Parcellation& parc, const vol::MaskPtr& mask);

// Binary little-endian: "PARC1\n", u32 p, u32 n_parcels, u32 n_merges,
// p x u32 assignment, merges as (u32 a, u32 b, f64 cost).
void save_parcellation(const std::string& path, const Parcellation& parc);
Parcellation load_parcellation(const std::string& path);

} // namespace cogmap::parcel
