#pragma once
// Synthetic multi-study corpus generator with known per-term effect maps,
// additive per-study confound fields, and long-tail term frequencies.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cogmap/corpus.hpp"

namespace cogmap::synth {

struct Blob {
    double cx = 0, cy = 0, cz = 0; // voxel coordinates
    double sigma = 2.0;            // voxels
    double amplitude = 1.0;
};

struct SynthConfig {
    int n_studies = 19;
    int n_labs = 2;
    vol::VolumeGrid grid{24, 24, 18, 3.0, 3.0, 3.0};
    // Per-study subject/condition counts; empty selects the built-in plan
    // (19 studies: 486 subjects, 131 conditions, 3826 maps).
    std::vector<int> subjects_per_study;
    std::vector<int> conditions_per_study;

    double effect_amplitude = 1.0; // peak blob height
    double blob_sigma = 2.2;       // voxels
    int min_blobs = 1, max_blobs = 3;
    bool forbid_overlap = false; // make 2-sigma supports pairwise disjoint

    double noise_sigma = 1.0;        // per-voxel SD after smoothing+rescale
    double noise_smooth_sigma = 1.0; // spatial correlation of the noise
    double study_effect_amplitude = 2.0;
    double study_effect_smooth_sigma = 4.0;
    double interaction_amplitude = 0.0; // per-(study,term) gain jitter
};

struct GroundTruth {
    corpus::Taxonomy taxonomy;
    vol::MaskPtr mask;
    std::vector<std::string> terms;           // taxonomy order
    std::vector<std::vector<Blob>> blobs;     // per term
    std::vector<Eigen::VectorXd> effect_maps; // per term, over mask voxels
    std::vector<std::vector<int>> support;    // per term: voxels within 2 sigma
    SynthConfig config;
    std::uint64_t seed = 0;
    // Realized per-term map counts; filled by generate_corpus.
    std::map<std::string, int> frequency_plan;
    // Realized per-study info (filled by generate_corpus).
    std::vector<std::string> study_ids;
};

// Ellipsoid inscribed in the grid.
vol::MaskPtr make_ellipsoid_mask(const vol::VolumeGrid& grid);

GroundTruth make_ground_truth(const corpus::Taxonomy& taxonomy, vol::MaskPtr mask,
                              const SynthConfig& config, std::uint64_t seed);

// Builds the study/condition plan, plants term effects + study confounds +
// smoothed noise, and fills truth.frequency_plan with the realized counts.
corpus::Corpus generate_corpus(GroundTruth& truth, std::uint64_t seed, int jobs = 1);

// ledger.json: every sampled ground-truth quantity (plan, blobs, counts).
void save_ledger(const GroundTruth& truth, const std::string& path);

// Built-in 19-study plan: (subjects, conditions) per study.
const std::vector<std::pair<int, int>>& default_study_plan();

// Default tail terms (kept under 100 maps by construction).
const std::vector<std::string>& default_tail_terms();

} // namespace cogmap::synth
