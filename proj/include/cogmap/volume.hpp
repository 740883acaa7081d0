#pragma once
// Voxel-grid geometry: masks, 6-connectivity adjacency, mask-aware Gaussian
// smoothing, top-fraction thresholding, and the BMAP1 volume file format.
//
// Cell layout is C-order by (x, y, z): x slowest, z fastest,
// cell = (x*ny + y)*nz + z. In-mask voxels are numbered 0..p-1 in that order.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cogmap/common.hpp"

namespace cogmap::vol {

struct VolumeGrid {
    int nx = 0, ny = 0, nz = 0;
    double vx = 1.0, vy = 1.0, vz = 1.0; // voxel size, mm

    int cells() const { return nx * ny * nz; }
    int cell(int x, int y, int z) const { return (x * ny + y) * nz + z; }
    void validate() const {
        if (nx < 1 || ny < 1 || nz < 1)
            throw ValidationError("grid dims must all be >= 1");
        if (!(vx > 0.0) || !(vy > 0.0) || !(vz > 0.0))
            throw ValidationError("voxel sizes must all be > 0");
    }
    bool operator==(const VolumeGrid& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz && vx == o.vx && vy == o.vy && vz == o.vz;
    }
};

class BrainMask {
  public:
    BrainMask(VolumeGrid grid, std::vector<std::uint8_t> in_mask);

    const VolumeGrid& grid() const { return grid_; }
    int p() const { return p_; }
    bool in_mask_cell(int cell) const { return in_mask_[cell] != 0; }
    const std::vector<std::uint8_t>& cells() const { return in_mask_; }
    // voxel index (0..p-1, C-order) -> cell index
    int voxel_cell(int v) const { return voxel_cell_[v]; }
    // cell index -> voxel index, or -1 outside the mask
    int cell_voxel(int c) const { return cell_voxel_[c]; }

  private:
    VolumeGrid grid_;
    std::vector<std::uint8_t> in_mask_;
    std::vector<int> voxel_cell_;
    std::vector<int> cell_voxel_;
    int p_ = 0;
};

using MaskPtr = std::shared_ptr<const BrainMask>;

struct MaskedVector {
    MaskPtr mask;
    Eigen::VectorXd data; // length mask->p()

    void validate() const;
};

struct AdjacencyGraph {
    int n_nodes = 0;
    // unordered voxel-index pairs, stored with first < second, sorted
    std::vector<std::pair<int, int>> edges;
};

// Face-neighbor (6-connectivity) adjacency between in-mask voxels.
AdjacencyGraph build_adjacency(const BrainMask& mask);

// Isotropic Gaussian smoothing restricted to the mask: normalized convolution
// G*(x·m) / G*(m) with the kernel truncated at 4 sigma. Constants are
// preserved exactly up to rounding; sigma = 0 is the identity.
MaskedVector smooth(const MaskedVector& vec, double sigma_voxels);

// In-place full-grid variant used by generators (mask = all cells).
void smooth_full_grid(const VolumeGrid& grid, std::vector<double>& cells, double sigma_voxels);

// Boolean vector with exactly ceil(fraction*p) true entries at the largest
// values; ties broken by lowest voxel index.
std::vector<std::uint8_t> top_fraction_mask(const MaskedVector& vec, double fraction);

// --- BMAP1 file format ------------------------------------------------------
// "BMAP1\n", u32 nx, ny, nz (LE), u8 kind, payload:
//   kind 0: full volume, nx*ny*nz float32 in C-order
//   kind 1: masked vector: u32 name length + mask name bytes, then p float32
//   kind 2: mask, nx*ny*nz u8 (0/1) in C-order
namespace bmap {

void write_full(const std::string& path, const VolumeGrid& grid, const std::vector<float>& cells);
void write_masked(const std::string& path, const VolumeGrid& grid, const std::string& mask_name,
                  const float* values, int p);
void write_masked(const std::string& path, const MaskedVector& vec, const std::string& mask_name);
void write_mask(const std::string& path, const BrainMask& mask);

struct MaskedFile {
    VolumeGrid grid;
    std::string mask_name;
    std::vector<float> values;
};

MaskedFile read_masked(const std::string& path);
BrainMask read_mask(const std::string& path);
std::pair<VolumeGrid, std::vector<float>> read_full(const std::string& path);

} // namespace bmap

} // namespace cogmap::vol
