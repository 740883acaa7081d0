#include "cogmap/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace cogmap::vol {

BrainMask::BrainMask(VolumeGrid grid, std::vector<std::uint8_t> in_mask)
    : grid_(grid), in_mask_(std::move(in_mask)) {
    grid_.validate();
    if (static_cast<int>(in_mask_.size()) != grid_.cells())
        throw ValidationError("mask cell count does not match grid dims");
    cell_voxel_.assign(grid_.cells(), -1);
    for (int c = 0; c < grid_.cells(); ++c) {
        if (in_mask_[c]) {
            cell_voxel_[c] = static_cast<int>(voxel_cell_.size());
            voxel_cell_.push_back(c);
        }
    }
    p_ = static_cast<int>(voxel_cell_.size());
    if (p_ < 1) throw ValidationError("mask must contain at least one voxel");
}

void MaskedVector::validate() const {
    if (!mask) throw ValidationError("masked vector has no mask");
    if (data.size() != mask->p())
        throw ValidationError("masked vector length does not match mask voxel count");
    for (Eigen::Index i = 0; i < data.size(); ++i)
        if (!std::isfinite(data[i]))
            throw ValidationError("masked vector contains a non-finite value");
}

AdjacencyGraph build_adjacency(const BrainMask& mask) {
    const VolumeGrid& g = mask.grid();
    AdjacencyGraph adj;
    adj.n_nodes = mask.p();
    // Only +x/+y/+z directions; every unordered pair appears once with first < second
    // (the positive neighbor always has a larger C-order index).
    for (int x = 0; x < g.nx; ++x)
        for (int y = 0; y < g.ny; ++y)
            for (int z = 0; z < g.nz; ++z) {
                const int c = g.cell(x, y, z);
                const int v = mask.cell_voxel(c);
                if (v < 0) continue;
                if (z + 1 < g.nz) {
                    const int u = mask.cell_voxel(c + 1);
                    if (u >= 0) adj.edges.emplace_back(v, u);
                }
                if (y + 1 < g.ny) {
                    const int u = mask.cell_voxel(c + g.nz);
                    if (u >= 0) adj.edges.emplace_back(v, u);
                }
                if (x + 1 < g.nx) {
                    const int u = mask.cell_voxel(c + g.ny * g.nz);
                    if (u >= 0) adj.edges.emplace_back(v, u);
                }
            }
    std::sort(adj.edges.begin(), adj.edges.end());
    return adj;
}

namespace {

std::vector<double> gauss_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> w(2 * radius + 1);
    double total = 0.0;
    for (int j = -radius; j <= radius; ++j) {
        w[j + radius] = std::exp(-0.5 * j * j / (sigma * sigma));
        total += w[j + radius];
    }
    for (double& x : w) x /= total;
    return w;
}

// 1-D convolution along one axis of the (nx, ny, nz) C-order volume; lines
// along `axis` are gathered, convolved with zero padding, and scattered back.
void convolve_axis(const VolumeGrid& g, std::vector<double>& vol, const std::vector<double>& w,
                   int axis) {
    const int radius = (static_cast<int>(w.size()) - 1) / 2;
    const int len = axis == 0 ? g.nx : (axis == 1 ? g.ny : g.nz);
    const int stride = axis == 0 ? g.ny * g.nz : (axis == 1 ? g.nz : 1);
    const int n_lines = g.cells() / len;
    std::vector<double> line(len), out(len);
    for (int l = 0; l < n_lines; ++l) {
        // Base cell of this line: enumerate cells with the axis coordinate at 0.
        int base;
        if (axis == 0) {
            base = l; // (y,z) pairs are contiguous in the lower bits
        } else if (axis == 1) {
            const int x = l / g.nz, z = l % g.nz;
            base = (x * g.ny) * g.nz + z;
        } else {
            base = l * g.nz;
        }
        for (int i = 0; i < len; ++i) line[i] = vol[base + i * stride];
        for (int i = 0; i < len; ++i) {
            double acc = 0.0;
            const int j0 = std::max(-radius, -i);
            const int j1 = std::min(radius, len - 1 - i);
            for (int j = j0; j <= j1; ++j) acc += w[j + radius] * line[i + j];
            out[i] = acc;
        }
        for (int i = 0; i < len; ++i) vol[base + i * stride] = out[i];
    }
}

void convolve3(const VolumeGrid& g, std::vector<double>& vol, const std::vector<double>& w) {
    convolve_axis(g, vol, w, 2);
    convolve_axis(g, vol, w, 1);
    convolve_axis(g, vol, w, 0);
}

} // namespace

void smooth_full_grid(const VolumeGrid& grid, std::vector<double>& cells, double sigma_voxels) {
    if (sigma_voxels == 0.0) return;
    if (sigma_voxels < 0.0) throw ValidationError("smoothing sigma must be >= 0");
    const auto w = gauss_kernel(sigma_voxels);
    convolve3(grid, cells, w);
    // Renormalize against the smoothed all-ones volume so constants survive
    // the zero-padded borders.
    std::vector<double> ones(grid.cells(), 1.0);
    convolve3(grid, ones, w);
    for (int c = 0; c < grid.cells(); ++c) cells[c] /= ones[c];
}

MaskedVector smooth(const MaskedVector& vec, double sigma_voxels) {
    vec.validate();
    if (sigma_voxels < 0.0) throw ValidationError("smoothing sigma must be >= 0");
    if (sigma_voxels == 0.0) return vec;
    const BrainMask& mask = *vec.mask;
    const VolumeGrid& g = mask.grid();
    const auto w = gauss_kernel(sigma_voxels);

    std::vector<double> num(g.cells(), 0.0), den(g.cells(), 0.0);
    for (int v = 0; v < mask.p(); ++v) {
        num[mask.voxel_cell(v)] = vec.data[v];
        den[mask.voxel_cell(v)] = 1.0;
    }
    convolve3(g, num, w);
    convolve3(g, den, w);

    MaskedVector out{vec.mask, Eigen::VectorXd(mask.p())};
    for (int v = 0; v < mask.p(); ++v) {
        const int c = mask.voxel_cell(v);
        out.data[v] = num[c] / den[c];
    }
    return out;
}

std::vector<std::uint8_t> top_fraction_mask(const MaskedVector& vec, double fraction) {
    vec.validate();
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ValidationError("top fraction must lie in (0, 1]");
    const int p = static_cast<int>(vec.data.size());
    const int keep = static_cast<int>(std::ceil(fraction * p));
    std::vector<int> order(p);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (vec.data[a] != vec.data[b]) return vec.data[a] > vec.data[b];
        return a < b;
    });
    std::vector<std::uint8_t> out(p, 0);
    for (int i = 0; i < keep; ++i) out[order[i]] = 1;
    return out;
}

// --- BMAP1 -------------------------------------------------------------------

namespace bmap {

namespace {

constexpr char kMagic[6] = {'B', 'M', 'A', 'P', '1', '\n'};

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, const float* data, std::size_t n) {
    // Host is little-endian x86; floats are written verbatim.
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot open for writing: " + path);
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open for reading: " + path);
    return is;
}

VolumeGrid read_header(std::istream& is, const std::string& path, std::uint8_t& kind) {
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kMagic, 6) != 0)
        throw ValidationError("not a BMAP1 file: " + path);
    VolumeGrid g;
    g.nx = static_cast<int>(get_u32(is));
    g.ny = static_cast<int>(get_u32(is));
    g.nz = static_cast<int>(get_u32(is));
    char k;
    is.read(&k, 1);
    if (!is) throw ValidationError("truncated BMAP1 header: " + path);
    kind = static_cast<std::uint8_t>(k);
    g.validate();
    return g;
}

void write_header(std::ostream& os, const VolumeGrid& g, std::uint8_t kind) {
    os.write(kMagic, 6);
    put_u32(os, static_cast<std::uint32_t>(g.nx));
    put_u32(os, static_cast<std::uint32_t>(g.ny));
    put_u32(os, static_cast<std::uint32_t>(g.nz));
    os.write(reinterpret_cast<const char*>(&kind), 1);
}

} // namespace

void write_full(const std::string& path, const VolumeGrid& grid, const std::vector<float>& cells) {
    if (static_cast<int>(cells.size()) != grid.cells())
        throw ValidationError("full volume payload size mismatch");
    auto os = open_out(path);
    write_header(os, grid, 0);
    put_f32(os, cells.data(), cells.size());
    if (!os) throw ValidationError("write failed: " + path);
}

void write_masked(const std::string& path, const VolumeGrid& grid, const std::string& mask_name,
                  const float* values, int p) {
    auto os = open_out(path);
    write_header(os, grid, 1);
    put_u32(os, static_cast<std::uint32_t>(mask_name.size()));
    os.write(mask_name.data(), static_cast<std::streamsize>(mask_name.size()));
    put_f32(os, values, static_cast<std::size_t>(p));
    if (!os) throw ValidationError("write failed: " + path);
}

void write_masked(const std::string& path, const MaskedVector& vec, const std::string& mask_name) {
    vec.validate();
    std::vector<float> vals(vec.data.size());
    for (Eigen::Index i = 0; i < vec.data.size(); ++i) vals[i] = static_cast<float>(vec.data[i]);
    write_masked(path, vec.mask->grid(), mask_name, vals.data(), static_cast<int>(vals.size()));
}

void write_mask(const std::string& path, const BrainMask& mask) {
    auto os = open_out(path);
    write_header(os, mask.grid(), 2);
    os.write(reinterpret_cast<const char*>(mask.cells().data()),
             static_cast<std::streamsize>(mask.cells().size()));
    if (!os) throw ValidationError("write failed: " + path);
}

MaskedFile read_masked(const std::string& path) {
    auto is = open_in(path);
    std::uint8_t kind;
    MaskedFile f;
    f.grid = read_header(is, path, kind);
    if (kind != 1) throw ValidationError("expected masked-vector payload (kind 1): " + path);
    const std::uint32_t name_len = get_u32(is);
    if (name_len > 4096) throw ValidationError("unreasonable mask name length: " + path);
    f.mask_name.resize(name_len);
    is.read(f.mask_name.data(), name_len);
    // Payload length is implied by the file size.
    const auto pos = is.tellg();
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    is.seekg(pos);
    const std::size_t bytes = static_cast<std::size_t>(end - pos);
    if (bytes % 4 != 0) throw ValidationError("masked payload not float32-aligned: " + path);
    f.values.resize(bytes / 4);
    is.read(reinterpret_cast<char*>(f.values.data()), static_cast<std::streamsize>(bytes));
    if (!is) throw ValidationError("truncated masked payload: " + path);
    return f;
}

BrainMask read_mask(const std::string& path) {
    auto is = open_in(path);
    std::uint8_t kind;
    const VolumeGrid g = read_header(is, path, kind);
    if (kind != 2) throw ValidationError("expected mask payload (kind 2): " + path);
    std::vector<std::uint8_t> cells(static_cast<std::size_t>(g.cells()));
    is.read(reinterpret_cast<char*>(cells.data()), g.cells());
    if (!is) throw ValidationError("truncated mask payload: " + path);
    for (auto& c : cells)
        if (c > 1) throw ValidationError("mask payload must be 0/1: " + path);
    return BrainMask(g, std::move(cells));
}

std::pair<VolumeGrid, std::vector<float>> read_full(const std::string& path) {
    auto is = open_in(path);
    std::uint8_t kind;
    const VolumeGrid g = read_header(is, path, kind);
    if (kind != 0) throw ValidationError("expected full-volume payload (kind 0): " + path);
    std::vector<float> cells(static_cast<std::size_t>(g.cells()));
    is.read(reinterpret_cast<char*>(cells.data()),
            static_cast<std::streamsize>(cells.size() * 4));
    if (!is) throw ValidationError("truncated full-volume payload: " + path);
    return {g, std::move(cells)};
}

} // namespace bmap

} // namespace cogmap::vol
