#include "cogmap/parcellation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <queue>
#include <unordered_map>
#include <unordered_set>

#include "cogmap/stats.hpp"

namespace cogmap::parcel {

namespace {

struct PqEntry {
    double cost;
    int a, b; // a < b
    bool operator>(const PqEntry& o) const {
        if (cost != o.cost) return cost > o.cost;
        if (a != o.a) return a > o.a;
        return b > o.b;
    }
};

inline std::uint64_t pair_key(int a, int b) {
    return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
}

template <typename MapsMatrix>
Parcellation ward_impl(const MapsMatrix& train_maps, const vol::AdjacencyGraph& adj,
                       int n_parcels) {
    const int p = static_cast<int>(train_maps.cols());
    const int n = static_cast<int>(train_maps.rows());
    if (adj.n_nodes != p) throw ValidationError("adjacency graph does not match voxel count");
    if (n_parcels < 1) throw ValidationError("n_parcels must be >= 1");
    if (n_parcels > p)
        throw ValidationError("n_parcels (" + std::to_string(n_parcels) +
                              ") exceeds voxel count (" + std::to_string(p) + ")");
    if (n < 1) throw ValidationError("ward requires at least one training map");

    const int max_ids = 2 * p - 1;
    std::vector<Eigen::VectorXd> sum(max_ids);
    std::vector<int> size(max_ids, 0);
    std::vector<std::unordered_set<int>> nbrs(max_ids);
    std::vector<int> parent(max_ids);
    std::vector<char> active(max_ids, 0);
    for (int v = 0; v < p; ++v) {
        sum[v] = train_maps.col(v).template cast<double>();
        size[v] = 1;
        parent[v] = v;
        active[v] = 1;
    }

    auto fresh_cost = [&](int a, int b) {
        const double na = size[a], nb = size[b];
        const double d2 = (sum[a] / na - sum[b] / nb).squaredNorm();
        return na * nb / (na + nb) * d2;
    };

    std::unordered_map<std::uint64_t, double> cost;
    cost.reserve(adj.edges.size() * 2);
    std::priority_queue<PqEntry, std::vector<PqEntry>, std::greater<PqEntry>> pq;
    for (const auto& [a, b] : adj.edges) {
        nbrs[a].insert(b);
        nbrs[b].insert(a);
        const double c = fresh_cost(a, b);
        cost[pair_key(a, b)] = c;
        pq.push({c, a, b});
    }

    Parcellation out;
    int n_active = p;
    int next_id = p;
    while (n_active > n_parcels && !pq.empty()) {
        const PqEntry e = pq.top();
        pq.pop();
        if (!active[e.a] || !active[e.b]) continue;
        const auto it = cost.find(pair_key(e.a, e.b));
        if (it == cost.end() || it->second != e.cost) continue; // stale entry

        const int a = e.a, b = e.b, c = next_id++;
        out.merge_tree.push_back({a, b, e.cost});
        sum[c] = sum[a] + sum[b];
        size[c] = size[a] + size[b];
        parent[a] = parent[b] = c;
        parent[c] = c;
        active[a] = active[b] = 0;
        active[c] = 1;
        --n_active;
        cost.erase(it);

        for (int x : nbrs[a])
            if (x != b) nbrs[c].insert(x);
        for (int x : nbrs[b])
            if (x != a) nbrs[c].insert(x);
        for (int x : nbrs[c]) {
            nbrs[x].erase(a);
            nbrs[x].erase(b);
            nbrs[x].insert(c);
            const auto ax = cost.find(pair_key(std::min(a, x), std::max(a, x)));
            const auto bx = cost.find(pair_key(std::min(b, x), std::max(b, x)));
            double cx;
            if (ax != cost.end() && bx != cost.end()) {
                // Lance-Williams update for Ward linkage.
                const double na = size[a], nb = size[b], nx = size[x];
                cx = ((na + nx) * ax->second + (nb + nx) * bx->second - nx * e.cost) /
                     (na + nb + nx);
            } else {
                cx = fresh_cost(c, x);
            }
            if (ax != cost.end()) cost.erase(ax);
            if (bx != cost.end()) cost.erase(bx);
            cost[pair_key(x, c)] = cx;
            pq.push({cx, x, c});
        }
        nbrs[a].clear();
        nbrs[b].clear();
        sum[a].resize(0);
        sum[b].resize(0);
    }
    if (n_active > n_parcels)
        Log::warn("ward: stopped at " + std::to_string(n_active) +
                  " clusters (connected components) before reaching the requested " +
                  std::to_string(n_parcels));

    // Final labels in [0, n_active), ordered by each cluster's smallest voxel.
    out.n_parcels = n_active;
    out.assignment.resize(p);
    auto find_root = [&](int v) {
        while (parent[v] != v) v = parent[v];
        return v;
    };
    std::unordered_map<int, int> label;
    label.reserve(n_active * 2);
    for (int v = 0; v < p; ++v) {
        const int root = find_root(v);
        auto [it2, inserted] = label.try_emplace(root, static_cast<int>(label.size()));
        out.assignment[v] = it2->second;
        (void)inserted;
    }
    return out;
}

template <typename MapsMatrix, typename OutMatrix>
void reduce_impl(const MapsMatrix& maps, const Parcellation& parc, OutMatrix& out) {
    const int p = static_cast<int>(maps.cols());
    if (static_cast<int>(parc.assignment.size()) != p)
        throw ValidationError("parcellation does not match map voxel count (mask mismatch)");
    const int n = static_cast<int>(maps.rows());
    const int q = parc.n_parcels;
    std::vector<int> count(q, 0);
    for (int v = 0; v < p; ++v) ++count[parc.assignment[v]];
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, q);
    for (int v = 0; v < p; ++v)
        acc.col(parc.assignment[v]) += maps.col(v).template cast<double>();
    for (int j = 0; j < q; ++j) acc.col(j) /= static_cast<double>(count[j]);
    out = acc.template cast<typename OutMatrix::Scalar>();
}

template <typename FeatMatrix>
FeatureSelection anova_impl(const FeatMatrix& features, const std::vector<int>& labels,
                            double fraction) {
    const int n = static_cast<int>(features.rows());
    const int q = static_cast<int>(features.cols());
    if (static_cast<int>(labels.size()) != n)
        throw ValidationError("labels do not match feature rows");
    if (!(fraction > 0.0) || fraction > 1.0)
        throw ValidationError("selection fraction must lie in (0, 1]");
    int pos = 0;
    for (int l : labels) pos += (l != 0);
    if (pos == 0 || pos == n)
        throw ValidationError("ANOVA selection requires both classes non-empty");

    FeatureSelection sel;
    sel.f_scores.resize(q);
    std::vector<double> col(n);
    for (int j = 0; j < q; ++j) {
        for (int i = 0; i < n; ++i) col[i] = static_cast<double>(features(i, j));
        double f = stats::f_oneway_binary(col.data(), labels.data(), n);
        if (std::isnan(f)) f = 0.0;
        sel.f_scores[j] = f;
    }
    const int keep = static_cast<int>(std::ceil(fraction * q));
    std::vector<int> order(q);
    for (int j = 0; j < q; ++j) order[j] = j;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (sel.f_scores[a] != sel.f_scores[b]) return sel.f_scores[a] > sel.f_scores[b];
        return a < b;
    });
    sel.selected.assign(order.begin(), order.begin() + keep);
    std::sort(sel.selected.begin(), sel.selected.end());
    return sel;
}

} // namespace

Parcellation ward_parcellate(const Eigen::MatrixXd& train_maps, const vol::AdjacencyGraph& adj,
                             int n_parcels) {
    return ward_impl(train_maps, adj, n_parcels);
}
Parcellation ward_parcellate(const Eigen::MatrixXf& train_maps, const vol::AdjacencyGraph& adj,
                             int n_parcels) {
    return ward_impl(train_maps, adj, n_parcels);
}

Eigen::MatrixXd reduce(const Eigen::MatrixXd& maps, const Parcellation& parc) {
    Eigen::MatrixXd out;
    reduce_impl(maps, parc, out);
    return out;
}
Eigen::MatrixXf reduce(const Eigen::MatrixXf& maps, const Parcellation& parc) {
    Eigen::MatrixXf out;
    reduce_impl(maps, parc, out);
    return out;
}

FeatureSelection anova_select(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                              double fraction) {
    return anova_impl(features, labels, fraction);
}
FeatureSelection anova_select(const Eigen::MatrixXf& features, const std::vector<int>& labels,
                              double fraction) {
    return anova_impl(features, labels, fraction);
}

vol::MaskedVector backproject(const Eigen::VectorXd& weights, const FeatureSelection& sel,
                              const Parcellation& parc, const vol::MaskPtr& mask) {
    if (weights.size() != static_cast<Eigen::Index>(sel.selected.size()))
        throw ValidationError("weight count does not match selected feature count");
    if (static_cast<int>(parc.assignment.size()) != mask->p())
        throw ValidationError("parcellation does not match mask voxel count");
    Eigen::VectorXd parcel_w = Eigen::VectorXd::Zero(parc.n_parcels);
    for (std::size_t i = 0; i < sel.selected.size(); ++i) parcel_w[sel.selected[i]] = weights[i];
    vol::MaskedVector out{mask, Eigen::VectorXd(mask->p())};
    for (int v = 0; v < mask->p(); ++v) out.data[v] = parcel_w[parc.assignment[v]];
    return out;
}

// --- serialization ------------------------------------------------------------

namespace {
constexpr char kParcMagic[6] = {'P', 'A', 'R', 'C', '1', '\n'};

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
} // namespace

void save_parcellation(const std::string& path, const Parcellation& parc) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot open for writing: " + path);
    os.write(kParcMagic, 6);
    put_u32(os, static_cast<std::uint32_t>(parc.assignment.size()));
    put_u32(os, static_cast<std::uint32_t>(parc.n_parcels));
    put_u32(os, static_cast<std::uint32_t>(parc.merge_tree.size()));
    for (int a : parc.assignment) put_u32(os, static_cast<std::uint32_t>(a));
    for (const auto& m : parc.merge_tree) {
        put_u32(os, static_cast<std::uint32_t>(m.a));
        put_u32(os, static_cast<std::uint32_t>(m.b));
        os.write(reinterpret_cast<const char*>(&m.cost), 8);
    }
    if (!os) throw ValidationError("write failed: " + path);
}

Parcellation load_parcellation(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("cannot open for reading: " + path);
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kParcMagic, 6) != 0)
        throw ValidationError("not a PARC1 file: " + path);
    Parcellation parc;
    const std::uint32_t p = get_u32(is);
    parc.n_parcels = static_cast<int>(get_u32(is));
    const std::uint32_t n_merges = get_u32(is);
    parc.assignment.resize(p);
    for (std::uint32_t i = 0; i < p; ++i) parc.assignment[i] = static_cast<int>(get_u32(is));
    parc.merge_tree.resize(n_merges);
    for (auto& m : parc.merge_tree) {
        m.a = static_cast<int>(get_u32(is));
        m.b = static_cast<int>(get_u32(is));
        is.read(reinterpret_cast<char*>(&m.cost), 8);
    }
    if (!is) throw ValidationError("truncated parcellation file: " + path);
    return parc;
}

} // namespace cogmap::parcel
