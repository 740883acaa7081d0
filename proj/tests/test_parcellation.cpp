#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <queue>
#include <set>
#include <vector>

#include "cogmap/parcellation.hpp"
#include "cogmap/rng.hpp"
#include "cogmap/volume.hpp"

using namespace cogmap;
using parcel::Parcellation;
using vol::AdjacencyGraph;
using vol::BrainMask;
using vol::VolumeGrid;

namespace {

vol::MaskPtr full_mask(int nx, int ny, int nz) {
    VolumeGrid g{nx, ny, nz, 1.0, 1.0, 1.0};
    return std::make_shared<BrainMask>(g, std::vector<std::uint8_t>(g.cells(), 1));
}

Eigen::MatrixXd random_maps(int n, int p, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd m(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) m(i, j) = rng.normal();
    return m;
}

// Exhaustive reference: at every step recompute the Ward cost of every
// adjacent active pair from the cluster sums and take the smallest
// (cost, a, b). Quadratic, only usable for tiny grids.
Parcellation brute_force_ward(const Eigen::MatrixXd& maps, const AdjacencyGraph& adj,
                              int n_parcels) {
    const int p = static_cast<int>(maps.cols());
    std::vector<Eigen::VectorXd> sum(2 * p - 1);
    std::vector<int> size(2 * p - 1, 0), parent(2 * p - 1);
    std::vector<std::set<int>> nbrs(2 * p - 1);
    std::vector<char> active(2 * p - 1, 0);
    for (int v = 0; v < p; ++v) {
        sum[v] = maps.col(v);
        size[v] = 1;
        parent[v] = v;
        active[v] = 1;
    }
    for (const auto& [a, b] : adj.edges) {
        nbrs[a].insert(b);
        nbrs[b].insert(a);
    }
    Parcellation out;
    int n_active = p, next = p;
    while (n_active > n_parcels) {
        double best_cost = 0.0;
        int best_a = -1, best_b = -1;
        for (int a = 0; a < next; ++a) {
            if (!active[a]) continue;
            for (int b : nbrs[a]) {
                if (b <= a || !active[b]) continue;
                const double na = size[a], nb = size[b];
                const double cost =
                    na * nb / (na + nb) * (sum[a] / na - sum[b] / nb).squaredNorm();
                if (best_a < 0 || cost < best_cost ||
                    (cost == best_cost && (a < best_a || (a == best_a && b < best_b)))) {
                    best_cost = cost;
                    best_a = a;
                    best_b = b;
                }
            }
        }
        if (best_a < 0) break; // disconnected
        const int c = next++;
        out.merge_tree.push_back({best_a, best_b, best_cost});
        sum[c] = sum[best_a] + sum[best_b];
        size[c] = size[best_a] + size[best_b];
        parent[best_a] = parent[best_b] = c;
        parent[c] = c;
        active[best_a] = active[best_b] = 0;
        active[c] = 1;
        for (int x : nbrs[best_a])
            if (x != best_b) nbrs[c].insert(x);
        for (int x : nbrs[best_b])
            if (x != best_a) nbrs[c].insert(x);
        for (int x : nbrs[c]) {
            nbrs[x].erase(best_a);
            nbrs[x].erase(best_b);
            nbrs[x].insert(c);
        }
        --n_active;
    }
    out.n_parcels = n_active;
    out.assignment.resize(p);
    auto root_of = [&](int v) {
        while (parent[v] != v) v = parent[v];
        return v;
    };
    std::vector<int> label(2 * p - 1, -1);
    int next_label = 0;
    for (int v = 0; v < p; ++v) {
        const int r = root_of(v);
        if (label[r] < 0) label[r] = next_label++;
        out.assignment[v] = label[r];
    }
    return out;
}

void check_equal(const Parcellation& got, const Parcellation& want) {
    REQUIRE(got.merge_tree.size() == want.merge_tree.size());
    for (std::size_t i = 0; i < want.merge_tree.size(); ++i) {
        CAPTURE(i);
        CHECK(got.merge_tree[i].a == want.merge_tree[i].a);
        CHECK(got.merge_tree[i].b == want.merge_tree[i].b);
        const double scale = std::max(1.0, std::abs(want.merge_tree[i].cost));
        CHECK(std::abs(got.merge_tree[i].cost - want.merge_tree[i].cost) <= 1e-10 * scale);
    }
    CHECK(got.n_parcels == want.n_parcels);
    CHECK(got.assignment == want.assignment);
}

} // namespace

TEST_CASE("ward merge sequence matches exhaustive search on tiny grids") {
    const int dims[][3] = {{2, 2, 2}, {3, 3, 1}, {9, 1, 1}, {4, 2, 1}, {2, 2, 1}, {3, 1, 3}};
    std::uint64_t seed = 7000;
    for (const auto& d : dims) {
        const auto mask = full_mask(d[0], d[1], d[2]);
        const auto adj = vol::build_adjacency(*mask);
        const int p = mask->p();
        for (int rep = 0; rep < 5; ++rep) {
            const auto maps = random_maps(4, p, seed++);
            Rng pick(seed++);
            const int target = 1 + static_cast<int>(pick.uniform_int(p));
            CAPTURE(d[0]);
            CAPTURE(d[1]);
            CAPTURE(d[2]);
            CAPTURE(target);
            check_equal(parcel::ward_parcellate(maps, adj, target),
                        brute_force_ward(maps, adj, target));
        }
    }
}

TEST_CASE("ward tie-breaking follows the (cost, a, b) rule") {
    // constant data: every candidate pair costs exactly 0, so the merge order
    // is decided purely by the tie rule
    const auto mask = full_mask(3, 2, 1);
    const auto adj = vol::build_adjacency(*mask);
    const Eigen::MatrixXd maps = Eigen::MatrixXd::Ones(3, mask->p());
    for (int target : {1, 2, 3}) {
        CAPTURE(target);
        const auto got = parcel::ward_parcellate(maps, adj, target);
        for (const auto& m : got.merge_tree) CHECK(m.cost == 0.0);
        check_equal(got, brute_force_ward(maps, adj, target));
    }
}

TEST_CASE("recorded merge costs equal direct recomputation from member sets") {
    const auto mask = full_mask(4, 2, 2);
    const auto adj = vol::build_adjacency(*mask);
    const int p = mask->p();
    const auto maps = random_maps(6, p, 55);
    const auto parc = parcel::ward_parcellate(maps, adj, 3);
    // rebuild each merged cluster's member set and check the Ward cost
    std::vector<std::vector<int>> members(static_cast<std::size_t>(p) + parc.merge_tree.size());
    for (int v = 0; v < p; ++v) members[static_cast<std::size_t>(v)] = {v};
    for (std::size_t i = 0; i < parc.merge_tree.size(); ++i) {
        const auto& m = parc.merge_tree[i];
        auto mean_of = [&](const std::vector<int>& vs) {
            Eigen::VectorXd s = Eigen::VectorXd::Zero(maps.rows());
            for (int v : vs) s += maps.col(v);
            return Eigen::VectorXd(s / static_cast<double>(vs.size()));
        };
        const auto& A = members[static_cast<std::size_t>(m.a)];
        const auto& B = members[static_cast<std::size_t>(m.b)];
        const double na = static_cast<double>(A.size()), nb = static_cast<double>(B.size());
        const double direct = na * nb / (na + nb) * (mean_of(A) - mean_of(B)).squaredNorm();
        CHECK(std::abs(m.cost - direct) <= 1e-10 * std::max(1.0, direct));
        auto merged = A;
        merged.insert(merged.end(), B.begin(), B.end());
        members[static_cast<std::size_t>(p) + i] = std::move(merged);
        CHECK(m.a < p + static_cast<int>(i));
        CHECK(m.b < p + static_cast<int>(i));
    }
}

TEST_CASE("every parcel is spatially connected") {
    const auto mask = full_mask(4, 3, 2);
    const auto adj = vol::build_adjacency(*mask);
    const int p = mask->p();
    const auto parc = parcel::ward_parcellate(random_maps(5, p, 99), adj, 5);
    REQUIRE(parc.n_parcels == 5);
    std::vector<std::vector<int>> nbrs(static_cast<std::size_t>(p));
    for (const auto& [a, b] : adj.edges) {
        nbrs[static_cast<std::size_t>(a)].push_back(b);
        nbrs[static_cast<std::size_t>(b)].push_back(a);
    }
    for (int k = 0; k < parc.n_parcels; ++k) {
        std::vector<int> in;
        for (int v = 0; v < p; ++v)
            if (parc.assignment[static_cast<std::size_t>(v)] == k) in.push_back(v);
        REQUIRE(!in.empty());
        // BFS within the parcel from its first voxel must reach all members
        std::set<int> seen{in[0]};
        std::queue<int> q;
        q.push(in[0]);
        while (!q.empty()) {
            const int v = q.front();
            q.pop();
            for (int u : nbrs[static_cast<std::size_t>(v)])
                if (parc.assignment[static_cast<std::size_t>(u)] == k && seen.insert(u).second)
                    q.push(u);
        }
        CHECK(seen.size() == in.size());
    }
}

TEST_CASE("parcel labels are ordered by first voxel and cover [0, n_parcels)") {
    const auto mask = full_mask(3, 3, 3);
    const auto adj = vol::build_adjacency(*mask);
    const auto parc = parcel::ward_parcellate(random_maps(4, mask->p(), 21), adj, 7);
    int next_new = 0;
    for (int label : parc.assignment) {
        CHECK(label >= 0);
        CHECK(label <= next_new); // a label appears only after all smaller ones
        if (label == next_new) ++next_new;
    }
    CHECK(next_new == parc.n_parcels);
}

TEST_CASE("reduce averages within parcels; n_parcels = p is the identity") {
    const auto mask = full_mask(2, 2, 1);
    const auto adj = vol::build_adjacency(*mask);
    const auto maps = random_maps(3, 4, 31);

    SUBCASE("identity") {
        const auto parc = parcel::ward_parcellate(maps, adj, 4);
        CHECK(parc.merge_tree.empty());
        CHECK(parc.assignment == std::vector<int>{0, 1, 2, 3});
        CHECK((parcel::reduce(maps, parc) - maps).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("hand-checked means") {
        Parcellation parc;
        parc.n_parcels = 2;
        parc.assignment = {0, 1, 0, 1};
        const auto red = parcel::reduce(maps, parc);
        REQUIRE(red.cols() == 2);
        for (int i = 0; i < 3; ++i) {
            CHECK(red(i, 0) == doctest::Approx((maps(i, 0) + maps(i, 2)) / 2).epsilon(1e-14));
            CHECK(red(i, 1) == doctest::Approx((maps(i, 1) + maps(i, 3)) / 2).epsilon(1e-14));
        }
    }
    SUBCASE("wrong voxel count rejected") {
        Parcellation parc;
        parc.n_parcels = 1;
        parc.assignment = {0, 0, 0};
        CHECK_THROWS_WITH_AS(parcel::reduce(maps, parc), doctest::Contains("mask mismatch"),
                             ValidationError);
    }
}

TEST_CASE("invalid parcel counts are rejected") {
    const auto mask = full_mask(2, 2, 1);
    const auto adj = vol::build_adjacency(*mask);
    const auto maps = random_maps(2, 4, 41);
    CHECK_THROWS_AS(parcel::ward_parcellate(maps, adj, 0), ValidationError);
    CHECK_THROWS_WITH_AS(parcel::ward_parcellate(maps, adj, 5), doctest::Contains("exceeds"),
                         ValidationError);
}

TEST_CASE("disconnected masks stop at the component count with a warning") {
    // two 2x1x1 bars separated by a gap along x
    VolumeGrid g{5, 1, 1, 1.0, 1.0, 1.0};
    std::vector<std::uint8_t> cells = {1, 1, 0, 1, 1};
    const auto mask = std::make_shared<BrainMask>(g, cells);
    const auto adj = vol::build_adjacency(*mask);
    const auto maps = random_maps(3, 4, 51);
    Log::set_quiet(true);
    const auto parc = parcel::ward_parcellate(maps, adj, 1);
    Log::set_quiet(false);
    CHECK(parc.n_parcels == 2);
    CHECK(parc.assignment == std::vector<int>{0, 0, 1, 1});
}

TEST_CASE("anova selection keeps ceil(fraction * q) features ranked by F") {
    const int n = 20, q = 10;
    Rng rng(61);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i < 8 ? 1 : 0;
    Eigen::MatrixXd F(n, q);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < q; ++j) F(i, j) = rng.normal();
    // plant strong group separation on features 7 and 2, weaker on 5
    for (int i = 0; i < n; ++i) {
        F(i, 7) += labels[i] * 10.0;
        F(i, 2) += labels[i] * 8.0;
        F(i, 5) += labels[i] * 3.0;
    }

    SUBCASE("count and ranking") {
        const auto sel = parcel::anova_select(F, labels, 0.25);
        CHECK(sel.selected.size() == 3); // ceil(0.25 * 10)
        CHECK(std::is_sorted(sel.selected.begin(), sel.selected.end()));
        CHECK(std::find(sel.selected.begin(), sel.selected.end(), 7) != sel.selected.end());
        CHECK(std::find(sel.selected.begin(), sel.selected.end(), 2) != sel.selected.end());
        const auto all = parcel::anova_select(F, labels, 1.0);
        CHECK(all.selected.size() == 10);
    }
    SUBCASE("exact-tie columns resolve to the lower index") {
        // columns 1 and 3 equal the labels exactly: zero within-group variance
        // gives both an infinite F, an exact tie
        Eigen::MatrixXd T = F.leftCols(4).eval();
        for (int i = 0; i < n; ++i) T(i, 1) = T(i, 3) = labels[static_cast<std::size_t>(i)];
        CHECK(parcel::anova_select(T, labels, 0.25).selected == std::vector<int>{1});
        CHECK(parcel::anova_select(T, labels, 0.5).selected == std::vector<int>{1, 3});
    }
    SUBCASE("constant feature scores zero") {
        Eigen::MatrixXd T = F;
        T.col(0).setConstant(4.25); // exactly representable: sums stay exact
        const auto sel = parcel::anova_select(T, labels, 1.0);
        CHECK(sel.f_scores[0] == 0.0);
    }
    SUBCASE("single-class labels rejected") {
        CHECK_THROWS_WITH_AS(parcel::anova_select(F, std::vector<int>(n, 1), 0.5),
                             doctest::Contains("both classes"), ValidationError);
        CHECK_THROWS_AS(parcel::anova_select(F, std::vector<int>(n, 0), 0.5), ValidationError);
    }
    SUBCASE("invalid fraction rejected") {
        CHECK_THROWS_AS(parcel::anova_select(F, labels, 0.0), ValidationError);
        CHECK_THROWS_AS(parcel::anova_select(F, labels, 1.5), ValidationError);
    }
}

TEST_CASE("backproject then reduce recovers the selected weights") {
    const auto mask = full_mask(3, 3, 2);
    const auto adj = vol::build_adjacency(*mask);
    const int p = mask->p();
    const auto maps = random_maps(5, p, 71);
    const auto parc = parcel::ward_parcellate(maps, adj, 6);

    parcel::FeatureSelection sel;
    sel.selected = {0, 2, 5};
    Eigen::VectorXd w(3);
    w << 1.5, -2.0, 0.25;
    const auto voxels = parcel::backproject(w, sel, parc, mask);
    for (int v = 0; v < p; ++v) {
        const int k = parc.assignment[static_cast<std::size_t>(v)];
        double expect = 0.0;
        for (std::size_t i = 0; i < sel.selected.size(); ++i)
            if (sel.selected[i] == k) expect = w[static_cast<Eigen::Index>(i)];
        CHECK(voxels.data[v] == expect);
    }
    Eigen::MatrixXd one_row = voxels.data.transpose();
    const auto red = parcel::reduce(one_row, parc);
    for (std::size_t i = 0; i < sel.selected.size(); ++i)
        CHECK(red(0, sel.selected[i]) == doctest::Approx(w[static_cast<Eigen::Index>(i)]).epsilon(1e-14));

    Eigen::VectorXd bad(2);
    bad << 1, 2;
    CHECK_THROWS_AS(parcel::backproject(bad, sel, parc, mask), ValidationError);
}

TEST_CASE("parcellation files round-trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "parc_rt_test";
    fs::create_directories(dir);
    const auto mask = full_mask(3, 2, 2);
    const auto adj = vol::build_adjacency(*mask);
    const auto parc = parcel::ward_parcellate(random_maps(4, mask->p(), 81), adj, 4);

    const std::string path = (dir / "a.parc").string();
    parcel::save_parcellation(path, parc);
    const auto back = parcel::load_parcellation(path);
    CHECK(back.n_parcels == parc.n_parcels);
    CHECK(back.assignment == parc.assignment);
    REQUIRE(back.merge_tree.size() == parc.merge_tree.size());
    for (std::size_t i = 0; i < parc.merge_tree.size(); ++i) {
        CHECK(back.merge_tree[i].a == parc.merge_tree[i].a);
        CHECK(back.merge_tree[i].b == parc.merge_tree[i].b);
        CHECK(back.merge_tree[i].cost == parc.merge_tree[i].cost);
    }

    const std::string garbage = (dir / "bad.parc").string();
    {
        std::FILE* f = std::fopen(garbage.c_str(), "wb");
        std::fputs("NOTAPARC", f);
        std::fclose(f);
    }
    CHECK_THROWS_WITH_AS(parcel::load_parcellation(garbage), doctest::Contains("PARC1"),
                         ValidationError);
    fs::remove_all(dir);
}
