#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ll3da/geometry.hpp"

using namespace ll3da;

namespace {

PointCloud cloud_of(std::vector<Vec3> coords) {
    PointCloud pc;
    pc.coords = std::move(coords);
    pc.feature_dim = 0;
    return pc;
}

// brute-force greedy max-min oracle with the same seed/tie rules, written
// against coordinate values only
std::vector<Vec3> fps_oracle(std::vector<Vec3> pts, size_t k) {
    auto lex = [](const Vec3& a, const Vec3& b) { return a < b; };
    std::vector<Vec3> chosen;
    Vec3 seed = *std::min_element(pts.begin(), pts.end(), lex);
    chosen.push_back(seed);
    while (chosen.size() < k) {
        Vec3 best{};
        double best_d = -1.0;
        bool have = false;
        for (const Vec3& p : pts) {
            double d = HUGE_VAL;
            for (const Vec3& c : chosen) {
                double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
                d = std::min(d, dx * dx + dy * dy + dz * dz);
            }
            if (!have || d > best_d || (d == best_d && lex(p, best))) {
                best = p;
                best_d = d;
                have = true;
            }
        }
        chosen.push_back(best);
    }
    return chosen;
}

// voxelized volume oracle on a 100^3 grid of cell centers
double iou_voxel_oracle(const Box3D& a, const Box3D& b) {
    double lo[3], hi[3];
    for (int ax = 0; ax < 3; ++ax) {
        lo[ax] = std::min(a.center[ax] - a.size[ax] / 2, b.center[ax] - b.size[ax] / 2);
        hi[ax] = std::max(a.center[ax] + a.size[ax] / 2, b.center[ax] + b.size[ax] / 2);
    }
    auto inside = [](const Box3D& box, double x, double y, double z) {
        return std::abs(x - box.center[0]) <= box.size[0] / 2 &&
               std::abs(y - box.center[1]) <= box.size[1] / 2 &&
               std::abs(z - box.center[2]) <= box.size[2] / 2;
    };
    // sample cell centers on a res^(1/3)-ish grid
    int n = 100;
    double inter = 0, uni = 0;
    double cell = 1.0;
    for (int ax = 0; ax < 3; ++ax) cell *= (hi[ax] - lo[ax]) / n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                double x = lo[0] + (i + 0.5) * (hi[0] - lo[0]) / n;
                double y = lo[1] + (j + 0.5) * (hi[1] - lo[1]) / n;
                double z = lo[2] + (k + 0.5) * (hi[2] - lo[2]) / n;
                bool ia = inside(a, x, y, z), ib = inside(b, x, y, z);
                if (ia && ib) inter += cell;
                if (ia || ib) uni += cell;
            }
    return uni > 0 ? inter / uni : 0.0;
}

}  // namespace

TEST_CASE("farthest point sampling") {
    PointCloud line = cloud_of({{1, 0, 0}, {0, 0, 0}, {2, 0, 0}, {3, 0, 0}});

    // k = N returns every index
    auto all = farthest_point_sampling(line, 4);
    std::set<int64_t> s(all.begin(), all.end());
    CHECK(s.size() == 4);

    // k = 1 picks the lexicographically smallest point
    auto one = farthest_point_sampling(line, 1);
    CHECK(line.coords[one[0]] == Vec3{0, 0, 0});

    // 1-d line 0,1,2,3 with k=3: {0, 3, 1} in that order
    auto three = farthest_point_sampling(line, 3);
    CHECK(line.coords[three[0]] == Vec3{0, 0, 0});
    CHECK(line.coords[three[1]] == Vec3{3, 0, 0});
    CHECK(line.coords[three[2]] == Vec3{1, 0, 0});

    CHECK_THROWS_AS(farthest_point_sampling(line, 5), data_error);

    // matches the brute-force oracle and is permutation invariant
    Rng rng(5);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<Vec3> pts;
        for (int i = 0; i < 20; ++i)
            pts.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
        size_t k = 1 + rng.below(pts.size());
        PointCloud pc = cloud_of(pts);
        auto got = farthest_point_sampling(pc, static_cast<int64_t>(k));
        auto want = fps_oracle(pts, k);
        for (size_t i = 0; i < k; ++i) CHECK(pc.coords[got[i]] == want[i]);

        std::vector<Vec3> shuffled = pts;
        for (size_t i = shuffled.size() - 1; i > 0; --i)
            std::swap(shuffled[i], shuffled[rng.below(i + 1)]);
        PointCloud pc2 = cloud_of(shuffled);
        auto got2 = farthest_point_sampling(pc2, static_cast<int64_t>(k));
        for (size_t i = 0; i < k; ++i) CHECK(pc2.coords[got2[i]] == pc.coords[got[i]]);
    }
}

TEST_CASE("box iou 3d") {
    Box3D a{{0, 0, 0}, {1, 1, 1}};
    CHECK(box_iou_3d(a, a) == doctest::Approx(1.0));

    Box3D far{{10, 0, 0}, {1, 1, 1}};
    CHECK(box_iou_3d(a, far) == 0.0);

    Box3D half{{0.5, 0, 0}, {1, 1, 1}};
    CHECK(box_iou_3d(a, half) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(box_iou_3d(a, half) == doctest::Approx(iou_voxel_oracle(a, half)).epsilon(2e-2));

    // symmetry, range, and identity-of-1 over random boxes
    Rng rng(9);
    for (int rep = 0; rep < 50; ++rep) {
        Box3D x{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                {rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2)}};
        Box3D y{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                {rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2)}};
        double ixy = box_iou_3d(x, y);
        CHECK(ixy == box_iou_3d(y, x));
        CHECK(ixy >= 0.0);
        CHECK(ixy <= 1.0);
        if (ixy == 1.0) {
            CHECK(x.center == y.center);
            CHECK(x.size == y.size);
        }
    }
}

TEST_CASE("points in box") {
    std::vector<Vec3> grid;
    for (double x : {0.0, 0.5, 1.0})
        for (double y : {0.0, 0.5, 1.0})
            for (double z : {0.0, 0.5, 1.0}) grid.push_back({x, y, z});
    PointCloud pc = cloud_of(grid);

    Box3D whole{{0.5, 0.5, 0.5}, {2, 2, 2}};
    CHECK(points_in_box(pc, whole).size() == 27);

    Box3D outside{{5, 5, 5}, {1, 1, 1}};
    CHECK(points_in_box(pc, outside).empty());

    // centered half-size box: only the center point falls strictly inside
    Box3D half{{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
    auto inside = points_in_box(pc, half);
    // direct predicate oracle
    std::vector<int64_t> want;
    for (int64_t i = 0; i < pc.size(); ++i) {
        bool in = true;
        for (int ax = 0; ax < 3; ++ax)
            in = in && std::abs(pc.coords[i][ax] - 0.5) <= 0.25;
        if (in) want.push_back(i);
    }
    CHECK(inside == want);
    CHECK(inside.size() == 1);

    // closed boundary: a unit box centered at the grid center catches all 27
    Box3D unit{{0.5, 0.5, 0.5}, {1, 1, 1}};
    CHECK(points_in_box(pc, unit).size() == 27);
}

TEST_CASE("normalize point") {
    SceneBounds b{{-1, 0, 2}, {3, 2, 4}};
    CHECK(normalize_point({-1, 0, 2}, b) == Vec3{0, 0, 0});
    CHECK(normalize_point({3, 2, 4}, b) == Vec3{1, 1, 1});
    Vec3 mid = normalize_point({1, 1, 3}, b);
    CHECK(mid[0] == doctest::Approx(0.5));
    CHECK(mid[1] == doctest::Approx(0.5));
    CHECK(mid[2] == doctest::Approx(0.5));

    SceneBounds degenerate{{0, 0, 0}, {1, 0, 1}};
    CHECK_THROWS_AS(normalize_point({0.5, 0, 0.5}, degenerate), data_error);
}
