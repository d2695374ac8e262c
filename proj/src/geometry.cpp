#include "ll3da/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace ll3da {

namespace {

double sq_dist(const Vec3& a, const Vec3& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

bool lex_less(const Vec3& a, const Vec3& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[1] != b[1]) return a[1] < b[1];
    return a[2] < b[2];
}

}  // namespace

void PointCloud::validate() const {
    if (coords.empty()) throw data_error("point cloud: empty");
    if (static_cast<int64_t>(features.size()) != size() * feature_dim)
        throw data_error("point cloud: feature row count mismatch");
    for (const Vec3& c : coords)
        for (double v : c)
            if (!std::isfinite(v)) throw data_error("point cloud: non-finite coordinate");
}

SceneBounds SceneBounds::of_points(const std::vector<Vec3>& pts) {
    if (pts.empty()) throw data_error("scene bounds: no points");
    SceneBounds b{pts[0], pts[0]};
    for (const Vec3& p : pts)
        for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::min(b.lo[a], p[a]);
            b.hi[a] = std::max(b.hi[a], p[a]);
        }
    return b;
}

double SceneBounds::diagonal() const { return std::sqrt(sq_dist(lo, hi)); }

bool SceneBounds::contains(const Vec3& p) const {
    for (int a = 0; a < 3; ++a)
        if (p[a] < lo[a] || p[a] > hi[a]) return false;
    return true;
}

std::vector<int64_t> farthest_point_sampling(const PointCloud& pc, int64_t k) {
    const int64_t n = pc.size();
    if (k < 1 || k > n) throw data_error("farthest_point_sampling: k out of range");

    int64_t seed = 0;
    for (int64_t i = 1; i < n; ++i)
        if (lex_less(pc.coords[i], pc.coords[seed])) seed = i;

    std::vector<int64_t> picked;
    picked.reserve(k);
    picked.push_back(seed);
    std::vector<double> min_dist(n);
    for (int64_t i = 0; i < n; ++i) min_dist[i] = sq_dist(pc.coords[i], pc.coords[seed]);

    while (static_cast<int64_t>(picked.size()) < k) {
        int64_t best = -1;
        for (int64_t i = 0; i < n; ++i) {
            if (best < 0 || min_dist[i] > min_dist[best] ||
                (min_dist[i] == min_dist[best] && lex_less(pc.coords[i], pc.coords[best])))
                best = i;
        }
        picked.push_back(best);
        for (int64_t i = 0; i < n; ++i)
            min_dist[i] = std::min(min_dist[i], sq_dist(pc.coords[i], pc.coords[best]));
    }
    return picked;
}

double box_iou_3d(const Box3D& a, const Box3D& b) {
    // volumes come from the same corner arithmetic as the intersection so
    // identical boxes score exactly 1
    double inter = 1.0, va = 1.0, vb = 1.0;
    for (int ax = 0; ax < 3; ++ax) {
        double alo = a.center[ax] - a.size[ax] / 2.0, ahi = a.center[ax] + a.size[ax] / 2.0;
        double blo = b.center[ax] - b.size[ax] / 2.0, bhi = b.center[ax] + b.size[ax] / 2.0;
        inter *= std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
        va *= ahi - alo;
        vb *= bhi - blo;
    }
    double uni = va + vb - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<int64_t> points_in_box(const PointCloud& pc, const Box3D& b) {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < pc.size(); ++i) {
        bool in = true;
        for (int ax = 0; ax < 3; ++ax)
            in = in && std::abs(pc.coords[i][ax] - b.center[ax]) <= b.size[ax] / 2.0;
        if (in) idx.push_back(i);
    }
    return idx;
}

Vec3 normalize_point(const Vec3& p, const SceneBounds& bounds) {
    Vec3 out;
    for (int a = 0; a < 3; ++a) {
        double span = bounds.hi[a] - bounds.lo[a];
        if (span <= 0.0) throw data_error("normalize_point: degenerate axis");
        out[a] = std::clamp((p[a] - bounds.lo[a]) / span, 0.0, 1.0);
    }
    return out;
}

}  // namespace ll3da
