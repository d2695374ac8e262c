#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ll3da/common.hpp"

namespace ll3da {

using Vec3 = std::array<double, 3>;

/// N points with 3 coordinates (meters) plus F per-point features.
struct PointCloud {
    std::vector<Vec3> coords;
    std::vector<double> features;  // row-major N x F
    int64_t feature_dim = 0;

    int64_t size() const { return static_cast<int64_t>(coords.size()); }
    const double* feature_row(int64_t i) const { return features.data() + i * feature_dim; }
    void validate() const;
};

/// Axis-aligned box, center + size, all in meters.
struct Box3D {
    Vec3 center{};
    Vec3 size{};  // (w, h, l), all > 0

    double volume() const { return size[0] * size[1] * size[2]; }
};

struct Click {
    Vec3 point{};
};

struct SceneBounds {
    Vec3 lo{};
    Vec3 hi{};

    static SceneBounds of_points(const std::vector<Vec3>& pts);
    double diagonal() const;
    bool contains(const Vec3& p) const;
};

/// Greedy max-min-distance subsampling. The seed is the lexicographically
/// smallest coordinate triple; distance ties prefer lexicographically
/// smaller coordinates, then the lower original index, so the selected
/// coordinate sequence is invariant under input permutation for distinct
/// points.
std::vector<int64_t> farthest_point_sampling(const PointCloud& pc, int64_t k);

double box_iou_3d(const Box3D& a, const Box3D& b);

/// Indices of points inside the box, closed boundary on every axis.
std::vector<int64_t> points_in_box(const PointCloud& pc, const Box3D& b);

/// (p - lo) / (hi - lo) per axis, clamped to [0, 1].
Vec3 normalize_point(const Vec3& p, const SceneBounds& bounds);

}  // namespace ll3da
