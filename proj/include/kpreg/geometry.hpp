// Frame geometry, keypoint lifting, rigid fitting and robust pose estimation.
#pragma once

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kpreg/featnet.hpp"
#include "kpreg/matchcore.hpp"
#include "kpreg/rigid_pose.hpp"
#include "kpreg/rng.hpp"

namespace kpreg {

class DegenerateConfiguration : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

struct FrameGeometry {
    Eigen::Vector2d pixel_spacing_mm{1.0, 1.0};
    RigidPose frame_to_world;
    std::size_t frame_index = 0;

    // Pixel (u, v) -> frame_to_world * (u * su, v * sv, 0).
    Vec3 lift_pixel(double u, double v) const {
        return frame_to_world.apply(Vec3(u * pixel_spacing_mm.x(), v * pixel_spacing_mm.y(), 0.0));
    }
};

inline nlohmann::json to_json(const FrameGeometry &f) {
    return {{"pixel_spacing_mm", {f.pixel_spacing_mm.x(), f.pixel_spacing_mm.y()}},
            {"frame_to_world", pose_to_json(f.frame_to_world)},
            {"frame_index", f.frame_index}};
}

inline FrameGeometry frame_geometry_from_json(const nlohmann::json &j) {
    FrameGeometry f;
    const auto s = j.at("pixel_spacing_mm").get<std::vector<double>>();
    if (s.size() != 2) {
        throw std::invalid_argument("pixel_spacing_mm must have two entries");
    }
    f.pixel_spacing_mm = {s[0], s[1]};
    f.frame_to_world = pose_from_json(j.at("frame_to_world"));
    f.frame_index = j.at("frame_index").get<std::size_t>();
    return f;
}

// Placement of a descriptor grid over its source image.
struct GridLayout {
    std::vector<std::size_t> dims; // physical axis order
    std::vector<double> spacing_mm;
    std::size_t stride_px = descriptor_stride;

    std::size_t cells() const {
        std::size_t n = 1;
        for (auto d : dims) {
            n *= d;
        }
        return n;
    }
};

inline GridLayout layout_of(const DescriptorGrid &g) { return {g.grid_dims, g.spacing_mm, g.stride_px}; }

// Pixel coordinate of a cell centre along one axis.
inline double cell_center_px(std::size_t index, std::size_t stride = descriptor_stride) {
    return (static_cast<double>(index) + 0.5) * static_cast<double>(stride) - 0.5;
}

inline Vec3 lift_us_cell(std::size_t flat_cell, const GridLayout &grid, const FrameGeometry &frame) {
    if (grid.dims.size() != 2) {
        throw std::invalid_argument("lift_us_cell expects a 2D grid");
    }
    if (flat_cell >= grid.cells()) {
        throw std::out_of_range("US cell " + std::to_string(flat_cell) + " outside grid of " +
                                std::to_string(grid.cells()) + " cells");
    }
    const std::size_t cx = flat_cell % grid.dims[0];
    const std::size_t cy = flat_cell / grid.dims[0];
    return frame.lift_pixel(cell_center_px(cx, grid.stride_px), cell_center_px(cy, grid.stride_px));
}

inline Vec3 lift_us_cell(std::size_t flat_cell, const DescriptorGrid &grid, const FrameGeometry &frame) {
    return lift_us_cell(flat_cell, layout_of(grid), frame);
}

// Centre of an MR cell in MR image space (mm).
inline Vec3 mr_cell_center(std::size_t flat_cell, const GridLayout &grid) {
    if (grid.dims.size() != 3 || grid.spacing_mm.size() != 3) {
        throw std::invalid_argument("mr_cell_center expects a 3D grid");
    }
    if (flat_cell >= grid.cells()) {
        throw std::out_of_range("MR cell " + std::to_string(flat_cell) + " outside grid of " +
                                std::to_string(grid.cells()) + " cells");
    }
    Vec3 p;
    for (std::size_t a = 0; a < 3; ++a) {
        p[static_cast<Eigen::Index>(a)] = cell_center_px(flat_cell % grid.dims[a], grid.stride_px) * grid.spacing_mm[a];
        flat_cell /= grid.dims[a];
    }
    return p;
}

inline Vec3 mr_cell_center(std::size_t flat_cell, const DescriptorGrid &grid) {
    return mr_cell_center(flat_cell, layout_of(grid));
}

// Nearest MR cell centre to `point_mm`, or empty when the point lies outside
// the region covered by the grid. Exact ties go to the lower index.
inline std::optional<std::size_t> mr_cell_of(const Vec3 &point_mm, const GridLayout &grid) {
    if (grid.dims.size() != 3 || grid.spacing_mm.size() != 3) {
        throw std::invalid_argument("mr_cell_of expects a 3D grid");
    }
    const double stride = static_cast<double>(grid.stride_px);
    std::array<std::size_t, 3> cell{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double px = point_mm[static_cast<Eigen::Index>(a)] / grid.spacing_mm[a];
        const double lo = -0.5;
        const double hi = static_cast<double>(grid.dims[a]) * stride - 0.5;
        if (!(px >= lo && px < hi)) {
            return std::nullopt;
        }
        // Centres sit at k * stride + (stride - 1) / 2; round half down.
        const double t = (px - cell_center_px(0, grid.stride_px)) / stride;
        const double k = std::ceil(t - 0.5);
        cell[a] = static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(grid.dims[a] - 1)));
    }
    return (cell[2] * grid.dims[1] + cell[1]) * grid.dims[0] + cell[0];
}

inline std::optional<std::size_t> mr_cell_of(const Vec3 &point_mm, const DescriptorGrid &grid) {
    return mr_cell_of(point_mm, layout_of(grid));
}

namespace detail {

// Squared-singular-value check on the weighted, centred point cloud.
inline bool is_collinear(const std::vector<Vec3> &pts, const std::vector<double> &w, const Vec3 &centroid) {
    Mat3 cov = Mat3::Zero();
    for (std::size_t k = 0; k < pts.size(); ++k) {
        const Vec3 d = pts[k] - centroid;
        cov += w[k] * d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
    const auto ev = es.eigenvalues(); // ascending
    const double largest = ev(2);
    return !(largest > 0.0) || ev(1) <= 1e-12 * largest;
}

} // namespace detail

// Weighted least-squares rigid fit: argmin_P sum w_k |P a_k - b_k|^2.
inline RigidPose kabsch(const std::vector<Vec3> &points_a, const std::vector<Vec3> &points_b,
                        const std::vector<double> &weights = {}) {
    if (points_a.size() != points_b.size()) {
        throw std::invalid_argument("kabsch: point lists differ in length");
    }
    if (!weights.empty() && weights.size() != points_a.size()) {
        throw std::invalid_argument("kabsch: weight list length mismatch");
    }
    if (points_a.size() < 3) {
        throw DegenerateConfiguration("kabsch: need at least 3 point pairs, got " + std::to_string(points_a.size()));
    }
    std::vector<double> w = weights.empty() ? std::vector<double>(points_a.size(), 1.0) : weights;
    double wsum = 0.0;
    for (double v : w) {
        if (!(v >= 0.0)) {
            throw std::invalid_argument("kabsch: weights must be non-negative");
        }
        wsum += v;
    }
    if (!(wsum > 0.0)) {
        throw DegenerateConfiguration("kabsch: weights sum to zero");
    }
    Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
    for (std::size_t k = 0; k < points_a.size(); ++k) {
        ca += w[k] * points_a[k];
        cb += w[k] * points_b[k];
    }
    ca /= wsum;
    cb /= wsum;
    if (detail::is_collinear(points_a, w, ca) || detail::is_collinear(points_b, w, cb)) {
        throw DegenerateConfiguration("kabsch: collinear point configuration");
    }
    Mat3 h = Mat3::Zero();
    for (std::size_t k = 0; k < points_a.size(); ++k) {
        h += w[k] * (points_a[k] - ca) * (points_b[k] - cb).transpose();
    }
    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    Mat3 fix = Mat3::Identity();
    fix(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    RigidPose p;
    p.rotation = v * fix * u.transpose();
    p.translation = cb - p.rotation * ca;
    return p;
}

struct Correspondence3D {
    Vec3 us_point_mm = Vec3::Zero(); // tracking space
    Vec3 mr_point_mm = Vec3::Zero(); // MR image space
    double confidence = 1.0;
};

inline void write_correspondence_lines(std::ostream &os, const std::vector<Correspondence3D> &corrs) {
    for (const auto &c : corrs) {
        os << nlohmann::json{{"us_point", {c.us_point_mm.x(), c.us_point_mm.y(), c.us_point_mm.z()}},
                             {"mr_point", {c.mr_point_mm.x(), c.mr_point_mm.y(), c.mr_point_mm.z()}},
                             {"confidence", c.confidence}}
                  .dump()
           << '\n';
    }
}

struct RansacConfig {
    std::size_t iterations = 1000;
    double inlier_threshold_mm = 10.0;
    std::size_t min_sample = 3;
    std::uint64_t seed = 0;
    bool confidence_weighted_sampling = true;

    void validate() const {
        if (iterations < 1) {
            throw std::invalid_argument("RANSAC iterations must be >= 1");
        }
        if (!(inlier_threshold_mm > 0.0)) {
            throw std::invalid_argument("RANSAC inlier threshold must be positive");
        }
        if (min_sample != 3) {
            throw std::invalid_argument("RANSAC minimal sample for rigid 3D-3D is 3");
        }
    }
};

struct RansacResult {
    RigidPose pose;
    std::vector<std::size_t> inliers;
    double mean_inlier_residual_mm = 0.0;
};

class NoConsensus : public std::runtime_error {
  public:
    NoConsensus(const std::string &what, std::size_t correspondences, std::size_t best_inliers)
        : std::runtime_error(what), correspondences_(correspondences), best_inliers_(best_inliers) {}

    std::size_t correspondences() const { return correspondences_; }
    std::size_t best_inliers() const { return best_inliers_; }

  private:
    std::size_t correspondences_;
    std::size_t best_inliers_;
};

namespace detail {

struct ModelScore {
    std::vector<std::size_t> inliers;
    double mean_residual = 0.0;

    bool better_than(const ModelScore &o) const {
        if (inliers.size() != o.inliers.size()) {
            return inliers.size() > o.inliers.size();
        }
        return mean_residual < o.mean_residual;
    }
};

inline ModelScore score_model(const RigidPose &p, const std::vector<Correspondence3D> &corrs, double threshold) {
    ModelScore s;
    double total = 0.0;
    for (std::size_t k = 0; k < corrs.size(); ++k) {
        const double r = (p.apply(corrs[k].us_point_mm) - corrs[k].mr_point_mm).norm();
        if (r <= threshold) {
            s.inliers.push_back(k);
            total += r;
        }
    }
    s.mean_residual = s.inliers.empty() ? std::numeric_limits<double>::infinity()
                                        : total / static_cast<double>(s.inliers.size());
    return s;
}

} // namespace detail

inline RansacResult ransac_pose(const std::vector<Correspondence3D> &corrs, const RansacConfig &config) {
    config.validate();
    const std::size_t n = corrs.size();
    if (n < config.min_sample) {
        throw DegenerateConfiguration("ransac_pose: need at least 3 correspondences, got " + std::to_string(n));
    }
    std::vector<double> cumulative(n);
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        acc += config.confidence_weighted_sampling ? std::max(corrs[k].confidence, 0.0) : 1.0;
        cumulative[k] = acc;
    }
    const bool weighted = config.confidence_weighted_sampling && acc > 0.0;

    auto draw = [&](std::mt19937_64 &rng) {
        std::array<std::size_t, 3> pick{};
        std::size_t have = 0;
        for (int attempt = 0; have < 3; ++attempt) {
            std::size_t k;
            if (weighted && attempt < 64) {
                const double r = std::uniform_real_distribution<double>(0.0, acc)(rng);
                k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), r) -
                                             cumulative.begin());
                k = std::min(k, n - 1);
            } else {
                k = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            }
            if (std::find(pick.begin(), pick.begin() + static_cast<long>(have), k) ==
                pick.begin() + static_cast<long>(have)) {
                pick[have++] = k;
            }
        }
        return pick;
    };

    std::optional<detail::ModelScore> best;
    for (std::size_t it = 0; it < config.iterations; ++it) {
        auto rng = stream_rng(config.seed, it);
        std::optional<RigidPose> model;
        for (int redraw = 0; redraw <= 10 && !model; ++redraw) {
            const auto pick = draw(rng);
            std::vector<Vec3> a, b;
            for (auto k : pick) {
                a.push_back(corrs[k].us_point_mm);
                b.push_back(corrs[k].mr_point_mm);
            }
            try {
                model = kabsch(a, b);
            } catch (const DegenerateConfiguration &) {
            }
        }
        if (!model) {
            continue;
        }
        auto score = detail::score_model(*model, corrs, config.inlier_threshold_mm);
        if (!best || score.better_than(*best)) {
            best = std::move(score);
        }
    }
    const std::size_t best_count = best ? best->inliers.size() : 0;
    if (best_count < 3) {
        throw NoConsensus("ransac_pose: no model with >= 3 inliers among " + std::to_string(n) +
                              " correspondences (best " + std::to_string(best_count) + ")",
                          n, best_count);
    }
    std::vector<Vec3> a, b;
    for (auto k : best->inliers) {
        a.push_back(corrs[k].us_point_mm);
        b.push_back(corrs[k].mr_point_mm);
    }
    RansacResult out;
    try {
        out.pose = kabsch(a, b);
    } catch (const DegenerateConfiguration &e) {
        throw NoConsensus(std::string("ransac_pose: inlier set is degenerate: ") + e.what(), n, best_count);
    }
    out.inliers = best->inliers;
    double total = 0.0;
    for (auto k : out.inliers) {
        total += (out.pose.apply(corrs[k].us_point_mm) - corrs[k].mr_point_mm).norm();
    }
    out.mean_inlier_residual_mm = total / static_cast<double>(out.inliers.size());
    return out;
}

// Matches of one frame plus the geometry needed to lift them.
struct FrameMatches {
    MatchSet matches;
    FrameGeometry frame;
    GridLayout us_grid;
    GridLayout mr_grid;
};

inline std::vector<Correspondence3D> fuse_sweep_matches(const std::vector<FrameMatches> &per_frame) {
    std::vector<Correspondence3D> out;
    for (const auto &f : per_frame) {
        for (const auto &m : f.matches.entries) {
            out.push_back({lift_us_cell(m.us_cell, f.us_grid, f.frame), mr_cell_center(m.mr_cell, f.mr_grid),
                           m.confidence});
        }
    }
    return out;
}

struct PoseError {
    double rot_deg = 0.0;
    double trans_mm = 0.0;
};

// Geodesic angle of R_pred^T R_gt (atan2 form of arccos((tr - 1) / 2)).
inline double rotation_error_deg(const Mat3 &pred, const Mat3 &gt) {
    const Mat3 m = pred.transpose() * gt;
    const double c = m.trace() - 1.0;
    const double s = Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)).norm();
    return std::atan2(s, c) * 180.0 / std::numbers::pi;
}

inline PoseError pose_error(const RigidPose &pred, const RigidPose &gt, const std::vector<Vec3> &reference_points) {
    if (reference_points.empty()) {
        throw std::invalid_argument("pose_error: reference point list is empty");
    }
    PoseError e;
    e.rot_deg = rotation_error_deg(pred.rotation, gt.rotation);
    double total = 0.0;
    for (const auto &p : reference_points) {
        total += (pred.apply(p) - gt.apply(p)).norm();
    }
    e.trans_mm = total / static_cast<double>(reference_points.size());
    return e;
}

} // namespace kpreg
