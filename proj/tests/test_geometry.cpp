#include <gtest/gtest.h>

#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "kpreg/geometry.hpp"

using namespace kpreg;

namespace {

constexpr double deg = std::numbers::pi / 180.0;

RigidPose random_pose(std::mt19937_64 &rng, double max_angle = std::numbers::pi, double max_t = 50.0) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vec3 axis(n(rng), n(rng), n(rng));
    Vec3 t(n(rng), n(rng), n(rng));
    return RigidPose::from_axis_angle(axis.normalized(), u(rng) * max_angle, t * (max_t / 1.732));
}

std::vector<Vec3> random_points(std::size_t k, std::mt19937_64 &rng, double scale = 40.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<Vec3> pts(k);
    for (auto &p : pts) {
        p = Vec3(u(rng), u(rng), u(rng));
    }
    return pts;
}

double pose_distance(const RigidPose &a, const RigidPose &b) {
    return std::max((a.rotation - b.rotation).cwiseAbs().maxCoeff(), (a.translation - b.translation).cwiseAbs().maxCoeff());
}

// Rotation angle via an independent quaternion conversion (Shepperd's method).
double quaternion_angle_deg(const Mat3 &r) {
    const double tr = r.trace();
    double w;
    Vec3 v;
    if (tr > 0) {
        const double s = std::sqrt(tr + 1.0) * 2;
        w = 0.25 * s;
        v = Vec3(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        const double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
        w = (r(2, 1) - r(1, 2)) / s;
        v = Vec3(0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s);
    } else if (r(1, 1) > r(2, 2)) {
        const double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
        w = (r(0, 2) - r(2, 0)) / s;
        v = Vec3((r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s);
    } else {
        const double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
        w = (r(1, 0) - r(0, 1)) / s;
        v = Vec3((r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s);
    }
    return 2.0 * std::atan2(v.norm(), std::abs(w)) / deg;
}

std::vector<Correspondence3D> exact_corrs(const RigidPose &p, const std::vector<Vec3> &pts) {
    std::vector<Correspondence3D> out;
    for (const auto &a : pts) {
        out.push_back({a, p.apply(a), 0.5});
    }
    return out;
}

} // namespace

TEST(RigidPose, ComposeWithInverseIsIdentity) {
    std::mt19937_64 rng(1);
    for (int k = 0; k < 20; ++k) {
        auto p = random_pose(rng);
        EXPECT_TRUE(p.is_valid());
        auto id = p * p.inverse();
        EXPECT_LT(pose_distance(id, RigidPose::identity()), 1e-9);
        EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-9);
    }
}

TEST(RigidPose, JsonRoundTripAndValidation) {
    std::mt19937_64 rng(2);
    auto p = random_pose(rng);
    auto q = pose_from_json(pose_to_json(p));
    EXPECT_LT(pose_distance(p, q), 1e-12);
    Mat4 bad = Mat4::Identity();
    bad(0, 0) = -1.0;
    EXPECT_THROW(RigidPose::from_matrix(bad), std::invalid_argument);
}

TEST(LiftUsCell, CellCentres) {
    FrameGeometry f;
    f.pixel_spacing_mm = {1.25, 1.25};
    GridLayout g{{8, 8}, {1.25, 1.25}, 8};
    auto p = lift_us_cell(0, g, f);
    EXPECT_NEAR(p.x(), 4.375, 1e-12);
    EXPECT_NEAR(p.y(), 4.375, 1e-12);
    EXPECT_EQ(p.z(), 0.0);

    f.pixel_spacing_mm = {1.0, 1.0};
    p = lift_us_cell(1, g, f);
    EXPECT_NEAR(p.x(), 11.5, 1e-12);
    EXPECT_NEAR(p.y(), 3.5, 1e-12);

    auto shifted = f;
    shifted.frame_to_world = RigidPose::from_translation(Vec3(10, 0, 0));
    for (std::size_t c = 0; c < 64; c += 7) {
        EXPECT_LT((lift_us_cell(c, g, shifted) - lift_us_cell(c, g, f) - Vec3(10, 0, 0)).norm(), 1e-12);
    }
    EXPECT_THROW(lift_us_cell(64, g, f), std::out_of_range);
}

TEST(LiftUsCell, FrameToWorldRotation) {
    FrameGeometry f;
    f.frame_to_world = RigidPose::from_axis_angle(Vec3::UnitZ(), 90 * deg, Vec3(1, 2, 3));
    GridLayout g{{4, 4}, {1.0, 1.0}, 8};
    // (3.5, 11.5, 0) rotated 90 degrees about z -> (-11.5, 3.5, 0), plus t.
    auto p = lift_us_cell(4, g, f);
    EXPECT_LT((p - Vec3(-10.5, 5.5, 3.0)).norm(), 1e-12);
}

TEST(MrCell, CentreAndRoundTrip) {
    GridLayout g{{5, 4, 3}, {1.25, 1.25, 1.25}, 8};
    auto c = mr_cell_center(0, g);
    EXPECT_LT((c - Vec3(4.375, 4.375, 4.375)).norm(), 1e-12);
    for (std::size_t k = 0; k < g.cells(); ++k) {
        auto back = mr_cell_of(mr_cell_center(k, g), g);
        ASSERT_TRUE(back.has_value());
        EXPECT_EQ(*back, k);
    }
    EXPECT_THROW(mr_cell_center(60, g), std::out_of_range);
}

TEST(MrCell, TieGoesToLowerIndex) {
    GridLayout g{{4, 4, 4}, {1.0, 2.0, 1.0}, 8};
    const Vec3 a = mr_cell_center(1, g), b = mr_cell_center(2, g);
    EXPECT_EQ(mr_cell_of(0.5 * (a + b), g), std::optional<std::size_t>(1));
    const Vec3 c = mr_cell_center(4 * 4 * 2, g), d = mr_cell_center(4 * 4 * 3, g);
    EXPECT_EQ(mr_cell_of(0.5 * (c + d), g), std::optional<std::size_t>(32));
}

TEST(MrCell, OutsideGridIsEmpty) {
    GridLayout g{{2, 2, 2}, {1.0, 1.0, 1.0}, 8};
    EXPECT_FALSE(mr_cell_of(Vec3(-0.6, 3, 3), g).has_value());
    EXPECT_FALSE(mr_cell_of(Vec3(3, 15.5, 3), g).has_value());
    EXPECT_TRUE(mr_cell_of(Vec3(-0.5, 3, 3), g).has_value());
    EXPECT_TRUE(mr_cell_of(Vec3(15.49, 3, 3), g).has_value());
}

TEST(MrCell, NearestCentreOracle) {
    GridLayout g{{3, 4, 2}, {1.5, 1.0, 2.0}, 8};
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> ux(-0.5 * 1.5, 23.5 * 1.5), uy(-0.5, 31.5), uz(-1.0, 31.0);
    for (int k = 0; k < 500; ++k) {
        Vec3 p(ux(rng), uy(rng), uz(rng));
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < g.cells(); ++c) {
            const double d = (mr_cell_center(c, g) - p).norm();
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        auto got = mr_cell_of(p, g);
        ASSERT_TRUE(got.has_value());
        EXPECT_EQ(*got, best);
    }
}

TEST(Kabsch, IdentityAndKnownMotion) {
    std::mt19937_64 rng(4);
    auto a = random_points(4, rng);
    EXPECT_LT(pose_distance(kabsch(a, a), RigidPose::identity()), 1e-9);
    auto truth = RigidPose::from_axis_angle(Vec3::UnitZ(), 90 * deg, Vec3(1, 2, 3));
    std::vector<Vec3> b;
    for (auto &p : a) {
        b.push_back(truth.apply(p));
    }
    EXPECT_LT(pose_distance(kabsch(a, b), truth), 1e-6);
}

TEST(Kabsch, ReflectionCorrected) {
    // Near-planar points mapped through a mirror: the unconstrained optimum is
    // improper, the returned rotation must not be.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-20, 20), tiny(-0.01, 0.01);
    std::vector<Vec3> a, b;
    for (int k = 0; k < 10; ++k) {
        a.emplace_back(u(rng), u(rng), tiny(rng));
        b.emplace_back(-a.back().x(), a.back().y(), a.back().z());
    }
    auto p = kabsch(a, b);
    EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-9);
    EXPECT_LT((p.rotation.transpose() * p.rotation - Mat3::Identity()).norm(), 1e-9);
}

TEST(Kabsch, RejectsDegenerateInput) {
    std::vector<Vec3> two{Vec3(0, 0, 0), Vec3(1, 0, 0)};
    EXPECT_THROW(kabsch(two, two), DegenerateConfiguration);
    std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(5, 5, 5)};
    EXPECT_THROW(kabsch(line, line), DegenerateConfiguration);
}

TEST(Kabsch, WeightsMatter) {
    std::mt19937_64 rng(6);
    auto a = random_points(8, rng);
    auto truth = random_pose(rng);
    std::vector<Vec3> b;
    for (auto &p : a) {
        b.push_back(truth.apply(p));
    }
    b[0] += Vec3(30, -20, 10);
    std::vector<double> w(8, 1.0);
    w[0] = 1e-12;
    EXPECT_LT(pose_distance(kabsch(a, b, w), truth), 1e-6);
    EXPECT_GT(pose_distance(kabsch(a, b), truth), 1e-2);
}

TEST(Kabsch, EquivariantUnderCommonMotion) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = random_points(12, rng);
        auto b = random_points(12, rng);
        auto q = random_pose(rng);
        std::vector<Vec3> qa, qb;
        for (std::size_t k = 0; k < a.size(); ++k) {
            qa.push_back(q.apply(a[k]));
            qb.push_back(q.apply(b[k]));
        }
        auto lhs = kabsch(qa, qb);
        auto rhs = q * kabsch(a, b) * q.inverse();
        EXPECT_LT(pose_distance(lhs, rhs), 1e-9);
    }
}

TEST(Ransac, ExactCorrespondences) {
    std::mt19937_64 rng(8);
    auto truth = random_pose(rng);
    auto corrs = exact_corrs(truth, random_points(20, rng));
    auto r = ransac_pose(corrs, RansacConfig{});
    EXPECT_LT(pose_distance(r.pose, truth), 1e-6);
    EXPECT_EQ(r.inliers.size(), 20u);
}

TEST(Ransac, RejectsOutliers) {
    std::mt19937_64 rng(9);
    auto truth = random_pose(rng);
    auto corrs = exact_corrs(truth, random_points(20, rng));
    auto junk_a = random_points(20, rng, 60.0), junk_b = random_points(20, rng, 60.0);
    for (std::size_t k = 0; k < 20; ++k) {
        corrs.push_back({junk_a[k], junk_b[k], 0.5});
    }
    RansacConfig cfg;
    cfg.inlier_threshold_mm = 2.0;
    cfg.iterations = 500;
    cfg.seed = 11;
    auto r = ransac_pose(corrs, cfg);
    EXPECT_LT(pose_distance(r.pose, truth), 1e-3);
    std::vector<std::size_t> expect(20);
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(r.inliers, expect);
}

TEST(Ransac, DeterministicGivenSeed) {
    std::mt19937_64 rng(10);
    auto truth = random_pose(rng);
    auto corrs = exact_corrs(truth, random_points(15, rng));
    std::normal_distribution<double> n(0.0, 3.0);
    for (auto &c : corrs) {
        c.mr_point_mm += Vec3(n(rng), n(rng), n(rng));
    }
    RansacConfig cfg;
    cfg.inlier_threshold_mm = 4.0;
    cfg.seed = 3;
    auto a = ransac_pose(corrs, cfg), b = ransac_pose(corrs, cfg);
    EXPECT_EQ(a.inliers, b.inliers);
    EXPECT_EQ(a.pose.matrix(), b.pose.matrix());
}

TEST(Ransac, TooFewOrNoConsensus) {
    std::mt19937_64 rng(12);
    auto corrs = exact_corrs(RigidPose::identity(), random_points(2, rng));
    EXPECT_THROW(ransac_pose(corrs, RansacConfig{}), std::invalid_argument);

    auto a = random_points(10, rng, 500.0), b = random_points(10, rng, 500.0);
    std::vector<Correspondence3D> junk;
    for (std::size_t k = 0; k < 10; ++k) {
        junk.push_back({a[k], b[k], 0.5});
    }
    RansacConfig cfg;
    cfg.inlier_threshold_mm = 0.01;
    cfg.iterations = 50;
    try {
        ransac_pose(junk, cfg);
        FAIL() << "expected NoConsensus";
    } catch (const NoConsensus &e) {
        EXPECT_EQ(e.correspondences(), 10u);
        EXPECT_LT(e.best_inliers(), 3u);
    }
}

TEST(Ransac, NoOutliersEqualsKabsch) {
    std::mt19937_64 rng(13);
    auto truth = random_pose(rng);
    auto pts = random_points(25, rng);
    auto corrs = exact_corrs(truth, pts);
    std::normal_distribution<double> n(0.0, 0.5);
    std::vector<Vec3> b;
    for (auto &c : corrs) {
        c.mr_point_mm += Vec3(n(rng), n(rng), n(rng));
        b.push_back(c.mr_point_mm);
    }
    RansacConfig cfg;
    cfg.inlier_threshold_mm = 50.0;
    auto r = ransac_pose(corrs, cfg);
    ASSERT_EQ(r.inliers.size(), 25u);
    std::vector<double> w(25, 0.5);
    EXPECT_LT(pose_distance(r.pose, kabsch(pts, b, w)), 1e-9);
}

TEST(Ransac, ConfigValidation) {
    RansacConfig cfg;
    cfg.iterations = 0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.inlier_threshold_mm = 0.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(FuseSweep, LiftsAndConcatenates) {
    GridLayout us{{4, 4}, {1.0, 1.0}, 8};
    GridLayout mr{{4, 4, 4}, {2.0, 2.0, 2.0}, 8};
    FrameMatches f1;
    f1.us_grid = us;
    f1.mr_grid = mr;
    f1.matches.entries = {{0, 5, 0.9}, {3, 7, 0.4}};
    FrameMatches f2 = f1;
    f2.frame.frame_index = 1;
    f2.frame.frame_to_world = RigidPose::from_translation(Vec3(0, 0, 5));
    f2.matches.entries = {{0, 1, 0.8}, {2, 2, 0.3}, {0, 5, 0.25}};

    auto single = fuse_sweep_matches({f1});
    ASSERT_EQ(single.size(), 2u);
    EXPECT_EQ(single[0].us_point_mm, lift_us_cell(0, us, f1.frame));
    EXPECT_EQ(single[0].mr_point_mm, mr_cell_center(5, mr));
    EXPECT_EQ(single[1].confidence, 0.4);

    auto both = fuse_sweep_matches({f1, f2});
    ASSERT_EQ(both.size(), 5u);
    EXPECT_EQ(both[2].confidence, 0.8);
    EXPECT_EQ(both[4].confidence, 0.25);
    EXPECT_LT((both[4].us_point_mm - both[0].us_point_mm - Vec3(0, 0, 5)).norm(), 1e-12);
    EXPECT_TRUE(fuse_sweep_matches({}).empty());

    std::ostringstream os;
    write_correspondence_lines(os, single);
    auto j = nlohmann::json::parse(os.str().substr(0, os.str().find('\n')));
    EXPECT_DOUBLE_EQ(j["confidence"].get<double>(), 0.9);
    EXPECT_EQ(j["us_point"].size(), 3u);
}

TEST(PoseError, ZeroAndSingleAxis) {
    std::mt19937_64 rng(14);
    auto g = random_pose(rng);
    std::vector<Vec3> refs{Vec3(10, 20, 30), Vec3(-5, 0, 2)};
    auto e = pose_error(g, g, refs);
    EXPECT_NEAR(e.rot_deg, 0.0, 1e-9);
    EXPECT_NEAR(e.trans_mm, 0.0, 1e-9);

    const Vec3 centroid(10, 20, 30);
    for (const Vec3 &axis : std::vector<Vec3>{Vec3::UnitX(), Vec3(1, 1, 0).normalized(), Vec3(0.2, -0.5, 0.8).normalized()}) {
        // Rotate 10 degrees about an axis through the centroid.
        auto r = RigidPose::from_axis_angle(axis, 10 * deg, Vec3::Zero());
        auto about = RigidPose::from_translation(centroid) * r * RigidPose::from_translation(-centroid);
        auto pred = g * about;
        auto err = pose_error(pred, g, {centroid});
        EXPECT_NEAR(err.rot_deg, 10.0, 1e-9);
        EXPECT_NEAR(err.trans_mm, 0.0, 1e-9);
    }
    EXPECT_THROW(pose_error(g, g, {}), std::invalid_argument);
}

TEST(PoseError, QuaternionOracleAndSymmetry) {
    std::mt19937_64 rng(15);
    for (int k = 0; k < 200; ++k) {
        auto p = random_pose(rng), g = random_pose(rng);
        const double oracle = quaternion_angle_deg(p.rotation.transpose() * g.rotation);
        auto e = pose_error(p, g, {Vec3::Zero()});
        EXPECT_NEAR(e.rot_deg, oracle, 1e-6);
        EXPECT_NEAR(e.rot_deg, pose_error(g, p, {Vec3::Zero()}).rot_deg, 1e-9);
    }
    // Near-identity and near-180 degrees, where arccos loses precision.
    for (double a : {1e-7, 0.5, 179.9, 180.0}) {
        auto p = RigidPose::from_axis_angle(Vec3(1, 2, 3).normalized(), a * deg, Vec3::Zero());
        EXPECT_NEAR(pose_error(p, RigidPose::identity(), {Vec3::Zero()}).rot_deg, a, 1e-6);
    }
}

TEST(PoseError, TranslationIsMeanDisplacement) {
    auto pred = RigidPose::from_translation(Vec3(3, 4, 0));
    auto e = pose_error(pred, RigidPose::identity(), {Vec3(0, 0, 0), Vec3(100, 0, 0)});
    EXPECT_NEAR(e.trans_mm, 5.0, 1e-12);
    auto rot = RigidPose::from_axis_angle(Vec3::UnitZ(), 90 * deg, Vec3::Zero());
    e = pose_error(rot, RigidPose::identity(), {Vec3(0, 0, 0), Vec3(10, 0, 0)});
    EXPECT_NEAR(e.trans_mm, 0.5 * std::sqrt(200.0), 1e-9);
}
