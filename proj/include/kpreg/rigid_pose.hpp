// Rigid 3D transforms in millimetres.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace kpreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// x -> rotation * x + translation. Rotation is proper orthonormal.
struct RigidPose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static RigidPose identity() { return {}; }

    static RigidPose from_translation(const Vec3 &t) { return {Mat3::Identity(), t}; }

    static RigidPose from_axis_angle(const Vec3 &axis, double angle_rad, const Vec3 &t = Vec3::Zero()) {
        return {Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix(), t};
    }

    static RigidPose from_matrix(const Mat4 &m, double tol = 1e-6) {
        RigidPose p{m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
        if (!p.is_valid(tol) || m.row(3).head<3>().norm() > tol || std::abs(m(3, 3) - 1.0) > tol) {
            throw std::invalid_argument("matrix is not a rigid transform");
        }
        return p;
    }

    Vec3 apply(const Vec3 &x) const { return rotation * x + translation; }

    // (this * rhs)(x) == this(rhs(x))
    RigidPose operator*(const RigidPose &rhs) const {
        return {rotation * rhs.rotation, rotation * rhs.translation + translation};
    }

    RigidPose inverse() const {
        const Mat3 rt = rotation.transpose();
        return {rt, -(rt * translation)};
    }

    Mat4 matrix() const {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = rotation;
        m.topRightCorner<3, 1>() = translation;
        return m;
    }

    bool is_valid(double tol = 1e-6) const {
        return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
               std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
    }
};

inline nlohmann::json pose_to_json(const RigidPose &p) {
    const Mat4 m = p.matrix();
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 4; ++r) {
        rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
    }
    return rows;
}

inline RigidPose pose_from_json(const nlohmann::json &j) {
    if (!j.is_array() || j.size() != 4) {
        throw std::invalid_argument("pose JSON must be a 4x4 row-major array");
    }
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
        if (!j[r].is_array() || j[r].size() != 4) {
            throw std::invalid_argument("pose JSON must be a 4x4 row-major array");
        }
        for (int c = 0; c < 4; ++c) {
            m(r, c) = j[r][c].get<double>();
        }
    }
    return RigidPose::from_matrix(m, 1e-5);
}

} // namespace kpreg
