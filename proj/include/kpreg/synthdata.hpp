// Synthetic MR volume + tracked US sweep phantoms, resampling and
// augmentations.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "kpreg/geometry.hpp"
#include "kpreg/image.hpp"
#include "kpreg/matchcore.hpp"
#include "kpreg/rigid_pose.hpp"
#include "kpreg/rng.hpp"

namespace kpreg {

// Piecewise-linear lookup on [0, 1]; knots sorted by x, y non-decreasing.
struct IntensityMap {
    std::vector<std::pair<double, double>> knots{{0.0, 0.0}, {1.0, 1.0}};

    static IntensityMap identity() { return {}; }

    void validate() const {
        if (knots.size() < 2) {
            throw std::invalid_argument("intensity map needs at least two knots");
        }
        for (std::size_t k = 0; k < knots.size(); ++k) {
            const auto [x, y] = knots[k];
            if (x < 0.0 || x > 1.0 || y < 0.0 || y > 1.0) {
                throw std::invalid_argument("intensity map knots must lie in [0, 1] x [0, 1]");
            }
            if (k > 0 && (x <= knots[k - 1].first || y < knots[k - 1].second)) {
                throw std::invalid_argument("intensity map must be increasing in x and monotone in y");
            }
        }
    }

    double operator()(double v) const {
        if (v <= knots.front().first) {
            return knots.front().second;
        }
        for (std::size_t k = 1; k < knots.size(); ++k) {
            if (v <= knots[k].first) {
                const auto [x0, y0] = knots[k - 1];
                const auto [x1, y1] = knots[k];
                return y0 + (y1 - y0) * (v - x0) / (x1 - x0);
            }
        }
        return knots.back().second;
    }
};

inline nlohmann::json to_json(const IntensityMap &m) {
    nlohmann::json j = nlohmann::json::array();
    for (auto [x, y] : m.knots) {
        j.push_back({x, y});
    }
    return j;
}

inline IntensityMap intensity_map_from_json(const nlohmann::json &j) {
    IntensityMap m;
    m.knots.clear();
    for (const auto &k : j) {
        m.knots.emplace_back(k.at(0).get<double>(), k.at(1).get<double>());
    }
    m.validate();
    return m;
}

enum class SweepClass { transversal, intercostal };

inline const char *to_string(SweepClass c) { return c == SweepClass::transversal ? "transversal" : "intercostal"; }

inline SweepClass sweep_class_from_string(const std::string &s) {
    if (s == "transversal") {
        return SweepClass::transversal;
    }
    if (s == "intercostal") {
        return SweepClass::intercostal;
    }
    throw std::invalid_argument("unknown sweep class '" + s + "'");
}

struct DeformationSpec {
    std::size_t control_points = 5; // per axis
    double max_displacement_mm = 5.0;
};

struct SweepSpec {
    std::size_t frames = 16;
    std::array<std::size_t, 2> frame_dims{64, 64}; // (width, height)
    double pixel_spacing_mm = 1.25;
    double step_mm = 2.5;
    double max_tilt_deg = 10.0;
    double max_inplane_deg = 15.0;
    double max_offset_mm = 8.0;
    double drift_deg_per_frame = 0.5;
    double intercostal_probability = 0.25;
    std::optional<SweepClass> force_class;
    bool fan_mask = true;
    bool identity_registration = false;
    double max_registration_translation_mm = 50.0;
};

struct PhantomSpec {
    std::uint64_t seed = 0;
    std::array<std::size_t, 3> volume_dims{64, 64, 64}; // (x, y, z)
    double spacing_mm = 1.25;
    std::size_t n_ellipsoids = 16;
    std::size_t n_tubes = 5;
    IntensityMap mr_intensity_map{{{0.0, 0.1}, {0.4, 0.3}, {0.7, 0.8}, {1.0, 0.9}}};
    IntensityMap us_intensity_map{{{0.0, 0.0}, {0.25, 0.4}, {0.5, 0.55}, {0.75, 0.9}, {1.0, 1.0}}};
    double us_noise_sigma = 0.02;
    double speckle_grain_px = 2.0;
    double speckle_strength = 0.15;
    std::optional<DeformationSpec> deformation;
    SweepSpec sweep;

    void validate() const {
        for (auto d : volume_dims) {
            if (d < 32) {
                throw std::invalid_argument("phantom volume must be at least 32 voxels per axis");
            }
        }
        if (!(spacing_mm > 0.0) || !(sweep.pixel_spacing_mm > 0.0)) {
            throw std::invalid_argument("phantom spacing must be positive");
        }
        if (us_noise_sigma < 0.0 || speckle_strength < 0.0 || !(speckle_grain_px >= 1.0)) {
            throw std::invalid_argument("phantom noise settings out of range");
        }
        if (sweep.frames < 1 || sweep.frame_dims[0] < 8 || sweep.frame_dims[1] < 8) {
            throw std::invalid_argument("sweep needs at least one frame of at least 8 x 8 pixels");
        }
        if (sweep.intercostal_probability < 0.0 || sweep.intercostal_probability > 1.0) {
            throw std::invalid_argument("intercostal_probability must lie in [0, 1]");
        }
        if (deformation && (deformation->control_points < 2 || deformation->max_displacement_mm < 0.0)) {
            throw std::invalid_argument("deformation needs >= 2 control points and a non-negative magnitude");
        }
        mr_intensity_map.validate();
        us_intensity_map.validate();
    }
};

inline nlohmann::json to_json(const PhantomSpec &s) {
    const auto &w = s.sweep;
    nlohmann::json sweep{{"frames", w.frames},
                         {"frame_dims", w.frame_dims},
                         {"pixel_spacing_mm", w.pixel_spacing_mm},
                         {"step_mm", w.step_mm},
                         {"max_tilt_deg", w.max_tilt_deg},
                         {"max_inplane_deg", w.max_inplane_deg},
                         {"max_offset_mm", w.max_offset_mm},
                         {"drift_deg_per_frame", w.drift_deg_per_frame},
                         {"intercostal_probability", w.intercostal_probability},
                         {"force_class", w.force_class ? nlohmann::json(to_string(*w.force_class)) : nlohmann::json()},
                         {"fan_mask", w.fan_mask},
                         {"identity_registration", w.identity_registration},
                         {"max_registration_translation_mm", w.max_registration_translation_mm}};
    nlohmann::json deform;
    if (s.deformation) {
        deform = {{"control_points", s.deformation->control_points},
                  {"max_displacement_mm", s.deformation->max_displacement_mm}};
    }
    return {{"seed", s.seed},
            {"volume_dims", s.volume_dims},
            {"spacing_mm", s.spacing_mm},
            {"n_ellipsoids", s.n_ellipsoids},
            {"n_tubes", s.n_tubes},
            {"mr_intensity_map", to_json(s.mr_intensity_map)},
            {"us_intensity_map", to_json(s.us_intensity_map)},
            {"us_noise_sigma", s.us_noise_sigma},
            {"speckle_grain_px", s.speckle_grain_px},
            {"speckle_strength", s.speckle_strength},
            {"deformation", deform},
            {"sweep", sweep}};
}

// Missing keys keep their defaults, so partial spec files are accepted.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json &j) {
    PhantomSpec s;
    auto get = [&j](const char *key, auto &dst) {
        if (j.contains(key) && !j.at(key).is_null()) {
            dst = j.at(key).get<std::remove_reference_t<decltype(dst)>>();
        }
    };
    get("seed", s.seed);
    get("volume_dims", s.volume_dims);
    get("spacing_mm", s.spacing_mm);
    get("n_ellipsoids", s.n_ellipsoids);
    get("n_tubes", s.n_tubes);
    get("us_noise_sigma", s.us_noise_sigma);
    get("speckle_grain_px", s.speckle_grain_px);
    get("speckle_strength", s.speckle_strength);
    if (j.contains("mr_intensity_map")) {
        s.mr_intensity_map = intensity_map_from_json(j.at("mr_intensity_map"));
    }
    if (j.contains("us_intensity_map")) {
        s.us_intensity_map = intensity_map_from_json(j.at("us_intensity_map"));
    }
    if (j.contains("deformation") && !j.at("deformation").is_null()) {
        DeformationSpec d;
        const auto &dj = j.at("deformation");
        if (dj.contains("control_points")) {
            d.control_points = dj.at("control_points").get<std::size_t>();
        }
        if (dj.contains("max_displacement_mm")) {
            d.max_displacement_mm = dj.at("max_displacement_mm").get<double>();
        }
        s.deformation = d;
    }
    if (j.contains("sweep")) {
        const auto &w = j.at("sweep");
        auto gw = [&w](const char *key, auto &dst) {
            if (w.contains(key) && !w.at(key).is_null()) {
                dst = w.at(key).get<std::remove_reference_t<decltype(dst)>>();
            }
        };
        gw("frames", s.sweep.frames);
        gw("frame_dims", s.sweep.frame_dims);
        gw("pixel_spacing_mm", s.sweep.pixel_spacing_mm);
        gw("step_mm", s.sweep.step_mm);
        gw("max_tilt_deg", s.sweep.max_tilt_deg);
        gw("max_inplane_deg", s.sweep.max_inplane_deg);
        gw("max_offset_mm", s.sweep.max_offset_mm);
        gw("drift_deg_per_frame", s.sweep.drift_deg_per_frame);
        gw("intercostal_probability", s.sweep.intercostal_probability);
        gw("fan_mask", s.sweep.fan_mask);
        gw("identity_registration", s.sweep.identity_registration);
        gw("max_registration_translation_mm", s.sweep.max_registration_translation_mm);
        if (w.contains("force_class") && !w.at("force_class").is_null()) {
            s.sweep.force_class = sweep_class_from_string(w.at("force_class").get<std::string>());
        }
    }
    s.validate();
    return s;
}

// Smooth displacement field (mm) from a uniform cubic B-spline over a control
// grid spanning the volume. B-spline weights are a partition of unity, so the
// field magnitude never exceeds the largest control displacement.
struct DeformationField {
    std::array<std::size_t, 3> control_dims{0, 0, 0}; // (x, y, z)
    Vec3 control_spacing_mm = Vec3::Ones();
    Tensor displacements; // cz x cy x cx x 3, in mm

    Vec3 displacement(const Vec3 &q) const {
        auto basis = [](double t) {
            const double t2 = t * t, t3 = t2 * t;
            return std::array<double, 4>{(1 - t) * (1 - t) * (1 - t) / 6.0, (3 * t3 - 6 * t2 + 4) / 6.0,
                                         (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0, t3 / 6.0};
        };
        std::array<long, 3> base{};
        std::array<std::array<double, 4>, 3> w{};
        for (int a = 0; a < 3; ++a) {
            const double u = q[a] / control_spacing_mm[a];
            const double f = std::floor(u);
            base[static_cast<std::size_t>(a)] = static_cast<long>(f);
            w[static_cast<std::size_t>(a)] = basis(u - f);
        }
        auto clampi = [](long i, std::size_t n) {
            return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
        };
        Vec3 d = Vec3::Zero();
        const auto [cx, cy, cz] = control_dims;
        for (int k = 0; k < 4; ++k) {
            const std::size_t z = clampi(base[2] + k - 1, cz);
            for (int j = 0; j < 4; ++j) {
                const std::size_t y = clampi(base[1] + j - 1, cy);
                const double wzy = w[2][static_cast<std::size_t>(k)] * w[1][static_cast<std::size_t>(j)];
                for (int i = 0; i < 4; ++i) {
                    const std::size_t x = clampi(base[0] + i - 1, cx);
                    const double wt = wzy * w[0][static_cast<std::size_t>(i)];
                    const std::size_t o = ((z * cy + y) * cx + x) * 3;
                    d += wt * Vec3(displacements[o], displacements[o + 1], displacements[o + 2]);
                }
            }
        }
        return d;
    }

    Vec3 apply(const Vec3 &q) const { return q + displacement(q); }
};

struct UsFrame {
    ScalarImage image;
    FrameGeometry geometry;
};

struct PhantomSample {
    std::string id;
    std::uint64_t seed = 0;
    SweepClass sweep_class = SweepClass::transversal;
    ScalarImage mr_volume;
    std::vector<UsFrame> sweep;
    RigidPose gt_registration; // tracking space -> MR space
    std::optional<DeformationField> gt_deformation;

    Vec3 to_mr(const Vec3 &tracking_point) const {
        const Vec3 q = gt_registration.apply(tracking_point);
        return gt_deformation ? gt_deformation->apply(q) : q;
    }
};

// Trilinear (3D) sample at voxel coordinates; zero outside [0, n - 1].
inline double sample_trilinear(const ScalarImage &vol, double x, double y, double z) {
    const double nx = static_cast<double>(vol.extent(0)), ny = static_cast<double>(vol.extent(1)),
                 nz = static_cast<double>(vol.extent(2));
    if (!(x >= 0.0 && y >= 0.0 && z >= 0.0 && x <= nx - 1 && y <= ny - 1 && z <= nz - 1)) {
        return 0.0;
    }
    const auto x0 = static_cast<std::size_t>(std::min(std::floor(x), nx - 2));
    const auto y0 = static_cast<std::size_t>(std::min(std::floor(y), ny - 2));
    const auto z0 = static_cast<std::size_t>(std::min(std::floor(z), nz - 2));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0), fz = z - static_cast<double>(z0);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                if (w != 0.0) {
                    acc += w * vol.at(x0 + static_cast<std::size_t>(dx), y0 + static_cast<std::size_t>(dy),
                                      z0 + static_cast<std::size_t>(dz));
                }
            }
        }
    }
    return acc;
}

inline double sample_bilinear(const ScalarImage &img, double x, double y) {
    const double nx = static_cast<double>(img.extent(0)), ny = static_cast<double>(img.extent(1));
    if (!(x >= 0.0 && y >= 0.0 && x <= nx - 1 && y <= ny - 1)) {
        return 0.0;
    }
    const auto x0 = static_cast<std::size_t>(std::min(std::floor(x), std::max(nx - 2, 0.0)));
    const auto y0 = static_cast<std::size_t>(std::min(std::floor(y), std::max(ny - 2, 0.0)));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    const std::size_t x1 = std::min(x0 + 1, img.extent(0) - 1), y1 = std::min(y0 + 1, img.extent(1) - 1);
    return (1 - fx) * (1 - fy) * img.at(x0, y0) + fx * (1 - fy) * img.at(x1, y0) + (1 - fx) * fy * img.at(x0, y1) +
           fx * fy * img.at(x1, y1);
}

// Value of `vol` at a physical point (mm).
inline double sample_physical(const ScalarImage &vol, const Vec3 &p) {
    return sample_trilinear(vol, p.x() / vol.spacing_mm[0], p.y() / vol.spacing_mm[1], p.z() / vol.spacing_mm[2]);
}

// Frame pose in MR space: pixel (u, v) -> frame_to_mr * (u * s, v * s, 0).
struct SweepPlan {
    SweepClass sweep_class = SweepClass::transversal;
    std::vector<RigidPose> frame_to_mr;
};

namespace detail {

inline double uniform(std::mt19937_64 &rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Vec3 random_unit(std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec3 v;
    do {
        v = Vec3(n(rng), n(rng), n(rng));
    } while (v.norm() < 1e-9);
    return v.normalized();
}

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

inline double segment_distance(const Vec3 &p, const Vec3 &a, const Vec3 &b) {
    const Vec3 ab = b - a;
    const double t = std::clamp((p - a).dot(ab) / std::max(ab.squaredNorm(), 1e-12), 0.0, 1.0);
    return (p - (a + t * ab)).norm();
}

struct Ellipsoid {
    Vec3 center;
    Vec3 semi_axes;
    Mat3 rotation; // columns are the ellipsoid axes
    double value;
};

struct Tube {
    std::vector<Vec3> polyline;
    double radius;
    double value;
    Vec3 lo, hi; // bounding box including radius and soft edge
};

// Latent anatomy in [0, 1] sampled at every voxel (mm coordinates).
inline ScalarImage render_latent(const PhantomSpec &spec, std::mt19937_64 &rng) {
    const auto [nx, ny, nz] = spec.volume_dims;
    const double s = spec.spacing_mm;
    const Vec3 extent(static_cast<double>(nx - 1) * s, static_cast<double>(ny - 1) * s, static_cast<double>(nz - 1) * s);
    auto random_point = [&](double margin) {
        return Vec3(uniform(rng, margin, extent.x() - margin), uniform(rng, margin, extent.y() - margin),
                    uniform(rng, margin, extent.z() - margin));
    };

    struct Bump {
        Vec3 c;
        double amp, sigma;
    };
    std::vector<Bump> bumps(6);
    for (auto &b : bumps) {
        b = {random_point(0.0), uniform(rng, -0.12, 0.12), uniform(rng, 10.0, 25.0)};
    }
    std::vector<Ellipsoid> ellipsoids(spec.n_ellipsoids);
    for (auto &e : ellipsoids) {
        e.center = random_point(4.0);
        e.semi_axes = Vec3(uniform(rng, 4.0, 16.0), uniform(rng, 4.0, 16.0), uniform(rng, 4.0, 16.0));
        e.rotation = Eigen::AngleAxisd(uniform(rng, 0.0, std::numbers::pi), random_unit(rng)).toRotationMatrix();
        e.value = uniform(rng, 0.05, 0.95);
    }
    std::vector<Tube> tubes(spec.n_tubes);
    for (auto &t : tubes) {
        const Vec3 a = random_point(0.0), c = random_point(0.0), b = random_point(0.0);
        t.radius = uniform(rng, 2.0, 5.0);
        t.value = uniform(rng, 0.0, 1.0);
        for (int k = 0; k <= 24; ++k) {
            const double u = k / 24.0;
            t.polyline.push_back((1 - u) * (1 - u) * a + 2 * u * (1 - u) * c + u * u * b);
        }
        t.lo = t.hi = t.polyline.front();
        for (const auto &p : t.polyline) {
            t.lo = t.lo.cwiseMin(p);
            t.hi = t.hi.cwiseMax(p);
        }
        t.lo.array() -= t.radius + 6.0;
        t.hi.array() += t.radius + 6.0;
    }

    constexpr double edge_mm = 1.0;
    ScalarImage latent{Tensor({nz, ny, nx}), {s, s, s}};
    for (std::size_t z = 0; z < nz; ++z) {
        for (std::size_t y = 0; y < ny; ++y) {
            for (std::size_t x = 0; x < nx; ++x) {
                const Vec3 p(static_cast<double>(x) * s, static_cast<double>(y) * s, static_cast<double>(z) * s);
                double v = 0.35;
                for (const auto &b : bumps) {
                    v += b.amp * std::exp(-(p - b.c).squaredNorm() / (2 * b.sigma * b.sigma));
                }
                for (const auto &e : ellipsoids) {
                    const Vec3 local = e.rotation.transpose() * (p - e.center);
                    const double r = local.cwiseQuotient(e.semi_axes).norm();
                    const double signed_mm = (r - 1.0) * e.semi_axes.minCoeff();
                    if (signed_mm < 8.0 * edge_mm) {
                        const double m = sigmoid(-signed_mm / edge_mm);
                        v = v * (1 - m) + e.value * m;
                    }
                }
                for (const auto &t : tubes) {
                    if ((p.array() < t.lo.array()).any() || (p.array() > t.hi.array()).any()) {
                        continue;
                    }
                    double d = 1e300;
                    for (std::size_t k = 1; k < t.polyline.size(); ++k) {
                        d = std::min(d, segment_distance(p, t.polyline[k - 1], t.polyline[k]));
                    }
                    const double signed_mm = d - t.radius;
                    if (signed_mm < 8.0 * edge_mm) {
                        const double m = sigmoid(-signed_mm / edge_mm);
                        v = v * (1 - m) + t.value * m;
                    }
                }
                latent.pixels[(z * ny + y) * nx + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return latent;
}

inline ScalarImage apply_map(const ScalarImage &img, const IntensityMap &map) {
    ScalarImage out = img;
    for (auto &v : out.pixels.storage()) {
        v = static_cast<float>(map(v));
    }
    return out;
}

inline DeformationField random_deformation(const PhantomSpec &spec, std::mt19937_64 &rng) {
    const auto &d = *spec.deformation;
    DeformationField f;
    f.control_dims = {d.control_points, d.control_points, d.control_points};
    for (int a = 0; a < 3; ++a) {
        f.control_spacing_mm[a] = static_cast<double>(spec.volume_dims[static_cast<std::size_t>(a)] - 1) *
                                  spec.spacing_mm / static_cast<double>(d.control_points - 1);
    }
    const std::size_t n = d.control_points * d.control_points * d.control_points;
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Vec3> raw(n);
    double max_norm = 0.0;
    for (auto &v : raw) {
        v = Vec3(g(rng), g(rng), g(rng));
        max_norm = std::max(max_norm, v.norm());
    }
    f.displacements = Tensor({d.control_points, d.control_points, d.control_points, 3});
    const double scale = max_norm > 0.0 ? d.max_displacement_mm / max_norm : 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        for (int a = 0; a < 3; ++a) {
            // Rounded down in magnitude so the float field respects the bound.
            const double v = raw[k][a] * scale;
            f.displacements[k * 3 + static_cast<std::size_t>(a)] =
                std::nextafter(static_cast<float>(v), 0.0f);
        }
    }
    return f;
}

inline RigidPose random_registration(const SweepSpec &sweep, std::mt19937_64 &rng) {
    const Vec3 axis = random_unit(rng);
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double t = sweep.max_registration_translation_mm;
    const Vec3 trans(uniform(rng, -t, t), uniform(rng, -t, t), uniform(rng, -t, t));
    if (sweep.identity_registration) {
        return RigidPose::identity();
    }
    return RigidPose::from_axis_angle(axis, angle, trans);
}

// Fan of a convex-array probe: apex above the top edge, sector opening
// downwards. Intercostal sweeps get a narrow window.
inline bool inside_fan(SweepClass c, double u, double v, std::size_t w, std::size_t h) {
    const double half_angle = (c == SweepClass::transversal ? 38.0 : 24.0) * std::numbers::pi / 180.0;
    const double apex_v = c == SweepClass::transversal ? -0.2 * static_cast<double>(h) : -0.1 * static_cast<double>(h);
    const double du = u - 0.5 * static_cast<double>(w - 1);
    const double dv = v - apex_v;
    if (dv <= 0.0) {
        return false;
    }
    return std::atan2(std::abs(du), dv) <= half_angle;
}

} // namespace detail

inline SweepPlan plan_sweep(const PhantomSpec &spec, std::mt19937_64 &rng) {
    using detail::uniform;
    const auto &w = spec.sweep;
    SweepPlan plan;
    const bool intercostal = uniform(rng, 0.0, 1.0) < w.intercostal_probability;
    plan.sweep_class = w.force_class ? *w.force_class : (intercostal ? SweepClass::intercostal : SweepClass::transversal);

    constexpr double deg = std::numbers::pi / 180.0;
    // Frame axes (u, v, normal) in MR space before perturbation.
    Mat3 base = Mat3::Identity();
    if (plan.sweep_class == SweepClass::intercostal) {
        base.col(0) = Vec3::UnitX();
        base.col(1) = Vec3::UnitZ();
        base.col(2) = -Vec3::UnitY();
    }
    const Mat3 tilt = (Eigen::AngleAxisd(uniform(rng, -w.max_tilt_deg, w.max_tilt_deg) * deg, Vec3::UnitX()) *
                       Eigen::AngleAxisd(uniform(rng, -w.max_tilt_deg, w.max_tilt_deg) * deg, Vec3::UnitY()))
                          .toRotationMatrix();
    const Mat3 inplane =
        Eigen::AngleAxisd(uniform(rng, -w.max_inplane_deg, w.max_inplane_deg) * deg, Vec3::UnitZ()).toRotationMatrix();
    const Mat3 r0 = base * tilt * inplane;
    const Vec3 drift_axis = detail::random_unit(rng);

    Vec3 center;
    for (int a = 0; a < 3; ++a) {
        center[a] = 0.5 * static_cast<double>(spec.volume_dims[static_cast<std::size_t>(a)] - 1) * spec.spacing_mm;
    }
    center += Vec3(uniform(rng, -w.max_offset_mm, w.max_offset_mm), uniform(rng, -w.max_offset_mm, w.max_offset_mm),
                   uniform(rng, -w.max_offset_mm, w.max_offset_mm));
    const Vec3 frame_center(0.5 * static_cast<double>(w.frame_dims[0] - 1) * w.pixel_spacing_mm,
                            0.5 * static_cast<double>(w.frame_dims[1] - 1) * w.pixel_spacing_mm, 0.0);
    const Vec3 normal = r0.col(2);
    for (std::size_t k = 0; k < w.frames; ++k) {
        const double s = (static_cast<double>(k) - 0.5 * static_cast<double>(w.frames - 1)) * w.step_mm;
        const double drift = (static_cast<double>(k) - 0.5 * static_cast<double>(w.frames - 1)) * w.drift_deg_per_frame;
        const Mat3 rk = Eigen::AngleAxisd(drift * deg, drift_axis).toRotationMatrix() * r0;
        const Vec3 ck = center + s * normal;
        plan.frame_to_mr.push_back({rk, ck - rk * frame_center});
    }
    return plan;
}

// Renders one frame through `to_mr` (tracking -> MR incl. deformation).
template <typename ToMr>
ScalarImage render_frame(const ScalarImage &us_volume, const SweepSpec &sweep, SweepClass cls,
                         const FrameGeometry &geom, ToMr &&to_mr) {
    const auto [w, h] = sweep.frame_dims;
    ScalarImage frame{Tensor({h, w}), {sweep.pixel_spacing_mm, sweep.pixel_spacing_mm}};
    for (std::size_t v = 0; v < h; ++v) {
        for (std::size_t u = 0; u < w; ++u) {
            if (sweep.fan_mask &&
                !detail::inside_fan(cls, static_cast<double>(u), static_cast<double>(v), w, h)) {
                continue;
            }
            const Vec3 q = to_mr(geom.lift_pixel(static_cast<double>(u), static_cast<double>(v)));
            frame.pixels[v * w + u] = static_cast<float>(sample_physical(us_volume, q));
        }
    }
    return frame;
}

inline void add_speckle(ScalarImage &frame, const PhantomSpec &spec, std::mt19937_64 &rng) {
    if (spec.speckle_strength == 0.0 && spec.us_noise_sigma == 0.0) {
        return;
    }
    const std::size_t w = frame.extent(0), h = frame.extent(1);
    const double g = spec.speckle_grain_px;
    const auto gw = static_cast<std::size_t>(std::ceil(static_cast<double>(w - 1) / g)) + 2;
    const auto gh = static_cast<std::size_t>(std::ceil(static_cast<double>(h - 1) / g)) + 2;
    std::normal_distribution<double> n(0.0, 1.0);
    ScalarImage coarse{Tensor({gh, gw}), {1.0, 1.0}};
    for (auto &v : coarse.pixels.storage()) {
        v = static_cast<float>(n(rng));
    }
    std::normal_distribution<double> additive(0.0, spec.us_noise_sigma > 0.0 ? spec.us_noise_sigma : 1.0);
    for (std::size_t v = 0; v < h; ++v) {
        for (std::size_t u = 0; u < w; ++u) {
            float &px = frame.pixels[v * w + u];
            const double mult = std::max(0.0, 1.0 + spec.speckle_strength *
                                                        sample_bilinear(coarse, static_cast<double>(u) / g,
                                                                        static_cast<double>(v) / g));
            double val = px * mult;
            if (spec.us_noise_sigma > 0.0) {
                val += additive(rng);
            }
            px = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
    }
}

// Re-applies the fan mask (noise is added everywhere first).
inline void apply_fan(ScalarImage &frame, SweepClass cls) {
    const std::size_t w = frame.extent(0), h = frame.extent(1);
    for (std::size_t v = 0; v < h; ++v) {
        for (std::size_t u = 0; u < w; ++u) {
            if (!detail::inside_fan(cls, static_cast<double>(u), static_cast<double>(v), w, h)) {
                frame.pixels[v * w + u] = 0.0f;
            }
        }
    }
}

inline PhantomSample generate_phantom(const PhantomSpec &spec, std::string id = "case") {
    spec.validate();
    auto rng_anatomy = stream_rng(spec.seed, 0);
    auto rng_sweep = stream_rng(spec.seed, 1);
    auto rng_deform = stream_rng(spec.seed, 2);
    auto rng_noise = stream_rng(spec.seed, 3);

    PhantomSample out;
    out.id = std::move(id);
    out.seed = spec.seed;
    const ScalarImage latent = detail::render_latent(spec, rng_anatomy);
    out.mr_volume = detail::apply_map(latent, spec.mr_intensity_map);
    const ScalarImage us_volume = detail::apply_map(latent, spec.us_intensity_map);

    const SweepPlan plan = plan_sweep(spec, rng_sweep);
    out.sweep_class = plan.sweep_class;
    out.gt_registration = detail::random_registration(spec.sweep, rng_sweep);
    if (spec.deformation) {
        out.gt_deformation = detail::random_deformation(spec, rng_deform);
    }
    const RigidPose mr_to_tracking = out.gt_registration.inverse();
    for (std::size_t k = 0; k < plan.frame_to_mr.size(); ++k) {
        UsFrame f;
        f.geometry.pixel_spacing_mm = {spec.sweep.pixel_spacing_mm, spec.sweep.pixel_spacing_mm};
        f.geometry.frame_to_world = mr_to_tracking * plan.frame_to_mr[k];
        f.geometry.frame_index = k;
        f.image = render_frame(us_volume, spec.sweep, plan.sweep_class, f.geometry,
                               [&out](const Vec3 &p) { return out.to_mr(p); });
        add_speckle(f.image, spec, rng_noise);
        if (spec.sweep.fan_mask) {
            apply_fan(f.image, plan.sweep_class);
        }
        out.sweep.push_back(std::move(f));
    }
    return out;
}

// Bilinear / trilinear resampling to a new spacing; the sample grid starts at
// the origin and keeps the physical extent within one output voxel.
inline ScalarImage resample_uniform(const ScalarImage &image, const std::vector<double> &target_spacing_mm) {
    image.validate();
    if (target_spacing_mm.size() != image.rank()) {
        throw std::invalid_argument("resample_uniform: one target spacing per axis required");
    }
    for (double s : target_spacing_mm) {
        if (!(s > 0.0)) {
            throw std::invalid_argument("resample_uniform: spacing must be positive");
        }
    }
    if (target_spacing_mm == image.spacing_mm) {
        return image;
    }
    const std::size_t r = image.rank();
    std::vector<std::size_t> n(r);
    std::vector<double> ratio(r);
    for (std::size_t a = 0; a < r; ++a) {
        const double extent = static_cast<double>(image.extent(a) - 1) * image.spacing_mm[a];
        n[a] = static_cast<std::size_t>(std::floor(extent / target_spacing_mm[a] + 1e-9)) + 1;
        ratio[a] = target_spacing_mm[a] / image.spacing_mm[a];
    }
    ScalarImage out;
    out.spacing_mm = target_spacing_mm;
    if (r == 2) {
        out.pixels = Tensor({n[1], n[0]});
        for (std::size_t y = 0; y < n[1]; ++y) {
            for (std::size_t x = 0; x < n[0]; ++x) {
                out.pixels[y * n[0] + x] = static_cast<float>(
                    sample_bilinear(image, std::min(static_cast<double>(x) * ratio[0], static_cast<double>(image.extent(0) - 1)),
                                    std::min(static_cast<double>(y) * ratio[1], static_cast<double>(image.extent(1) - 1))));
            }
        }
        return out;
    }
    out.pixels = Tensor({n[2], n[1], n[0]});
    for (std::size_t z = 0; z < n[2]; ++z) {
        for (std::size_t y = 0; y < n[1]; ++y) {
            for (std::size_t x = 0; x < n[0]; ++x) {
                out.pixels[(z * n[1] + y) * n[0] + x] = static_cast<float>(sample_trilinear(
                    image, std::min(static_cast<double>(x) * ratio[0], static_cast<double>(image.extent(0) - 1)),
                    std::min(static_cast<double>(y) * ratio[1], static_cast<double>(image.extent(1) - 1)),
                    std::min(static_cast<double>(z) * ratio[2], static_cast<double>(image.extent(2) - 1))));
            }
        }
    }
    return out;
}

inline ScalarImage augment_gaussian_noise(const ScalarImage &image, double sigma, std::mt19937_64 &rng) {
    if (sigma < 0.0) {
        throw std::invalid_argument("noise sigma must be non-negative");
    }
    if (sigma == 0.0) {
        return image;
    }
    ScalarImage out = image;
    std::normal_distribution<double> n(0.0, sigma);
    for (auto &v : out.pixels.storage()) {
        v = static_cast<float>(std::clamp(static_cast<double>(v) + n(rng), 0.0, 1.0));
    }
    return out;
}

struct CropResult {
    ScalarImage image;
    std::vector<std::size_t> offset; // physical axis order (x, y[, z]), pixels
};

// Axis-aligned crop keeping >= min_keep_fraction of every extent, zero-padded
// at the high end back to a multiple of 8.
inline CropResult augment_random_crop(const ScalarImage &image, std::mt19937_64 &rng, double min_keep_fraction) {
    image.validate();
    if (!(min_keep_fraction > 0.0 && min_keep_fraction <= 1.0)) {
        throw std::invalid_argument("min_keep_fraction must lie in (0, 1]");
    }
    const std::size_t r = image.rank();
    std::vector<std::size_t> keep(r), offset(r), padded(r);
    for (std::size_t a = 0; a < r; ++a) {
        const std::size_t n = image.extent(a);
        const auto lo = static_cast<std::size_t>(std::ceil(min_keep_fraction * static_cast<double>(n) - 1e-9));
        keep[a] = std::uniform_int_distribution<std::size_t>(std::min(lo, n), n)(rng);
        offset[a] = std::uniform_int_distribution<std::size_t>(0, n - keep[a])(rng);
        padded[a] = (keep[a] + descriptor_stride - 1) / descriptor_stride * descriptor_stride;
    }
    CropResult out;
    out.offset = offset;
    out.image.spacing_mm = image.spacing_mm;
    if (r == 2) {
        out.image.pixels = Tensor({padded[1], padded[0]}, 0.0f);
        for (std::size_t y = 0; y < keep[1]; ++y) {
            for (std::size_t x = 0; x < keep[0]; ++x) {
                out.image.pixels[y * padded[0] + x] = image.at(x + offset[0], y + offset[1]);
            }
        }
    } else {
        out.image.pixels = Tensor({padded[2], padded[1], padded[0]}, 0.0f);
        for (std::size_t z = 0; z < keep[2]; ++z) {
            for (std::size_t y = 0; y < keep[1]; ++y) {
                for (std::size_t x = 0; x < keep[0]; ++x) {
                    out.image.pixels[(z * padded[1] + y) * padded[0] + x] =
                        image.at(x + offset[0], y + offset[1], z + offset[2]);
                }
            }
        }
    }
    return out;
}

// Geometry of a frame after cropping at `offset` pixels.
inline FrameGeometry shift_frame_geometry(const FrameGeometry &f, const std::vector<std::size_t> &offset) {
    FrameGeometry out = f;
    out.frame_to_world =
        f.frame_to_world * RigidPose::from_translation(Vec3(static_cast<double>(offset.at(0)) * f.pixel_spacing_mm.x(),
                                                            static_cast<double>(offset.at(1)) * f.pixel_spacing_mm.y(), 0.0));
    return out;
}

struct ConvexPolygonMask {
    std::vector<Eigen::Vector2d> vertices; // counter-clockwise in (x, y) pixel coordinates

    static double cross(const Eigen::Vector2d &a, const Eigen::Vector2d &b, const Eigen::Vector2d &p) {
        return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
    }

    // Inside or on the boundary.
    bool contains(double x, double y) const {
        const Eigen::Vector2d p(x, y);
        for (std::size_t k = 0; k < vertices.size(); ++k) {
            if (cross(vertices[k], vertices[(k + 1) % vertices.size()], p) < 0.0) {
                return false;
            }
        }
        return true;
    }

    bool is_convex() const {
        const std::size_t n = vertices.size();
        if (n < 3) {
            return false;
        }
        for (std::size_t k = 0; k < n; ++k) {
            if (cross(vertices[k], vertices[(k + 1) % n], vertices[(k + 2) % n]) < 0.0) {
                return false;
            }
        }
        return true;
    }
};

// Andrew's monotone chain; collinear points are dropped.
inline std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
    std::sort(pts.begin(), pts.end(), [](const auto &a, const auto &b) {
        return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    if (pts.size() < 3) {
        return pts;
    }
    std::vector<Eigen::Vector2d> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto &p : pts) {
        while (k >= 2 && ConvexPolygonMask::cross(hull[k - 2], hull[k - 1], p) <= 0.0) {
            --k;
        }
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && ConvexPolygonMask::cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) {
            --k;
        }
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline ScalarImage apply_polygon_mask(const ScalarImage &frame, const ConvexPolygonMask &mask) {
    ScalarImage out = frame;
    const std::size_t w = frame.extent(0), h = frame.extent(1);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!mask.contains(static_cast<double>(x), static_cast<double>(y))) {
                out.pixels[y * w + x] = 0.0f;
            }
        }
    }
    return out;
}

inline ConvexPolygonMask random_convex_polygon(std::size_t width, std::size_t height, std::mt19937_64 &rng) {
    using detail::uniform;
    const double w = static_cast<double>(width), h = static_cast<double>(height);
    for (;;) {
        const auto n = std::uniform_int_distribution<int>(5, 10)(rng);
        const double cx = 0.5 * (w - 1) + uniform(rng, -0.1, 0.1) * w;
        const double cy = 0.5 * (h - 1) + uniform(rng, -0.1, 0.1) * h;
        const double ax = 0.5 * w * uniform(rng, 0.6, 1.0);
        const double ay = 0.5 * h * uniform(rng, 0.6, 1.0);
        const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
        std::vector<Eigen::Vector2d> pts;
        for (int k = 0; k < n; ++k) {
            const double t = phase + 2 * std::numbers::pi * (k + uniform(rng, -0.3, 0.3)) / n;
            const double r = uniform(rng, 0.85, 1.15);
            pts.emplace_back(cx + r * ax * std::cos(t), cy + r * ay * std::sin(t));
        }
        auto hull = convex_hull(pts);
        if (hull.size() >= 5) {
            return {std::move(hull)};
        }
    }
}

struct PolyCropResult {
    ScalarImage image;
    ConvexPolygonMask mask;
};

inline PolyCropResult polycrop(const ScalarImage &frame, std::mt19937_64 &rng) {
    frame.validate();
    if (frame.rank() != 2 || frame.extent(0) < 16 || frame.extent(1) < 16) {
        throw std::invalid_argument("polycrop needs a 2D frame of at least 16 x 16 pixels");
    }
    auto mask = random_convex_polygon(frame.extent(0), frame.extent(1), rng);
    return {apply_polygon_mask(frame, mask), std::move(mask)};
}

// One correspondence per US cell of a frame with the given geometry.
inline std::vector<GroundTruthCorrespondence> derive_ground_truth(const PhantomSample &sample,
                                                                  const FrameGeometry &frame,
                                                                  const GridLayout &us_grid,
                                                                  const GridLayout &mr_grid) {
    std::vector<GroundTruthCorrespondence> out(us_grid.cells());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto &c = out[i];
        c.us_cell = i;
        c.us_center_mm = lift_us_cell(i, us_grid, frame);
        c.mr_point_mm = sample.to_mr(c.us_center_mm);
        c.mr_cell = mr_cell_of(c.mr_point_mm, mr_grid);
    }
    return out;
}

inline std::vector<GroundTruthCorrespondence> derive_ground_truth(const PhantomSample &sample,
                                                                  std::size_t frame_index,
                                                                  const DescriptorGrid &us_grid,
                                                                  const DescriptorGrid &mr_grid) {
    return derive_ground_truth(sample, sample.sweep.at(frame_index).geometry, layout_of(us_grid), layout_of(mr_grid));
}

// Grid layout a descriptor network produces for an image.
inline GridLayout grid_layout_for(const ScalarImage &image) {
    return {grid_extents_for(image.extents_xyz()), image.spacing_mm, descriptor_stride};
}

// Draws indices so that a designated minority class makes up
// `minority_fraction` of draws (when both classes are present).
class BalancedSampler {
  public:
    BalancedSampler(const std::vector<SweepClass> &classes, SweepClass minority, double minority_fraction)
        : fraction_(minority_fraction) {
        if (!(minority_fraction >= 0.0 && minority_fraction <= 1.0)) {
            throw std::invalid_argument("class-balance ratio must lie in [0, 1]");
        }
        if (classes.empty()) {
            throw std::invalid_argument("BalancedSampler needs at least one item");
        }
        for (std::size_t k = 0; k < classes.size(); ++k) {
            (classes[k] == minority ? minority_ : majority_).push_back(k);
        }
    }

    std::size_t draw(std::mt19937_64 &rng) const {
        const std::vector<std::size_t> *pool = nullptr;
        if (minority_.empty()) {
            pool = &majority_;
        } else if (majority_.empty()) {
            pool = &minority_;
        } else {
            pool = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < fraction_ ? &minority_ : &majority_;
        }
        return (*pool)[std::uniform_int_distribution<std::size_t>(0, pool->size() - 1)(rng)];
    }

  private:
    double fraction_;
    std::vector<std::size_t> minority_, majority_;
};

} // namespace kpreg
