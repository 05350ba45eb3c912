// Differentiable descriptor matching.
//
// The score matrix is augmented with one extra row and column (the sink),
// every entry of which holds the learned scalar alpha. Soft assignments are
// the product of a row-wise and a column-wise softmax over the augmented
// matrix. Training minimises the weighted negative log-likelihood of soft
// ground-truth matches that decay exponentially with grid distance from the
// true cell.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kpreg/featnet.hpp"
#include "kpreg/ops.hpp"
#include "kpreg/rigid_pose.hpp"
#include "kpreg/tensor.hpp"

namespace kpreg {

template <typename T> using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rows are cells, columns descriptor components.
template <typename T> Matrix<T> descriptor_matrix(const DescriptorGrid &g) {
    Matrix<T> m(static_cast<Eigen::Index>(g.cells()), static_cast<Eigen::Index>(g.descriptor_dim));
    for (std::size_t i = 0; i < g.cells(); ++i) {
        for (std::size_t c = 0; c < g.descriptor_dim; ++c) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                static_cast<T>(g.descriptors[i * g.descriptor_dim + c]);
        }
    }
    return m;
}

template <typename T> struct SimilarityMatrix {
    Matrix<T> values; // (|us| + 1) x (|mr| + 1)
    T alpha = T(0);

    std::size_t real_rows() const { return static_cast<std::size_t>(values.rows()) - 1; }
    std::size_t real_cols() const { return static_cast<std::size_t>(values.cols()) - 1; }
};

template <typename T> struct AssignmentMatrix {
    Matrix<T> values;
    // log(values), kept separately because values can underflow in float.
    Matrix<T> log_values;

    static AssignmentMatrix from_values(Matrix<T> a) {
        AssignmentMatrix out;
        out.log_values = a.array().log().matrix();
        out.values = std::move(a);
        return out;
    }

    std::size_t real_rows() const { return static_cast<std::size_t>(values.rows()) - 1; }
    std::size_t real_cols() const { return static_cast<std::size_t>(values.cols()) - 1; }
};

template <typename T> SimilarityMatrix<T> similarity(const Matrix<T> &f_us, const Matrix<T> &f_mr, T alpha) {
    if (f_us.cols() != f_mr.cols()) {
        throw ShapeError("similarity: descriptor_dim mismatch (" + std::to_string(f_us.cols()) + " vs " +
                         std::to_string(f_mr.cols()) + ")");
    }
    SimilarityMatrix<T> s;
    s.alpha = alpha;
    s.values.setConstant(f_us.rows() + 1, f_mr.rows() + 1, alpha);
    s.values.topLeftCorner(f_us.rows(), f_mr.rows()).noalias() = f_us * f_mr.transpose();
    return s;
}

inline SimilarityMatrix<float> similarity(const DescriptorGrid &us, const DescriptorGrid &mr, float alpha) {
    if (us.descriptor_dim != mr.descriptor_dim) {
        throw ShapeError("similarity: descriptor_dim mismatch (" + std::to_string(us.descriptor_dim) + " vs " +
                         std::to_string(mr.descriptor_dim) + ")");
    }
    return similarity<float>(descriptor_matrix<float>(us), descriptor_matrix<float>(mr), alpha);
}

namespace detail {

template <typename T> struct SoftmaxParts {
    Matrix<T> scaled;        // S / temperature
    Eigen::Matrix<T, Eigen::Dynamic, 1> row_lse;
    Eigen::Matrix<T, 1, Eigen::Dynamic> col_lse;
};

template <typename T> SoftmaxParts<T> softmax_parts(const Matrix<T> &s, T temperature) {
    if (!(temperature > T(0))) {
        throw std::invalid_argument("dual_softmax: temperature must be positive");
    }
    SoftmaxParts<T> p;
    p.scaled = s / temperature;
    const auto rows = p.scaled.rows(), cols = p.scaled.cols();
    p.row_lse.resize(rows);
    p.col_lse.resize(cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const T m = p.scaled.row(i).maxCoeff();
        p.row_lse(i) = m + std::log((p.scaled.row(i).array() - m).exp().sum());
    }
    for (Eigen::Index j = 0; j < cols; ++j) {
        const T m = p.scaled.col(j).maxCoeff();
        p.col_lse(j) = m + std::log((p.scaled.col(j).array() - m).exp().sum());
    }
    return p;
}

} // namespace detail

template <typename T> AssignmentMatrix<T> dual_softmax(const SimilarityMatrix<T> &s, T temperature = T(1)) {
    const auto p = detail::softmax_parts(s.values, temperature);
    AssignmentMatrix<T> a;
    a.log_values = (2 * p.scaled).array().colwise() - p.row_lse.array();
    a.log_values = a.log_values.array().rowwise() - p.col_lse.array();
    a.values = a.log_values.array().exp().matrix();
    return a;
}

enum class SinkPolicy { strict_eq4, sink_only_when_outside };

inline const char *to_string(SinkPolicy p) {
    return p == SinkPolicy::strict_eq4 ? "strict_eq4" : "sink_only_when_outside";
}

inline SinkPolicy sink_policy_from_string(const std::string &s) {
    if (s == "strict_eq4") {
        return SinkPolicy::strict_eq4;
    }
    if (s == "sink_only_when_outside") {
        return SinkPolicy::sink_only_when_outside;
    }
    throw std::invalid_argument("unknown sink policy '" + s + "'");
}

// One entry per ultrasound cell. mr_cell is empty when q_i leaves the MR grid.
struct GroundTruthCorrespondence {
    std::size_t us_cell = 0;
    Vec3 us_center_mm = Vec3::Zero();
    Vec3 mr_point_mm = Vec3::Zero();
    std::optional<std::size_t> mr_cell;
};

template <typename T> struct MatchWeights {
    T beta = T(1);
    Matrix<T> weights; // augmented (|us| + 1) x (|mr| + 1)
    T total = T(0);
};

// Integer grid coordinates (x, y, z) of flattened cell `flat` in a grid with
// physical-order extents `dims` (2D grids get z = 0).
inline std::array<long, 3> grid_coordinates(std::size_t flat, const std::vector<std::size_t> &dims) {
    std::array<long, 3> c{0, 0, 0};
    for (std::size_t a = 0; a < dims.size(); ++a) {
        c[a] = static_cast<long>(flat % dims[a]);
        flat /= dims[a];
    }
    return c;
}

template <typename T>
MatchWeights<T> ground_truth_weights(const std::vector<GroundTruthCorrespondence> &corrs,
                                     const std::vector<std::size_t> &mr_grid_dims, T beta,
                                     SinkPolicy policy = SinkPolicy::sink_only_when_outside) {
    if (corrs.empty()) {
        throw std::invalid_argument("ground_truth_weights: empty correspondence list");
    }
    if (!(beta > T(0))) {
        throw std::invalid_argument("ground_truth_weights: beta must be positive");
    }
    std::size_t n_mr = 1;
    for (auto d : mr_grid_dims) {
        n_mr *= d;
    }
    const std::size_t n_us = corrs.size();
    MatchWeights<T> w;
    w.beta = beta;
    w.weights.setZero(static_cast<Eigen::Index>(n_us + 1), static_cast<Eigen::Index>(n_mr + 1));

    std::vector<std::array<long, 3>> coords(n_mr);
    for (std::size_t j = 0; j < n_mr; ++j) {
        coords[j] = grid_coordinates(j, mr_grid_dims);
    }
    for (std::size_t k = 0; k < n_us; ++k) {
        const auto &c = corrs[k];
        if (c.us_cell != k) {
            throw std::invalid_argument("ground_truth_weights: correspondences must list US cells 0..n-1 in order");
        }
        const auto i = static_cast<Eigen::Index>(k);
        if (!c.mr_cell) {
            w.weights(i, static_cast<Eigen::Index>(n_mr)) = T(1);
            continue;
        }
        if (*c.mr_cell >= n_mr) {
            throw std::out_of_range("ground_truth_weights: MR cell index outside grid");
        }
        const auto &m = coords[*c.mr_cell];
        for (std::size_t j = 0; j < n_mr; ++j) {
            const double dx = static_cast<double>(coords[j][0] - m[0]);
            const double dy = static_cast<double>(coords[j][1] - m[1]);
            const double dz = static_cast<double>(coords[j][2] - m[2]);
            const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
            w.weights(i, static_cast<Eigen::Index>(j)) = static_cast<T>(std::exp(-static_cast<double>(beta) * dist));
        }
    }
    if (policy == SinkPolicy::strict_eq4) {
        w.weights.col(static_cast<Eigen::Index>(n_mr)).setOnes();
        w.weights.row(static_cast<Eigen::Index>(n_us)).setOnes();
    }
    w.total = w.weights.sum();
    return w;
}

template <typename T> T matching_loss(const AssignmentMatrix<T> &a, const MatchWeights<T> &w) {
    if (a.values.rows() != w.weights.rows() || a.values.cols() != w.weights.cols()) {
        throw ShapeError("matching_loss: assignment and weight shapes differ");
    }
    if (!(w.total > T(0))) {
        throw std::invalid_argument("matching_loss: weights sum to zero");
    }
    T acc = T(0);
    for (Eigen::Index i = 0; i < w.weights.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.weights.cols(); ++j) {
            const T wij = w.weights(i, j);
            if (wij != T(0)) {
                acc += wij * a.log_values(i, j);
            }
        }
    }
    return -acc / w.total;
}

template <typename T> struct MatchingLossGradient {
    T loss = T(0);
    Matrix<T> grad_us;
    Matrix<T> grad_mr;
    T grad_alpha = T(0);
};

// Loss and its gradient through similarity -> dual softmax -> NLL.
template <typename T>
MatchingLossGradient<T> matching_loss_with_gradient(const Matrix<T> &f_us, const Matrix<T> &f_mr, T alpha,
                                                    const MatchWeights<T> &w, T temperature = T(1)) {
    const auto s = similarity(f_us, f_mr, alpha);
    if (s.values.rows() != w.weights.rows() || s.values.cols() != w.weights.cols()) {
        throw ShapeError("matching loss: weights do not match descriptor grids");
    }
    if (!(w.total > T(0))) {
        throw std::invalid_argument("matching_loss: weights sum to zero");
    }
    const auto p = detail::softmax_parts(s.values, temperature);
    const Matrix<T> u = -w.weights / w.total;

    MatchingLossGradient<T> out;
    Matrix<T> log_a = (2 * p.scaled).array().colwise() - p.row_lse.array();
    log_a = log_a.array().rowwise() - p.col_lse.array();
    out.loss = (u.array() * log_a.array()).sum();

    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_u = u.rowwise().sum();
    const Eigen::Matrix<T, 1, Eigen::Dynamic> col_u = u.colwise().sum();
    Matrix<T> row_soft = (p.scaled.array().colwise() - p.row_lse.array()).exp();
    Matrix<T> col_soft = (p.scaled.array().rowwise() - p.col_lse.array()).exp();
    Matrix<T> d_s = 2 * u;
    d_s.array() -= row_soft.array().colwise() * row_u.array();
    d_s.array() -= col_soft.array().rowwise() * col_u.array();
    d_s /= temperature;

    const auto n = f_us.rows(), m = f_mr.rows();
    const auto real = d_s.topLeftCorner(n, m);
    out.grad_us = real * f_mr;
    out.grad_mr = real.transpose() * f_us;
    out.grad_alpha = d_s.col(m).sum() + d_s.row(n).head(m).sum();
    return out;
}

// Differentiable loss node over 1 x D x grid feature maps and a 1-element alpha.
template <typename T>
Var<T> matching_loss(const Var<T> &us_map, const Var<T> &mr_map, const Var<T> &alpha, const MatchWeights<T> &w,
                     T temperature = T(1)) {
    auto to_cells = [](const BasicTensor<T> &fmap) {
        const auto d = static_cast<Eigen::Index>(fmap.dim(1));
        const auto cells = static_cast<Eigen::Index>(fmap.size()) / d;
        return Matrix<T>(Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>(
            fmap.data(), cells, d));
    };
    const Matrix<T> f_us = to_cells(us_map.value());
    const Matrix<T> f_mr = to_cells(mr_map.value());
    auto g = std::make_shared<MatchingLossGradient<T>>(
        matching_loss_with_gradient(f_us, f_mr, alpha.value()[0], w, temperature));
    auto un = us_map.node();
    auto mn = mr_map.node();
    auto an = alpha.node();
    BasicTensor<T> value({1}, {g->loss});
    return Var<T>::make_result(std::move(value), {us_map, mr_map, alpha}, [un, mn, an, g](detail::Node<T> &self) {
        const T scale = self.grad[0];
        auto scatter = [scale](detail::Node<T> &node, const Matrix<T> &grad) {
            if (!node.requires_grad) {
                return;
            }
            auto &dst = node.ensure_grad();
            const auto cells = grad.rows(), d = grad.cols();
            for (Eigen::Index c = 0; c < d; ++c) {
                for (Eigen::Index i = 0; i < cells; ++i) {
                    dst[static_cast<std::size_t>(c * cells + i)] += scale * grad(i, c);
                }
            }
        };
        scatter(*un, g->grad_us);
        scatter(*mn, g->grad_mr);
        if (an->requires_grad) {
            an->ensure_grad()[0] += scale * g->grad_alpha;
        }
    });
}

struct Match {
    std::size_t us_cell = 0;
    std::size_t mr_cell = 0;
    double confidence = 0.0;

    friend bool operator==(const Match &, const Match &) = default;
};

struct MatchSet {
    std::vector<Match> entries;
    double threshold = 0.2;
    bool mutual = true;
};

// Real-cell entries with confidence >= threshold, sorted by descending
// confidence (ties: lower us_cell, then lower mr_cell). With require_mutual,
// (i, j) must be the row-i and column-j argmax among real cells, ties to the
// lowest index.
template <typename T> MatchSet extract_matches(const AssignmentMatrix<T> &a, double threshold, bool require_mutual) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw std::invalid_argument("extract_matches: threshold must lie in (0, 1)");
    }
    const auto n = static_cast<Eigen::Index>(a.real_rows());
    const auto m = static_cast<Eigen::Index>(a.real_cols());
    MatchSet out;
    out.threshold = threshold;
    out.mutual = require_mutual;
    std::vector<Eigen::Index> row_best(static_cast<std::size_t>(n), 0), col_best(static_cast<std::size_t>(m), 0);
    if (require_mutual) {
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 1; j < m; ++j) {
                if (a.values(i, j) > a.values(i, row_best[static_cast<std::size_t>(i)])) {
                    row_best[static_cast<std::size_t>(i)] = j;
                }
            }
        }
        for (Eigen::Index j = 0; j < m; ++j) {
            for (Eigen::Index i = 1; i < n; ++i) {
                if (a.values(i, j) > a.values(col_best[static_cast<std::size_t>(j)], j)) {
                    col_best[static_cast<std::size_t>(j)] = i;
                }
            }
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) {
            const double c = static_cast<double>(a.values(i, j));
            if (c < threshold) {
                continue;
            }
            if (require_mutual &&
                (row_best[static_cast<std::size_t>(i)] != j || col_best[static_cast<std::size_t>(j)] != i)) {
                continue;
            }
            out.entries.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), c});
        }
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const Match &x, const Match &y) { return x.confidence > y.confidence; });
    return out;
}

// One JSON object per line: {"i":..,"j":..,"confidence":..}
inline void write_match_lines(std::ostream &os, const MatchSet &ms) {
    for (const auto &e : ms.entries) {
        os << nlohmann::json{{"i", e.us_cell}, {"j", e.mr_cell}, {"confidence", e.confidence}}.dump() << '\n';
    }
}

} // namespace kpreg
