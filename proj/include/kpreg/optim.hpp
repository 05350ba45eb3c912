// Adam with bias-corrected moments.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kpreg/log.hpp"
#include "kpreg/tensor.hpp"

namespace kpreg {

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T> struct AdamState {
    std::vector<BasicTensor<T>> first_moment;
    std::vector<BasicTensor<T>> second_moment;
    std::int64_t step = 0;
    std::int64_t skipped_steps = 0;

    static AdamState for_params(const std::vector<Var<T>> &params) {
        AdamState s;
        for (const auto &p : params) {
            s.first_moment.emplace_back(p.shape(), T(0));
            s.second_moment.emplace_back(p.shape(), T(0));
        }
        return s;
    }
};

// Updates params in place. Returns false (and leaves params untouched) when
// any gradient entry is non-finite.
template <typename T>
bool optimizer_step(std::vector<Var<T>> &params, const std::vector<BasicTensor<T>> &grads, AdamState<T> &state,
                    const AdamHyper &hyper) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
        state.second_moment.size() != params.size()) {
        throw ShapeError("optimizer state does not match parameter list");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (grads[k].shape() != params[k].shape() || state.first_moment[k].shape() != params[k].shape()) {
            throw ShapeError("optimizer state shape mismatch for parameter " + std::to_string(k));
        }
        if (!grads[k].all_finite()) {
            ++state.skipped_steps;
            log::warn("non-finite gradient in parameter " + std::to_string(k) + "; skipping optimizer step (" +
                      std::to_string(state.skipped_steps) + " skipped so far)");
            return false;
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto &p = params[k].mutable_value();
        auto &m = state.first_moment[k];
        auto &v = state.second_moment[k];
        const auto &g = grads[k];
        for (std::size_t e = 0; e < p.size(); ++e) {
            const double gd = static_cast<double>(g[e]);
            const double mn = hyper.beta1 * static_cast<double>(m[e]) + (1.0 - hyper.beta1) * gd;
            const double vn = hyper.beta2 * static_cast<double>(v[e]) + (1.0 - hyper.beta2) * gd * gd;
            m[e] = static_cast<T>(mn);
            v[e] = static_cast<T>(vn);
            const double update = hyper.learning_rate * (mn / c1) / (std::sqrt(vn / c2) + hyper.epsilon);
            p[e] = static_cast<T>(static_cast<double>(p[e]) - update);
        }
    }
    return true;
}

} // namespace kpreg
