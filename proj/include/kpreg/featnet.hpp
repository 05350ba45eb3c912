// Convolutional feature extractors producing descriptor grids at 1/8 of the
// input resolution.
//
// Layout: three stride-2 residual stages, then one decoder residual stage at
// 1/8 resolution fed by the last stage plus a pooled skip from the 1/4 stage,
// then a 1x1 head to the descriptor dimension. The same topology serves the
// 2D (ultrasound frame) and 3D (MR volume) networks.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kpreg/image.hpp"
#include "kpreg/ops.hpp"
#include "kpreg/rigid_pose.hpp"
#include "kpreg/tensor.hpp"

namespace kpreg {

inline constexpr std::size_t descriptor_stride = 8;

enum class NetworkVariant { standard, small };

inline const char *to_string(NetworkVariant v) { return v == NetworkVariant::standard ? "standard" : "small"; }

inline NetworkVariant variant_from_string(const std::string &s) {
    if (s == "standard") {
        return NetworkVariant::standard;
    }
    if (s == "small") {
        return NetworkVariant::small;
    }
    throw std::invalid_argument("unknown network variant '" + s + "' (expected standard|small)");
}

struct NetworkConfig {
    NetworkVariant variant = NetworkVariant::standard;
    std::size_t input_channels = 1;
    std::size_t descriptor_dim = 32;
    // Three stride-2 encoder stages followed by the decoder stage.
    std::vector<std::size_t> stage_channels{16, 32, 64, 64};
    double leaky_slope = 0.01;
    double norm_epsilon = 1e-5;

    static NetworkConfig for_variant(NetworkVariant v) {
        NetworkConfig c;
        c.variant = v;
        if (v == NetworkVariant::small) {
            c.stage_channels = {8, 16, 32, 32};
        }
        return c;
    }

    void validate() const {
        if (stage_channels.size() != 4) {
            throw std::invalid_argument("stage_channels must list 3 stride-2 stages plus the decoder stage");
        }
        if (descriptor_dim < 1 || input_channels < 1) {
            throw std::invalid_argument("descriptor_dim and input_channels must be >= 1");
        }
        for (auto c : stage_channels) {
            if (c == 0) {
                throw std::invalid_argument("stage channel counts must be positive");
            }
        }
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) {
            throw std::invalid_argument("leaky_slope must lie in (0, 1)");
        }
        if (!(norm_epsilon > 0.0)) {
            throw std::invalid_argument("norm_epsilon must be positive");
        }
    }

    friend bool operator==(const NetworkConfig &, const NetworkConfig &) = default;
};

inline nlohmann::json to_json(const NetworkConfig &c) {
    return {{"variant", to_string(c.variant)},       {"input_channels", c.input_channels},
            {"descriptor_dim", c.descriptor_dim},    {"stage_channels", c.stage_channels},
            {"leaky_slope", c.leaky_slope},          {"norm_epsilon", c.norm_epsilon}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json &j) {
    NetworkConfig c;
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.descriptor_dim = j.at("descriptor_dim").get<std::size_t>();
    c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.norm_epsilon = j.at("norm_epsilon").get<double>();
    c.validate();
    return c;
}

// Uniform grid of descriptors. Cells are flattened x-fastest:
// i = (z * ny + y) * nx + x. `grid_dims` and `spacing_mm` are in physical
// axis order (x, y[, z]).
struct DescriptorGrid {
    Dimensionality dimensionality = Dimensionality::two_d;
    std::vector<std::size_t> grid_dims;
    std::size_t descriptor_dim = 0;
    Tensor descriptors; // cells x descriptor_dim
    std::size_t stride_px = descriptor_stride;
    std::vector<double> spacing_mm;
    // Maps source pixel/voxel physical coordinates to tracking or world space.
    RigidPose pose;

    std::size_t cells() const {
        std::size_t n = 1;
        for (auto g : grid_dims) {
            n *= g;
        }
        return n;
    }

    std::size_t flat_index(const std::vector<std::size_t> &cell) const {
        if (cell.size() != grid_dims.size()) {
            throw std::out_of_range("cell index rank does not match grid");
        }
        std::size_t idx = 0;
        for (std::size_t a = cell.size(); a-- > 0;) {
            if (cell[a] >= grid_dims[a]) {
                throw std::out_of_range("cell index " + std::to_string(cell[a]) + " outside grid on axis " +
                                        std::to_string(a));
            }
            idx = idx * grid_dims[a] + cell[a];
        }
        return idx;
    }

    std::vector<std::size_t> cell_index(std::size_t flat) const {
        if (flat >= cells()) {
            throw std::out_of_range("flat cell index " + std::to_string(flat) + " outside grid");
        }
        std::vector<std::size_t> cell(grid_dims.size());
        for (std::size_t a = 0; a < grid_dims.size(); ++a) {
            cell[a] = flat % grid_dims[a];
            flat /= grid_dims[a];
        }
        return cell;
    }

    std::span<const float> descriptor(std::size_t flat) const {
        return descriptors.values().subspan(flat * descriptor_dim, descriptor_dim);
    }
};

// Grid extents (physical axis order) for an image of the given extents.
inline std::vector<std::size_t> grid_extents_for(const std::vector<std::size_t> &extents_xyz) {
    std::vector<std::size_t> g;
    for (auto e : extents_xyz) {
        if (e < descriptor_stride) {
            throw ShapeError("image extent " + std::to_string(e) + " is smaller than the descriptor stride " +
                             std::to_string(descriptor_stride));
        }
        g.push_back(e / descriptor_stride);
    }
    return g;
}

template <typename T> struct NamedParam {
    std::string name;
    Var<T> value;
};

template <typename T> struct ResidualParams {
    Var<T> conv_a;   // stride s, in -> out
    Var<T> conv_b;   // stride 1, out -> out
    Var<T> shortcut; // 1x1 projection, undefined for identity shortcut
    std::size_t stride = 1;
};

template <typename T> struct BlockSettings {
    Dimensionality dim;
    T slope;
    T epsilon;
};

template <typename T> Var<T> residual_inner(const Var<T> &x, const ResidualParams<T> &p, const BlockSettings<T> &s) {
    auto h = conv(x, p.conv_a, p.stride, s.dim);
    h = instance_norm(h, s.epsilon);
    h = leaky_relu(h, s.slope);
    h = conv(h, p.conv_b, 1, s.dim);
    return instance_norm(h, s.epsilon);
}

template <typename T> Var<T> residual_shortcut(const Var<T> &x, const ResidualParams<T> &p, const BlockSettings<T> &s) {
    if (!p.shortcut.defined()) {
        if (p.stride != 1) {
            throw ShapeError("identity shortcut requires stride 1");
        }
        return x;
    }
    return conv(x, p.shortcut, p.stride, s.dim);
}

// output = inner(x) + shortcut(x)
template <typename T> Var<T> residual_block(const Var<T> &x, const ResidualParams<T> &p, const BlockSettings<T> &s) {
    auto inner = residual_inner(x, p, s);
    auto skip = residual_shortcut(x, p, s);
    if (inner.shape() != skip.shape()) {
        throw ShapeError("residual block: inner path " + shape_str(inner.shape()) + " vs shortcut " +
                         shape_str(skip.shape()));
    }
    return add(inner, skip);
}

template <typename T> class FeatureNet {
  public:
    FeatureNet() = default;

    FeatureNet(const NetworkConfig &config, Dimensionality dim, std::uint64_t seed) : config_(config), dim_(dim) {
        config_.validate();
        std::mt19937_64 rng(seed);
        const auto &ch = config_.stage_channels;
        std::size_t in = config_.input_channels;
        for (std::size_t s = 0; s < 3; ++s) {
            stages_[s] = make_block("stage" + std::to_string(s + 1), in, ch[s], 2, rng);
            in = ch[s];
        }
        decoder_ = make_block("decoder", ch[2] + ch[1], ch[3], 1, rng);
        head_ = make_param("head.weight", {config_.descriptor_dim, ch[3]}, 1, rng);
    }

    const NetworkConfig &config() const { return config_; }
    Dimensionality dimensionality() const { return dim_; }

    std::vector<NamedParam<T>> &parameters() { return params_; }
    const std::vector<NamedParam<T>> &parameters() const { return params_; }

    std::vector<Var<T>> parameter_vars() const {
        std::vector<Var<T>> v;
        for (const auto &p : params_) {
            v.push_back(p.value);
        }
        return v;
    }

    const ResidualParams<T> &stage(std::size_t s) const { return stages_.at(s); }
    const ResidualParams<T> &decoder() const { return decoder_; }
    const Var<T> &head() const { return head_; }

    BlockSettings<T> settings() const {
        return {dim_, static_cast<T>(config_.leaky_slope), static_cast<T>(config_.norm_epsilon)};
    }

    // Input N x C x spatial with extents multiples of 8. Output N x D x (extents / 8).
    Var<T> forward(const Var<T> &input) const {
        const auto s = settings();
        const std::size_t r = spatial_rank(dim_);
        if (input.shape().size() != r + 2) {
            throw ShapeError("network input must have " + std::to_string(r + 2) + " axes, got " +
                             shape_str(input.shape()));
        }
        for (std::size_t a = 0; a < r; ++a) {
            if (input.shape()[2 + a] % descriptor_stride != 0) {
                throw ShapeError("network input extent on axis " + std::to_string(2 + a) +
                                 " must be a multiple of 8");
            }
        }
        auto h1 = leaky_relu(residual_block(input, stages_[0], s), s.slope);
        auto h2 = leaky_relu(residual_block(h1, stages_[1], s), s.slope);
        auto h3 = leaky_relu(residual_block(h2, stages_[2], s), s.slope);
        auto skip = avg_pool2(h2, dim_);
        auto d = leaky_relu(residual_block(concat_channels(h3, skip), decoder_, s), s.slope);
        return conv(d, head_, 1, dim_);
    }

  private:
    Var<T> make_param(const std::string &name, Shape dims, std::size_t kernel_volume, std::mt19937_64 &rng) {
        const std::size_t fan_in = dims[1] * kernel_volume;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        const std::size_t r = spatial_rank(dim_);
        const std::size_t k = kernel_volume == 1 ? 1 : 3;
        for (std::size_t a = 0; a < r; ++a) {
            dims.push_back(k);
        }
        BasicTensor<T> w(dims);
        for (auto &v : w.values()) {
            v = static_cast<T>(u(rng));
        }
        Var<T> var(std::move(w), true);
        params_.push_back({name, var});
        return var;
    }

    ResidualParams<T> make_block(const std::string &name, std::size_t in, std::size_t out, std::size_t stride,
                                 std::mt19937_64 &rng) {
        const std::size_t kvol = dim_ == Dimensionality::two_d ? 9 : 27;
        ResidualParams<T> p;
        p.stride = stride;
        p.conv_a = make_param(name + ".conv_a.weight", {out, in}, kvol, rng);
        p.conv_b = make_param(name + ".conv_b.weight", {out, out}, kvol, rng);
        if (in != out || stride != 1) {
            p.shortcut = make_param(name + ".shortcut.weight", {out, in}, 1, rng);
        }
        return p;
    }

    NetworkConfig config_;
    Dimensionality dim_ = Dimensionality::two_d;
    std::array<ResidualParams<T>, 3> stages_;
    ResidualParams<T> decoder_;
    Var<T> head_;
    std::vector<NamedParam<T>> params_;
};

// Wraps a single-channel image as a 1 x 1 x padded-extents tensor, zero
// padding each axis up to a multiple of 8.
template <typename T> BasicTensor<T> pad_to_stride(const Tensor &pixels) {
    const std::size_t r = pixels.ndim();
    Shape padded{1, 1};
    for (std::size_t a = 0; a < r; ++a) {
        padded.push_back((pixels.dim(a) + descriptor_stride - 1) / descriptor_stride * descriptor_stride);
    }
    BasicTensor<T> out(padded, T(0));
    const std::size_t d = r == 3 ? pixels.dim(0) : 1;
    const std::size_t h = pixels.dim(r - 2), w = pixels.dim(r - 1);
    const std::size_t ph = padded[padded.size() - 2], pw = padded.back();
    for (std::size_t z = 0; z < d; ++z) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                out[(z * ph + y) * pw + x] = static_cast<T>(pixels[(z * h + y) * w + x]);
            }
        }
    }
    return out;
}

// Differentiable feature extraction: returns 1 x D x grid (storage order),
// cropped to floor(extent / 8) cells per axis.
template <typename T> Var<T> extract_feature_map(const FeatureNet<T> &net, const ScalarImage &image) {
    image.validate();
    const Dimensionality dim = image.rank() == 2 ? Dimensionality::two_d : Dimensionality::three_d;
    if (dim != net.dimensionality()) {
        throw ShapeError("image rank does not match network dimensionality");
    }
    const auto grid = grid_extents_for(image.extents_xyz());
    Var<T> input(pad_to_stride<T>(image.pixels));
    auto fmap = net.forward(input);
    std::vector<std::size_t> keep(grid.rbegin(), grid.rend());
    return crop_spatial(fmap, keep, dim);
}

// Converts a 1 x D x grid feature map into cells x D descriptors.
template <typename T> Tensor feature_map_to_descriptors(const BasicTensor<T> &fmap) {
    const std::size_t dims = fmap.dim(1);
    const std::size_t cells = fmap.size() / dims;
    Tensor out({cells, dims});
    for (std::size_t c = 0; c < dims; ++c) {
        for (std::size_t i = 0; i < cells; ++i) {
            out[i * dims + c] = static_cast<float>(fmap[c * cells + i]);
        }
    }
    return out;
}

template <typename T>
DescriptorGrid extract_features(const ScalarImage &image, const FeatureNet<T> &net, const RigidPose &pose = {}) {
    auto fmap = extract_feature_map(net, image);
    DescriptorGrid g;
    g.dimensionality = net.dimensionality();
    g.grid_dims = grid_extents_for(image.extents_xyz());
    g.descriptor_dim = net.config().descriptor_dim;
    g.descriptors = feature_map_to_descriptors(fmap.value());
    g.spacing_mm = image.spacing_mm;
    g.pose = pose;
    return g;
}

} // namespace kpreg
