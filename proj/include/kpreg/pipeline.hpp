// Training, registration, evaluation reports, heatmap export and ablations.
//
// Checkpoint layout: <dir>/manifest.json plus one CMT tensor per parameter.
// Run layout: <out>/run.json, loss.csv, checkpoints/step_<n>/, final/.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kpreg/cmt.hpp"
#include "kpreg/dataset.hpp"
#include "kpreg/featnet.hpp"
#include "kpreg/geometry.hpp"
#include "kpreg/log.hpp"
#include "kpreg/matchcore.hpp"
#include "kpreg/optim.hpp"
#include "kpreg/rng.hpp"
#include "kpreg/synthdata.hpp"

namespace kpreg {

inline constexpr const char *code_version = "kpreg 0.1.0";

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
  public:
    NonFiniteLoss(std::size_t step, std::string last_checkpoint)
        : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                             (last_checkpoint.empty() ? std::string(" (no checkpoint written yet)")
                                                      : "; last good checkpoint: " + last_checkpoint)),
          step_(step), last_checkpoint_(std::move(last_checkpoint)) {}

    std::size_t step() const { return step_; }
    const std::string &last_checkpoint() const { return last_checkpoint_; }

  private:
    std::size_t step_;
    std::string last_checkpoint_;
};

struct TrainConfig {
    std::string dataset;
    std::vector<std::string> sample_ids; // empty: every sample in the dataset index
    NetworkVariant variant = NetworkVariant::standard;
    bool polycrop_enabled = true;
    double noise_sigma = 0.02;
    bool crop_enabled = true;
    double crop_min_keep = 0.8;
    double beta = 1.0;
    SinkPolicy sink_policy = SinkPolicy::sink_only_when_outside;
    double temperature = 1.0;
    double learning_rate = 1e-3;
    std::size_t steps = 20000;
    // Frames of the drawn sample scored against one MR feature pass per step.
    std::size_t frames_per_step = 1;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 1000;
    std::size_t log_interval = 10;
    // Fraction of steps drawing from the intercostal class.
    double balance_ratio = 0.5;

    void validate() const {
        auto positive = [](double v, const char *name) {
            if (!(v > 0.0) || !std::isfinite(v)) {
                throw std::invalid_argument(std::string(name) + " must be positive (got " + std::to_string(v) + ")");
            }
        };
        positive(beta, "beta");
        positive(temperature, "temperature");
        positive(learning_rate, "learning_rate");
        if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
            throw std::invalid_argument("noise_sigma must be >= 0");
        }
        if (!(crop_min_keep > 0.0 && crop_min_keep <= 1.0)) {
            throw std::invalid_argument("crop_min_keep must lie in (0, 1]");
        }
        if (!(balance_ratio >= 0.0 && balance_ratio <= 1.0)) {
            throw std::invalid_argument("balance_ratio must lie in [0, 1]");
        }
        if (frames_per_step == 0) {
            throw std::invalid_argument("frames_per_step must be >= 1");
        }
        if (checkpoint_interval == 0 || log_interval == 0) {
            throw std::invalid_argument("checkpoint_interval and log_interval must be >= 1");
        }
    }
};

inline nlohmann::json to_json(const TrainConfig &c) {
    return {{"dataset", c.dataset},
            {"sample_ids", c.sample_ids},
            {"variant", to_string(c.variant)},
            {"polycrop_enabled", c.polycrop_enabled},
            {"noise_sigma", c.noise_sigma},
            {"crop_enabled", c.crop_enabled},
            {"crop_min_keep", c.crop_min_keep},
            {"beta", c.beta},
            {"sink_policy", to_string(c.sink_policy)},
            {"temperature", c.temperature},
            {"learning_rate", c.learning_rate},
            {"steps", c.steps},
            {"batch", 1},
            {"frames_per_step", c.frames_per_step},
            {"seed", c.seed},
            {"checkpoint_interval", c.checkpoint_interval},
            {"log_interval", c.log_interval},
            {"balance_ratio", c.balance_ratio}};
}

// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json &j, TrainConfig c = {}) {
    auto get = [&j](const char *key, auto &dst) {
        if (j.contains(key)) {
            j.at(key).get_to(dst);
        }
    };
    get("dataset", c.dataset);
    get("sample_ids", c.sample_ids);
    if (j.contains("variant")) {
        c.variant = variant_from_string(j.at("variant").get<std::string>());
    }
    get("polycrop_enabled", c.polycrop_enabled);
    get("noise_sigma", c.noise_sigma);
    get("crop_enabled", c.crop_enabled);
    get("crop_min_keep", c.crop_min_keep);
    get("beta", c.beta);
    if (j.contains("sink_policy")) {
        c.sink_policy = sink_policy_from_string(j.at("sink_policy").get<std::string>());
    }
    get("temperature", c.temperature);
    get("learning_rate", c.learning_rate);
    get("steps", c.steps);
    get("frames_per_step", c.frames_per_step);
    get("seed", c.seed);
    get("checkpoint_interval", c.checkpoint_interval);
    get("log_interval", c.log_interval);
    get("balance_ratio", c.balance_ratio);
    c.validate();
    return c;
}

// Both descriptor networks plus the sink score.
class RegistrationModel {
  public:
    RegistrationModel(const NetworkConfig &config, std::uint64_t seed, double temperature = 1.0)
        : config_(config), seed_(seed), temperature_(temperature),
          us_(config, Dimensionality::two_d, splitmix64(seed ^ 0x5553ULL)),
          mr_(config, Dimensionality::three_d, splitmix64(seed ^ 0x4d52ULL)), alpha_(Tensor({1}, 0.0f), true) {}

    const NetworkConfig &config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    double temperature() const { return temperature_; }
    FeatureNet<float> &us() { return us_; }
    FeatureNet<float> &mr() { return mr_; }
    const FeatureNet<float> &us() const { return us_; }
    const FeatureNet<float> &mr() const { return mr_; }
    Var<float> &alpha() { return alpha_; }
    const Var<float> &alpha() const { return alpha_; }

    std::vector<NamedParam<float>> parameters() const {
        std::vector<NamedParam<float>> out;
        for (const auto &p : us_.parameters()) {
            out.push_back({"us." + p.name, p.value});
        }
        for (const auto &p : mr_.parameters()) {
            out.push_back({"mr." + p.name, p.value});
        }
        out.push_back({"alpha", alpha_});
        return out;
    }

    std::vector<Var<float>> parameter_vars() const {
        std::vector<Var<float>> out;
        for (const auto &p : parameters()) {
            out.push_back(p.value);
        }
        return out;
    }

  private:
    NetworkConfig config_;
    std::uint64_t seed_;
    double temperature_;
    FeatureNet<float> us_, mr_;
    Var<float> alpha_;
};

inline void save_checkpoint(const std::filesystem::path &dir, const RegistrationModel &model, std::size_t step) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }
    nlohmann::json params = nlohmann::json::array();
    for (const auto &p : model.parameters()) {
        const std::string file = p.name + ".cmt";
        cmt::write(dir / file, p.value.value());
        params.push_back({{"name", p.name}, {"file", file}, {"shape", p.value.shape()}});
    }
    detail::write_json(dir / "manifest.json", {{"kind", "network"},
                                               {"code_version", code_version},
                                               {"network", to_json(model.config())},
                                               {"temperature", model.temperature()},
                                               {"seed", model.seed()},
                                               {"step", step},
                                               {"parameters", params}});
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path &dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw CheckpointError("checkpoint directory not found: " + dir.string());
    }
    try {
        return detail::read_json(dir / "manifest.json");
    } catch (const DatasetError &e) {
        throw CheckpointError(e.what());
    }
}

inline RegistrationModel load_model(const std::filesystem::path &dir) {
    const auto m = read_checkpoint_manifest(dir);
    try {
        if (m.at("kind").get<std::string>() != "network") {
            throw CheckpointError("checkpoint " + dir.string() + " is not a network checkpoint");
        }
        RegistrationModel model(network_config_from_json(m.at("network")), m.at("seed").get<std::uint64_t>(),
                                m.at("temperature").get<double>());
        auto params = model.parameters();
        const auto &listed = m.at("parameters");
        if (listed.size() != params.size()) {
            throw CheckpointError("checkpoint " + dir.string() + " lists " + std::to_string(listed.size()) +
                                  " parameters; architecture has " + std::to_string(params.size()));
        }
        for (std::size_t k = 0; k < params.size(); ++k) {
            const auto name = listed[k].at("name").get<std::string>();
            if (name != params[k].name) {
                throw CheckpointError("checkpoint parameter '" + name + "' does not match architecture ('" +
                                      params[k].name + "')");
            }
            const auto path = dir / listed[k].at("file").get<std::string>();
            Tensor t = cmt::read(path);
            if (t.shape() != params[k].value.shape()) {
                throw CheckpointError("shape mismatch for " + path.string());
            }
            params[k].value.mutable_value() = std::move(t);
        }
        return model;
    } catch (const CheckpointError &) {
        throw;
    } catch (const std::exception &e) {
        throw CheckpointError("corrupt checkpoint " + dir.string() + ": " + e.what());
    }
}

// Descriptor provider for registration: a trained model or the ground-truth oracle.
class FeatureSource {
  public:
    virtual ~FeatureSource() = default;
    virtual DescriptorGrid volume_features(const PhantomSample &s) const = 0;
    virtual DescriptorGrid frame_features(const PhantomSample &s, const UsFrame &frame) const = 0;
    virtual float alpha() const = 0;
    virtual float temperature() const = 0;
    virtual nlohmann::json manifest() const = 0;
};

class NetworkFeatures final : public FeatureSource {
  public:
    explicit NetworkFeatures(RegistrationModel model, nlohmann::json manifest = {})
        : model_(std::move(model)), manifest_(std::move(manifest)) {}

    DescriptorGrid volume_features(const PhantomSample &s) const override {
        return extract_features(s.mr_volume, model_.mr());
    }
    DescriptorGrid frame_features(const PhantomSample &, const UsFrame &frame) const override {
        return extract_features(frame.image, model_.us(), frame.geometry.frame_to_world);
    }
    float alpha() const override { return model_.alpha().value()[0]; }
    float temperature() const override { return static_cast<float>(model_.temperature()); }
    nlohmann::json manifest() const override { return manifest_; }
    const RegistrationModel &model() const { return model_; }

  private:
    RegistrationModel model_;
    nlohmann::json manifest_;
};

// Descriptors copied from ground truth: MR cell j gets scale * e_j; US cell i
// gets scale * e_{m(i)} (zero when m(i) is SINK).
class OracleFeatures final : public FeatureSource {
  public:
    explicit OracleFeatures(double scale = 10.0) : scale_(scale) {}

    DescriptorGrid volume_features(const PhantomSample &s) const override {
        DescriptorGrid g = empty_grid(s.mr_volume, Dimensionality::three_d);
        for (std::size_t j = 0; j < g.cells(); ++j) {
            g.descriptors[j * g.descriptor_dim + j] = static_cast<float>(scale_);
        }
        return g;
    }
    DescriptorGrid frame_features(const PhantomSample &s, const UsFrame &frame) const override {
        DescriptorGrid g = empty_grid(frame.image, Dimensionality::two_d);
        const auto mr_layout = grid_layout_for(s.mr_volume);
        g.descriptor_dim = mr_layout.cells();
        g.descriptors = Tensor({g.cells(), g.descriptor_dim}, 0.0f);
        g.pose = frame.geometry.frame_to_world;
        const auto gt = derive_ground_truth(s, frame.geometry, grid_layout_for(frame.image), mr_layout);
        for (const auto &c : gt) {
            if (c.mr_cell) {
                g.descriptors[c.us_cell * g.descriptor_dim + *c.mr_cell] = static_cast<float>(scale_);
            }
        }
        return g;
    }
    float alpha() const override { return 0.0f; }
    float temperature() const override { return 1.0f; }
    nlohmann::json manifest() const override { return {{"kind", "oracle"}, {"scale", scale_}}; }

  private:
    static DescriptorGrid empty_grid(const ScalarImage &img, Dimensionality d) {
        DescriptorGrid g;
        g.dimensionality = d;
        g.grid_dims = grid_extents_for(img.extents_xyz());
        g.spacing_mm = img.spacing_mm;
        g.descriptor_dim = g.cells();
        g.descriptors = Tensor({g.cells(), g.descriptor_dim}, 0.0f);
        return g;
    }

    double scale_;
};

inline void write_oracle_checkpoint(const std::filesystem::path &dir, double scale = 10.0) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw CheckpointError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }
    detail::write_json(dir / "manifest.json", OracleFeatures(scale).manifest());
}

inline std::unique_ptr<FeatureSource> load_feature_source(const std::filesystem::path &dir) {
    const auto m = read_checkpoint_manifest(dir);
    const auto kind = m.value("kind", std::string());
    if (kind == "oracle") {
        return std::make_unique<OracleFeatures>(m.value("scale", 10.0));
    }
    if (kind == "network") {
        return std::make_unique<NetworkFeatures>(load_model(dir), m);
    }
    throw CheckpointError("checkpoint " + dir.string() + " has unknown kind '" + kind + "'");
}

// ---------------------------------------------------------------- training

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::vector<std::pair<std::size_t, double>> loss_log; // (1-based step, loss)
    std::size_t skipped_steps = 0;
};

struct TrainingExample {
    ScalarImage us_image;
    FrameGeometry geometry;
    const PhantomSample *sample = nullptr;
    std::size_t frame_index = 0;
};

// The (frame, volume) pair and augmentations consumed at a given step. Every
// slot of a step shares the sample; slots past the first draw their own frame.
inline TrainingExample draw_training_example(const TrainConfig &config, const std::vector<PhantomSample> &samples,
                                             const BalancedSampler &sampler, std::size_t step, std::size_t slot = 0) {
    const std::uint64_t base = splitmix64(config.seed ^ 0x747261696eULL);
    auto rng = stream_rng(base, step);
    TrainingExample ex;
    ex.sample = &samples[sampler.draw(rng)];
    if (slot != 0) {
        rng = stream_rng(splitmix64(base ^ splitmix64(slot)), step);
    }
    ex.frame_index = std::uniform_int_distribution<std::size_t>(0, ex.sample->sweep.size() - 1)(rng);
    const auto &frame = ex.sample->sweep[ex.frame_index];
    ex.us_image = frame.image;
    ex.geometry = frame.geometry;
    if (config.crop_enabled) {
        auto crop = augment_random_crop(ex.us_image, rng, config.crop_min_keep);
        ex.us_image = std::move(crop.image);
        ex.geometry = shift_frame_geometry(ex.geometry, crop.offset);
    }
    ex.us_image = augment_gaussian_noise(ex.us_image, config.noise_sigma, rng);
    if (config.polycrop_enabled) {
        ex.us_image = polycrop(ex.us_image, rng).image;
    }
    return ex;
}

inline std::vector<PhantomSample> load_training_samples(const TrainConfig &config) {
    if (config.dataset.empty()) {
        throw DatasetError("training config has no dataset path");
    }
    std::vector<std::string> ids = config.sample_ids;
    if (ids.empty()) {
        for (const auto &e : read_dataset_index(config.dataset).samples) {
            ids.push_back(e.id);
        }
    }
    if (ids.empty()) {
        throw DatasetError("dataset " + config.dataset + " has no samples to train on");
    }
    return load_dataset(config.dataset, ids);
}

inline std::string step_dir_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%06zu", step);
    return buf;
}

inline nlohmann::json run_manifest(const std::string &command, const nlohmann::json &config, std::size_t threads) {
    return {{"command", command}, {"config", config}, {"code_version", code_version}, {"threads", threads}};
}

inline TrainResult train(const TrainConfig &config, const std::filesystem::path &out_dir,
                         const std::vector<PhantomSample> &samples, std::size_t threads = 1) {
    config.validate();
    if (samples.empty()) {
        throw DatasetError("no training samples");
    }
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw CheckpointError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    }
    auto manifest = run_manifest("train", to_json(config), threads);
    manifest["seed"] = config.seed;
    detail::write_json(out_dir / "run.json", manifest);

    RegistrationModel model(NetworkConfig::for_variant(config.variant), config.seed, config.temperature);
    auto params = model.parameter_vars();
    auto adam = AdamState<float>::for_params(params);
    AdamHyper hyper;
    hyper.learning_rate = config.learning_rate;

    std::vector<SweepClass> classes;
    for (const auto &s : samples) {
        classes.push_back(s.sweep_class);
    }
    BalancedSampler sampler(classes, SweepClass::intercostal, config.balance_ratio);

    TrainResult result;
    std::ofstream loss_csv(out_dir / "loss.csv", std::ios::binary);
    loss_csv << "step,loss\n";
    std::string last_checkpoint;
    const auto temperature = static_cast<float>(config.temperature);
    for (std::size_t step = 0; step < config.steps; ++step) {
        Var<float> loss, mr_map;
        for (std::size_t slot = 0; slot < config.frames_per_step; ++slot) {
            const auto ex = draw_training_example(config, samples, sampler, step, slot);
            const auto mr_layout = grid_layout_for(ex.sample->mr_volume);
            const auto gt = derive_ground_truth(*ex.sample, ex.geometry, grid_layout_for(ex.us_image), mr_layout);
            const auto w = ground_truth_weights<float>(gt, mr_layout.dims, static_cast<float>(config.beta),
                                                       config.sink_policy);
            if (slot == 0) {
                mr_map = extract_feature_map(model.mr(), ex.sample->mr_volume);
            }
            auto term = matching_loss(extract_feature_map(model.us(), ex.us_image), mr_map, model.alpha(), w,
                                      temperature);
            loss = slot == 0 ? term : add(loss, term);
        }
        if (config.frames_per_step > 1) {
            loss = dot_const(loss, Tensor({1}, 1.0f / static_cast<float>(config.frames_per_step)));
        }
        const double value = loss.value()[0];
        const std::size_t done = step + 1;
        if (!std::isfinite(value)) {
            throw NonFiniteLoss(done, last_checkpoint);
        }
        optimizer_step(params, backward(loss, params), adam, hyper);
        if (done == 1 || done % config.log_interval == 0) {
            result.loss_log.emplace_back(done, value);
            char line[64];
            std::snprintf(line, sizeof line, "%zu,%.6f\n", done, value);
            loss_csv << line << std::flush;
        }
        if (done % config.checkpoint_interval == 0 && done != config.steps) {
            const auto dir = out_dir / "checkpoints" / step_dir_name(done);
            save_checkpoint(dir, model, done);
            last_checkpoint = dir.string();
            log::info("step " + std::to_string(done) + " loss " + std::to_string(value) + " -> " + last_checkpoint);
        }
    }
    result.final_checkpoint = out_dir / "final";
    save_checkpoint(result.final_checkpoint, model, config.steps);
    result.skipped_steps = static_cast<std::size_t>(adam.skipped_steps);
    manifest["skipped_steps"] = result.skipped_steps;
    manifest["final_checkpoint"] = "final";
    detail::write_json(out_dir / "run.json", manifest);
    return result;
}

inline TrainResult train(const TrainConfig &config, const std::filesystem::path &out_dir, std::size_t threads = 1) {
    config.validate();
    return train(config, out_dir, load_training_samples(config), threads);
}

// ------------------------------------------------------------ registration

enum class RegistrationMode { single_frame, all_frames };

inline const char *to_string(RegistrationMode m) {
    return m == RegistrationMode::single_frame ? "single_frame" : "all_frames";
}

inline RegistrationMode registration_mode_from_string(const std::string &s) {
    if (s == "single" || s == "single_frame") {
        return RegistrationMode::single_frame;
    }
    if (s == "all" || s == "all_frames") {
        return RegistrationMode::all_frames;
    }
    throw std::invalid_argument("unknown registration mode '" + s + "' (expected single|all)");
}

struct RegisterConfig {
    double match_threshold = 0.2;
    bool mutual = true;
    RansacConfig ransac;
    std::optional<std::size_t> single_frame_index; // default: middle frame

    void validate() const {
        if (!(match_threshold > 0.0 && match_threshold < 1.0)) {
            throw std::invalid_argument("match_threshold must lie in (0, 1)");
        }
        ransac.validate();
    }
};

inline nlohmann::json to_json(const RegisterConfig &c) {
    nlohmann::json j{{"match_threshold", c.match_threshold},
                     {"mutual", c.mutual},
                     {"ransac_iterations", c.ransac.iterations},
                     {"ransac_threshold_mm", c.ransac.inlier_threshold_mm},
                     {"ransac_seed", c.ransac.seed},
                     {"single_frame_index", nullptr}};
    if (c.single_frame_index) {
        j["single_frame_index"] = *c.single_frame_index;
    }
    return j;
}

inline RegisterConfig register_config_from_json(const nlohmann::json &j, RegisterConfig c = {}) {
    auto get = [&j](const char *key, auto &dst) {
        if (j.contains(key)) {
            j.at(key).get_to(dst);
        }
    };
    get("match_threshold", c.match_threshold);
    get("mutual", c.mutual);
    get("ransac_iterations", c.ransac.iterations);
    get("ransac_threshold_mm", c.ransac.inlier_threshold_mm);
    get("ransac_seed", c.ransac.seed);
    if (j.contains("single_frame_index") && !j.at("single_frame_index").is_null()) {
        c.single_frame_index = j.at("single_frame_index").get<std::size_t>();
    }
    c.validate();
    return c;
}

struct FrameDiagnostics {
    std::size_t frame_index = 0;
    std::size_t matches = 0;
};

struct RegistrationResult {
    RigidPose pose; // tracking space -> MR space
    std::vector<FrameDiagnostics> frames;
    std::vector<Correspondence3D> correspondences;
    std::vector<std::size_t> inliers;
    double mean_inlier_residual_mm = 0.0;
};

class RegistrationFailure : public NoConsensus {
  public:
    RegistrationFailure(const NoConsensus &cause, std::vector<FrameDiagnostics> frames)
        : NoConsensus(cause.what() + diagnostics_text(frames), cause.correspondences(), cause.best_inliers()),
          frames_(std::move(frames)) {}

    const std::vector<FrameDiagnostics> &frames() const { return frames_; }

  private:
    static std::string diagnostics_text(const std::vector<FrameDiagnostics> &frames) {
        std::string s = "; matches per frame:";
        for (const auto &f : frames) {
            s += " " + std::to_string(f.frame_index) + ":" + std::to_string(f.matches);
        }
        return s;
    }

    std::vector<FrameDiagnostics> frames_;
};

inline std::size_t single_frame_index(const PhantomSample &s, const RegisterConfig &config) {
    const std::size_t k = config.single_frame_index.value_or(s.sweep.size() / 2);
    if (k >= s.sweep.size()) {
        throw std::out_of_range("single frame index " + std::to_string(k) + " outside sweep of " +
                                std::to_string(s.sweep.size()) + " frames");
    }
    return k;
}

inline std::vector<std::size_t> frames_for_mode(const PhantomSample &s, RegistrationMode mode,
                                                const RegisterConfig &config) {
    if (mode == RegistrationMode::single_frame) {
        return {single_frame_index(s, config)};
    }
    std::vector<std::size_t> all(s.sweep.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
}

inline MatchSet match_frame(const DescriptorGrid &us, const DescriptorGrid &mr, float alpha, float temperature,
                            const RegisterConfig &config) {
    const auto a = dual_softmax(similarity(us, mr, alpha), temperature);
    return extract_matches(a, config.match_threshold, config.mutual);
}

// Canonical order for fused correspondences: descending confidence, then
// lexicographic US point, then MR point. Makes RANSAC input independent of
// frame enumeration order.
inline void sort_correspondences(std::vector<Correspondence3D> &corrs) {
    auto key = [](const Correspondence3D &c) {
        return std::array<double, 7>{-c.confidence,    c.us_point_mm.x(), c.us_point_mm.y(), c.us_point_mm.z(),
                                     c.mr_point_mm.x(), c.mr_point_mm.y(), c.mr_point_mm.z()};
    };
    std::stable_sort(corrs.begin(), corrs.end(), [&](const auto &a, const auto &b) { return key(a) < key(b); });
}

// Correspondences of the listed frames, lifted into tracking space.
inline std::vector<Correspondence3D> collect_correspondences(const FeatureSource &features, const PhantomSample &s,
                                                             const DescriptorGrid &mr,
                                                             const std::vector<std::size_t> &frame_indices,
                                                             const RegisterConfig &config,
                                                             std::vector<FrameDiagnostics> *diagnostics = nullptr) {
    std::vector<FrameMatches> per_frame;
    for (auto k : frame_indices) {
        const auto &frame = s.sweep.at(k);
        const auto us = features.frame_features(s, frame);
        auto ms = match_frame(us, mr, features.alpha(), features.temperature(), config);
        if (diagnostics) {
            diagnostics->push_back({k, ms.entries.size()});
        }
        per_frame.push_back({std::move(ms), frame.geometry, layout_of(us), layout_of(mr)});
    }
    auto corrs = fuse_sweep_matches(per_frame);
    sort_correspondences(corrs);
    return corrs;
}

inline RegistrationResult register_frames(const FeatureSource &features, const PhantomSample &s,
                                          const std::vector<std::size_t> &frame_indices,
                                          const RegisterConfig &config) {
    config.validate();
    const auto mr = features.volume_features(s);
    RegistrationResult out;
    out.correspondences = collect_correspondences(features, s, mr, frame_indices, config, &out.frames);
    try {
        if (out.correspondences.size() < 3) {
            throw NoConsensus("registration: only " + std::to_string(out.correspondences.size()) +
                                  " correspondences above threshold",
                              out.correspondences.size(), 0);
        }
        const auto r = ransac_pose(out.correspondences, config.ransac);
        out.pose = r.pose;
        out.inliers = r.inliers;
        out.mean_inlier_residual_mm = r.mean_inlier_residual_mm;
    } catch (const NoConsensus &e) {
        throw RegistrationFailure(e, out.frames);
    }
    return out;
}

inline RegistrationResult register_sweep(const FeatureSource &features, const PhantomSample &s,
                                         RegistrationMode mode, const RegisterConfig &config = {}) {
    return register_frames(features, s, frames_for_mode(s, mode, config), config);
}

inline nlohmann::json to_json(const RegistrationResult &r) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto &f : r.frames) {
        frames.push_back({{"frame", f.frame_index}, {"matches", f.matches}});
    }
    return {{"pose", pose_to_json(r.pose)},
            {"correspondences", r.correspondences.size()},
            {"inliers", r.inliers.size()},
            {"mean_inlier_residual_mm", r.mean_inlier_residual_mm},
            {"frames", frames}};
}

// Default point for translation error: centroid of every lifted US cell of the sweep.
inline Vec3 sweep_reference_point(const PhantomSample &s) {
    Vec3 acc = Vec3::Zero();
    std::size_t n = 0;
    for (const auto &f : s.sweep) {
        const auto layout = grid_layout_for(f.image);
        for (std::size_t i = 0; i < layout.cells(); ++i) {
            acc += lift_us_cell(i, layout, f.geometry);
            ++n;
        }
    }
    if (n == 0) {
        throw std::invalid_argument("sample " + s.id + " has no ultrasound cells");
    }
    return acc / static_cast<double>(n);
}

// -------------------------------------------------------------- evaluation

struct Gate {
    double rot_deg = 10.0;
    double trans_mm = 10.0;

    bool passes(double rot, double trans) const { return rot < rot_deg && trans < trans_mm; }
    friend bool operator==(const Gate &, const Gate &) = default;
};

inline std::vector<Gate> default_gates() { return {{10.0, 10.0}, {15.0, 20.0}}; }

struct ModeOutcome {
    bool ok = false;
    double rot_deg = 0.0;
    double trans_mm = 0.0;
    std::size_t correspondences = 0;
    std::size_t inliers = 0;
    std::string error;
    RigidPose pose;
};

struct CaseResult {
    std::string id;
    Vec3 reference_point = Vec3::Zero();
    RigidPose gt;
    ModeOutcome single_frame, all_frames;

    const ModeOutcome &outcome(RegistrationMode m) const {
        return m == RegistrationMode::single_frame ? single_frame : all_frames;
    }
};

inline nlohmann::json to_json(const ModeOutcome &o) {
    nlohmann::json j{{"status", o.ok ? "ok" : "no_consensus"},
                     {"correspondences", o.correspondences},
                     {"inliers", o.inliers}};
    if (o.ok) {
        j["rot_deg"] = o.rot_deg;
        j["trans_mm"] = o.trans_mm;
        j["pose"] = pose_to_json(o.pose);
    } else {
        j["error"] = o.error;
    }
    return j;
}

inline ModeOutcome mode_outcome_from_json(const nlohmann::json &j) {
    ModeOutcome o;
    o.ok = j.at("status").get<std::string>() == "ok";
    o.correspondences = j.at("correspondences").get<std::size_t>();
    o.inliers = j.at("inliers").get<std::size_t>();
    if (o.ok) {
        o.rot_deg = j.at("rot_deg").get<double>();
        o.trans_mm = j.at("trans_mm").get<double>();
        o.pose = pose_from_json(j.at("pose"));
    } else {
        o.error = j.value("error", std::string());
    }
    return o;
}

inline nlohmann::json to_json(const CaseResult &c) {
    const auto &r = c.reference_point;
    return {{"id", c.id},
            {"reference_point_mm", {r.x(), r.y(), r.z()}},
            {"gt_registration", pose_to_json(c.gt)},
            {"single_frame", to_json(c.single_frame)},
            {"all_frames", to_json(c.all_frames)}};
}

inline CaseResult case_result_from_json(const nlohmann::json &j) {
    CaseResult c;
    c.id = j.at("id").get<std::string>();
    const auto r = j.at("reference_point_mm").get<std::vector<double>>();
    c.reference_point = Vec3(r.at(0), r.at(1), r.at(2));
    c.gt = pose_from_json(j.at("gt_registration"));
    c.single_frame = mode_outcome_from_json(j.at("single_frame"));
    c.all_frames = mode_outcome_from_json(j.at("all_frames"));
    return c;
}

struct Aggregate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double std = std::numeric_limits<double>::quiet_NaN();
    double median = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;
};

// Population standard deviation; median averages the middle pair for even counts.
inline Aggregate aggregate(std::vector<double> v) {
    Aggregate a;
    a.count = v.size();
    if (v.empty()) {
        return a;
    }
    double sum = 0.0;
    for (double x : v) {
        sum += x;
    }
    a.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) {
        ss += (x - a.mean) * (x - a.mean);
    }
    a.std = std::sqrt(ss / static_cast<double>(v.size()));
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    a.median = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    return a;
}

inline std::string format_aggregate(const Aggregate &a) {
    if (a.count == 0) {
        return "n/a";
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.1f ± %.1f (%.1f)", a.mean, a.std, a.median);
    return buf;
}

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * fraction);
    return buf;
}

namespace detail {

// Display width of a UTF-8 string (one column per code point).
inline std::size_t display_width(const std::string &s) {
    std::size_t n = 0;
    for (unsigned char c : s) {
        if ((c & 0xc0) != 0x80) {
            ++n;
        }
    }
    return n;
}

inline std::string render_table(const std::vector<std::vector<std::string>> &rows) {
    std::vector<std::size_t> width;
    for (const auto &r : rows) {
        width.resize(std::max(width.size(), r.size()), 0);
        for (std::size_t c = 0; c < r.size(); ++c) {
            width[c] = std::max(width[c], display_width(r[c]));
        }
    }
    std::string out;
    for (const auto &r : rows) {
        std::string line;
        for (std::size_t c = 0; c < r.size(); ++c) {
            line += r[c];
            if (c + 1 < r.size()) {
                line.append(width[c] - display_width(r[c]) + 2, ' ');
            }
        }
        out += line + "\n";
    }
    return out;
}

inline std::string csv_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace detail

struct EvalReport {
    std::vector<CaseResult> cases;
    std::vector<Gate> gates = default_gates();
    std::string manifest_hash;

    std::vector<double> values(RegistrationMode m, bool rotation) const {
        std::vector<double> v;
        for (const auto &c : cases) {
            const auto &o = c.outcome(m);
            if (o.ok) {
                v.push_back(rotation ? o.rot_deg : o.trans_mm);
            }
        }
        return v;
    }

    Aggregate rotation(RegistrationMode m) const { return aggregate(values(m, true)); }
    Aggregate translation(RegistrationMode m) const { return aggregate(values(m, false)); }

    // Median where failed cases count as unbounded error.
    double median_with_failures(RegistrationMode m, bool rotation) const {
        std::vector<double> v;
        for (const auto &c : cases) {
            const auto &o = c.outcome(m);
            v.push_back(o.ok ? (rotation ? o.rot_deg : o.trans_mm) : std::numeric_limits<double>::infinity());
        }
        if (v.empty()) {
            return std::numeric_limits<double>::quiet_NaN();
        }
        return aggregate(v).median;
    }

    std::size_t failures(RegistrationMode m) const {
        return static_cast<std::size_t>(
            std::count_if(cases.begin(), cases.end(), [m](const CaseResult &c) { return !c.outcome(m).ok; }));
    }

    double success_rate(RegistrationMode m, const Gate &g) const {
        if (cases.empty()) {
            return 0.0;
        }
        std::size_t pass = 0;
        for (const auto &c : cases) {
            const auto &o = c.outcome(m);
            pass += o.ok && g.passes(o.rot_deg, o.trans_mm) ? 1 : 0;
        }
        return static_cast<double>(pass) / static_cast<double>(cases.size());
    }

    std::string render_text() const {
        const RegistrationMode modes[] = {RegistrationMode::all_frames, RegistrationMode::single_frame};
        std::vector<std::vector<std::string>> rows{{"", "All frames", "Single frame"}};
        rows.push_back({"Init. Rot. (deg)", format_aggregate(rotation(modes[0])), format_aggregate(rotation(modes[1]))});
        rows.push_back(
            {"Init. Trans. (mm)", format_aggregate(translation(modes[0])), format_aggregate(translation(modes[1]))});
        for (const auto &g : gates) {
            rows.push_back({"Init. <" + format_number(g.rot_deg) + "° & <" + format_number(g.trans_mm) + "mm",
                            format_percent(success_rate(modes[0], g)), format_percent(success_rate(modes[1], g))});
        }
        const auto n = std::to_string(cases.size());
        rows.push_back({"Failures", std::to_string(failures(modes[0])) + "/" + n,
                        std::to_string(failures(modes[1])) + "/" + n});
        std::string out = detail::render_table(rows);
        out += "Cases: " + n + "\n";
        out += "Checkpoint manifest: " + (manifest_hash.empty() ? std::string("n/a") : manifest_hash) + "\n";
        return out;
    }

    std::string render_csv() const {
        std::string out = "case,mode,status,rot_deg,trans_mm,correspondences,inliers\n";
        for (const auto &c : cases) {
            for (auto m : {RegistrationMode::all_frames, RegistrationMode::single_frame}) {
                const auto &o = c.outcome(m);
                out += c.id + "," + to_string(m) + "," + (o.ok ? "ok" : "no_consensus") + "," +
                       (o.ok ? detail::csv_number(o.rot_deg) : "") + "," +
                       (o.ok ? detail::csv_number(o.trans_mm) : "") + "," + std::to_string(o.correspondences) + "," +
                       std::to_string(o.inliers) + "\n";
            }
        }
        return out;
    }

    nlohmann::json summary_json() const {
        nlohmann::json j{{"cases", cases.size()}, {"manifest_hash", manifest_hash}};
        for (auto m : {RegistrationMode::all_frames, RegistrationMode::single_frame}) {
            auto agg = [](const Aggregate &a) {
                return nlohmann::json{{"mean", a.mean}, {"std", a.std}, {"median", a.median}, {"count", a.count}};
            };
            nlohmann::json gates_j = nlohmann::json::array();
            for (const auto &g : gates) {
                gates_j.push_back({{"rot_deg", g.rot_deg}, {"trans_mm", g.trans_mm}, {"rate", success_rate(m, g)}});
            }
            j[to_string(m)] = {{"rot_deg", agg(rotation(m))},
                               {"trans_mm", agg(translation(m))},
                               {"gates", gates_j},
                               {"failures", failures(m)}};
        }
        return j;
    }
};

inline std::string manifest_hash(const nlohmann::json &manifest) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(manifest.dump())));
    return buf;
}

// Post-registration refinement hook. Only the identity refiner ships.
using Refiner = std::function<RigidPose(const PhantomSample &, const RigidPose &)>;

inline RigidPose identity_refiner(const PhantomSample &, const RigidPose &p) { return p; }

// Produces a pose (tracking -> MR) for a case, or throws NoConsensus.
using CaseRegistrar = std::function<RegistrationResult(const PhantomSample &, RegistrationMode)>;

struct EvalConfig {
    RegisterConfig registration;
    std::vector<Gate> gates = default_gates();
};

inline CaseResult evaluate_case(const PhantomSample &s, const CaseRegistrar &registrar,
                                const Refiner &refine = identity_refiner) {
    CaseResult c;
    c.id = s.id;
    c.gt = s.gt_registration;
    c.reference_point = sweep_reference_point(s);
    for (auto m : {RegistrationMode::single_frame, RegistrationMode::all_frames}) {
        ModeOutcome o;
        try {
            const auto r = registrar(s, m);
            o.pose = refine(s, r.pose);
            const auto e = pose_error(o.pose, s.gt_registration, {c.reference_point});
            o.ok = true;
            o.rot_deg = e.rot_deg;
            o.trans_mm = e.trans_mm;
            o.correspondences = r.correspondences.size();
            o.inliers = r.inliers.size();
        } catch (const NoConsensus &e) {
            o.ok = false;
            o.error = e.what();
            o.correspondences = e.correspondences();
            o.inliers = e.best_inliers();
        }
        (m == RegistrationMode::single_frame ? c.single_frame : c.all_frames) = std::move(o);
    }
    return c;
}

inline EvalReport evaluate_with(const std::vector<PhantomSample> &cases, const CaseRegistrar &registrar,
                                const std::vector<Gate> &gates, std::string hash = {},
                                const Refiner &refine = identity_refiner) {
    if (cases.empty()) {
        throw std::invalid_argument("evaluate: empty split");
    }
    EvalReport report;
    report.gates = gates;
    report.manifest_hash = std::move(hash);
    for (const auto &s : cases) {
        report.cases.push_back(evaluate_case(s, registrar, refine));
    }
    return report;
}

inline EvalReport evaluate(const FeatureSource &features, const std::vector<PhantomSample> &cases,
                           const EvalConfig &config = {}) {
    config.registration.validate();
    auto registrar = [&](const PhantomSample &s, RegistrationMode m) {
        return register_sweep(features, s, m, config.registration);
    };
    return evaluate_with(cases, registrar, config.gates, manifest_hash(features.manifest()));
}

// Writes eval/<case>.json, report.txt, report.csv and summary.json under `dir`.
inline void write_report(const std::filesystem::path &dir, const EvalReport &report) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "eval", ec);
    if (ec) {
        throw std::runtime_error("cannot create " + (dir / "eval").string() + ": " + ec.message());
    }
    for (const auto &c : report.cases) {
        detail::write_json(dir / "eval" / (c.id + ".json"), to_json(c));
    }
    std::ofstream(dir / "report.txt", std::ios::binary) << report.render_text();
    std::ofstream(dir / "report.csv", std::ios::binary) << report.render_csv();
    nlohmann::json gates = nlohmann::json::array();
    for (const auto &g : report.gates) {
        gates.push_back({g.rot_deg, g.trans_mm});
    }
    auto summary = report.summary_json();
    summary["gate_list"] = gates;
    summary["case_ids"] = nlohmann::json::array();
    for (const auto &c : report.cases) {
        summary["case_ids"].push_back(c.id);
    }
    detail::write_json(dir / "summary.json", summary);
}

// Rebuilds a report from the per-case files written by write_report.
inline EvalReport read_report(const std::filesystem::path &dir) {
    const auto summary = detail::read_json(dir / "summary.json");
    EvalReport r;
    r.manifest_hash = summary.at("manifest_hash").get<std::string>();
    r.gates.clear();
    for (const auto &g : summary.at("gate_list")) {
        r.gates.push_back({g.at(0).get<double>(), g.at(1).get<double>()});
    }
    for (const auto &id : summary.at("case_ids")) {
        r.cases.push_back(case_result_from_json(detail::read_json(dir / "eval" / (id.get<std::string>() + ".json"))));
    }
    return r;
}

// ----------------------------------------------------------------- heatmap

struct HeatmapResult {
    Tensor volume; // (gz, gy, gx) row of S over the real MR cells
    std::vector<std::size_t> grid_dims;
    std::size_t argmax_cell = 0;
    std::optional<Match> match;
    std::filesystem::path volume_path, slice_xy_path, slice_xz_path;
};

inline std::size_t argmax_cell(const Tensor &t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < t.size(); ++k) {
        if (t[k] > t[best]) {
            best = k;
        }
    }
    return best;
}

namespace detail {

// Greyscale PGM; values scaled to [0, 254] with the marked pixel at 255.
inline void write_pgm(const std::filesystem::path &path, const std::vector<float> &values, std::size_t width,
                      std::size_t height, std::size_t marked) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, span = *hi_it - *lo_it;
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    os << "P5\n" << width << " " << height << "\n255\n";
    for (std::size_t k = 0; k < values.size(); ++k) {
        unsigned char px = 255;
        if (k != marked) {
            px = span > 0.0 ? static_cast<unsigned char>(std::lround(254.0 * (values[k] - lo) / span)) : 0;
        }
        os.put(static_cast<char>(px));
    }
}

} // namespace detail

inline HeatmapResult export_heatmap(const FeatureSource &features, const PhantomSample &s, std::size_t frame_index,
                                    std::size_t us_cell, const std::filesystem::path &out_dir,
                                    const RegisterConfig &config = {}) {
    config.validate();
    const auto &frame = s.sweep.at(frame_index);
    const auto us = features.frame_features(s, frame);
    if (us_cell >= us.cells()) {
        throw std::out_of_range("us_cell " + std::to_string(us_cell) + " outside the frame's descriptor grid of " +
                                std::to_string(us.cells()) + " cells");
    }
    const auto mr = features.volume_features(s);
    const auto sim = similarity(us, mr, features.alpha());
    const std::size_t gx = mr.grid_dims[0], gy = mr.grid_dims[1], gz = mr.grid_dims[2];

    HeatmapResult out;
    out.grid_dims = mr.grid_dims;
    out.volume = Tensor({gz, gy, gx}, 0.0f);
    for (std::size_t j = 0; j < mr.cells(); ++j) {
        out.volume[j] = sim.values(static_cast<Eigen::Index>(us_cell), static_cast<Eigen::Index>(j));
    }
    out.argmax_cell = argmax_cell(out.volume);
    const auto ms = extract_matches(dual_softmax(sim, features.temperature()), config.match_threshold, config.mutual);
    for (const auto &m : ms.entries) {
        if (m.us_cell == us_cell) {
            out.match = m;
        }
    }

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
    }
    out.volume_path = out_dir / "similarity_row.cmt";
    cmt::write(out.volume_path, out.volume);

    const std::size_t ax = out.argmax_cell % gx, ay = (out.argmax_cell / gx) % gy, az = out.argmax_cell / (gx * gy);
    std::vector<float> xy(gx * gy), xz(gx * gz);
    for (std::size_t y = 0; y < gy; ++y) {
        for (std::size_t x = 0; x < gx; ++x) {
            xy[y * gx + x] = out.volume[(az * gy + y) * gx + x];
        }
    }
    for (std::size_t z = 0; z < gz; ++z) {
        for (std::size_t x = 0; x < gx; ++x) {
            xz[z * gx + x] = out.volume[(z * gy + ay) * gx + x];
        }
    }
    out.slice_xy_path = out_dir / "slice_xy.pgm";
    out.slice_xz_path = out_dir / "slice_xz.pgm";
    detail::write_pgm(out.slice_xy_path, xy, gx, gy, ay * gx + ax);
    detail::write_pgm(out.slice_xz_path, xz, gx, gz, az * gx + ax);
    detail::write_json(out_dir / "heatmap.json", {{"case", s.id},
                                                  {"frame", frame_index},
                                                  {"us_cell", us_cell},
                                                  {"grid_dims", mr.grid_dims},
                                                  {"argmax_cell", out.argmax_cell},
                                                  {"match", out.match ? nlohmann::json{{"mr_cell", out.match->mr_cell},
                                                                                       {"confidence",
                                                                                        out.match->confidence}}
                                                                      : nlohmann::json(nullptr)}});
    return out;
}

// ---------------------------------------------------------------- ablation

struct AblationArm {
    std::string name;
    bool polycrop = true;
    NetworkVariant variant = NetworkVariant::standard;
};

inline std::vector<AblationArm> default_ablation_arms() {
    return {{"No polycrop + standard net", false, NetworkVariant::standard},
            {"Polycrop + standard net", true, NetworkVariant::standard},
            {"Polycrop + smaller net", true, NetworkVariant::small}};
}

struct AblationConfig {
    TrainConfig base;
    std::vector<AblationArm> arms = default_ablation_arms();
    EvalConfig eval;
    Gate high_error{50.0, 50.0};
    Gate well_initialized{25.0, 25.0};
    RegistrationMode mode = RegistrationMode::all_frames;
};

struct AblationRow {
    AblationArm arm;
    EvalReport report;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    Gate high_error{50.0, 50.0};
    Gate well_initialized{25.0, 25.0};
    RegistrationMode mode = RegistrationMode::all_frames;

    // Failed registrations count as high-error.
    double high_error_rate(const EvalReport &r) const {
        if (r.cases.empty()) {
            return 0.0;
        }
        std::size_t n = 0;
        for (const auto &c : r.cases) {
            const auto &o = c.outcome(mode);
            n += !o.ok || o.rot_deg > high_error.rot_deg || o.trans_mm > high_error.trans_mm ? 1 : 0;
        }
        return static_cast<double>(n) / static_cast<double>(r.cases.size());
    }

    double well_initialized_rate(const EvalReport &r) const { return r.success_rate(mode, well_initialized); }

    std::string render_text() const {
        std::vector<std::vector<std::string>> t(6);
        t[0] = {""};
        t[1] = {"Init. Rot. (deg)"};
        t[2] = {"Init. Trans. (mm)"};
        t[3] = {"Init. >" + format_number(high_error.rot_deg) + "° or >" + format_number(high_error.trans_mm) +
                "mm"};
        t[4] = {"Init. <" + format_number(well_initialized.rot_deg) + "° & <" +
                format_number(well_initialized.trans_mm) + "mm"};
        t[5] = {"Failures"};
        for (const auto &row : rows) {
            t[0].push_back(row.arm.name);
            t[1].push_back(format_aggregate(row.report.rotation(mode)));
            t[2].push_back(format_aggregate(row.report.translation(mode)));
            t[3].push_back(format_percent(high_error_rate(row.report)));
            t[4].push_back(format_percent(well_initialized_rate(row.report)));
            t[5].push_back(std::to_string(row.report.failures(mode)) + "/" + std::to_string(row.report.cases.size()));
        }
        return detail::render_table(t);
    }

    std::string render_csv() const {
        std::string out = "arm,polycrop,variant,rot_mean,rot_std,rot_median,trans_mean,trans_std,trans_median,"
                          "high_error_rate,well_initialized_rate,failures\n";
        for (const auto &row : rows) {
            const auto r = row.report.rotation(mode), tr = row.report.translation(mode);
            out += "\"" + row.arm.name + "\"," + (row.arm.polycrop ? "on" : "off") + "," + to_string(row.arm.variant) +
                   "," + detail::csv_number(r.mean) + "," + detail::csv_number(r.std) + "," +
                   detail::csv_number(r.median) + "," + detail::csv_number(tr.mean) + "," +
                   detail::csv_number(tr.std) + "," + detail::csv_number(tr.median) + "," +
                   detail::csv_number(high_error_rate(row.report)) + "," +
                   detail::csv_number(well_initialized_rate(row.report)) + "," +
                   std::to_string(row.report.failures(mode)) + "\n";
        }
        return out;
    }
};

inline std::string arm_slug(std::size_t index, const AblationArm &arm) {
    return "arm" + std::to_string(index) + "_" + (arm.polycrop ? "polycrop" : "nopolycrop") + "_" +
           to_string(arm.variant);
}

inline AblationResult ablation_run(const AblationConfig &config, const std::vector<PhantomSample> &train_samples,
                                   const std::vector<PhantomSample> &eval_cases, const std::filesystem::path &out_dir) {
    if (config.arms.empty()) {
        throw std::invalid_argument("ablation needs at least one arm");
    }
    AblationResult result;
    result.high_error = config.high_error;
    result.well_initialized = config.well_initialized;
    result.mode = config.mode;
    for (std::size_t k = 0; k < config.arms.size(); ++k) {
        const auto &arm = config.arms[k];
        TrainConfig tc = config.base;
        tc.polycrop_enabled = arm.polycrop;
        tc.variant = arm.variant;
        const auto dir = out_dir / arm_slug(k, arm);
        log::info("ablation arm '" + arm.name + "' -> " + dir.string());
        const auto trained = train(tc, dir, train_samples);
        const NetworkFeatures features(load_model(trained.final_checkpoint),
                                       read_checkpoint_manifest(trained.final_checkpoint));
        auto report = evaluate(features, eval_cases, config.eval);
        write_report(dir, report);
        result.rows.push_back({arm, std::move(report)});
    }
    std::ofstream(out_dir / "ablation.txt", std::ios::binary) << result.render_text();
    std::ofstream(out_dir / "ablation.csv", std::ios::binary) << result.render_csv();
    return result;
}

} // namespace kpreg
