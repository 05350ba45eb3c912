#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "kpreg/pipeline.hpp"

using namespace kpreg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string &name) {
    auto p = fs::temp_directory_path() / ("kpreg_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path &p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

PhantomSpec toy_spec(std::uint64_t seed) {
    PhantomSpec s;
    s.seed = seed;
    s.volume_dims = {32, 32, 32};
    s.n_ellipsoids = 6;
    s.n_tubes = 2;
    s.sweep.frames = 6;
    s.sweep.frame_dims = {32, 32};
    s.sweep.max_offset_mm = 3.0;
    s.sweep.intercostal_probability = 0.5;
    return s;
}

// Frames land exactly on MR cell centres: no tilt, offset or drift and a
// 10 mm frame step.
PhantomSpec aligned_spec(std::uint64_t seed, bool identity) {
    PhantomSpec s;
    s.seed = seed;
    s.n_ellipsoids = 4;
    s.n_tubes = 1;
    s.sweep.frames = 4;
    s.sweep.step_mm = 10.0;
    s.sweep.max_tilt_deg = 0.0;
    s.sweep.max_inplane_deg = 0.0;
    s.sweep.max_offset_mm = 0.0;
    s.sweep.drift_deg_per_frame = 0.0;
    s.sweep.force_class = SweepClass::transversal;
    s.sweep.fan_mask = false;
    s.sweep.identity_registration = identity;
    return s;
}

TrainConfig toy_train_config(const fs::path &data, std::size_t steps) {
    TrainConfig c;
    c.dataset = data.string();
    c.variant = NetworkVariant::small;
    c.steps = steps;
    c.seed = 5;
    c.checkpoint_interval = 1000;
    return c;
}

const fs::path &toy_dataset() {
    static const fs::path root = [] {
        auto r = temp_dir("toy_data");
        generate_dataset(r, toy_spec(17), 4);
        return r;
    }();
    return root;
}

class ZeroFeatures final : public FeatureSource {
  public:
    DescriptorGrid volume_features(const PhantomSample &s) const override {
        return zeros(s.mr_volume, Dimensionality::three_d, RigidPose{});
    }
    DescriptorGrid frame_features(const PhantomSample &, const UsFrame &f) const override {
        return zeros(f.image, Dimensionality::two_d, f.geometry.frame_to_world);
    }
    float alpha() const override { return 0.0f; }
    float temperature() const override { return 1.0f; }
    nlohmann::json manifest() const override { return {{"kind", "zero"}}; }

  private:
    static DescriptorGrid zeros(const ScalarImage &img, Dimensionality d, const RigidPose &pose) {
        DescriptorGrid g;
        g.dimensionality = d;
        g.grid_dims = grid_extents_for(img.extents_xyz());
        g.spacing_mm = img.spacing_mm;
        g.descriptor_dim = 4;
        g.descriptors = Tensor({g.cells(), 4}, 0.0f);
        g.pose = pose;
        return g;
    }
};

// Cells of the table row starting with `label` (columns are separated by 2+ spaces).
std::vector<std::string> cells_of(const std::string &text, const std::string &label) {
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
        if (line.rfind(label, 0) != 0) {
            continue;
        }
        std::vector<std::string> cells;
        std::string rest = line.substr(label.size());
        for (std::size_t pos = 0; pos < rest.size();) {
            const auto start = rest.find_first_not_of(' ', pos);
            if (start == std::string::npos) {
                break;
            }
            auto end = rest.find("  ", start);
            end = end == std::string::npos ? rest.size() : end;
            cells.push_back(rest.substr(start, end - start));
            pos = end;
        }
        return cells;
    }
    return {};
}

CaseResult made_up_case(const std::string &id, double rot, double trans, bool ok = true) {
    CaseResult c;
    c.id = id;
    c.all_frames.ok = ok;
    c.all_frames.rot_deg = rot;
    c.all_frames.trans_mm = trans;
    c.single_frame = c.all_frames;
    c.single_frame.rot_deg = 2 * rot;
    c.single_frame.trans_mm = 2 * trans;
    if (!ok) {
        c.all_frames.error = c.single_frame.error = "no consensus";
    }
    return c;
}

} // namespace

TEST(TrainConfig, JsonRoundTripAndValidation) {
    TrainConfig c;
    c.dataset = "/data";
    c.variant = NetworkVariant::small;
    c.polycrop_enabled = false;
    c.beta = 0.5;
    c.sink_policy = SinkPolicy::strict_eq4;
    c.steps = 123;
    c.seed = 9;
    c.frames_per_step = 4;
    const auto j = to_json(c);
    EXPECT_EQ(to_json(train_config_from_json(j)), j);
    EXPECT_EQ(j.at("batch"), 1);
    auto bad = c;
    bad.beta = -1.0;
    try {
        bad.validate();
        FAIL();
    } catch (const std::invalid_argument &e) {
        EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
    }
    bad = c;
    bad.learning_rate = 0.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = c;
    bad.frames_per_step = 0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Checkpoint, RoundTripsParameters) {
    const auto dir = temp_dir("ckpt");
    RegistrationModel model(NetworkConfig::for_variant(NetworkVariant::small), 3);
    model.alpha().mutable_value()[0] = 0.75f;
    save_checkpoint(dir, model, 42);
    const auto back = load_model(dir);
    const auto a = model.parameters(), b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].name, b[k].name);
        EXPECT_EQ(a[k].value.value(), b[k].value.value()) << a[k].name;
    }
    const auto m = read_checkpoint_manifest(dir);
    EXPECT_EQ(m.at("step"), 42);
    EXPECT_EQ(m.at("seed"), 3);
    EXPECT_EQ(m.at("network").at("variant"), "small");
    fs::remove_all(dir);
}

TEST(Checkpoint, ArchitectureMismatchRejected) {
    const auto dir = temp_dir("ckpt_mismatch");
    save_checkpoint(dir, RegistrationModel(NetworkConfig::for_variant(NetworkVariant::small), 1), 0);
    auto m = read_checkpoint_manifest(dir);
    m["network"] = to_json(NetworkConfig::for_variant(NetworkVariant::standard));
    std::ofstream(dir / "manifest.json") << m.dump();
    EXPECT_THROW(load_model(dir), CheckpointError);
    EXPECT_THROW(load_model(dir / "missing"), CheckpointError);
    fs::remove_all(dir);
}

TEST(Train, ZeroStepsWritesInitialization) {
    const auto out = temp_dir("train0");
    const auto r = train(toy_train_config(toy_dataset(), 0), out);
    const auto loaded = load_model(r.final_checkpoint);
    const RegistrationModel init(NetworkConfig::for_variant(NetworkVariant::small), 5);
    const auto a = loaded.parameters(), b = init.parameters();
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].value.value(), b[k].value.value()) << a[k].name;
    }
    const auto run = detail::read_json(out / "run.json");
    EXPECT_EQ(run.at("config"), to_json(toy_train_config(toy_dataset(), 0)));
    EXPECT_EQ(run.at("code_version"), code_version);
    EXPECT_TRUE(run.contains("threads"));
    fs::remove_all(out);
}

TEST(Train, LossDecreasesOnToyDataset) {
    const auto out = temp_dir("train200");
    const auto r = train(toy_train_config(toy_dataset(), 200), out);
    ASSERT_GE(r.loss_log.size(), 2u);
    EXPECT_EQ(r.loss_log.front().first, 1u);
    EXPECT_EQ(r.loss_log.back().first, 200u);
    EXPECT_LT(r.loss_log.back().second, r.loss_log.front().second);
    // Logged every 10 steps after the first.
    EXPECT_EQ(r.loss_log.size(), 21u);
    EXPECT_EQ(std::count(std::istreambuf_iterator<char>(*std::make_unique<std::ifstream>(out / "loss.csv")),
                         std::istreambuf_iterator<char>(), '\n'),
              22);
    fs::remove_all(out);
}

TEST(Train, IdenticalSeedsGiveIdenticalCheckpointBytes) {
    const auto a = temp_dir("det_a"), b = temp_dir("det_b");
    auto c = toy_train_config(toy_dataset(), 15);
    c.checkpoint_interval = 10;
    train(c, a);
    train(c, b);
    std::size_t compared = 0;
    for (const auto &e : fs::recursive_directory_iterator(a / "final")) {
        if (e.is_regular_file()) {
            const auto rel = fs::relative(e.path(), a);
            EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
            ++compared;
        }
    }
    EXPECT_GT(compared, 10u);
    EXPECT_TRUE(fs::exists(a / "checkpoints" / "step_000010" / "manifest.json"));
    EXPECT_EQ(slurp(a / "loss.csv"), slurp(b / "loss.csv"));
    c.seed = 6;
    const auto d = temp_dir("det_c");
    train(c, d);
    EXPECT_NE(slurp(a / "final" / "alpha.cmt") + slurp(a / "final" / "us.head.weight.cmt"),
              slurp(d / "final" / "alpha.cmt") + slurp(d / "final" / "us.head.weight.cmt"));
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(d);
}

TEST(Train, ExtraFramesShareTheStepSample) {
    const auto samples = load_dataset(toy_dataset());
    const auto c = toy_train_config(toy_dataset(), 1);
    std::vector<SweepClass> classes;
    for (const auto &s : samples) {
        classes.push_back(s.sweep_class);
    }
    const BalancedSampler sampler(classes, SweepClass::intercostal, c.balance_ratio);
    std::set<std::size_t> frames;
    for (std::size_t step = 0; step < 10; ++step) {
        const auto first = draw_training_example(c, samples, sampler, step);
        for (std::size_t slot = 1; slot < 4; ++slot) {
            const auto ex = draw_training_example(c, samples, sampler, step, slot);
            EXPECT_EQ(ex.sample, first.sample);
            frames.insert(ex.frame_index);
        }
    }
    EXPECT_GT(frames.size(), 1u);
}

TEST(Train, SeveralFramesPerStepTrain) {
    const auto one = temp_dir("fps1"), three = temp_dir("fps3");
    auto c = toy_train_config(toy_dataset(), 20);
    train(c, one);
    c.frames_per_step = 3;
    const auto r3 = train(c, three);
    EXPECT_TRUE(std::isfinite(r3.loss_log.back().second));
    EXPECT_NE(slurp(one / "final" / "us.head.weight.cmt"), slurp(three / "final" / "us.head.weight.cmt"));
    EXPECT_EQ(detail::read_json(three / "run.json").at("config").at("frames_per_step"), 3);
    fs::remove_all(one);
    fs::remove_all(three);
}

TEST(Train, NonFiniteLossAbortsWithStepAndCheckpoint) {
    const auto out = temp_dir("nonfinite");
    auto c = toy_train_config(toy_dataset(), 50);
    c.learning_rate = 1e30;
    c.checkpoint_interval = 1;
    try {
        train(c, out);
        FAIL() << "expected NonFiniteLoss";
    } catch (const NonFiniteLoss &e) {
        EXPECT_GT(e.step(), 1u);
        EXPECT_NE(std::string(e.what()).find("step " + std::to_string(e.step())), std::string::npos);
        EXPECT_TRUE(fs::exists(fs::path(e.last_checkpoint()) / "manifest.json")) << e.what();
        EXPECT_FALSE(fs::exists(out / "final"));
    }
    fs::remove_all(out);
}

TEST(Train, MissingDatasetNamesPath) {
    auto c = toy_train_config("/nonexistent/kpreg_data", 1);
    try {
        train(c, temp_dir("missing"));
        FAIL();
    } catch (const DatasetError &e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/kpreg_data"), std::string::npos);
    }
}

TEST(Train, AugmentedExamplesKeepGeometryConsistent) {
    const auto samples = load_dataset(toy_dataset());
    auto c = toy_train_config(toy_dataset(), 1);
    c.crop_min_keep = 0.6;
    std::vector<SweepClass> classes;
    for (const auto &s : samples) {
        classes.push_back(s.sweep_class);
    }
    const BalancedSampler sampler(classes, SweepClass::intercostal, c.balance_ratio);
    for (std::size_t step = 0; step < 20; ++step) {
        const auto ex = draw_training_example(c, samples, sampler, step);
        const auto &orig = ex.sample->sweep[ex.frame_index];
        for (auto e : ex.us_image.extents_xyz()) {
            EXPECT_EQ(e % 8, 0u);
        }
        // Any unmasked, unpadded pixel maps to the same physical point as its source pixel.
        const Vec3 p = ex.geometry.lift_pixel(0, 0);
        bool found = false;
        for (std::size_t v = 0; v < orig.image.extent(1) && !found; ++v) {
            for (std::size_t u = 0; u < orig.image.extent(0) && !found; ++u) {
                found = (orig.geometry.lift_pixel(u, v) - p).norm() < 1e-9;
            }
        }
        EXPECT_TRUE(found);
    }
}

TEST(Register, OracleRecoversIdentityExactly) {
    const auto s = generate_phantom(aligned_spec(3, true));
    const OracleFeatures oracle;
    for (auto mode : {RegistrationMode::all_frames, RegistrationMode::single_frame}) {
        const auto r = register_sweep(oracle, s, mode);
        const auto e = pose_error(r.pose, RigidPose{}, {sweep_reference_point(s)});
        EXPECT_LT(e.rot_deg, 1e-9);
        EXPECT_LT(e.trans_mm, 1e-9);
        EXPECT_EQ(r.inliers.size(), r.correspondences.size());
    }
}

TEST(Register, OracleRecoversRandomRegistration) {
    const auto s = generate_phantom(aligned_spec(4, false));
    const auto r = register_sweep(OracleFeatures{}, s, RegistrationMode::all_frames);
    const auto e = pose_error(r.pose, s.gt_registration, {sweep_reference_point(s)});
    EXPECT_LT(e.rot_deg, 1e-6);
    EXPECT_LT(e.trans_mm, 1e-6);
}

TEST(Register, AllFramesIsSupersetOfSingleFrame) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        PhantomSpec spec;
        spec.seed = seed;
        spec.n_ellipsoids = 3;
        spec.n_tubes = 1;
        spec.sweep.frames = 6;
        const auto s = generate_phantom(spec);
        const OracleFeatures oracle;
        const auto single = register_sweep(oracle, s, RegistrationMode::single_frame);
        const auto all = register_sweep(oracle, s, RegistrationMode::all_frames);
        EXPECT_GE(all.correspondences.size(), single.correspondences.size());
        EXPECT_EQ(single.frames.size(), 1u);
        EXPECT_EQ(single.frames[0].frame_index, 3u);
        EXPECT_EQ(all.frames.size(), 6u);
        for (const auto &c : single.correspondences) {
            EXPECT_NE(std::find_if(all.correspondences.begin(), all.correspondences.end(),
                                   [&](const Correspondence3D &d) {
                                       return d.us_point_mm == c.us_point_mm && d.mr_point_mm == c.mr_point_mm;
                                   }),
                      all.correspondences.end());
        }
    }
}

TEST(Register, FrameOrderDoesNotMatter) {
    PhantomSpec spec;
    spec.seed = 9;
    spec.n_ellipsoids = 3;
    spec.n_tubes = 1;
    spec.sweep.frames = 5;
    const auto s = generate_phantom(spec);
    const OracleFeatures oracle;
    const RegisterConfig cfg;
    const auto a = register_frames(oracle, s, {0, 1, 2, 3, 4}, cfg);
    const auto b = register_frames(oracle, s, {3, 1, 4, 0, 2}, cfg);
    ASSERT_EQ(a.correspondences.size(), b.correspondences.size());
    for (std::size_t k = 0; k < a.correspondences.size(); ++k) {
        EXPECT_EQ(a.correspondences[k].us_point_mm, b.correspondences[k].us_point_mm);
        EXPECT_EQ(a.correspondences[k].mr_point_mm, b.correspondences[k].mr_point_mm);
    }
    EXPECT_EQ(a.pose.matrix(), b.pose.matrix());
}

TEST(Register, NoConsensusCarriesDiagnostics) {
    const auto s = generate_phantom(aligned_spec(5, true));
    try {
        register_sweep(ZeroFeatures{}, s, RegistrationMode::all_frames);
        FAIL() << "expected RegistrationFailure";
    } catch (const RegistrationFailure &e) {
        ASSERT_EQ(e.frames().size(), 4u);
        for (const auto &f : e.frames()) {
            EXPECT_EQ(f.matches, 0u);
        }
        EXPECT_NE(std::string(e.what()).find("matches per frame"), std::string::npos);
    }
    EXPECT_THROW(register_sweep(ZeroFeatures{}, s, RegistrationMode::single_frame), NoConsensus);
    RegisterConfig bad;
    bad.single_frame_index = 10;
    EXPECT_THROW(register_sweep(OracleFeatures{}, s, RegistrationMode::single_frame, bad), std::out_of_range);
}

TEST(Evaluate, PerfectOracleReportsZeroAndFullGates) {
    const std::vector<PhantomSample> cases{generate_phantom(aligned_spec(6, false), "case_a")};
    const auto report = evaluate(OracleFeatures{}, cases);
    const auto text = report.render_text();
    EXPECT_EQ(cells_of(text, "Init. Rot. (deg)"), (std::vector<std::string>{"0.0 ± 0.0 (0.0)", "0.0 ± 0.0 (0.0)"}));
    EXPECT_EQ(cells_of(text, "Init. Trans. (mm)"), (std::vector<std::string>{"0.0 ± 0.0 (0.0)", "0.0 ± 0.0 (0.0)"}));
    EXPECT_EQ(cells_of(text, "Init. <10° & <10mm"), (std::vector<std::string>{"100.0%", "100.0%"}));
    EXPECT_EQ(cells_of(text, "Init. <15° & <20mm"), (std::vector<std::string>{"100.0%", "100.0%"}));
    EXPECT_EQ(report.gates, default_gates());
    EXPECT_EQ(text, evaluate(OracleFeatures{}, cases).render_text());
}

TEST(Evaluate, FormatsMeanStdMedian) {
    EvalReport r;
    r.cases = {made_up_case("a", 10.0, 1.0), made_up_case("b", 20.0, 2.0), made_up_case("c", 30.0, 30.0)};
    EXPECT_EQ(format_aggregate(r.rotation(RegistrationMode::all_frames)), "20.0 ± 8.2 (20.0)");
    EXPECT_EQ(format_aggregate(r.translation(RegistrationMode::all_frames)), "11.0 ± 13.4 (2.0)");
    EXPECT_EQ(format_aggregate(aggregate({16.0, 4.4, 12.4, 32.0})), "16.2 ± 10.0 (14.2)");
    // Strict AND: exactly 10° does not pass a 10° gate.
    EXPECT_DOUBLE_EQ(r.success_rate(RegistrationMode::all_frames, {10.0, 10.0}), 0.0);
    EXPECT_DOUBLE_EQ(r.success_rate(RegistrationMode::all_frames, {15.0, 20.0}), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.success_rate(RegistrationMode::all_frames, {30.5, 20.0}), 2.0 / 3.0);
}

TEST(Evaluate, FailuresCountAgainstGatesButNotAggregates) {
    EvalReport r;
    r.cases = {made_up_case("a", 1.0, 1.0), made_up_case("b", 3.0, 3.0), made_up_case("c", 0, 0, false)};
    EXPECT_EQ(r.failures(RegistrationMode::all_frames), 1u);
    EXPECT_EQ(format_aggregate(r.rotation(RegistrationMode::all_frames)), "2.0 ± 1.0 (2.0)");
    EXPECT_DOUBLE_EQ(r.success_rate(RegistrationMode::all_frames, {10.0, 10.0}), 2.0 / 3.0);
    EXPECT_EQ(r.median_with_failures(RegistrationMode::all_frames, true), 3.0);
    const auto text = r.render_text();
    EXPECT_EQ(cells_of(text, "Failures"), (std::vector<std::string>{"1/3", "1/3"}));
    EvalReport none;
    none.cases = {made_up_case("x", 0, 0, false)};
    EXPECT_NE(none.render_text().find("n/a"), std::string::npos);
}

TEST(Evaluate, ReportIsRecomputableFromPersistedCases) {
    const auto dir = temp_dir("report");
    std::vector<PhantomSample> cases;
    for (std::uint64_t k = 0; k < 3; ++k) {
        PhantomSpec spec;
        spec.seed = 40 + k;
        spec.n_ellipsoids = 3;
        spec.n_tubes = 1;
        spec.sweep.frames = 4;
        cases.push_back(generate_phantom(spec, case_id(k)));
    }
    EvalConfig cfg;
    cfg.gates.push_back({1.0, 1.0});
    const auto report = evaluate(OracleFeatures{}, cases, cfg);
    write_report(dir, report);
    const auto back = read_report(dir);
    EXPECT_EQ(back.render_text(), report.render_text());
    EXPECT_EQ(back.render_csv(), report.render_csv());
    EXPECT_EQ(slurp(dir / "report.txt"), report.render_text());
    EXPECT_TRUE(fs::exists(dir / "eval" / "case_001.json"));
    fs::remove_all(dir);
}

TEST(Evaluate, RefinerHookIsApplied) {
    const std::vector<PhantomSample> cases{generate_phantom(aligned_spec(7, true), "c")};
    const auto registrar = [](const PhantomSample &s, RegistrationMode m) {
        return register_sweep(OracleFeatures{}, s, m);
    };
    const auto shift = [](const PhantomSample &, const RigidPose &p) {
        return RigidPose::from_translation(Vec3(0, 0, 3)) * p;
    };
    const auto r = evaluate_with(cases, registrar, default_gates(), {}, shift);
    EXPECT_NEAR(r.cases[0].all_frames.trans_mm, 3.0, 1e-9);
    EXPECT_THROW(evaluate_with({}, registrar, default_gates()), std::invalid_argument);
}

TEST(Heatmap, OracleRowIsDeltaAtTrueCell) {
    const auto dir = temp_dir("heatmap");
    const auto s = generate_phantom(aligned_spec(8, false));
    const OracleFeatures oracle;
    const std::size_t cell = 27;
    const auto h = export_heatmap(oracle, s, 1, cell, dir);
    const auto gt = derive_ground_truth(s, s.sweep[1].geometry, grid_layout_for(s.sweep[1].image),
                                        grid_layout_for(s.mr_volume));
    ASSERT_TRUE(gt[cell].mr_cell.has_value());
    EXPECT_EQ(h.argmax_cell, *gt[cell].mr_cell);
    for (std::size_t j = 0; j < h.volume.size(); ++j) {
        EXPECT_EQ(h.volume[j], j == h.argmax_cell ? 100.0f : 0.0f);
    }
    ASSERT_TRUE(h.match.has_value());
    EXPECT_EQ(h.match->mr_cell, h.argmax_cell);
    fs::remove_all(dir);
}

TEST(Heatmap, VolumeEqualsSimilarityRowAndRoundTrips) {
    const auto dir = temp_dir("heatmap_net");
    PhantomSpec spec = toy_spec(3);
    const auto s = generate_phantom(spec);
    const NetworkFeatures net(RegistrationModel(NetworkConfig::for_variant(NetworkVariant::small), 4));
    const auto h = export_heatmap(net, s, 2, 5, dir);
    const auto sim = similarity(net.frame_features(s, s.sweep[2]), net.volume_features(s), net.alpha());
    for (std::size_t j = 0; j < h.volume.size(); ++j) {
        ASSERT_EQ(h.volume[j], sim.values(5, static_cast<Eigen::Index>(j)));
    }
    const auto back = cmt::read(h.volume_path);
    EXPECT_EQ(back, h.volume);
    EXPECT_EQ(argmax_cell(back), h.argmax_cell);
    if (h.match) {
        EXPECT_EQ(h.match->mr_cell, h.argmax_cell);
    }
    // PGM headers carry the MR grid extents along the sliced axes.
    const auto xy = slurp(h.slice_xy_path), xz = slurp(h.slice_xz_path);
    EXPECT_EQ(xy.substr(0, 11), "P5\n4 4\n255\n");
    EXPECT_EQ(xy.size(), std::string("P5\n4 4\n255\n").size() + 16);
    EXPECT_EQ(xz.size(), std::string("P5\n4 4\n255\n").size() + 16);
    EXPECT_THROW(export_heatmap(net, s, 2, 16, dir), std::out_of_range);
    fs::remove_all(dir);
}

TEST(Ablation, DefaultsMirrorComparisonTable) {
    const auto arms = default_ablation_arms();
    ASSERT_EQ(arms.size(), 3u);
    EXPECT_EQ(arms[0].name, "No polycrop + standard net");
    EXPECT_FALSE(arms[0].polycrop);
    EXPECT_EQ(arms[0].variant, NetworkVariant::standard);
    EXPECT_EQ(arms[1].name, "Polycrop + standard net");
    EXPECT_TRUE(arms[1].polycrop);
    EXPECT_EQ(arms[2].name, "Polycrop + smaller net");
    EXPECT_EQ(arms[2].variant, NetworkVariant::small);
    const AblationConfig cfg;
    EXPECT_EQ(cfg.high_error, (Gate{50.0, 50.0}));
    EXPECT_EQ(cfg.well_initialized, (Gate{25.0, 25.0}));
}

TEST(Ablation, IdenticalArmsGiveIdenticalRows) {
    const auto dir = temp_dir("ablation");
    const auto train_samples = load_dataset(toy_dataset());
    std::vector<PhantomSample> eval_cases{generate_phantom(toy_spec(90), "held_0"),
                                          generate_phantom(toy_spec(91), "held_1")};
    AblationConfig cfg;
    cfg.base = toy_train_config(toy_dataset(), 3);
    cfg.arms = {{"A", true, NetworkVariant::small}, {"A again", true, NetworkVariant::small}};
    const auto r = ablation_run(cfg, train_samples, eval_cases, dir);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_EQ(r.rows[0].report.render_csv(), r.rows[1].report.render_csv());
    const auto text = r.render_text();
    EXPECT_NE(text.find("Init. >50° or >50mm"), std::string::npos) << text;
    EXPECT_NE(text.find("Init. <25° & <25mm"), std::string::npos) << text;
    EXPECT_TRUE(fs::exists(dir / "ablation.txt"));
    EXPECT_TRUE(fs::exists(dir / "ablation.csv"));
    fs::remove_all(dir);
}

TEST(Ablation, HighErrorCountsFailures) {
    AblationResult a;
    EvalReport r;
    r.cases = {made_up_case("a", 60.0, 1.0), made_up_case("b", 1.0, 1.0), made_up_case("c", 0, 0, false),
               made_up_case("d", 10.0, 24.0)};
    EXPECT_DOUBLE_EQ(a.high_error_rate(r), 0.5);
    EXPECT_DOUBLE_EQ(a.well_initialized_rate(r), 0.5);
}
