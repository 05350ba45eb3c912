// kpreg command-line entry point.
//
// Config precedence: built-in defaults < --from-manifest < --config < explicit flags.
// Exit codes: 0 success, 1 user error, 2 runtime failure.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "kpreg/dataset.hpp"
#include "kpreg/log.hpp"
#include "kpreg/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kpreg;

namespace {

class UserError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class Kind { text, count, real, onoff, frame, gates, gate, ids };

struct Flag {
    std::string name; // without leading dashes
    std::string key;  // config key
    Kind kind;
    std::string def;
    std::string help;
};

std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

double parse_real(const std::string &s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) {
        throw std::invalid_argument("not a number: '" + s + "'");
    }
    return v;
}

std::uint64_t parse_count(const std::string &s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
        throw std::invalid_argument("not a non-negative integer: '" + s + "'");
    }
    return std::stoull(s);
}

json parse_gate(const std::string &s) {
    const auto parts = split(s, ',');
    if (parts.size() != 2) {
        throw std::invalid_argument("gate must be ROT_DEG,TRANS_MM: '" + s + "'");
    }
    return json::array({parse_real(parts[0]), parse_real(parts[1])});
}

json typed_value(const Flag &f, const std::string &raw) {
    try {
        switch (f.kind) {
        case Kind::text:
            return raw;
        case Kind::count:
            return parse_count(raw);
        case Kind::real:
            return parse_real(raw);
        case Kind::onoff:
            if (raw == "on" || raw == "true") {
                return true;
            }
            if (raw == "off" || raw == "false") {
                return false;
            }
            throw std::invalid_argument("expected on|off, got '" + raw + "'");
        case Kind::frame:
            return raw == "middle" ? json() : json(parse_count(raw));
        case Kind::gate:
            return parse_gate(raw);
        case Kind::gates: {
            json out = json::array();
            for (const auto &g : split(raw, ';')) {
                out.push_back(parse_gate(g));
            }
            return out;
        }
        case Kind::ids: {
            json out = json::array();
            for (const auto &id : split(raw, ',')) {
                out.push_back(id);
            }
            return out;
        }
        }
    } catch (const std::exception &e) {
        throw UserError("--" + f.name + ": " + e.what());
    }
    return nullptr;
}

const char *type_name(Kind k) {
    switch (k) {
    case Kind::count:
        return "UINT";
    case Kind::real:
        return "FLOAT";
    case Kind::onoff:
        return "on|off";
    case Kind::frame:
        return "UINT|middle";
    case Kind::gate:
        return "ROT,TRANS";
    case Kind::gates:
        return "ROT,TRANS;...";
    case Kind::ids:
        return "ID,...";
    case Kind::text:
        break;
    }
    return "TEXT";
}

json read_json_file(const fs::path &path, const std::string &flag) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw UserError(flag + ": cannot open " + path.string());
    }
    try {
        return json::parse(is);
    } catch (const json::exception &e) {
        throw UserError(flag + ": malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path &path, const json &j) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw UserError("cannot write " + path.string());
    }
    os << j.dump(2) << '\n';
}

std::string require_text(const json &cfg, const std::string &key, const std::string &flag) {
    const auto v = cfg.value(key, std::string());
    if (v.empty()) {
        throw UserError("--" + flag + " is required");
    }
    return v;
}

Gate gate_from_json(const json &j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

// ----------------------------------------------------------- flag tables

std::vector<Flag> registration_flags() {
    return {{"threshold", "match_threshold", Kind::real, "0.2", "match confidence threshold"},
            {"mutual", "mutual", Kind::onoff, "on", "keep only mutual-argmax matches (on|off)"},
            {"ransac-iterations", "ransac_iterations", Kind::count, "1000", "RANSAC iterations"},
            {"ransac-threshold", "ransac_threshold_mm", Kind::real, "10", "RANSAC inlier threshold in mm"},
            {"ransac-seed", "ransac_seed", Kind::count, "0", "RANSAC seed"},
            {"frame", "single_frame_index", Kind::frame, "middle", "frame used by single-frame mode"}};
}

std::vector<Flag> training_flags(bool with_arm_axes) {
    std::vector<Flag> f{{"data", "dataset", Kind::text, "", "training dataset directory"},
                        {"ids", "sample_ids", Kind::ids, "", "comma-separated sample ids (empty: all)"}};
    if (with_arm_axes) {
        f.push_back({"variant", "variant", Kind::text, "standard", "network variant (standard|small)"});
        f.push_back({"polycrop", "polycrop_enabled", Kind::onoff, "on", "PolyCrop augmentation (on|off)"});
    }
    std::vector<Flag> rest{
        {"noise-sigma", "noise_sigma", Kind::real, "0.02", "Gaussian noise augmentation sigma"},
        {"crop", "crop_enabled", Kind::onoff, "on", "random crop augmentation (on|off)"},
        {"crop-min-keep", "crop_min_keep", Kind::real, "0.8", "minimum kept fraction per crop axis"},
        {"beta", "beta", Kind::real, "1", "ground-truth weight decay per grid cell"},
        {"sink-policy", "sink_policy", Kind::text, "sink_only_when_outside",
         "sink weighting (strict_eq4|sink_only_when_outside)"},
        {"temperature", "temperature", Kind::real, "1", "similarity temperature"},
        {"lr", "learning_rate", Kind::real, "0.001", "Adam learning rate"},
        {"steps", "steps", Kind::count, "20000", "optimizer steps"},
        {"frames-per-step", "frames_per_step", Kind::count, "1", "frames scored per optimizer step"},
        {"seed", "seed", Kind::count, "0", "training seed"},
        {"checkpoint-interval", "checkpoint_interval", Kind::count, "1000", "steps between checkpoints"},
        {"log-interval", "log_interval", Kind::count, "10", "steps between loss log entries"},
        {"balance-ratio", "balance_ratio", Kind::real, "0.5", "minority sweep-class sampling ratio"}};
    f.insert(f.end(), rest.begin(), rest.end());
    return f;
}

// ------------------------------------------------------------- builders

PhantomSpec build_phantom_spec(const json &cfg) {
    PhantomSpec spec;
    if (cfg.contains("phantom")) {
        spec = phantom_spec_from_json(cfg.at("phantom"));
    } else if (!cfg.value("spec", std::string()).empty()) {
        spec = phantom_spec_from_json(read_json_file(cfg.at("spec").get<std::string>(), "--spec"));
    }
    if (cfg.contains("seed")) {
        spec.seed = cfg.at("seed").get<std::uint64_t>();
    }
    if (cfg.contains("dims")) {
        const auto d = cfg.at("dims").get<std::size_t>();
        spec.volume_dims = {d, d, d};
    }
    if (cfg.contains("frames")) {
        spec.sweep.frames = cfg.at("frames").get<std::size_t>();
    }
    if (cfg.contains("deform")) {
        const auto mm = cfg.at("deform").get<double>();
        if (mm < 0.0) {
            throw std::invalid_argument("deform must be >= 0 mm");
        }
        if (mm > 0.0) {
            DeformationSpec d;
            d.max_displacement_mm = mm;
            spec.deformation = d;
        } else {
            spec.deformation.reset();
        }
    }
    spec.validate();
    return spec;
}

RegisterConfig build_register_config(const json &cfg) { return register_config_from_json(cfg); }

TrainConfig build_train_config(const json &cfg) { return train_config_from_json(cfg); }

EvalConfig build_eval_config(const json &cfg) {
    EvalConfig e;
    e.registration = build_register_config(cfg);
    if (cfg.contains("gates")) {
        e.gates.clear();
        for (const auto &g : cfg.at("gates")) {
            e.gates.push_back(gate_from_json(g));
        }
    }
    return e;
}

AblationConfig build_ablation_config(const json &cfg) {
    AblationConfig a;
    a.base = build_train_config(cfg);
    a.eval = build_eval_config(cfg);
    a.mode = registration_mode_from_string(cfg.value("mode", std::string("all")));
    if (cfg.contains("high_error")) {
        a.high_error = gate_from_json(cfg.at("high_error"));
    }
    if (cfg.contains("well_initialized")) {
        a.well_initialized = gate_from_json(cfg.at("well_initialized"));
    }
    return a;
}

// --------------------------------------------------------------- runners

struct Context {
    fs::path out;
    std::size_t threads = 1;
    std::string command;
};

std::vector<PhantomSample> load_cases(const fs::path &root, const json &ids) {
    if (ids.is_array() && !ids.empty()) {
        return load_dataset(root, ids.get<std::vector<std::string>>());
    }
    return load_dataset(root);
}

int run_gen_data(const json &cfg, const Context &ctx) {
    const auto spec = build_phantom_spec(cfg);
    const auto samples = cfg.value("samples", std::uint64_t{20});
    json resolved{{"samples", samples}, {"phantom", to_json(spec)}};
    const auto manifest = run_manifest(ctx.command, resolved, ctx.threads);
    const auto index = generate_dataset(ctx.out, spec, samples, manifest);
    write_json_file(ctx.out / "run.json", manifest);
    log::info("wrote " + std::to_string(index.samples.size()) + " samples to " + ctx.out.string());
    return 0;
}

int run_train(const json &cfg, const Context &ctx) {
    auto tc = build_train_config(cfg);
    if (tc.dataset.empty()) {
        throw UserError("--data is required");
    }
    const auto r = train(tc, ctx.out, ctx.threads);
    log::info("final checkpoint " + r.final_checkpoint.string());
    return 0;
}

int run_register(const json &cfg, const Context &ctx) {
    const auto rc = build_register_config(cfg);
    const auto mode = registration_mode_from_string(cfg.value("mode", std::string("all")));
    const fs::path ckpt = require_text(cfg, "ckpt", "ckpt");
    const fs::path case_dir = require_text(cfg, "case", "case");
    const auto features = load_feature_source(ckpt);
    const auto sample = read_sample(case_dir);
    write_json_file(fs::path(ctx.out).replace_extension(".run.json"),
                    run_manifest(ctx.command, cfg, ctx.threads));
    json out{{"case", sample.id}, {"mode", to_string(mode)}};
    try {
        const auto r = register_sweep(*features, sample, mode, rc);
        out["registration"] = to_json(r);
        const auto e = pose_error(r.pose, sample.gt_registration, {sweep_reference_point(sample)});
        out["error"] = {{"rot_deg", e.rot_deg}, {"trans_mm", e.trans_mm}};
        write_json_file(ctx.out, out);
        std::printf("rotation error %.1f deg, translation error %.1f mm (%zu correspondences, %zu inliers)\n",
                    e.rot_deg, e.trans_mm, r.correspondences.size(), r.inliers.size());
    } catch (const RegistrationFailure &e) {
        json frames = json::array();
        for (const auto &f : e.frames()) {
            frames.push_back({{"frame", f.frame_index}, {"matches", f.matches}});
        }
        out["failure"] = {{"message", e.what()},
                          {"correspondences", e.correspondences()},
                          {"best_inliers", e.best_inliers()},
                          {"frames", frames}};
        write_json_file(ctx.out, out);
        throw;
    }
    return 0;
}

int run_evaluate(const json &cfg, const Context &ctx) {
    const auto ec = build_eval_config(cfg);
    const auto features = load_feature_source(require_text(cfg, "ckpt", "ckpt"));
    const auto cases = load_cases(require_text(cfg, "data", "data"), cfg.value("ids", json()));
    const auto report = evaluate(*features, cases, ec);
    write_report(ctx.out, report);
    write_json_file(ctx.out / "run.json", run_manifest(ctx.command, cfg, ctx.threads));
    std::cout << report.render_text();
    return 0;
}

int run_ablate(const json &cfg, const Context &ctx) {
    const auto ac = build_ablation_config(cfg);
    if (ac.base.dataset.empty()) {
        throw UserError("--data is required");
    }
    const auto train_samples = load_training_samples(ac.base);
    const auto eval_cases = load_cases(require_text(cfg, "eval_data", "eval-data"), cfg.value("eval_ids", json()));
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec) {
        throw UserError("cannot create " + ctx.out.string());
    }
    write_json_file(ctx.out / "run.json", run_manifest(ctx.command, cfg, ctx.threads));
    const auto result = ablation_run(ac, train_samples, eval_cases, ctx.out);
    std::cout << result.render_text();
    return 0;
}

int run_heatmap(const json &cfg, const Context &ctx) {
    const auto rc = build_register_config(cfg);
    const auto features = load_feature_source(require_text(cfg, "ckpt", "ckpt"));
    const auto sample = read_sample(require_text(cfg, "case", "case"));
    const auto r = export_heatmap(*features, sample, cfg.value("frame_index", std::size_t{0}),
                                  cfg.value("us_cell", std::size_t{0}), ctx.out, rc);
    write_json_file(ctx.out / "run.json", run_manifest(ctx.command, cfg, ctx.threads));
    log::info("argmax cell " + std::to_string(r.argmax_cell) + " -> " + r.volume_path.string());
    return 0;
}

struct Command {
    std::string name;
    std::string help;
    std::vector<Flag> flags;
    std::string out_help;
    std::function<void(const json &)> check; // builds the domain config to validate values
    std::function<int(const json &, const Context &)> run;
};

std::vector<Command> commands() {
    std::vector<Command> cmds;
    cmds.push_back({"gen-data",
                    "generate a synthetic MR/US phantom dataset",
                    {{"samples", "samples", Kind::count, "20", "number of phantoms"},
                     {"seed", "seed", Kind::count, "0", "dataset seed"},
                     {"dims", "dims", Kind::count, "64", "volume edge length in voxels (spacing 1.25 mm)"},
                     {"deform", "deform", Kind::real, "0", "maximum deformation in mm (0: rigid)"},
                     {"frames", "frames", Kind::count, "16", "frames per sweep"},
                     {"spec", "spec", Kind::text, "", "phantom spec JSON used as the base"}},
                    "dataset output directory",
                    [](const json &c) { build_phantom_spec(c); },
                    run_gen_data});
    cmds.push_back({"train", "train the feature networks", training_flags(true), "run output directory",
                    [](const json &c) { build_train_config(c); }, run_train});

    auto reg = registration_flags();
    reg.insert(reg.begin(), {{"ckpt", "ckpt", Kind::text, "", "checkpoint directory"},
                             {"case", "case", Kind::text, "", "case directory"},
                             {"mode", "mode", Kind::text, "all", "registration mode (single|all)"}});
    cmds.push_back({"register", "register one sweep to its MR volume", reg, "pose JSON output file",
                    [](const json &c) {
                        build_register_config(c);
                        registration_mode_from_string(c.value("mode", std::string("all")));
                    },
                    run_register});

    auto ev = registration_flags();
    ev.insert(ev.begin(), {{"ckpt", "ckpt", Kind::text, "", "checkpoint directory"},
                           {"data", "data", Kind::text, "", "evaluation dataset directory"},
                           {"ids", "ids", Kind::ids, "", "comma-separated case ids (empty: all)"},
                           {"gates", "gates", Kind::gates, "10,10;15,20", "success gates ROT,TRANS;..."}});
    cmds.push_back({"evaluate", "evaluate a checkpoint on a dataset", ev, "report output directory",
                    [](const json &c) { build_eval_config(c); }, run_evaluate});

    auto ab = training_flags(false);
    auto ab_reg = registration_flags();
    ab.insert(ab.end(), ab_reg.begin(), ab_reg.end());
    ab.push_back({"eval-data", "eval_data", Kind::text, "", "held-out evaluation dataset directory"});
    ab.push_back({"eval-ids", "eval_ids", Kind::ids, "", "comma-separated held-out case ids (empty: all)"});
    ab.push_back({"mode", "mode", Kind::text, "all", "registration mode used for the rates (single|all)"});
    ab.push_back({"gates", "gates", Kind::gates, "10,10;15,20", "success gates ROT,TRANS;..."});
    ab.push_back({"high-error", "high_error", Kind::gate, "50,50", "high-error bound ROT,TRANS"});
    ab.push_back({"well-initialized", "well_initialized", Kind::gate, "25,25", "well-initialized gate ROT,TRANS"});
    cmds.push_back({"ablate", "train and evaluate the default ablation arms", ab, "ablation output directory",
                    [](const json &c) { build_ablation_config(c); }, run_ablate});

    std::vector<Flag> hm{{"ckpt", "ckpt", Kind::text, "", "checkpoint directory"},
                         {"case", "case", Kind::text, "", "case directory"},
                         {"frame", "frame_index", Kind::count, "0", "frame index"},
                         {"cell", "us_cell", Kind::count, "0", "ultrasound descriptor cell (flat index)"},
                         {"threshold", "match_threshold", Kind::real, "0.2", "match confidence threshold"},
                         {"mutual", "mutual", Kind::onoff, "on", "keep only mutual-argmax matches (on|off)"}};
    cmds.push_back({"heatmap", "export one similarity row as a volume and two slices", hm,
                    "heatmap output directory", [](const json &c) { build_register_config(c); }, run_heatmap});
    return cmds;
}

struct Parsed {
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option *> options;
    std::string config, manifest, out;
    std::size_t threads = 1;
    CLI::Option *threads_opt = nullptr;
};

int execute(const Command &cmd, Parsed &p) {
    json cfg = json::object();
    std::optional<std::size_t> threads;
    if (!p.manifest.empty()) {
        const auto m = read_json_file(p.manifest, "--from-manifest");
        const auto &run = m.contains("manifest") ? m.at("manifest") : m;
        if (run.value("command", std::string()) != cmd.name) {
            throw UserError("--from-manifest: " + p.manifest + " was not written by '" + cmd.name + "'");
        }
        cfg.update(run.value("config", json::object()));
        if (run.contains("threads")) {
            threads = run.at("threads").get<std::size_t>();
        }
    }
    if (!p.config.empty()) {
        const auto c = read_json_file(p.config, "--config");
        if (!c.is_object()) {
            throw UserError("--config: " + p.config + " must hold a JSON object");
        }
        cfg.update(c);
    }
    for (const auto &f : cmd.flags) {
        if (p.options.at(f.name)->count() == 0) {
            continue;
        }
        const auto v = typed_value(f, p.values.at(f.name));
        try {
            cmd.check(json{{f.key, v}});
        } catch (const std::exception &e) {
            throw UserError("--" + f.name + ": " + e.what());
        }
        cfg[f.key] = v;
    }
    try {
        cmd.check(cfg);
    } catch (const UserError &) {
        throw;
    } catch (const std::exception &e) {
        throw UserError(std::string("invalid configuration: ") + e.what());
    }
    if (p.out.empty()) {
        throw UserError("--out is required");
    }
    Context ctx;
    ctx.out = p.out;
    ctx.command = cmd.name;
    ctx.threads = p.threads_opt->count() > 0 ? p.threads : threads.value_or(1);
    if (ctx.threads == 0) {
        throw UserError("--threads must be >= 1");
    }
    return cmd.run(cfg, ctx);
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"kpreg: cross-dimensional US/MR keypoint matching and registration"};
    app.require_subcommand(1);
    const auto cmds = commands();
    std::vector<Parsed> parsed(cmds.size());
    std::vector<CLI::App *> subs;
    for (std::size_t k = 0; k < cmds.size(); ++k) {
        const auto &cmd = cmds[k];
        auto &p = parsed[k];
        auto *sub = app.add_subcommand(cmd.name, cmd.help);
        sub->add_option("--out", p.out, cmd.out_help)->type_name("PATH")->default_str("none, required");
        sub->add_option("--config", p.config, "JSON config file (flags override it)")
            ->type_name("FILE")
            ->default_str("none");
        sub->add_option("--from-manifest", p.manifest, "rerun from a persisted run.json")
            ->type_name("FILE")
            ->default_str("none");
        p.threads_opt = sub->add_option("--threads", p.threads, "worker threads (recorded in the manifest)")
                            ->capture_default_str();
        for (const auto &f : cmd.flags) {
            p.values[f.name] = f.def;
            p.options[f.name] = sub->add_option("--" + f.name, p.values[f.name], f.help)
                                    ->type_name(type_name(f.kind))
                                    ->default_str(f.def.empty() ? "none" : f.def);
        }
        subs.push_back(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 1;
    }
    try {
        for (std::size_t k = 0; k < cmds.size(); ++k) {
            if (subs[k]->parsed()) {
                return execute(cmds[k], parsed[k]);
            }
        }
    } catch (const NoConsensus &e) {
        log::error(e.what());
        return 2;
    } catch (const NonFiniteLoss &e) {
        log::error(e.what());
        return 2;
    } catch (const UserError &e) {
        log::error(e.what());
        return 1;
    } catch (const DatasetError &e) {
        log::error(e.what());
        return 1;
    } catch (const CheckpointError &e) {
        log::error(e.what());
        return 1;
    } catch (const std::invalid_argument &e) {
        log::error(e.what());
        return 1;
    } catch (const std::out_of_range &e) {
        log::error(e.what());
        return 1;
    } catch (const std::exception &e) {
        log::error(e.what());
        return 2;
    }
    return 1;
}
