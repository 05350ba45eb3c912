// On-disk dataset layout:
//   <root>/dataset.json
//   <root>/<id>/mr.cmt, mr.json, gt.json, [deformation.cmt]
//   <root>/<id>/frames/<k>.cmt, frames/<k>.json
#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "kpreg/cmt.hpp"
#include "kpreg/rng.hpp"
#include "kpreg/synthdata.hpp"

namespace kpreg {

class DatasetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_json(const std::filesystem::path &path, const nlohmann::json &j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DatasetError("cannot write " + path.string());
    }
    os << j.dump(2) << '\n';
    if (!os) {
        throw DatasetError("write failed for " + path.string());
    }
}

inline nlohmann::json read_json(const std::filesystem::path &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DatasetError("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception &e) {
        throw DatasetError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline Tensor read_tensor(const std::filesystem::path &path) {
    try {
        return cmt::read(path);
    } catch (const std::exception &e) {
        throw DatasetError(std::string(e.what()));
    }
}

} // namespace detail

inline void write_sample(const std::filesystem::path &dir, const PhantomSample &s) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "frames", ec);
    if (ec) {
        throw DatasetError("cannot create " + (dir / "frames").string() + ": " + ec.message());
    }
    cmt::write(dir / "mr.cmt", s.mr_volume.pixels);
    detail::write_json(dir / "mr.json", {{"dims", s.mr_volume.extents_xyz()}, {"spacing_mm", s.mr_volume.spacing_mm}});
    for (std::size_t k = 0; k < s.sweep.size(); ++k) {
        cmt::write(dir / "frames" / (std::to_string(k) + ".cmt"), s.sweep[k].image.pixels);
        detail::write_json(dir / "frames" / (std::to_string(k) + ".json"), to_json(s.sweep[k].geometry));
    }
    nlohmann::json gt{{"id", s.id},
                      {"seed", s.seed},
                      {"sweep_class", to_string(s.sweep_class)},
                      {"frames", s.sweep.size()},
                      {"registration", pose_to_json(s.gt_registration)},
                      {"deformation", nullptr}};
    if (s.gt_deformation) {
        const auto &d = *s.gt_deformation;
        cmt::write(dir / "deformation.cmt", d.displacements);
        gt["deformation"] = {{"file", "deformation.cmt"},
                             {"control_dims", d.control_dims},
                             {"control_spacing_mm", {d.control_spacing_mm.x(), d.control_spacing_mm.y(), d.control_spacing_mm.z()}}};
    }
    detail::write_json(dir / "gt.json", gt);
}

inline PhantomSample read_sample(const std::filesystem::path &dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw DatasetError("case directory not found: " + dir.string());
    }
    PhantomSample s;
    const auto gt = detail::read_json(dir / "gt.json");
    try {
        s.id = gt.at("id").get<std::string>();
        s.seed = gt.at("seed").get<std::uint64_t>();
        s.sweep_class = sweep_class_from_string(gt.at("sweep_class").get<std::string>());
        s.gt_registration = pose_from_json(gt.at("registration"));
        const auto mr_meta = detail::read_json(dir / "mr.json");
        s.mr_volume.pixels = detail::read_tensor(dir / "mr.cmt");
        s.mr_volume.spacing_mm = mr_meta.at("spacing_mm").get<std::vector<double>>();
        s.mr_volume.validate();
        if (s.mr_volume.extents_xyz() != mr_meta.at("dims").get<std::vector<std::size_t>>()) {
            throw DatasetError("mr.cmt extents disagree with mr.json");
        }
        const auto n = gt.at("frames").get<std::size_t>();
        for (std::size_t k = 0; k < n; ++k) {
            UsFrame f;
            f.geometry = frame_geometry_from_json(detail::read_json(dir / "frames" / (std::to_string(k) + ".json")));
            f.image.pixels = detail::read_tensor(dir / "frames" / (std::to_string(k) + ".cmt"));
            f.image.spacing_mm = {f.geometry.pixel_spacing_mm.x(), f.geometry.pixel_spacing_mm.y()};
            f.image.validate();
            s.sweep.push_back(std::move(f));
        }
        if (!gt.at("deformation").is_null()) {
            const auto &dj = gt.at("deformation");
            DeformationField d;
            d.control_dims = dj.at("control_dims").get<std::array<std::size_t, 3>>();
            const auto sp = dj.at("control_spacing_mm").get<std::vector<double>>();
            d.control_spacing_mm = Vec3(sp.at(0), sp.at(1), sp.at(2));
            d.displacements = detail::read_tensor(dir / dj.at("file").get<std::string>());
            if (d.displacements.shape() != Shape{d.control_dims[2], d.control_dims[1], d.control_dims[0], 3}) {
                throw DatasetError("deformation tensor shape disagrees with gt.json");
            }
            s.gt_deformation = std::move(d);
        }
    } catch (const DatasetError &) {
        throw;
    } catch (const std::exception &e) {
        throw DatasetError("corrupt case " + dir.string() + ": " + e.what());
    }
    return s;
}

struct DatasetEntry {
    std::string id;
    std::uint64_t seed = 0;
    SweepClass sweep_class = SweepClass::transversal;
};

struct DatasetIndex {
    std::vector<DatasetEntry> samples;
    nlohmann::json manifest; // generating command and configuration
};

inline std::string case_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%03zu", index);
    return buf;
}

inline void write_dataset_index(const std::filesystem::path &root, const DatasetIndex &index) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto &e : index.samples) {
        samples.push_back({{"id", e.id}, {"seed", e.seed}, {"sweep_class", to_string(e.sweep_class)}});
    }
    detail::write_json(root / "dataset.json", {{"manifest", index.manifest}, {"samples", samples}});
}

inline DatasetIndex read_dataset_index(const std::filesystem::path &root) {
    const auto j = detail::read_json(root / "dataset.json");
    DatasetIndex index;
    try {
        index.manifest = j.value("manifest", nlohmann::json::object());
        for (const auto &e : j.at("samples")) {
            index.samples.push_back({e.at("id").get<std::string>(), e.at("seed").get<std::uint64_t>(),
                                     sweep_class_from_string(e.at("sweep_class").get<std::string>())});
        }
    } catch (const std::exception &e) {
        throw DatasetError("corrupt dataset index " + (root / "dataset.json").string() + ": " + e.what());
    }
    return index;
}

// Generates `count` phantoms whose seeds derive from (spec.seed, index).
inline DatasetIndex generate_dataset(const std::filesystem::path &root, const PhantomSpec &spec, std::size_t count,
                                     const nlohmann::json &manifest = nlohmann::json::object()) {
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec || !std::filesystem::is_directory(root)) {
        throw DatasetError("cannot create dataset directory " + root.string());
    }
    DatasetIndex index;
    index.manifest = manifest;
    for (std::size_t k = 0; k < count; ++k) {
        PhantomSpec s = spec;
        s.seed = splitmix64(spec.seed ^ splitmix64(k + 1));
        auto sample = generate_phantom(s, case_id(k));
        write_sample(root / sample.id, sample);
        index.samples.push_back({sample.id, s.seed, sample.sweep_class});
    }
    write_dataset_index(root, index);
    return index;
}

inline std::vector<PhantomSample> load_dataset(const std::filesystem::path &root, const std::vector<std::string> &ids) {
    std::vector<PhantomSample> out;
    for (const auto &id : ids) {
        out.push_back(read_sample(root / id));
    }
    return out;
}

inline std::vector<PhantomSample> load_dataset(const std::filesystem::path &root) {
    std::vector<std::string> ids;
    for (const auto &e : read_dataset_index(root).samples) {
        ids.push_back(e.id);
    }
    return load_dataset(root, ids);
}

// Fold of a sample id under k-fold splitting by id hash.
inline std::size_t fold_of(const std::string &id, std::size_t k) {
    if (k == 0) {
        throw std::invalid_argument("k-fold split needs k >= 1");
    }
    return static_cast<std::size_t>(fnv1a64(id) % k);
}

struct Split {
    std::vector<std::string> train, test;
};

inline Split kfold_split(const std::vector<std::string> &ids, std::size_t k, std::size_t fold) {
    if (fold >= k) {
        throw std::invalid_argument("fold index must be < k");
    }
    Split s;
    for (const auto &id : ids) {
        (fold_of(id, k) == fold ? s.test : s.train).push_back(id);
    }
    return s;
}

} // namespace kpreg
