#pragma once

// Materializes a DatasetSpec into an on-disk dataset of image/caption pairs:
//   <out>/images/<tuple>/<index>.png
//   <out>/manifest.jsonl
//   <out>/spec.json
// Every image gets its own RNG substream derived from (seed, tuple, index),
// so output is reproducible and independent of rendering order.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "concepts.hpp"
#include "hash.hpp"
#include "render.hpp"

namespace concept_reach {

inline constexpr const char* kRasterizerVersion = "concept-reach-raster-1";

struct ManifestRecord {
    std::string id;
    std::string file;  // relative to dataset root
    ConceptTuple tuple;
    std::string caption;
    SceneGeometry geometry;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["id"] = id;
        j["file"] = file;
        j["c1"] = to_string(tuple.c1);
        j["s1"] = to_string(tuple.s1);
        j["c2"] = to_string(tuple.c2);
        j["s2"] = to_string(tuple.s2);
        j["caption"] = caption;
        j["geometry"] = {{"back", {{"shape", to_string(geometry.back.kind)},
                                   {"cx", geometry.back.cx},
                                   {"cy", geometry.back.cy},
                                   {"size", geometry.back.size}}},
                         {"front", {{"shape", to_string(geometry.front.kind)},
                                    {"cx", geometry.front.cx},
                                    {"cy", geometry.front.cy},
                                    {"size", geometry.front.size}}}};
        return j;
    }

    static ManifestRecord from_json(const nlohmann::json& j) {
        ConceptTuple t(*parse_color(j.at("c1").get<std::string>()),
                       *parse_shape(j.at("s1").get<std::string>()),
                       *parse_color(j.at("c2").get<std::string>()),
                       *parse_shape(j.at("s2").get<std::string>()));
        ManifestRecord r{j.at("id").get<std::string>(), j.at("file").get<std::string>(), t,
                         j.at("caption").get<std::string>(), {}};
        const auto& gb = j.at("geometry").at("back");
        const auto& gf = j.at("geometry").at("front");
        r.geometry.back = {*parse_shape(gb.at("shape").get<std::string>()), gb.at("cx").get<double>(),
                           gb.at("cy").get<double>(), gb.at("size").get<double>()};
        r.geometry.front = {*parse_shape(gf.at("shape").get<std::string>()), gf.at("cx").get<double>(),
                            gf.at("cy").get<double>(), gf.at("size").get<double>()};
        r.geometry.c1 = t.c1;
        r.geometry.c2 = t.c2;
        return r;
    }
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    std::string spec_hash;
    std::string root;  // dataset directory

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("manifest save: cannot open " + path);
        for (const auto& r : records) out << r.to_json().dump() << "\n";
    }

    static DatasetManifest load(const std::string& dir) {
        DatasetManifest m;
        m.root = dir;
        std::ifstream spec_in(dir + "/spec.json");
        if (!spec_in) throw std::runtime_error("manifest load: missing " + dir + "/spec.json");
        std::ostringstream ss;
        ss << spec_in.rdbuf();
        nlohmann::json sj = nlohmann::json::parse(ss.str());
        m.spec_hash = sj.at("spec_hash").get<std::string>();

        std::ifstream in(dir + "/manifest.jsonl");
        if (!in) throw std::runtime_error("manifest load: missing " + dir + "/manifest.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            m.records.push_back(ManifestRecord::from_json(nlohmann::json::parse(line)));
        }
        return m;
    }
};

inline std::string spec_hash_of(const DatasetSpec& spec) { return sha256_hex(spec.to_json().dump()); }

inline DatasetManifest materialize(const DatasetSpec& spec, const std::string& out_dir,
                                   const RenderParams& params = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    // mark in-progress output invalid until fully written
    const std::string sentinel = out_dir + "/.incomplete";
    { std::ofstream(sentinel) << "1\n"; }

    DatasetManifest manifest;
    manifest.root = out_dir;
    manifest.spec_hash = spec_hash_of(spec);

    Rng root_rng(spec.rng_seed);
    for (const auto& [t, n] : spec.counts) {
        if (n == 0) continue;
        fs::create_directories(out_dir + "/images/" + t.key());
        Rng tuple_rng = root_rng.substream(t.key());
        std::string caption = caption_of(t, spec.mask);
        for (long i = 0; i < n; ++i) {
            Rng img_rng = tuple_rng.substream(uint64_t(i));
            SceneGeometry g = sample_geometry(t, img_rng, params);
            Image img = render(g);
            std::string rel = "images/" + t.key() + "/" + std::to_string(i) + ".png";
            write_png(img, out_dir + "/" + rel);
            manifest.records.push_back(
                ManifestRecord{t.key() + "/" + std::to_string(i), rel, t, caption, g});
        }
    }

    manifest.save(out_dir + "/manifest.jsonl");
    {
        nlohmann::json sj = spec.to_json();
        sj["spec_hash"] = manifest.spec_hash;
        sj["rasterizer_version"] = kRasterizerVersion;
        std::ofstream out(out_dir + "/spec.json");
        out << sj.dump(2) << "\n";
    }
    fs::remove(sentinel);
    return manifest;
}

}  // namespace concept_reach
