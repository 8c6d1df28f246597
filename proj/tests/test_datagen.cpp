#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "concept_reach/datagen.hpp"

using namespace concept_reach;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("cr_datagen_" + tag + "_" +
                                              std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}
}  // namespace

TEST_CASE("materialize writes the documented layout and exact counts") {
    DatasetSpec spec = DatasetSpec::balanced(108, 7);  // 2 per tuple
    fs::path dir = temp_dir("layout");
    DatasetManifest man = materialize(spec, dir.string());

    REQUIRE(man.records.size() == 108);
    REQUIRE(fs::exists(dir / "manifest.jsonl"));
    REQUIRE(fs::exists(dir / "spec.json"));
    REQUIRE_FALSE(fs::exists(dir / ".incomplete"));

    std::map<std::string, int> per_tuple;
    for (const auto& r : man.records) {
        REQUIRE(fs::exists(dir / r.file));
        REQUIRE(r.file == "images/" + r.tuple.key() + "/" +
                              r.file.substr(r.file.rfind('/') + 1));
        REQUIRE(r.caption == caption_of(r.tuple, spec.mask));
        ++per_tuple[r.tuple.key()];
    }
    REQUIRE(per_tuple.size() == 54);
    for (const auto& [k, n] : per_tuple) REQUIRE(n == 2);
    fs::remove_all(dir);
}

TEST_CASE("materialization is deterministic across directories") {
    DatasetSpec spec = DatasetSpec::balanced(54, 11);
    fs::path a = temp_dir("det_a"), b = temp_dir("det_b");
    DatasetManifest ma = materialize(spec, a.string());
    DatasetManifest mb = materialize(spec, b.string());
    REQUIRE(ma.records.size() == mb.records.size());
    for (size_t i = 0; i < ma.records.size(); ++i) {
        REQUIRE(ma.records[i].file == mb.records[i].file);
        REQUIRE(sha256_file((a / ma.records[i].file).string()) ==
                sha256_file((b / mb.records[i].file).string()));
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("png round-trip preserves pixels exactly") {
    Rng rng(3);
    ConceptTuple t(Color::Green, Shape::Circle, Color::Blue, Shape::Square);
    Image img = render(sample_geometry(t, rng));
    fs::path p = temp_dir("png");
    fs::create_directories(p);
    write_png(img, (p / "x.png").string());
    Image back = read_png((p / "x.png").string());
    REQUIRE(img == back);
    fs::remove_all(p);
}

TEST_CASE("manifest save/load round-trips records and spec hash") {
    DatasetSpec spec = DatasetSpec::balanced(54, 21);
    fs::path dir = temp_dir("roundtrip");
    DatasetManifest man = materialize(spec, dir.string());
    DatasetManifest loaded = DatasetManifest::load(dir.string());

    REQUIRE(loaded.spec_hash == spec_hash_of(spec));
    REQUIRE(loaded.records.size() == man.records.size());
    for (size_t i = 0; i < man.records.size(); ++i) {
        const auto& a = man.records[i];
        const auto& b = loaded.records[i];
        REQUIRE(a.id == b.id);
        REQUIRE(a.file == b.file);
        REQUIRE(a.tuple == b.tuple);
        REQUIRE(a.caption == b.caption);
        REQUIRE(a.geometry.back.size == b.geometry.back.size);
        REQUIRE(a.geometry.front.cx == b.geometry.front.cx);
    }
    fs::remove_all(dir);
}

TEST_CASE("spec hash is stable under serialization round-trip and sensitive to edits") {
    DatasetSpec spec = DatasetSpec::balanced(5400, 0);
    std::string h = spec_hash_of(spec);
    REQUIRE(h == spec_hash_of(DatasetSpec::from_json(spec.to_json())));

    DatasetSpec other = spec;
    other.rng_seed = 1;
    REQUIRE(spec_hash_of(other) != h);

    DatasetSpec masked = spec;
    masked.mask = {false, true, true, true};
    REQUIRE(spec_hash_of(masked) != h);
}

TEST_CASE("masked specs caption only the specified factors") {
    DatasetSpec spec = DatasetSpec::balanced(54, 4);
    spec.mask = {false, false, true, true};  // "a {c2} {s2}"
    fs::path dir = temp_dir("masked");
    DatasetManifest man = materialize(spec, dir.string());
    for (const auto& r : man.records) {
        REQUIRE(r.caption ==
                std::string("a ") + to_string(r.tuple.c2) + " " + to_string(r.tuple.s2));
    }
    fs::remove_all(dir);
}
