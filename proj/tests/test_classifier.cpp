#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <set>

#include "concept_reach/classifier.hpp"
#include "concept_reach/datagen.hpp"

using namespace concept_reach;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() /
                 ("cr_clf_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

Image solid(uint8_t r, uint8_t g, uint8_t b) {
    Image img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            uint8_t* px = img.px(x, y);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    return img;
}
}  // namespace

TEST_CASE("color_pair_index is a bijection over the 6 ordered unequal pairs") {
    std::set<int> seen;
    for (Color a : {Color::Red, Color::Green, Color::Blue})
        for (Color b : {Color::Red, Color::Green, Color::Blue}) {
            if (a == b) {
                REQUIRE_THROWS_AS(color_pair_index(a, b), std::invalid_argument);
                continue;
            }
            int idx = color_pair_index(a, b);
            REQUIRE(idx >= 0);
            REQUIRE(idx < 6);
            seen.insert(idx);
            auto [ra, rb] = color_pair_from_index(idx);
            REQUIRE(ra == a);
            REQUIRE(rb == b);
        }
    REQUIRE(seen.size() == 6);
}

TEST_CASE("count_nonblack_colors on synthetic images") {
    REQUIRE(count_nonblack_colors(solid(0, 0, 0)) == 0);
    REQUIRE(count_nonblack_colors(solid(200, 0, 0)) == 1);

    // values at or below the channel threshold are treated as background
    ColorCountParams p;
    REQUIRE(count_nonblack_colors(solid(uint8_t(p.channel_threshold), 0, 0), p) == 0);
    REQUIRE(count_nonblack_colors(solid(uint8_t(p.channel_threshold + 1), 0, 0), p) == 1);

    // two half-planes of different dominant channels
    Image img = solid(0, 0, 0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            img.px(x, y)[y < img.height / 2 ? 0 : 2] = 255;
    REQUIRE(count_nonblack_colors(img) == 2);

    // a colour needs at least min_pixels supporters
    Image sparse = solid(200, 0, 0);
    for (int i = 0; i < p.min_pixels - 1; ++i) sparse.px(i, 0)[1] = 255;
    REQUIRE(count_nonblack_colors(sparse, p) == 1);
    for (int i = 0; i < p.min_pixels; ++i) sparse.px(i, 1)[1] = 255;
    REQUIRE(count_nonblack_colors(sparse, p) == 2);
}

TEST_CASE("classify_image marks non-two-colour images incomplete") {
    ClassifierTriple clfs(0);
    ConceptTuple target(Color::Red, Shape::Triangle, Color::Green, Shape::Square);

    Verdict v = classify_image(clfs, solid(0, 0, 0), target);
    REQUIRE(v.incomplete);
    REQUIRE_FALSE(v.predicted.has_value());
    REQUIRE_FALSE(v.matched_target);
    REQUIRE(v.color_count == 0);

    Rng grng(3);
    Image rendered = render(sample_geometry(target, grng));
    Verdict w = classify_image(clfs, rendered, target);
    REQUIRE_FALSE(w.incomplete);
    REQUIRE(w.color_count == 2);
    REQUIRE(w.predicted.has_value());
    REQUIRE(w.matched_target == (*w.predicted == target));
}

TEST_CASE("reachability is the matched fraction and rejects empty input") {
    ClassifierTriple clfs(1);
    ConceptTuple target(Color::Blue, Shape::Circle, Color::Red, Shape::Square);
    std::vector<Image> imgs;
    Rng rng(9);
    for (int i = 0; i < 10; ++i)
        imgs.push_back(render(sample_geometry(target, rng)));
    imgs.push_back(solid(0, 0, 0));  // incomplete, can never match

    std::vector<Verdict> verdicts;
    double acc = reachability(clfs, imgs, target, &verdicts);
    REQUIRE(verdicts.size() == imgs.size());
    long matched = 0;
    for (const auto& v : verdicts) matched += v.matched_target;
    REQUIRE(acc == double(matched) / double(imgs.size()));
    REQUIRE(verdicts.back().incomplete);

    REQUIRE_THROWS_AS(reachability(clfs, {}, target), std::invalid_argument);
}

TEST_CASE("aggregate_over_seeds") {
    SeedAggregate a = aggregate_over_seeds({0.5, 0.7, 0.9, 0.3});
    REQUIRE(a.mean == Catch::Approx(0.6));
    REQUIRE(a.per_seed.size() == 4);
    REQUIRE_THROWS_AS(aggregate_over_seeds({}), std::invalid_argument);
}

TEST_CASE("train_classifiers requires generated samples unless told otherwise") {
    DatasetSpec spec = DatasetSpec::balanced(54, 5);
    fs::path dir = temp_dir("guard");
    DatasetManifest man = materialize(spec, dir.string());
    ClassifierTrainConfig cfg;
    cfg.epochs = 1;
    REQUIRE_THROWS_AS(train_classifiers(man, {}, cfg, 0), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("classifier training reduces loss and round-trips through disk") {
    DatasetSpec spec = DatasetSpec::balanced(54, 5);
    fs::path dir = temp_dir("train");
    DatasetManifest man = materialize(spec, dir.string());

    ClassifierTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.allow_clean_only = true;
    std::vector<real> losses;
    cfg.on_epoch = [&](int, real loss) { losses.push_back(loss); };

    ClassifierTriple clfs = train_classifiers(man, {}, cfg, 7);
    REQUIRE(losses.size() == 3);
    REQUIRE(losses.back() < losses.front());
    REQUIRE(clfs.validation_accuracy >= 0.0);
    REQUIRE(clfs.validation_accuracy <= 1.0);

    fs::path cdir = temp_dir("triple");
    fs::create_directories(cdir);
    clfs.save(cdir.string());
    ClassifierTriple back = ClassifierTriple::load(cdir.string());
    REQUIRE(back.validation_accuracy == clfs.validation_accuracy);

    ConceptTuple probe_t(Color::Green, Shape::Square, Color::Blue, Shape::Triangle);
    Rng prng(11);
    Image probe = render(sample_geometry(probe_t, prng));
    Verdict v1 = classify_image(clfs, probe, probe_t);
    Verdict v2 = classify_image(back, probe, probe_t);
    REQUIRE(v1.incomplete == v2.incomplete);
    REQUIRE(v1.predicted == v2.predicted);
    REQUIRE(v1.matched_target == v2.matched_target);

    fs::remove_all(dir);
    fs::remove_all(cdir);
}
