#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "concept_reach/harness.hpp"

using namespace concept_reach;
namespace fs = std::filesystem;

namespace {

fs::path temp_root() {
    fs::path p = fs::temp_directory_path() /
                 ("cr_harness_" + std::to_string(::getpid()));
    return p;
}

HarnessContext micro_context(const std::string& root) {
    HarnessContext ctx;
    ctx.run = RunConfig::defaults(Profile::Smoke);
    ctx.run.root = root;
    ctx.run.seeds = {0};
    ctx.run.target_total = 54;
    ctx.run.train_epochs = 1;
    ctx.run.eval_samples = 4;
    ctx.run.steer_steps = 2;
    ctx.run.concept_set_size = 3;
    ctx.run.classifier_epochs = 1;

    ctx.train.unet.image_size = 64;
    ctx.train.unet.channels = {4, 8};
    ctx.train.unet.norm_groups = 2;
    ctx.train.unet.sin_dim = 8;
    ctx.train.unet.time_dim = 8;
    ctx.train.batch_size = 16;
    ctx.train.T = 6;

    ctx.steer.batch_size = 2;
    ctx.steer.loss_window = 2;
    ctx.sample_batch = 8;
    return ctx;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

long line_count(const fs::path& p) {
    std::ifstream in(p);
    long n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("baseline family end-to-end on a micro profile") {
    fs::path root = temp_root();
    fs::remove_all(root);
    Harness harness(micro_context(root.string()));

    ExperimentPlan plan;
    plan.family = Family::Baseline;
    plan.seeds = {0};
    plan.targets_per_group = 1;

    auto results = harness.run_family(plan);

    // 5 Hamming-distance groups x 1 target x 3 methods x 1 seed
    REQUIRE(results.size() == 15);
    std::set<int> distances;
    std::set<std::string> methods;
    for (const auto& r : results) {
        REQUIRE(r.family == "baseline");
        REQUIRE(r.n == 4);
        REQUIRE(r.accuracy == double(r.matched) / double(r.n));
        REQUIRE(r.verdicts_digest.size() == 16);
        REQUIRE(r.y_s == "a green triangle behind a red triangle");
        distances.insert(r.extra.at("distance").get<int>());
        methods.insert(r.method);
        if (r.method == "prompting") {
            REQUIRE_FALSE(r.steer_l2_norm.has_value());
        } else {
            REQUIRE(r.steer_l2_norm.has_value());
            REQUIRE(*r.steer_l2_norm > 0);
            REQUIRE(r.steer_final_loss.has_value());
        }
    }
    REQUIRE(distances == std::set<int>{0, 1, 2, 3, 4});
    REQUIRE(methods == std::set<std::string>{"prompting", "prompt_steering", "h_steering"});

    // distance 0 must target the starting tuple itself
    for (const auto& r : results)
        if (r.extra.at("distance") == 0)
            REQUIRE(r.target_key == "green:triangle:red:triangle");

    ResultsStore store(harness.index().results_dir("baseline"));
    REQUIRE(line_count(store.jsonl_path()) == 15);
    REQUIRE(fs::exists(store.csv_path()));

    SECTION("rerun is idempotent: no new rows, identical records") {
        Harness again(micro_context(root.string()));
        auto results2 = again.run_family(plan);
        REQUIRE(results2.size() == 15);
        REQUIRE(line_count(store.jsonl_path()) == 15);
        for (size_t i = 0; i < results.size(); ++i) {
            // rerun loads the cached rows instead of recomputing
            REQUIRE(results2[i].accuracy == results[i].accuracy);
            REQUIRE(results2[i].verdicts_digest == results[i].verdicts_digest);
        }
    }

    SECTION("artifact root passes integrity verification") {
        VerifyReport rep = verify_root(root.string());
        for (const auto& p : rep.problems) UNSCOPED_INFO(p);
        REQUIRE(rep.ok);
        REQUIRE(rep.artifacts_checked > 0);
    }

    SECTION("norm diagnostic pools the baseline steering rows") {
        Harness diag(micro_context(root.string()));
        ExperimentPlan nd;
        nd.family = Family::NormDiag;
        nd.seeds = {0};
        auto rows = diag.run_family(nd);
        REQUIRE(rows.size() == 2);
        for (const auto& r : rows) {
            REQUIRE(r.target_key == "pooled");
            REQUIRE(r.n == 20);  // 5 targets x 4 samples per steering method
            REQUIRE(r.extra.at("scatter").size() == 5);
            REQUIRE(r.extra.contains("spearman_norm_accuracy"));
        }

        auto rep = Harness::norm_diag_from(results);
        REQUIRE(rep.points_h == 5);
        REQUIRE(rep.points_prompt == 5);
    }

    SECTION("plots are deterministic byte-for-byte") {
        fs::path pdir = root / "plots" / "baseline";
        plot_family(results, Family::Baseline, pdir.string());
        REQUIRE(fs::exists(pdir / "figure.svg"));
        REQUIRE(fs::exists(pdir / "figure.csv"));
        std::string svg = slurp(pdir / "figure.svg");
        std::string csv = slurp(pdir / "figure.csv");
        plot_family(results, Family::Baseline, pdir.string());
        REQUIRE(slurp(pdir / "figure.svg") == svg);
        REQUIRE(slurp(pdir / "figure.csv") == csv);
        REQUIRE(svg.find("<svg") != std::string::npos);

        REQUIRE_THROWS_AS(plot_family({}, Family::Baseline, pdir.string()), PlotError);
    }

    SECTION("norm diagnostic without baseline results fails loudly") {
        fs::path other = root;
        other += "_empty";
        fs::remove_all(other);
        Harness empty(micro_context(other.string()));
        ExperimentPlan nd;
        nd.family = Family::NormDiag;
        REQUIRE_THROWS_AS(empty.run_family(nd), IntegrityError);
        fs::remove_all(other);
    }

    fs::remove_all(root);
}
