#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "concept_reach/rng.hpp"
#include "concept_reach/stats.hpp"

using namespace concept_reach;

TEST_CASE("rng streams are deterministic and label-separated") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());

    Rng base(7);
    Rng s1 = base.substream("alpha");
    Rng s2 = base.substream("beta");
    Rng s1b = Rng(7).substream("alpha");
    bool all_equal = true;
    for (int i = 0; i < 32; ++i) {
        double x = s1.uniform(), y = s2.uniform();
        all_equal = all_equal && (x == y);
        (void)y;
    }
    REQUIRE_FALSE(all_equal);
    Rng s1c = Rng(7).substream("alpha");
    (void)s1b;
    Rng s1d = Rng(7).substream("alpha");
    REQUIRE(s1c.uniform() == s1d.uniform());
}

TEST_CASE("substreams are independent of draw order on the parent") {
    Rng p1(11), p2(11);
    (void)p2.uniform();  // consuming the parent must not shift child streams
    Rng c1 = p1.substream(uint64_t(3));
    Rng c2 = p2.substream(uint64_t(3));
    REQUIRE(c1.uniform() == c2.uniform());
}

TEST_CASE("uniform_int is in range; uniform(lo,hi) respects bounds") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        uint64_t v = rng.uniform_int(10);
        REQUIRE(v < 10);
        double u = rng.uniform(-2.0, 3.0);
        REQUIRE(u >= -2.0);
        REQUIRE(u < 3.0);
    }
}

TEST_CASE("normal draws have roughly standard moments") {
    Rng rng(2024);
    const int N = 20000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < N; ++i) {
        double x = rng.normal();
        sum += x;
        sum2 += x * x;
    }
    double mean = sum / N, var = sum2 / N - mean * mean;
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 0.05));
    REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 0.05));
}

TEST_CASE("spearman: hand-checked oracles") {
    // perfect monotone association
    REQUIRE_THAT(*spearman({1, 2, 3, 4, 5}, {10, 20, 30, 40, 50}),
                 Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(*spearman({1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}),
                 Catch::Matchers::WithinAbs(-1.0, 1e-12));

    // hand computation with average ranks for the tie:
    // x = {1,2,3,4}, y = {10,10,20,30} -> ranks y = {1.5,1.5,3,4}
    // pearson of {1,2,3,4} and {1.5,1.5,3,4} = 0.9487its...
    double expected = 0.9486832980505138;
    REQUIRE_THAT(*spearman({1, 2, 3, 4}, {10, 10, 20, 30}),
                 Catch::Matchers::WithinAbs(expected, 1e-9));
}

TEST_CASE("spearman is undefined for constant or singleton input") {
    REQUIRE_FALSE(spearman({1.0}, {2.0}).has_value());
    REQUIRE_FALSE(spearman({1, 2, 3}, {5, 5, 5}).has_value());
    REQUIRE_FALSE(spearman({}, {}).has_value());
}

TEST_CASE("permutation p-value: exhaustive case matches direct enumeration") {
    // x strictly increasing, y strictly increasing => rho = 1; one-sided
    // p-value for positive association is 1/n! over all permutations of y
    // that achieve rho >= 1, i.e. exactly one of 4! = 24.
    std::vector<double> x{1, 2, 3, 4}, y{2, 3, 5, 9};
    double p = *spearman_perm_pvalue(x, y, /*positive=*/true);
    REQUIRE_THAT(p, Catch::Matchers::WithinAbs(1.0 / 24.0, 1e-12));

    // reversed: p-value for positive association is 1 (every permutation has
    // rho >= observed minimum) ... observed is -1, all 24 permutations >= -1.
    std::vector<double> yr{9, 5, 3, 2};
    REQUIRE_THAT(*spearman_perm_pvalue(x, yr, true), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("permutation p-value: monte-carlo branch is deterministic and sane") {
    std::vector<double> x, y;
    Rng rng(5);
    for (int i = 0; i < 30; ++i) {
        x.push_back(i);
        y.push_back(i + 0.5 * rng.normal());
    }
    double p1 = *spearman_perm_pvalue(x, y, true);
    double p2 = *spearman_perm_pvalue(x, y, true);
    REQUIRE(p1 == p2);
    REQUIRE(p1 < 0.01);  // strong positive trend
}

TEST_CASE("ranks: average ranks for ties") {
    auto r = detail::ranks({10, 20, 20, 30});
    REQUIRE(r == std::vector<double>{1.0, 2.5, 2.5, 4.0});
    auto r2 = detail::ranks({5, 5, 5});
    REQUIRE(r2 == std::vector<double>{2.0, 2.0, 2.0});
}
