#include <catch2/catch_amalgamated.hpp>

#include <numeric>
#include <set>

#include "concept_reach/concepts.hpp"
#include "concept_reach/rng.hpp"

using namespace concept_reach;

TEST_CASE("tuple enumeration: 54 valid tuples, lexicographic, distinct colours") {
    auto all = enumerate_valid_tuples();
    REQUIRE(all.size() == 54);
    REQUIRE(count_valid_tuples(3, 3) == 54);

    std::set<std::string> keys;
    for (const auto& t : all) {
        REQUIRE(t.c1 != t.c2);
        keys.insert(t.key());
    }
    REQUIRE(keys.size() == 54);

    // lexicographic in (c1, s1, c2, s2)
    for (size_t i = 1; i < all.size(); ++i) {
        auto rank = [](const ConceptTuple& t) {
            return ((int(t.c1) * 3 + int(t.s1)) * 3 + int(t.c2)) * 3 + int(t.s2);
        };
        REQUIRE(rank(all[i - 1]) < rank(all[i]));
    }

    // general formula oracle: c*(c-1)*s^2
    REQUIRE(count_valid_tuples(2, 3) == 2 * 1 * 9);
    REQUIRE(count_valid_tuples(4, 2) == 4 * 3 * 4);
}

TEST_CASE("tuple key round-trip and distance") {
    ConceptTuple t(Color::Red, Shape::Triangle, Color::Green, Shape::Square);
    REQUIRE(t.key() == "red:triangle:green:square");
    REQUIRE(ConceptTuple::from_key(t.key()) == t);
    REQUIRE(t.distance(t) == 0);
    ConceptTuple u(Color::Red, Shape::Circle, Color::Blue, Shape::Square);
    REQUIRE(t.distance(u) == 2);
    REQUIRE_THROWS_AS(ConceptTuple(Color::Red, Shape::Circle, Color::Red, Shape::Circle),
                      std::invalid_argument);
}

TEST_CASE("balanced spec: totals and subset sizes") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    long total = 0;
    for (const auto& [t, n] : spec.counts) {
        REQUIRE(n == 1000);
        total += n;
    }
    REQUIRE(total == 54000);

    PartialTuple c1_red;
    c1_red.c1 = Color::Red;
    REQUIRE(subset_size(spec, c1_red) == 18000);  // 18 of 54 blocks
    PartialTuple s2_square;
    s2_square.s2 = Shape::Square;
    REQUIRE(subset_size(spec, s2_square) == 18000);
}

TEST_CASE("caption grammar round-trips over all tuples and constructible masks") {
    const auto& masks = constructible_masks();
    REQUIRE(masks.size() == 8);
    for (const auto& t : enumerate_valid_tuples()) {
        REQUIRE(caption_of(t) ==
                std::string("a ") + to_string(t.c1) + " " + to_string(t.s1) + " behind a " +
                    to_string(t.c2) + " " + to_string(t.s2));
        for (const auto& m : masks) {
            std::string cap = caption_of(t, m);
            ParsedCaption parsed = parse_caption(cap);
            REQUIRE(parsed.mask == m);
            REQUIRE(parsed.tuple == restrict_tuple(t, m));
        }
    }
}

TEST_CASE("caption ladder examples") {
    ConceptTuple t(Color::Red, Shape::Triangle, Color::Green, Shape::Square);
    REQUIRE(caption_of(t, {true, true, true, true}) == "a red triangle behind a green square");
    REQUIRE(caption_of(t, {false, true, true, true}) == "a triangle behind a green square");
    REQUIRE(caption_of(t, {true, false, true, true}) == "a red shape behind a green square");
    REQUIRE(caption_of(t, {true, true, false, true}) == "a red triangle behind a square");
    REQUIRE(caption_of(t, {true, true, true, false}) == "a red triangle behind a green shape");
    REQUIRE(caption_of(t, {false, false, true, true}) == "a green square");
    REQUIRE(caption_of(t, {false, false, false, true}) == "a square");
    REQUIRE(caption_of(t, SpecificationMask::none()) == "");
}

TEST_CASE("scarcity oracle: p = 0.01 on c1=red gives 30 / 1485") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    auto red = FactorValue::of(FactorName::BackColor, Color::Red);
    DatasetSpec out = apply_scarcity(spec, red, 0.01);
    // 540 images over 18 red-c1 blocks, 53460 over the other 36
    long total = 0;
    for (const auto& [t, n] : out.counts) {
        if (t.c1 == Color::Red)
            REQUIRE(n == 30);
        else
            REQUIRE(n == 1485);
        total += n;
    }
    REQUIRE(total == 54000);
}

TEST_CASE("scarcity oracle: p = 0 on s2=square zeroes 18 blocks, rest at 1500") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    auto sq = FactorValue::of(FactorName::FrontShape, Shape::Square);
    DatasetSpec out = apply_scarcity(spec, sq, 0.0);
    for (const auto& [t, n] : out.counts)
        REQUIRE(n == (t.s2 == Shape::Square ? 0 : 1500));
}

TEST_CASE("scarcity rejects p above the current subset proportion") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    auto red = FactorValue::of(FactorName::BackColor, Color::Red);
    REQUIRE_THROWS_AS(apply_scarcity(spec, red, 0.5), std::invalid_argument);
    REQUIRE_NOTHROW(apply_scarcity(spec, red, 1.0 / 3.0));
}

TEST_CASE("removal oracle: 53 nonzero blocks summing to 54000 with floor+remainder rounding") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    ConceptTuple gone(Color::Green, Shape::Triangle, Color::Blue, Shape::Square);
    DatasetSpec out = apply_removal(spec, gone);
    REQUIRE(out.count(gone) == 0);

    long total = 0, nonzero = 0;
    long lo = 54000 / 53, hi = lo + 1, n_hi = 54000 % 53;
    long seen_hi = 0;
    for (const auto& [t, n] : out.counts) {
        total += n;
        if (n == 0) continue;
        ++nonzero;
        REQUIRE((n == lo || n == hi));
        seen_hi += (n == hi);
    }
    REQUIRE(total == 54000);
    REQUIRE(nonzero == 53);
    REQUIRE(seen_hi == n_hi);
    REQUIRE(classify_ood(gone, out) == OodClass::CompositionalOOD);
}

TEST_CASE("bias: biconditional tie with injection counts") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    auto blue = FactorValue::of(FactorName::BackColor, Color::Blue);
    auto circle = FactorValue::of(FactorName::BackShape, Shape::Circle);

    SECTION("injection 0: only tied-consistent blocks survive") {
        DatasetSpec out = apply_bias(spec, blue, circle, 0);
        long total = 0;
        for (const auto& [t, n] : out.counts) {
            bool hb = t.c1 == Color::Blue, hc = t.s1 == Shape::Circle;
            if (hb != hc) REQUIRE(n == 0);
            total += n;
        }
        REQUIRE(total == 54000);
        // probe tuple with c1=blue, s1!=circle is compositional OOD
        ConceptTuple probe(Color::Blue, Shape::Triangle, Color::Red, Shape::Square);
        REQUIRE(out.count(probe) == 0);
        REQUIRE(classify_ood(probe, out) == OodClass::CompositionalOOD);
    }

    SECTION("injection mass lands on (colour holds, shape fails) blocks") {
        DatasetSpec out = apply_bias(spec, blue, circle, 120);
        long injected_total = 0, total = 0;
        for (const auto& [t, n] : out.counts) {
            bool hb = t.c1 == Color::Blue, hc = t.s1 == Shape::Circle;
            if (hb && !hc) injected_total += n;
            if (!hb && hc) REQUIRE(n == 0);
            total += n;
        }
        REQUIRE(injected_total == 120);
        REQUIRE(total == 54000);
    }

    REQUIRE_THROWS_AS(apply_bias(spec, blue, FactorValue::of(FactorName::BackColor, Color::Red), 0),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(apply_bias(spec, blue, circle, -1), std::invalid_argument);
    REQUIRE_THROWS_AS(apply_bias(spec, blue, circle, 54001), std::invalid_argument);
}

namespace {

// Independent OOD oracle built directly from the definitions.
OodClass ood_oracle(const ConceptTuple& t, const DatasetSpec& spec) {
    auto present = [&](const ConceptTuple& u) { return spec.count(u) > 0; };
    if (present(t)) return OodClass::InDistribution;

    bool c1_seen = false, s1_seen = false, c2_seen = false, s2_seen = false;
    for (const auto& [u, n] : spec.counts) {
        if (n == 0) continue;
        c1_seen |= (u.c1 == t.c1);
        s1_seen |= (u.s1 == t.s1);
        c2_seen |= (u.c2 == t.c2);
        s2_seen |= (u.s2 == t.s2);
    }
    if (c1_seen && s1_seen && c2_seen && s2_seen) return OodClass::CompositionalOOD;

    // kind-respecting permutations: {identity, swap colours, swap shapes, both}
    std::vector<ConceptTuple> perms;
    perms.emplace_back(t.c2, t.s1, t.c1, t.s2);
    perms.emplace_back(t.c1, t.s2, t.c2, t.s1);
    perms.emplace_back(t.c2, t.s2, t.c1, t.s1);
    for (const auto& u : perms)
        if (present(u)) return OodClass::PositionalOOD;
    return OodClass::OtherOOD;
}

DatasetSpec random_spec(Rng& rng) {
    DatasetSpec spec = DatasetSpec::balanced(5400, rng.uniform_int(1u << 20));
    // random subset of blocks zeroed, random counts elsewhere
    for (auto& [t, n] : spec.counts)
        n = rng.uniform() < 0.4 ? 0 : long(rng.uniform_int(200) + 1);
    return spec;
}

}  // namespace

TEST_CASE("classify_ood agrees with the brute-force oracle on 54 tuples x 50 random specs") {
    Rng rng(9001);
    for (int i = 0; i < 50; ++i) {
        DatasetSpec spec = random_spec(rng);
        for (const auto& t : enumerate_valid_tuples())
            REQUIRE(classify_ood(t, spec) == ood_oracle(t, spec));
    }
}

TEST_CASE("p = 0 scarcity construction yields PositionalOOD for the swept target") {
    DatasetSpec spec = DatasetSpec::balanced(54000, 0);
    ConceptTuple target(Color::Red, Shape::Triangle, Color::Green, Shape::Square);
    auto sq = FactorValue::of(FactorName::FrontShape, Shape::Square);
    DatasetSpec out = apply_scarcity(spec, sq, 0.0);
    REQUIRE(classify_ood(target, out) == OodClass::PositionalOOD);
}

TEST_CASE("kind-respecting permutations never mix colours into shape slots") {
    for (const auto& t : enumerate_valid_tuples()) {
        auto perms = kind_respecting_permutations(t);
        std::set<Color> colors{t.c1, t.c2};
        std::multiset<Shape> shapes{t.s1, t.s2};
        for (const auto& p : perms) {
            REQUIRE(std::set<Color>{p.c1, p.c2} == colors);
            REQUIRE(std::multiset<Shape>{p.s1, p.s2} == shapes);
        }
    }
}

TEST_CASE("conservation and equal-block properties over 200 random transforms") {
    Rng rng(777);
    DatasetSpec base = DatasetSpec::balanced(54000, 0);
    auto total_of = [](const DatasetSpec& s) {
        long t = 0;
        for (const auto& [k, n] : s.counts) t += n;
        return t;
    };
    auto nonzero_blocks = [](const DatasetSpec& s) {
        long c = 0;
        for (const auto& [k, n] : s.counts) c += (n > 0);
        return c;
    };

    for (int i = 0; i < 200; ++i) {
        DatasetSpec out;
        int kind = int(rng.uniform_int(3));
        if (kind == 0) {
            FactorName f = static_cast<FactorName>(rng.uniform_int(4));
            FactorValue fv = is_color_factor(f)
                                 ? FactorValue::of(f, static_cast<Color>(rng.uniform_int(3)))
                                 : FactorValue::of(f, static_cast<Shape>(rng.uniform_int(3)));
            double p = rng.uniform(0.0, 1.0 / 3.0);
            out = apply_scarcity(base, fv, p);

            // affected blocks equal-sized within 1; same for the rest
            PartialTuple constraint;
            switch (f) {
                case FactorName::BackColor: constraint.c1 = static_cast<Color>(fv.value); break;
                case FactorName::BackShape: constraint.s1 = static_cast<Shape>(fv.value); break;
                case FactorName::FrontColor: constraint.c2 = static_cast<Color>(fv.value); break;
                case FactorName::FrontShape: constraint.s2 = static_cast<Shape>(fv.value); break;
            }
            long amin = 1L << 60, amax = -1, rmin = 1L << 60, rmax = -1;
            for (const auto& [t, n] : out.counts) {
                if (constraint.matches(t)) {
                    amin = std::min(amin, n);
                    amax = std::max(amax, n);
                } else {
                    rmin = std::min(rmin, n);
                    rmax = std::max(rmax, n);
                }
            }
            REQUIRE(amax - amin <= 1);
            REQUIRE(rmax - rmin <= 1);
        } else if (kind == 1) {
            auto all = enumerate_valid_tuples();
            out = apply_removal(base, all[rng.uniform_int(all.size())]);
        } else {
            FactorName cf = rng.uniform() < 0.5 ? FactorName::BackColor : FactorName::FrontColor;
            FactorName sf = rng.uniform() < 0.5 ? FactorName::BackShape : FactorName::FrontShape;
            auto a = FactorValue::of(cf, static_cast<Color>(rng.uniform_int(3)));
            auto b = FactorValue::of(sf, static_cast<Shape>(rng.uniform_int(3)));
            out = apply_bias(base, a, b, long(rng.uniform_int(2001)));
        }
        long total = total_of(out);
        REQUIRE(std::labs(total - base.target_total) <= nonzero_blocks(out));
        REQUIRE(total == base.target_total);  // transforms conserve exactly by construction
    }
}

TEST_CASE("spec serialization round-trips canonically") {
    DatasetSpec spec = DatasetSpec::balanced(5400, 42);
    spec.mask = {true, false, true, true};
    auto red = FactorValue::of(FactorName::BackColor, Color::Red);
    spec = apply_scarcity(spec, red, 0.05);
    spec.mask = {true, false, true, true};

    nlohmann::json j = spec.to_json();
    DatasetSpec back = DatasetSpec::from_json(j);
    REQUIRE(back.counts == spec.counts);
    REQUIRE(back.mask == spec.mask);
    REQUIRE(back.target_total == spec.target_total);
    REQUIRE(back.to_json().dump() == j.dump());
}
