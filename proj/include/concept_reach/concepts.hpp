#pragma once

// Concept/factor formalism: tuples (c1, s1, c2, s2), caption grammar and its
// inverse, dataset specs with the three corruption transforms (scarcity,
// removal, bias) and out-of-distribution classification.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace concept_reach {

enum class Color : uint8_t { Red = 0, Green = 1, Blue = 2 };
enum class Shape : uint8_t { Circle = 0, Triangle = 1, Square = 2 };

inline constexpr std::array<Color, 3> kColors{Color::Red, Color::Green, Color::Blue};
inline constexpr std::array<Shape, 3> kShapes{Shape::Circle, Shape::Triangle, Shape::Square};

inline const char* to_string(Color c) {
    switch (c) {
        case Color::Red: return "red";
        case Color::Green: return "green";
        case Color::Blue: return "blue";
    }
    throw std::logic_error("bad Color");
}

inline const char* to_string(Shape s) {
    switch (s) {
        case Shape::Circle: return "circle";
        case Shape::Triangle: return "triangle";
        case Shape::Square: return "square";
    }
    throw std::logic_error("bad Shape");
}

inline std::optional<Color> parse_color(const std::string& w) {
    if (w == "red") return Color::Red;
    if (w == "green") return Color::Green;
    if (w == "blue") return Color::Blue;
    return std::nullopt;
}

inline std::optional<Shape> parse_shape(const std::string& w) {
    if (w == "circle") return Shape::Circle;
    if (w == "triangle") return Shape::Triangle;
    if (w == "square") return Shape::Square;
    return std::nullopt;
}

// The four factors of interest, in canonical position order.
enum class FactorName : uint8_t { BackColor = 0, BackShape = 1, FrontColor = 2, FrontShape = 3 };

inline const char* to_string(FactorName f) {
    switch (f) {
        case FactorName::BackColor: return "c1";
        case FactorName::BackShape: return "s1";
        case FactorName::FrontColor: return "c2";
        case FactorName::FrontShape: return "s2";
    }
    throw std::logic_error("bad FactorName");
}

inline bool is_color_factor(FactorName f) {
    return f == FactorName::BackColor || f == FactorName::FrontColor;
}

// A single concept value at some factor.
struct FactorValue {
    FactorName factor;
    uint8_t value;  // index into kColors or kShapes depending on factor kind

    static FactorValue of(FactorName f, Color c) {
        if (!is_color_factor(f)) throw std::invalid_argument("color value on a shape factor");
        return {f, static_cast<uint8_t>(c)};
    }
    static FactorValue of(FactorName f, Shape s) {
        if (is_color_factor(f)) throw std::invalid_argument("shape value on a color factor");
        return {f, static_cast<uint8_t>(s)};
    }
};

// One point in concept space. Back colour must differ from front colour.
struct ConceptTuple {
    Color c1;
    Shape s1;
    Color c2;
    Shape s2;

    ConceptTuple(Color bc, Shape bs, Color fc, Shape fs) : c1(bc), s1(bs), c2(fc), s2(fs) {
        if (c1 == c2) throw std::invalid_argument("ConceptTuple: back and front colours must differ");
    }

    uint8_t at(FactorName f) const {
        switch (f) {
            case FactorName::BackColor: return static_cast<uint8_t>(c1);
            case FactorName::BackShape: return static_cast<uint8_t>(s1);
            case FactorName::FrontColor: return static_cast<uint8_t>(c2);
            case FactorName::FrontShape: return static_cast<uint8_t>(s2);
        }
        throw std::logic_error("bad FactorName");
    }

    // Hamming distance over the four factors.
    int distance(const ConceptTuple& o) const {
        return (c1 != o.c1) + (s1 != o.s1) + (c2 != o.c2) + (s2 != o.s2);
    }

    auto operator<=>(const ConceptTuple& o) const = default;

    // "red:triangle:green:square"
    std::string key() const {
        return std::string(to_string(c1)) + ":" + to_string(s1) + ":" + to_string(c2) + ":" + to_string(s2);
    }

    static ConceptTuple from_key(const std::string& k);
};

// Partially constrained tuple; unset factors are unconstrained.
struct PartialTuple {
    std::optional<Color> c1;
    std::optional<Shape> s1;
    std::optional<Color> c2;
    std::optional<Shape> s2;

    bool matches(const ConceptTuple& t) const {
        return (!c1 || *c1 == t.c1) && (!s1 || *s1 == t.s1) && (!c2 || *c2 == t.c2) &&
               (!s2 || *s2 == t.s2);
    }
    bool full() const { return c1 && s1 && c2 && s2; }
    ConceptTuple to_tuple() const {
        if (!full()) throw std::logic_error("PartialTuple::to_tuple on partial value");
        return ConceptTuple(*c1, *s1, *c2, *s2);
    }
    bool operator==(const PartialTuple&) const = default;
};

// Which factors a caption mentions.
struct SpecificationMask {
    bool c1 = true;
    bool s1 = true;
    bool c2 = true;
    bool s2 = true;

    bool operator==(const SpecificationMask&) const = default;

    int specified_count() const { return int(c1) + int(s1) + int(c2) + int(s2); }

    static SpecificationMask full() { return {true, true, true, true}; }
    static SpecificationMask none() { return {false, false, false, false}; }

    std::string str() const {
        std::string s;
        if (c1) s += "c1,";
        if (s1) s += "s1,";
        if (c2) s += "c2,";
        if (s2) s += "s2,";
        if (!s.empty()) s.pop_back();
        return "{" + s + "}";
    }
};

// The masks realized by the caption-reduction ladder, plus the full mask.
// Ladder levels: 0 = full, 1..7 as in the reduction list.
inline const std::vector<SpecificationMask>& constructible_masks() {
    static const std::vector<SpecificationMask> masks = {
        {true, true, true, true},    // full
        {false, true, true, true},   // remove c1
        {true, false, true, true},   // remove s1
        {true, true, false, true},   // remove c2
        {true, true, true, false},   // remove s2
        {false, false, true, true},  // remove c1, s1
        {false, false, false, true}, // remove c1, s1, c2
        {false, false, false, false} // empty caption
    };
    return masks;
}

inline bool is_constructible(const SpecificationMask& m) {
    for (const auto& k : constructible_masks())
        if (k == m) return true;
    return false;
}

// All tuples with c1 != c2 in lexicographic (c1, s1, c2, s2) order over the
// value-set orders. 3*3*3*3 = 81 raw, minus same-colour pairs -> 54.
inline std::vector<ConceptTuple> enumerate_valid_tuples() {
    std::vector<ConceptTuple> out;
    out.reserve(54);
    for (Color c1 : kColors)
        for (Shape s1 : kShapes)
            for (Color c2 : kColors) {
                if (c1 == c2) continue;
                for (Shape s2 : kShapes) out.emplace_back(c1, s1, c2, s2);
            }
    return out;
}

// Generic count of valid tuples for hypothetical value-set sizes; used by
// tests to cross-check the concrete enumeration.
inline long count_valid_tuples(int n_colors, int n_shapes) {
    return long(n_shapes) * n_shapes * (long(n_colors) * n_colors - n_colors);
}

inline ConceptTuple ConceptTuple::from_key(const std::string& k) {
    std::array<std::string, 4> parts;
    size_t pos = 0;
    for (int i = 0; i < 4; ++i) {
        size_t next = k.find(':', pos);
        if ((i < 3) != (next != std::string::npos)) throw std::invalid_argument("bad tuple key: " + k);
        parts[i] = k.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        pos = next + 1;
    }
    auto c1 = parse_color(parts[0]);
    auto s1 = parse_shape(parts[1]);
    auto c2 = parse_color(parts[2]);
    auto s2 = parse_shape(parts[3]);
    if (!c1 || !s1 || !c2 || !s2) throw std::invalid_argument("bad tuple key: " + k);
    return ConceptTuple(*c1, *s1, *c2, *s2);
}

// ---------------------------------------------------------------------------
// Caption grammar h and its inverse.
//
// Full captions read "a {c1} {s1} behind a {c2} {s2}". Reduced captions drop
// the unspecified factors; a dropped shape with a kept colour becomes the
// word "shape" so the phrase stays well formed.
// ---------------------------------------------------------------------------

inline std::string caption_of(const ConceptTuple& t,
                              const SpecificationMask& m = SpecificationMask::full()) {
    if (!is_constructible(m))
        throw std::invalid_argument("caption_of: unsupported specification mask " + m.str());
    auto side = [](bool has_color, bool has_shape, const char* color, const char* shape) {
        std::string s = "a ";
        if (has_color) {
            s += color;
            s += " ";
            s += has_shape ? shape : "shape";
        } else {
            s += shape;  // colourless side always keeps its shape in the ladder
        }
        return s;
    };
    if (m == SpecificationMask::none()) return "";
    if (!m.c1 && !m.s1) {
        // "a {c2} {s2}" or "a {s2}"
        return side(m.c2, m.s2, to_string(t.c2), to_string(t.s2));
    }
    return side(m.c1, m.s1, to_string(t.c1), to_string(t.s1)) + " behind " +
           side(m.c2, m.s2, to_string(t.c2), to_string(t.s2));
}

struct ParsedCaption {
    PartialTuple tuple;
    SpecificationMask mask;
};

namespace detail {
inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> w;
    size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && s[i] == ' ') ++i;
        size_t j = i;
        while (j < s.size() && s[j] != ' ') ++j;
        if (j > i) w.push_back(s.substr(i, j - i));
        i = j;
    }
    return w;
}

// Parses "a <words...>" describing one object; fills colour/shape slots.
inline void parse_side(const std::vector<std::string>& w, size_t begin, size_t end,
                       std::optional<Color>& color, std::optional<Shape>& shape, bool& has_color,
                       bool& has_shape, const std::string& y) {
    if (end - begin < 2 || w[begin] != "a")
        throw std::invalid_argument("unparseable caption: " + y);
    size_t n = end - begin - 1;  // words after "a"
    if (n == 1) {
        // "a {shape}"  (colour unspecified)
        auto s = parse_shape(w[begin + 1]);
        if (!s) throw std::invalid_argument("unparseable caption: " + y);
        shape = *s;
        has_color = false;
        has_shape = true;
    } else if (n == 2) {
        auto c = parse_color(w[begin + 1]);
        if (!c) throw std::invalid_argument("unparseable caption: " + y);
        color = *c;
        has_color = true;
        if (w[begin + 2] == "shape") {
            has_shape = false;
        } else {
            auto s = parse_shape(w[begin + 2]);
            if (!s) throw std::invalid_argument("unparseable caption: " + y);
            shape = *s;
            has_shape = true;
        }
    } else {
        throw std::invalid_argument("unparseable caption: " + y);
    }
}
}  // namespace detail

// Inverse of caption_of on its image. Returns the mentioned factors and the
// mask they span.
inline ParsedCaption parse_caption(const std::string& y) {
    ParsedCaption r;
    r.mask = SpecificationMask::none();
    if (y.empty()) return r;

    auto w = detail::split_words(y);
    size_t behind = w.size();
    for (size_t i = 0; i < w.size(); ++i)
        if (w[i] == "behind") behind = i;

    if (behind == w.size()) {
        // Front object only: "a {c2} {s2}" or "a {s2}".
        detail::parse_side(w, 0, w.size(), r.tuple.c2, r.tuple.s2, r.mask.c2, r.mask.s2, y);
    } else {
        detail::parse_side(w, 0, behind, r.tuple.c1, r.tuple.s1, r.mask.c1, r.mask.s1, y);
        detail::parse_side(w, behind + 1, w.size(), r.tuple.c2, r.tuple.s2, r.mask.c2, r.mask.s2, y);
    }
    if (!is_constructible(r.mask))
        throw std::invalid_argument("caption outside the grammar: " + y);
    return r;
}

// Restriction of a tuple to the factors a mask keeps.
inline PartialTuple restrict_tuple(const ConceptTuple& t, const SpecificationMask& m) {
    PartialTuple p;
    if (m.c1) p.c1 = t.c1;
    if (m.s1) p.s1 = t.s1;
    if (m.c2) p.c2 = t.c2;
    if (m.s2) p.s2 = t.s2;
    return p;
}

// ---------------------------------------------------------------------------
// Dataset specs and the corruption transforms.
// ---------------------------------------------------------------------------

struct DatasetSpec {
    std::map<ConceptTuple, long> counts;
    SpecificationMask mask = SpecificationMask::full();
    long target_total = 54000;
    uint64_t rng_seed = 0;

    long count(const ConceptTuple& t) const {
        auto it = counts.find(t);
        return it == counts.end() ? 0 : it->second;
    }

    long total() const {
        long s = 0;
        for (const auto& [t, n] : counts) s += n;
        return s;
    }

    long nonzero_blocks() const {
        long k = 0;
        for (const auto& [t, n] : counts) k += (n > 0);
        return k;
    }

    static DatasetSpec balanced(long target_total = 54000, uint64_t seed = 0) {
        DatasetSpec spec;
        spec.target_total = target_total;
        spec.rng_seed = seed;
        auto tuples = enumerate_valid_tuples();
        long per = target_total / long(tuples.size());
        long rem = target_total - per * long(tuples.size());
        long i = 0;
        for (const auto& t : tuples) spec.counts.emplace(t, per + (i++ < rem ? 1 : 0));
        return spec;
    }

    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
};

inline long subset_size(const DatasetSpec& spec, const PartialTuple& constraints) {
    long s = 0;
    for (const auto& [t, n] : spec.counts)
        if (constraints.matches(t)) s += n;
    return s;
}

namespace detail {
// Splits `total` over `keys` equally: floor, then the remainder one by one in
// canonical (map) order.
inline void distribute(std::map<ConceptTuple, long>& counts, const std::vector<ConceptTuple>& keys,
                       long total) {
    if (keys.empty()) {
        if (total != 0) throw std::logic_error("distribute: image mass with no blocks");
        return;
    }
    long per = total / long(keys.size());
    long rem = total - per * long(keys.size());
    long i = 0;
    for (const auto& k : keys) counts[k] = per + (i++ < rem ? 1 : 0);
}
}  // namespace detail

// Reduces the proportion of images whose factor `fv.factor` equals `fv.value`
// to p, rescaling the unaffected blocks so the total stays at target_total.
inline DatasetSpec apply_scarcity(const DatasetSpec& spec, const FactorValue& fv, double p) {
    PartialTuple constraint;
    switch (fv.factor) {
        case FactorName::BackColor: constraint.c1 = static_cast<Color>(fv.value); break;
        case FactorName::BackShape: constraint.s1 = static_cast<Shape>(fv.value); break;
        case FactorName::FrontColor: constraint.c2 = static_cast<Color>(fv.value); break;
        case FactorName::FrontShape: constraint.s2 = static_cast<Shape>(fv.value); break;
    }
    double baseline = double(subset_size(spec, constraint)) / double(spec.target_total);
    if (p < 0.0 || p > baseline + 1e-12)
        throw std::invalid_argument("apply_scarcity: p exceeds current subset proportion");

    std::vector<ConceptTuple> affected, rest;
    for (const auto& [t, n] : spec.counts) {
        if (n == 0) continue;
        (constraint.matches(t) ? affected : rest).push_back(t);
    }
    long affected_total = std::lround(p * double(spec.target_total));

    DatasetSpec out = spec;
    for (auto& [t, n] : out.counts) n = 0;
    detail::distribute(out.counts, affected, affected_total);
    detail::distribute(out.counts, rest, spec.target_total - affected_total);
    return out;
}

// Zeroes one block and rescales the rest.
inline DatasetSpec apply_removal(const DatasetSpec& spec, const ConceptTuple& removed) {
    std::vector<ConceptTuple> rest;
    for (const auto& [t, n] : spec.counts)
        if (n > 0 && t != removed) rest.push_back(t);

    DatasetSpec out = spec;
    for (auto& [t, n] : out.counts) n = 0;
    detail::distribute(out.counts, rest, spec.target_total);
    return out;
}

// Ties two concepts: keeps only blocks where (a.factor == a.value) iff
// (b.factor == b.value), then injects `injected_count` images of the
// (a holds, b fails) blocks.
inline DatasetSpec apply_bias(const DatasetSpec& spec, const FactorValue& a, const FactorValue& b,
                              long injected_count) {
    if (a.factor == b.factor) throw std::invalid_argument("apply_bias: tied factors must be distinct");
    if (injected_count < 0 || injected_count > spec.target_total)
        throw std::invalid_argument("apply_bias: injected_count outside [0, target_total]");

    std::vector<ConceptTuple> surviving, injected;
    for (const auto& [t, n] : spec.counts) {
        if (n == 0) continue;
        bool ha = t.at(a.factor) == a.value;
        bool hb = t.at(b.factor) == b.value;
        if (ha == hb)
            surviving.push_back(t);
        else if (ha && !hb)
            injected.push_back(t);
        // (!ha && hb) blocks stay at zero
    }

    DatasetSpec out = spec;
    for (auto& [t, n] : out.counts) n = 0;
    detail::distribute(out.counts, injected, injected_count);
    detail::distribute(out.counts, surviving, spec.target_total - injected_count);
    return out;
}

// ---------------------------------------------------------------------------
// Out-of-distribution classification.
// ---------------------------------------------------------------------------

enum class OodClass : uint8_t { InDistribution, CompositionalOOD, PositionalOOD, OtherOOD };

inline const char* to_string(OodClass c) {
    switch (c) {
        case OodClass::InDistribution: return "in_distribution";
        case OodClass::CompositionalOOD: return "compositional_ood";
        case OodClass::PositionalOOD: return "positional_ood";
        case OodClass::OtherOOD: return "other_ood";
    }
    throw std::logic_error("bad OodClass");
}

// Position permutations that respect factor kinds: colours may only move to
// colour slots and shapes to shape slots, so the group is generated by
// c1<->c2 and s1<->s2.
inline std::array<ConceptTuple, 4> kind_respecting_permutations(const ConceptTuple& t) {
    return {
        ConceptTuple(t.c1, t.s1, t.c2, t.s2),
        ConceptTuple(t.c2, t.s1, t.c1, t.s2),
        ConceptTuple(t.c1, t.s2, t.c2, t.s1),
        ConceptTuple(t.c2, t.s2, t.c1, t.s1),
    };
}

inline OodClass classify_ood(const ConceptTuple& t, const DatasetSpec& spec) {
    if (spec.count(t) > 0) return OodClass::InDistribution;

    // Compositional: every component value occurs at its own position in some
    // nonzero training block.
    bool seen[4] = {false, false, false, false};
    for (const auto& [u, n] : spec.counts) {
        if (n == 0) continue;
        for (int j = 0; j < 4; ++j) {
            auto f = static_cast<FactorName>(j);
            if (u.at(f) == t.at(f)) seen[j] = true;
        }
    }
    if (seen[0] && seen[1] && seen[2] && seen[3]) return OodClass::CompositionalOOD;

    for (const auto& perm : kind_respecting_permutations(t))
        if (spec.count(perm) > 0) return OodClass::PositionalOOD;

    return OodClass::OtherOOD;
}

// ---------------------------------------------------------------------------
// Serialization (canonical: nlohmann object keys are sorted).
// ---------------------------------------------------------------------------

inline nlohmann::json DatasetSpec::to_json() const {
    nlohmann::json j;
    j["value_sets"]["colors"] = {"red", "green", "blue"};
    j["value_sets"]["shapes"] = {"circle", "triangle", "square"};
    nlohmann::json c = nlohmann::json::object();
    for (const auto& [t, n] : counts) c[t.key()] = n;
    j["counts"] = std::move(c);
    j["mask"] = {{"c1", mask.c1}, {"s1", mask.s1}, {"c2", mask.c2}, {"s2", mask.s2}};
    j["target_total"] = target_total;
    j["rng_seed"] = rng_seed;
    return j;
}

inline DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
    DatasetSpec spec;
    spec.counts.clear();
    for (const auto& [k, v] : j.at("counts").items())
        spec.counts.emplace(ConceptTuple::from_key(k), v.get<long>());
    const auto& m = j.at("mask");
    spec.mask = {m.at("c1").get<bool>(), m.at("s1").get<bool>(), m.at("c2").get<bool>(),
                 m.at("s2").get<bool>()};
    spec.target_total = j.at("target_total").get<long>();
    spec.rng_seed = j.at("rng_seed").get<uint64_t>();
    return spec;
}

}  // namespace concept_reach
