#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>

#include "test_util.hpp"
#include "ugs/error.hpp"
#include "ugs/fixtures.hpp"
#include "ugs/label_io.hpp"

using namespace ugs;

namespace {

PseudoLabelSet sample_labels() {
    const auto s = synth_features(fixtures::three_instance_spec(7, 0.05));
    return build_pseudolabels(s.map, "sample", {}).labels;
}

bool same(const PseudoLabelSet& a, const PseudoLabelSet& b) {
    if (a.image_id != b.image_id || a.height != b.height || a.width != b.width) return false;
    if (a.hierarchies.size() != b.hierarchies.size()) return false;
    auto eq = [](const GranularMask& x, const GranularMask& y) {
        return x.mask == y.mask && x.granularity == y.granularity && x.confidence == y.confidence &&
               x.instance_id == y.instance_id && x.level == y.level;
    };
    for (std::size_t i = 0; i < a.hierarchies.size(); ++i) {
        const auto& ha = a.hierarchies[i];
        const auto& hb = b.hierarchies[i];
        if (ha.instance_id != hb.instance_id || !eq(ha.root, hb.root)) return false;
        if (ha.children.size() != hb.children.size()) return false;
        for (std::size_t k = 0; k < ha.children.size(); ++k) {
            if (!eq(ha.children[k], hb.children[k])) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("rle json shape") {
    const RleMask r{3, 2, {1, 2, 3}};
    const auto j = rle_to_json(r);
    CHECK(j.dump() == R"({"size":[3,2],"counts":[1,2,3]})");
    CHECK(rle_from_json(j) == r);
    CHECK_THROWS_AS(rle_from_json(Json::parse(R"({"size":[3],"counts":[]})")), FormatError);
    CHECK_THROWS_AS(rle_from_json(Json::parse(R"({"size":[3,2]})")), FormatError);
}

TEST_CASE("granular mask json keeps the documented key order") {
    GranularMask m{BinaryMask::full(2, 2), 0.25, 0.5, 3, MaskLevel::part};
    const auto j = granular_mask_to_json(m);
    CHECK(j.dump() == R"({"mask":{"size":[2,2],"counts":[0,4]},"granularity":0.25,"confidence":0.5,"level":"part"})");
    const auto back = granular_mask_from_json(j, 3);
    CHECK(back.mask == m.mask);
    CHECK(back.level == MaskLevel::part);
    CHECK(back.instance_id == 3);
}

TEST_CASE("label set key order") {
    PseudoLabelSet s{"a", 1, 1, {}};
    CHECK(dump_labels(s) == R"({"image_id":"a","height":1,"width":1,"hierarchies":[]})");
}

TEST_CASE("file round trip is exact and byte-stable") {
    test_util::TempDir dir("labels");
    const auto labels = sample_labels();
    REQUIRE(!labels.hierarchies.empty());
    write_labels(labels, dir / "sub/a.json");
    const auto back = read_labels(dir / "sub/a.json");
    CHECK(same(labels, back));
    CHECK(dump_labels(back) == dump_labels(labels));
    write_labels(back, dir / "b.json");
    std::ifstream fa(dir / "sub/a.json"), fb(dir / "b.json");
    const std::string sa{std::istreambuf_iterator<char>(fa), {}};
    const std::string sb{std::istreambuf_iterator<char>(fb), {}};
    CHECK(sa == sb);
}

TEST_CASE("granularities survive serialization bit for bit") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    PseudoLabelSet s{"g", 4, 4, {}};
    MaskHierarchy h;
    h.root = {BinaryMask::full(4, 4), 1.0, 0.7, 0, MaskLevel::instance};
    for (int i = 0; i < 50; ++i) h.children.push_back({test_util::rect_mask(4, 4, 0, 0, 2, 2), u(rng), u(rng), 0, MaskLevel::conquer});
    s.hierarchies.push_back(h);
    CHECK(same(labels_from_json(Json::parse(dump_labels(s))), s));
}

TEST_CASE("malformed files report the path") {
    test_util::TempDir dir("badlabels");
    CHECK_THROWS_AS(read_labels(dir / "none.json"), IoError);
    {
        std::ofstream out(dir / "broken.json");
        out << "{\"image_id\": ";
    }
    try {
        read_labels(dir / "broken.json");
        FAIL("expected a FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("broken.json") != std::string::npos);
    }
    {
        std::ofstream out(dir / "level.json");
        out << R"({"image_id":"x","height":1,"width":1,"hierarchies":[{"instance_id":0,"root":)"
            << R"({"mask":{"size":[1,1],"counts":[0,1]},"granularity":1.0,"confidence":1.0,"level":"leaf"},"children":[]}]})";
    }
    CHECK_THROWS_AS(read_labels(dir / "level.json"), FormatError);
}

TEST_CASE("flatten puts roots first") {
    const auto labels = sample_labels();
    const auto flat = flatten_masks(labels);
    CHECK(flat.size() == labels.mask_count());
    CHECK(flat[0] == labels.hierarchies[0].root.mask);
}
