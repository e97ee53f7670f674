#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <thread>

#include <httplib.h>

#include "test_util.hpp"
#include "ugs/error.hpp"
#include "ugs/fixtures.hpp"
#include "ugs/label_io.hpp"
#include "ugs/service.hpp"

using namespace ugs;
using test_util::rect_mask;

namespace {

PseudoLabelSet nested(const std::string& id) {
    PseudoLabelSet s{id, 20, 30, {}};
    MaskHierarchy h;
    h.instance_id = 0;
    h.root = {rect_mask(20, 30, 0, 0, 10, 10), 1.0, 0.8, 0, MaskLevel::instance};
    h.children.push_back({rect_mask(20, 30, 0, 0, 2, 2), 0.1, 0.7, 0, MaskLevel::conquer});
    h.children.push_back({rect_mask(20, 30, 0, 0, 5, 5), 0.5, 0.7, 0, MaskLevel::part});
    s.hierarchies.push_back(h);
    MaskHierarchy other;
    other.instance_id = 1;
    other.root = {rect_mask(20, 30, 12, 12, 20, 30), 1.0, 0.9, 1, MaskLevel::instance};
    s.hierarchies.push_back(other);
    return s;
}

struct Fixture {
    test_util::TempDir dir{"serve"};
    ServeState state;

    Fixture() {
        write_labels(nested("alpha"), dir / "alpha.json");
        write_labels(nested("beta"), dir / "beta.json");
        std::ofstream(dir / "alpha.png", std::ios::binary) << std::string("\x89PNG\r\n\x1a\n", 8) << "payload";
        state = load_state(dir.path());
    }
};

HttpResponse get(const ServeState& s, const std::string& path, std::map<std::string, std::string> q = {}) {
    return handle(s, {"GET", path, std::move(q), ""});
}

HttpResponse post(const ServeState& s, const std::string& path, const std::string& body) {
    return handle(s, {"POST", path, {}, body});
}

std::string kind(const HttpResponse& r) { return Json::parse(r.body).at("kind").get<std::string>(); }

}  // namespace

TEST_CASE("load_state reads every label file") {
    Fixture f;
    CHECK(f.state.labels.size() == 2);
    CHECK(f.state.raw_images.count("alpha") == 1);
    CHECK(f.state.raw_images.count("beta") == 0);
}

TEST_CASE("load_state rejects empty dirs and lists every bad file") {
    test_util::TempDir empty("empty");
    CHECK_THROWS_AS(load_state(empty.path()), IoError);
    CHECK_THROWS_AS(load_state(empty / "missing"), IoError);

    test_util::TempDir dir("corrupt");
    write_labels(nested("ok"), dir / "ok.json");
    std::ofstream(dir / "broken.json") << "{not json";
    auto bad = nested("bad");
    bad.hierarchies[0].root.granularity = 0.5;
    write_labels(bad, dir / "invariant.json");
    write_labels(nested("ok"), dir / "twin.json");
    try {
        load_state(dir.path());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("broken.json") != std::string::npos);
        CHECK(msg.find("invariant.json") != std::string::npos);
        CHECK(msg.find("twin.json") != std::string::npos);
        CHECK(msg.find("ok.json:") == std::string::npos);
    }
}

TEST_CASE("image listing") {
    Fixture f;
    const auto r = get(f.state, "/api/images");
    CHECK(r.status == 200);
    CHECK(r.content_type == "application/json");
    const auto j = Json::parse(r.body);
    REQUIRE(j.size() == 2);
    CHECK(j[0].at("id") == "alpha");
    CHECK(j[0].at("width") == 30);
    CHECK(j[0].at("height") == 20);
    CHECK(post(f.state, "/api/images", "").status == 405);
}

TEST_CASE("hierarchy is the label file round-tripped") {
    Fixture f;
    const auto r = get(f.state, "/api/images/alpha/hierarchy");
    CHECK(r.status == 200);
    CHECK(r.body == dump_labels(nested("alpha")));
    CHECK(dump_labels(labels_from_json(Json::parse(r.body))) == r.body);
    CHECK(get(f.state, "/api/images/gamma/hierarchy").status == 404);
}

TEST_CASE("mask query returns the stored RLE") {
    Fixture f;
    const auto r = get(f.state, "/api/images/alpha/mask", {{"x", "1"}, {"y", "1"}, {"g", "0.15"}});
    REQUIRE(r.status == 200);
    const auto j = Json::parse(r.body);
    const auto stored = labels_to_json(nested("alpha"));
    CHECK(j.at("mask").dump() == stored["hierarchies"][0]["children"][0]["mask"].dump());
    CHECK(j.at("granularity") == 0.1);
    CHECK(j.at("instance_id") == 0);
    CHECK(get(f.state, "/api/images/alpha/mask", {{"x", "1"}, {"y", "1"}, {"g", "0.15"}}).body == r.body);

    const auto other = Json::parse(get(f.state, "/api/images/alpha/mask", {{"x", "20"}, {"y", "15"}, {"g", "0.3"}}).body);
    CHECK(other.at("instance_id") == 1);
}

TEST_CASE("background query gives a null mask") {
    Fixture f;
    const auto r = get(f.state, "/api/images/alpha/mask", {{"x", "25"}, {"y", "2"}, {"g", "0.4"}});
    REQUIRE(r.status == 200);
    const auto j = Json::parse(r.body);
    CHECK(j.at("mask").is_null());
    CHECK(j.at("instance_id").is_null());
    CHECK(j.at("granularity") == 0.4);
}

TEST_CASE("mask query validation") {
    Fixture f;
    const std::string p = "/api/images/alpha/mask";
    CHECK(get(f.state, p, {{"x", "1"}, {"y", "1"}, {"g", "1.5"}}).status == 422);
    CHECK(get(f.state, p, {{"x", "1"}, {"y", "1"}, {"g", "0.05"}}).status == 422);
    CHECK(get(f.state, p, {{"x", "30"}, {"y", "1"}, {"g", "0.5"}}).status == 422);
    CHECK(get(f.state, p, {{"x", "-1"}, {"y", "1"}, {"g", "0.5"}}).status == 422);
    const auto missing = get(f.state, p, {{"x", "1"}, {"g", "0.5"}});
    CHECK(missing.status == 400);
    CHECK(kind(missing) == "malformed_request");
    CHECK(get(f.state, p, {{"x", "1.5"}, {"y", "1"}, {"g", "0.5"}}).status == 400);
    CHECK(get(f.state, p, {{"x", "1"}, {"y", "1"}, {"g", "nan"}}).status == 400);
    CHECK(get(f.state, "/api/images/nope/mask", {{"x", "1"}, {"y", "1"}, {"g", "0.5"}}).status == 404);
}

TEST_CASE("refine applies click filtering") {
    Fixture f;
    const std::string p = "/api/images/alpha/refine";
    const auto r = post(f.state, p, R"({"clicks":[{"x":1,"y":1,"positive":true},{"x":4,"y":4,"positive":true}],"g":0.1})");
    REQUIRE(r.status == 200);
    CHECK(Json::parse(r.body).at("granularity") == 0.5);
    CHECK(post(f.state, p, R"({"clicks":[{"x":1,"y":1,"positive":false}],"g":0.1})").status == 422);
    CHECK(post(f.state, p, "not json").status == 400);
    CHECK(post(f.state, p, R"({"clicks":[{"x":1}],"g":0.1})").status == 400);
    CHECK(post(f.state, p, R"({"clicks":[{"x":99,"y":1,"positive":true}],"g":0.1})").status == 422);
    CHECK(post(f.state, p, R"({"clicks":[{"x":1,"y":1,"positive":true}],"g":2})").status == 422);
    CHECK(get(f.state, p).status == 405);
}

TEST_CASE("raw image bytes") {
    Fixture f;
    const auto r = get(f.state, "/api/images/alpha/raw");
    CHECK(r.status == 200);
    CHECK(r.content_type == "image/png");
    CHECK(r.body.size() == 15);
    CHECK(get(f.state, "/api/images/beta/raw").status == 404);
}

TEST_CASE("unknown routes") {
    Fixture f;
    for (const char* path : {"/", "/api", "/api/other", "/api/images/alpha", "/api/images/alpha/zzz",
                             "/api/images/alpha/mask/extra"}) {
        const auto r = get(f.state, path);
        CHECK(r.status == 404);
        CHECK(kind(r) == "not_found");
    }
}

TEST_CASE("real server on an ephemeral port") {
    Fixture f;
    Server server(f.state);
    const int port = server.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    std::thread t([&] { server.listen(); });
    httplib::Client client("127.0.0.1", port);
    client.set_connection_timeout(5);

    const auto list = client.Get("/api/images");
    REQUIRE(list);
    CHECK(list->status == 200);
    CHECK(Json::parse(list->body).size() == 2);

    const auto mask = client.Get("/api/images/alpha/mask?x=1&y=1&g=0.15");
    REQUIRE(mask);
    CHECK(mask->status == 200);
    CHECK(mask->body == get(f.state, "/api/images/alpha/mask", {{"x", "1"}, {"y", "1"}, {"g", "0.15"}}).body);

    const auto refine = client.Post("/api/images/alpha/refine",
                                    R"({"clicks":[{"x":1,"y":1,"positive":true}],"g":0.5})", "application/json");
    REQUIRE(refine);
    CHECK(refine->status == 200);

    const auto missing = client.Get("/api/images/zzz/hierarchy");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    const auto raw = client.Get("/api/images/alpha/raw");
    REQUIRE(raw);
    CHECK(raw->get_header_value("Content-Type") == "image/png");

    server.stop();
    t.join();
}
