#include "ugs/service.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "ugs/error.hpp"
#include "ugs/label_io.hpp"

namespace ugs {

namespace {

const std::map<std::string, std::string>& image_types() {
    static const std::map<std::string, std::string> types = {
        {".png", "image/png"},
        {".jpg", "image/jpeg"},
        {".jpeg", "image/jpeg"},
        {".ppm", "image/x-portable-pixmap"},
        {".pgm", "image/x-portable-graymap"},
        {".bmp", "image/bmp"},
    };
    return types;
}

HttpResponse json_response(int status, const Json& j) { return {status, "application/json", j.dump()}; }

HttpResponse error_response(int status, const std::string& kind, const std::string& message) {
    Json j;
    j["error"] = message;
    j["kind"] = kind;
    return json_response(status, j);
}

struct BadRequest {
    int status;
    std::string kind;
    std::string message;
};

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::stringstream ss(path);
    for (std::string p; std::getline(ss, p, '/');) {
        if (!p.empty()) parts.push_back(p);
    }
    return parts;
}

int parse_int(const std::map<std::string, std::string>& q, const std::string& key) {
    const auto it = q.find(key);
    if (it == q.end()) throw BadRequest{400, "malformed_request", "missing query parameter " + key};
    const std::string& s = it->second;
    std::size_t used = 0;
    long v = 0;
    try {
        v = std::stol(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size()) throw BadRequest{400, "malformed_request", key + " must be an integer"};
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        throw BadRequest{422, "out_of_range", key + " is out of range"};
    }
    return static_cast<int>(v);
}

double parse_g(const std::map<std::string, std::string>& q) {
    const auto it = q.find("g");
    if (it == q.end()) throw BadRequest{400, "malformed_request", "missing query parameter g"};
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(it->second, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (it->second.empty() || used != it->second.size() || !std::isfinite(v)) {
        throw BadRequest{400, "malformed_request", "g must be a finite number"};
    }
    return v;
}

void check_g(double g) {
    if (!(g >= 0.1 && g <= 1.0)) throw BadRequest{422, "out_of_range", "g must lie in [0.1, 1.0]"};
}

void check_point(const PseudoLabelSet& labels, int x, int y) {
    if (x < 0 || y < 0 || x >= labels.width || y >= labels.height) {
        throw BadRequest{422, "out_of_range", "point is outside the image"};
    }
}

Json mask_payload(const std::optional<GranularMask>& m, double g) {
    Json j;
    if (m) {
        j["mask"] = rle_to_json(rle_encode(m->mask));
        j["granularity"] = m->granularity;
        j["instance_id"] = m->instance_id;
    } else {
        j["mask"] = nullptr;
        j["granularity"] = g;
        j["instance_id"] = nullptr;
    }
    return j;
}

HttpResponse route(const ServeState& state, const HttpRequest& req) {
    const auto parts = split_path(req.path);
    if (parts.size() < 2 || parts[0] != "api" || parts[1] != "images") {
        throw BadRequest{404, "not_found", "no route for " + req.path};
    }
    if (parts.size() == 2) {
        if (req.method != "GET") throw BadRequest{405, "method_not_allowed", "use GET"};
        Json arr = Json::array();
        for (const auto& [id, labels] : state.labels) {
            Json e;
            e["id"] = id;
            e["width"] = labels.width;
            e["height"] = labels.height;
            arr.push_back(std::move(e));
        }
        return json_response(200, arr);
    }
    if (parts.size() != 4) throw BadRequest{404, "not_found", "no route for " + req.path};
    const std::string& id = parts[2];
    const std::string& action = parts[3];
    const auto it = state.labels.find(id);
    const bool known_action = action == "hierarchy" || action == "mask" || action == "refine" || action == "raw";
    if (!known_action) throw BadRequest{404, "not_found", "no route for " + req.path};
    if (it == state.labels.end()) throw BadRequest{404, "not_found", "unknown image " + id};
    const PseudoLabelSet& labels = it->second;
    const std::string want_method = action == "refine" ? "POST" : "GET";
    if (req.method != want_method) throw BadRequest{405, "method_not_allowed", "use " + want_method};

    if (action == "hierarchy") return {200, "application/json", state.hierarchy_json.at(id)};
    if (action == "raw") {
        const auto raw = state.raw_images.find(id);
        if (raw == state.raw_images.end()) throw BadRequest{404, "not_found", "no raw image for " + id};
        std::ifstream in(raw->second, std::ios::binary);
        if (!in) throw BadRequest{500, "io_error", "cannot read raw image for " + id};
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return {200, image_types().at(raw->second.extension().string()), std::move(bytes)};
    }
    if (action == "mask") {
        const int x = parse_int(req.query, "x");
        const int y = parse_int(req.query, "y");
        const double g = parse_g(req.query);
        check_point(labels, x, y);
        check_g(g);
        return json_response(200, mask_payload(query_mask(labels, x, y, g), g));
    }

    // refine
    Json body;
    try {
        body = Json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
        throw BadRequest{400, "malformed_request", "body is not valid JSON"};
    }
    std::vector<Click> clicks;
    double g = 0.0;
    try {
        for (const auto& c : body.at("clicks")) {
            clicks.push_back({c.at("x").get<int>(), c.at("y").get<int>(), c.at("positive").get<bool>()});
        }
        g = body.at("g").get<double>();
    } catch (const nlohmann::json::exception&) {
        throw BadRequest{400, "malformed_request", "body must be {\"clicks\":[{\"x\",\"y\",\"positive\"}],\"g\"}"};
    }
    for (const auto& c : clicks) check_point(labels, c.x, c.y);
    check_g(g);
    const auto first = std::find_if(clicks.begin(), clicks.end(), [](const Click& c) { return c.positive; });
    if (first == clicks.end()) throw BadRequest{422, "out_of_range", "refine needs at least one positive click"};
    return json_response(200, mask_payload(query_mask(labels, first->x, first->y, g, clicks), g));
}

}  // namespace

ServeState load_state(const std::filesystem::path& data_dir) {
    if (!std::filesystem::is_directory(data_dir)) throw IoError("data directory not found: " + data_dir.string());
    std::vector<std::filesystem::path> label_files;
    std::map<std::string, std::filesystem::path> images_by_stem;
    for (const auto& e : std::filesystem::directory_iterator(data_dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".json") label_files.push_back(e.path());
        if (image_types().count(ext)) images_by_stem[e.path().stem().string()] = e.path();
    }
    std::sort(label_files.begin(), label_files.end());
    if (label_files.empty()) throw IoError("no label files in " + data_dir.string());

    ServeState state;
    state.data_dir = data_dir;
    std::vector<std::string> problems;
    for (const auto& f : label_files) {
        try {
            PseudoLabelSet labels = read_labels(f);
            const auto issues = check_invariants(labels);
            if (!issues.empty()) {
                problems.push_back(f.string() + ": " + issues.front() +
                                   (issues.size() > 1 ? " (+" + std::to_string(issues.size() - 1) + " more)" : ""));
                continue;
            }
            if (state.labels.count(labels.image_id)) {
                problems.push_back(f.string() + ": duplicate image_id " + labels.image_id);
                continue;
            }
            const auto raw = images_by_stem.find(f.stem().string());
            if (raw != images_by_stem.end()) state.raw_images[labels.image_id] = raw->second;
            state.hierarchy_json[labels.image_id] = dump_labels(labels);
            state.labels.emplace(labels.image_id, std::move(labels));
        } catch (const Error& e) {
            problems.push_back(e.what());
        }
    }
    if (!problems.empty()) {
        std::string msg = "invalid label files:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw FormatError(msg);
    }
    return state;
}

HttpResponse handle(const ServeState& state, const HttpRequest& request) {
    try {
        return route(state, request);
    } catch (const BadRequest& e) {
        return error_response(e.status, e.kind, e.message);
    } catch (const Error& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const std::exception& e) {
        return error_response(500, "internal", e.what());
    }
}

struct Server::Impl {
    const ServeState& state;
    httplib::Server server;
};

Server::Server(const ServeState& state) : impl_(new Impl{state, {}}) {
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
        HttpRequest r;
        r.method = req.method;
        r.path = req.path;
        for (const auto& [k, v] : req.params) r.query.emplace(k, v);
        r.body = req.body;
        const HttpResponse out = handle(impl_->state, r);
        res.status = out.status;
        res.set_content(out.body, out.content_type);
    };
    const std::string any = R"(/.*)";
    impl_->server.Get(any, forward);
    impl_->server.Post(any, forward);
    impl_->server.Put(any, forward);
    impl_->server.Delete(any, forward);
}

Server::~Server() {
    impl_->server.stop();
    delete impl_;
}

int Server::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw IoError("cannot bind " + host);
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void Server::listen() { impl_->server.listen_after_bind(); }

void Server::stop() { impl_->server.stop(); }

}  // namespace ugs
