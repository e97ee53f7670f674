#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include "ugs/hierarchy.hpp"

namespace ugs {

// Read-only after load_state.
struct ServeState {
    std::filesystem::path data_dir;
    std::map<std::string, PseudoLabelSet> labels;
    std::map<std::string, std::string> hierarchy_json;  // serialized once at load
    std::map<std::string, std::filesystem::path> raw_images;
};

// Every *.json file directly inside data_dir is a label file; an image file sharing
// its stem (png, jpg, jpeg, ppm, pgm, bmp) is served as the raw image. All invalid
// files are listed in the thrown FormatError.
ServeState load_state(const std::filesystem::path& data_dir);

struct HttpRequest {
    std::string method = "GET";
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
};

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

// Pure request handler; never throws.
HttpResponse handle(const ServeState& state, const HttpRequest& request);

// Blocks serving `state` until stop is requested through the returned handle.
class Server {
public:
    explicit Server(const ServeState& state);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    // Binds and returns the bound port (an ephemeral one when port is 0).
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind.
    void listen();
    void stop();

private:
    struct Impl;
    Impl* impl_;
};

}  // namespace ugs
