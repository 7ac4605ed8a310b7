#include "serve.hpp"

#include <fstream>
#include <iterator>

#include <httplib.h>

bool serve_static(const std::string& root, const std::string& model, const std::string& host, int port, std::string& error) {
    httplib::Server server;
    server.set_file_extension_and_mimetype_mapping("clipgs", "application/octet-stream");
    server.set_file_extension_and_mimetype_mapping("mjs", "text/javascript");
    if (!model.empty()) {
        server.Get("/model.clipgs", [model](const httplib::Request&, httplib::Response& res) {
            std::ifstream in(model, std::ios::binary);
            if (!in) {
                res.status = 404;
                return;
            }
            std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            res.set_content(bytes, "application/octet-stream");
        });
    }
    if (!server.set_mount_point("/", root)) {
        error = "cannot serve '" + root + "'";
        return false;
    }
    if (!server.listen(host, port)) {
        error = "cannot listen on " + host + ":" + std::to_string(port);
        return false;
    }
    return true;
}
