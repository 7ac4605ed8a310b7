#pragma once

#include <string>

/// Serves `root` as static files, plus `model` (if non-empty) at /model.clipgs. Blocks until stopped;
/// returns false with a message if the server cannot start.
bool serve_static(const std::string& root, const std::string& model, const std::string& host, int port, std::string& error);
