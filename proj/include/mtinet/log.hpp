#pragma once

#include <functional>
#include <string>

namespace mtinet {

/// Warnings go to stderr unless a sink is installed (tests capture them).
void log_warning(const std::string& message);
void set_log_sink(std::function<void(const std::string&)> sink);

}  // namespace mtinet
