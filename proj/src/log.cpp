#include "mtinet/log.hpp"

#include <iostream>
#include <mutex>

namespace mtinet {

namespace {
std::mutex sink_mutex;
std::function<void(const std::string&)> current_sink;
}  // namespace

void log_warning(const std::string& message) {
  std::lock_guard lock(sink_mutex);
  if (current_sink)
    current_sink(message);
  else
    std::cerr << "warning: " << message << '\n';
}

void set_log_sink(std::function<void(const std::string&)> sink) {
  std::lock_guard lock(sink_mutex);
  current_sink = std::move(sink);
}

}  // namespace mtinet
