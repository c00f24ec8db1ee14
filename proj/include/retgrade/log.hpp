#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace retgrade::log {

inline std::atomic<bool> &quiet_flag() {
  static std::atomic<bool> q{false};
  return q;
}

inline void set_quiet(bool q) { quiet_flag() = q; }

inline std::mutex &stream_mutex() {
  static std::mutex m;
  return m;
}

inline void info(const std::string &msg) {
  if (quiet_flag())
    return;
  std::lock_guard lock(stream_mutex());
  std::cout << msg << '\n';
}

inline void warn(const std::string &msg) {
  if (quiet_flag())
    return;
  std::lock_guard lock(stream_mutex());
  std::cerr << "warning: " << msg << '\n';
}

} // namespace retgrade::log
