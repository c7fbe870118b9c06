#pragma once

#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace pmp::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

inline Level& threshold() {
    static Level level = Level::kInfo;
    return level;
}

inline void set_level(Level level) { threshold() = level; }

inline Level parse_level(std::string_view name) {
    if (name == "debug") return Level::kDebug;
    if (name == "info") return Level::kInfo;
    if (name == "warn" || name == "warning") return Level::kWarn;
    if (name == "error") return Level::kError;
    if (name == "off" || name == "quiet") return Level::kOff;
    return Level::kInfo;
}

template <class... Args>
void write(Level level, std::string_view tag, const Args&... args) {
    if (level < threshold()) return;
    static std::mutex mu;
    std::ostringstream os;
    os << '[' << tag << "] ";
    (os << ... << args);
    os << '\n';
    std::lock_guard lock(mu);
    std::cerr << os.str();
}

template <class... Args>
void debug(const Args&... args) { write(Level::kDebug, "debug", args...); }
template <class... Args>
void info(const Args&... args) { write(Level::kInfo, "info", args...); }
template <class... Args>
void warn(const Args&... args) { write(Level::kWarn, "warn", args...); }
template <class... Args>
void error(const Args&... args) { write(Level::kError, "error", args...); }

}  // namespace pmp::log
