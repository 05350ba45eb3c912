// Minimal stderr logging.
#pragma once

#include <iostream>
#include <mutex>
#include <string_view>

namespace kpreg::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

inline Level &threshold() {
    static Level level = Level::info;
    return level;
}

inline void write(Level level, std::string_view msg) {
    static std::mutex mu;
    if (level < threshold()) {
        return;
    }
    static constexpr const char *tags[] = {"debug", "info", "warn", "error"};
    std::lock_guard lock(mu);
    std::cerr << '[' << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void info(std::string_view msg) { write(Level::info, msg); }
inline void warn(std::string_view msg) { write(Level::warn, msg); }
inline void error(std::string_view msg) { write(Level::error, msg); }

} // namespace kpreg::log
