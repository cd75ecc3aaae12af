#include "lpa/diagnostics.hpp"

#include <iostream>
#include <mutex>

namespace lpa {

namespace {

std::mutex g_mutex;

WarningHandler& handler() {
    static WarningHandler h = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return h;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler next) {
    std::lock_guard lock(g_mutex);
    auto previous = std::move(handler());
    handler() = std::move(next);
    return previous;
}

void warn(const std::string& message) {
    std::lock_guard lock(g_mutex);
    if (handler()) {
        handler()(message);
    }
}

}  // namespace lpa
