#include "obd/warnings.hpp"

#include <iostream>
#include <utility>

namespace obd {

namespace {

void default_handler(const std::string& message) {
    std::cerr << "warning: " << message << "\n";
}

WarningHandler& handler_slot() {
    static WarningHandler handler = default_handler;
    return handler;
}

}  // namespace

WarningHandler set_warning_handler(WarningHandler handler) {
    WarningHandler previous = std::move(handler_slot());
    handler_slot() = handler ? std::move(handler) : default_handler;
    return previous;
}

void warn(const std::string& message) { handler_slot()(message); }

}  // namespace obd
