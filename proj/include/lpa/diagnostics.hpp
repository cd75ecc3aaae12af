#pragma once

#include <functional>
#include <string>

namespace lpa {

using WarningHandler = std::function<void(const std::string&)>;

/// Replaces the process-wide warning sink (default: stderr). Returns the old one.
WarningHandler set_warning_handler(WarningHandler handler);

void warn(const std::string& message);

}  // namespace lpa
