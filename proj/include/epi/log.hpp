// Copyright 2026 The epilab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <string>

namespace epi {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

/// Threshold read once from EPI_LOG_LEVEL (error|warn|info|debug, default
/// warn). set_log_level overrides it.
LogLevel log_level();
void set_log_level(LogLevel level);
LogLevel parse_log_level(const std::string& name);

/// Writes "[level] message" to stderr when level passes the threshold.
void log(LogLevel level, const std::string& message);

inline void log_error(const std::string& m) { log(LogLevel::error, m); }
inline void log_warn(const std::string& m) { log(LogLevel::warn, m); }
inline void log_info(const std::string& m) { log(LogLevel::info, m); }
inline void log_debug(const std::string& m) { log(LogLevel::debug, m); }

}  // namespace epi
