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

#include "epi/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>

#include "epi/errors.hpp"

namespace epi {

namespace {

std::atomic<int>& threshold() {
  static std::atomic<int> level = [] {
    const char* env = std::getenv("EPI_LOG_LEVEL");
    if (env == nullptr) return static_cast<int>(LogLevel::warn);
    try {
      return static_cast<int>(parse_log_level(env));
    } catch (const ConfigError&) {
      std::cerr << "[warn] ignoring EPI_LOG_LEVEL=" << env << '\n';
      return static_cast<int>(LogLevel::warn);
    }
  }();
  return level;
}

const char* level_name(LogLevel l) {
  switch (l) {
    case LogLevel::error: return "error";
    case LogLevel::warn: return "warn";
    case LogLevel::info: return "info";
    case LogLevel::debug: return "debug";
  }
  return "info";
}

}  // namespace

LogLevel log_level() { return static_cast<LogLevel>(threshold().load()); }

void set_log_level(LogLevel level) { threshold().store(static_cast<int>(level)); }

LogLevel parse_log_level(const std::string& name) {
  if (name == "error") return LogLevel::error;
  if (name == "warn") return LogLevel::warn;
  if (name == "info") return LogLevel::info;
  if (name == "debug") return LogLevel::debug;
  throw ConfigError("unknown log level '" + name + "' (expected error, warn, info or debug)");
}

void log(LogLevel level, const std::string& message) {
  if (static_cast<int>(level) > threshold().load()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << '[' << level_name(level) << "] " << message << '\n';
}

}  // namespace epi
