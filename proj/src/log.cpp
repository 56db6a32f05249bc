#include "cmac/log.hpp"

#include <iostream>

namespace cmac::log {

namespace {
Level g_level = Level::warn;

void emit(Level lvl, const char* tag, std::string_view msg) {
  if (lvl < g_level) return;
  std::clog << "[" << tag << "] " << msg << '\n';
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level; }

void debug(std::string_view msg) { emit(Level::debug, "debug", msg); }
void info(std::string_view msg) { emit(Level::info, "info", msg); }
void warn(std::string_view msg) { emit(Level::warn, "warn", msg); }
void error(std::string_view msg) { emit(Level::error, "error", msg); }

}  // namespace cmac::log
