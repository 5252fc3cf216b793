// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace dymoe::dlog {

enum class Level : int { Error = 0, Info = 1, Debug = 2 };

/// Resolved once from DYMOE_LOG_LEVEL (error | info | debug); defaults to
/// info on unset or unknown values.
Level level();

void error(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void info(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
void debug(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

}  // namespace dymoe::dlog
