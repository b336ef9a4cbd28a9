// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the command-line tool. Each reads its
// inputs from the resolved configuration, writes artifacts atomically with
// the configuration embedded, and prints a short summary to `out`.

#pragma once

#include <ostream>

#include "ldke/config.hpp"

namespace ldke {

void run_subcommand(const RunConfig& config, std::ostream& out);

}  // namespace ldke
