#pragma once

#include <ostream>
#include <span>
#include <string>

namespace mmbert::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

// args excludes the program name. Subcommands: gen-synth, build-vocab,
// pretrain, finetune, evaluate, predict, attnmap.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace mmbert::cli
