#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace lemevit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Flat key=value lines; '#' starts a comment, blank lines are skipped.
/// Keys are normalized to dash form (meta_len → meta-len). Throws UsageError
/// on malformed lines or repeated keys.
std::map<std::string, std::string> parse_config_text(const std::string& text);

/// Runs one subcommand. argv[0] is the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lemevit::cli
