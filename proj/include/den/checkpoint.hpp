#pragma once

#include <filesystem>
#include <string>

#include "den/network.hpp"

namespace den {

inline constexpr int kCheckpointFormatVersion = 1;

// Single JSON document; reals use shortest round-trip formatting, so
// parse(dump(x)) reproduces every double bit-for-bit.
std::string checkpoint_dump(const DenNetwork& net);

// Throws FormatError on malformed input or a format_version other than
// kCheckpointFormatVersion (the message names both versions).
DenNetwork checkpoint_parse(const std::string& text);

void save_checkpoint(const DenNetwork& net, const std::filesystem::path& path);
DenNetwork load_checkpoint(const std::filesystem::path& path);

}  // namespace den
