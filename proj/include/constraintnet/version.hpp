#pragma once

namespace cnet {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr int kModelFormatVersion = 1;
inline constexpr int kManifestVersion = 1;

}  // namespace cnet
