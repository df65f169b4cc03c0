#pragma once

namespace faitheval {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr int kReportFormatVersion = 1;
inline constexpr int kAdapterProtocolVersion = 1;
inline constexpr int kModelFileFormatVersion = 1;

}  // namespace faitheval
