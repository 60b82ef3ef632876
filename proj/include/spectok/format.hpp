#pragma once

#include <iomanip>
#include <sstream>
#include <string>

namespace spectok::detail {

// Shortest-ish decimal rendering used by every CSV writer: 12 significant
// digits keeps reruns byte-identical without printing float noise.
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

}  // namespace spectok::detail
