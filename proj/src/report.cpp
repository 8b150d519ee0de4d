#include "regconv/report.hpp"

#include <cstdio>
#include <fstream>

#include "regconv/tensor.hpp"

#ifndef REGCONV_VERSION
#define REGCONV_VERSION "0.0.0"
#endif

namespace regconv {

const char* version() { return REGCONV_VERSION; }

std::string interior_mask_spec() { return "pixels at distance >= ceil(H/8) from every border"; }

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json Report::to_json() const {
  return {{"format", "regconv-report-v1"},
          {"kind", kind},
          {"group_order", group_order},
          {"seed", seed},
          {"trials", trials},
          {"metrics", metrics},
          {"tolerances", tolerances},
          {"pass", pass},
          {"mask", interior_mask_spec()},
          {"config", config},
          {"config_hash", config_hash(config)},
          {"version", version()}};
}

void write_report(const std::string& path, const Report& r) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << r.to_json().dump(2) << '\n';
  if (!os) throw Error("failed to write " + path);
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  os << "step,loss,accuracy\n";
  char line[128];
  for (const auto& p : curve) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", p.step, p.loss, p.accuracy);
    os << line;
  }
  if (!os) throw Error("failed to write " + path);
}

}  // namespace regconv
