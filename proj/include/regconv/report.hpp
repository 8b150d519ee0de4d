#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "regconv/train.hpp"

namespace regconv {

/// Library version string.
const char* version();

/// Human-readable description of the interior mask shared by every
/// equivariance and invariance measurement.
std::string interior_mask_spec();

/// 64-bit FNV-1a of the compact dump of a JSON value, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

/// Report "regconv-report-v1".
struct Report {
  std::string kind;
  int group_order = 0;
  std::uint64_t seed = 0;
  std::size_t trials = 0;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json tolerances = nlohmann::json::object();
  bool pass = true;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
};

void write_report(const std::string& path, const Report& r);

/// step,loss,accuracy
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& curve);

}  // namespace regconv
