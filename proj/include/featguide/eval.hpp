#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "featguide/tensor.hpp"
#include "json.hpp"

namespace featguide {

/// (x, y) in pixels.
using Point2 = std::array<double, 2>;

struct EvalCase {
  std::string name;
  std::vector<Point2> edited;
  std::vector<Point2> targets;
  /// Handle points before editing; their distance to targets is the upper bound.
  std::vector<Point2> initial;
  std::optional<double> preparing_seconds;
  std::optional<double> inference_seconds;
};

struct CaseReport {
  std::string name;
  std::size_t points = 0;
  double mean_distance = 0.0;
  double initial_distance = 0.0;
};

struct EvalReport {
  std::size_t images = 0;
  std::size_t points = 0;
  /// Pooled over every point of every image.
  double mean_distance = 0.0;
  double initial_distance = 0.0;
  std::optional<double> mean_preparing_seconds;
  std::optional<double> mean_inference_seconds;
  std::vector<CaseReport> cases;
};

/// Mean Euclidean distance between corresponding points. Throws ContractError on
/// length mismatch or empty input.
double mean_point_distance(const std::vector<Point2>& a, const std::vector<Point2>& b);

EvalReport evaluate_points(const std::vector<EvalCase>& cases);

/// targets.json:
///   {"v":1,"images":[{"name":"face0","targets":[[x,y],..],"initial":[[x,y],..]}]}
/// results_dir/<name>.points.json: {"points":[[x,y],..]} from an external detector.
/// results_dir/<name>.timing.json (optional): {"preparing_seconds":..,"inference_seconds":..}
EvalReport evaluate_directory(const std::filesystem::path& results_dir, const std::filesystem::path& targets_json);

nlohmann::json report_to_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace featguide
