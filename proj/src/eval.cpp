#include "featguide/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "featguide/tensor.hpp"

namespace featguide {

double mean_point_distance(const std::vector<Point2>& a, const std::vector<Point2>& b) {
  if (a.size() != b.size()) {
    throw ContractError("point lists differ in length: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
  if (a.empty()) throw ContractError("no points to compare");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += std::hypot(a[i][0] - b[i][0], a[i][1] - b[i][1]);
  return sum / static_cast<double>(a.size());
}

EvalReport evaluate_points(const std::vector<EvalCase>& cases) {
  EvalReport report;
  double sum = 0.0, sum_initial = 0.0;
  double prep = 0.0, infer = 0.0;
  std::size_t n_prep = 0, n_infer = 0;
  for (const EvalCase& c : cases) {
    CaseReport r;
    r.name = c.name;
    r.points = c.targets.size();
    r.mean_distance = mean_point_distance(c.edited, c.targets);
    r.initial_distance = mean_point_distance(c.initial, c.targets);
    sum += r.mean_distance * static_cast<double>(r.points);
    sum_initial += r.initial_distance * static_cast<double>(r.points);
    report.points += r.points;
    if (c.preparing_seconds) {
      prep += *c.preparing_seconds;
      ++n_prep;
    }
    if (c.inference_seconds) {
      infer += *c.inference_seconds;
      ++n_infer;
    }
    report.cases.push_back(std::move(r));
  }
  report.images = cases.size();
  if (report.points == 0) throw ContractError("no points to evaluate");
  report.mean_distance = sum / static_cast<double>(report.points);
  report.initial_distance = sum_initial / static_cast<double>(report.points);
  if (n_prep) report.mean_preparing_seconds = prep / static_cast<double>(n_prep);
  if (n_infer) report.mean_inference_seconds = infer / static_cast<double>(n_infer);
  return report;
}

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
}

std::vector<Point2> points_from(const nlohmann::json& arr, const std::string& where) {
  if (!arr.is_array()) throw ContractError(where + ": expected an array of [x, y]");
  std::vector<Point2> out;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
      throw ContractError(where + ": expected [x, y] numbers");
    }
    out.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return out;
}

}  // namespace

EvalReport evaluate_directory(const std::filesystem::path& results_dir, const std::filesystem::path& targets_json) {
  const nlohmann::json targets = read_json(targets_json);
  if (!targets.contains("images") || !targets["images"].is_array()) {
    throw ContractError(targets_json.string() + ": missing images array");
  }
  std::vector<EvalCase> cases;
  for (const auto& img : targets["images"]) {
    EvalCase c;
    c.name = img.at("name").get<std::string>();
    c.targets = points_from(img.at("targets"), c.name + ".targets");
    c.initial = points_from(img.at("initial"), c.name + ".initial");
    const nlohmann::json detected = read_json(results_dir / (c.name + ".points.json"));
    c.edited = points_from(detected.at("points"), c.name + ".points");
    const auto timing_path = results_dir / (c.name + ".timing.json");
    if (std::filesystem::exists(timing_path)) {
      const nlohmann::json timing = read_json(timing_path);
      if (timing.contains("preparing_seconds")) c.preparing_seconds = timing["preparing_seconds"].get<double>();
      if (timing.contains("inference_seconds")) c.inference_seconds = timing["inference_seconds"].get<double>();
    }
    cases.push_back(std::move(c));
  }
  return evaluate_points(cases);
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["v"] = 1;
  j["images"] = r.images;
  j["points"] = r.points;
  j["mean_distance"] = r.mean_distance;
  j["initial_distance"] = r.initial_distance;
  if (r.mean_preparing_seconds) j["mean_preparing_seconds"] = *r.mean_preparing_seconds;
  if (r.mean_inference_seconds) j["mean_inference_seconds"] = *r.mean_inference_seconds;
  nlohmann::json cases = nlohmann::json::array();
  for (const CaseReport& c : r.cases) {
    cases.push_back({{"name", c.name},
                     {"points", c.points},
                     {"mean_distance", c.mean_distance},
                     {"initial_distance", c.initial_distance}});
  }
  j["cases"] = cases;
  return j;
}

std::string report_table(const EvalReport& r) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-24s %7s %12s %12s\n", "image", "points", "distance", "initial");
  out += line;
  for (const CaseReport& c : r.cases) {
    std::snprintf(line, sizeof line, "%-24s %7zu %12.4f %12.4f\n", c.name.c_str(), c.points, c.mean_distance,
                  c.initial_distance);
    out += line;
  }
  std::snprintf(line, sizeof line, "%-24s %7zu %12.4f %12.4f\n", "mean", r.points, r.mean_distance,
                r.initial_distance);
  out += line;
  if (r.mean_preparing_seconds || r.mean_inference_seconds) {
    std::snprintf(line, sizeof line, "preparing %.3f s, inference %.3f s\n", r.mean_preparing_seconds.value_or(0.0),
                  r.mean_inference_seconds.value_or(0.0));
    out += line;
  }
  return out;
}

}  // namespace featguide
