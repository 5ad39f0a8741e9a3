#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "eval_fixture.hpp"

using namespace featguide;
using nlohmann::json;

TEST_CASE("mean point distance") {
  CHECK(mean_point_distance({{0, 0}}, {{3, 4}}) == 5.0);
  CHECK(mean_point_distance({{1, 2}, {5, 5}}, {{1, 2}, {5, 5}}) == 0.0);
  CHECK(mean_point_distance({{0, 0}, {0, 0}}, {{0, 1}, {1, 1}}) == doctest::Approx((1 + std::sqrt(2.0)) / 2));
  CHECK_THROWS_AS(mean_point_distance({{0, 0}}, {}), ContractError);
  CHECK_THROWS_AS(mean_point_distance({}, {}), ContractError);
}

TEST_CASE("report pools every point") {
  const auto f = fgtest::eval_fixture();
  const EvalReport r = evaluate_points(f.cases);
  CHECK(r.images == 2);
  CHECK(r.points == 5);
  CHECK(std::abs(r.cases[0].mean_distance - f.mean_a) < 1e-9);
  CHECK(std::abs(r.cases[1].mean_distance - f.mean_b) < 1e-9);
  CHECK(std::abs(r.mean_distance - f.pooled) < 1e-9);
  CHECK(std::abs(r.initial_distance - f.initial_pooled) < 1e-9);
  CHECK(*r.mean_preparing_seconds == 2.0);
  CHECK(*r.mean_inference_seconds == 4.0);
  const json j = report_to_json(r);
  CHECK(j["cases"].size() == 2);
  CHECK(report_table(r).find("b") != std::string::npos);
}

TEST_CASE("directory evaluation") {
  const auto dir = std::filesystem::temp_directory_path() / "featguide_eval_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto f = fgtest::eval_fixture();
  json targets{{"v", 1}, {"images", json::array()}};
  auto pts = [](const std::vector<Point2>& v) {
    json a = json::array();
    for (const Point2& p : v) a.push_back({p[0], p[1]});
    return a;
  };
  for (const EvalCase& c : f.cases) {
    targets["images"].push_back({{"name", c.name}, {"targets", pts(c.targets)}, {"initial", pts(c.initial)}});
    std::ofstream(dir / (c.name + ".points.json")) << json{{"points", pts(c.edited)}}.dump();
  }
  std::ofstream(dir / "a.timing.json") << json{{"preparing_seconds", 1.5}, {"inference_seconds", 2.5}}.dump();
  std::ofstream(dir / "targets.json") << targets.dump();
  const EvalReport r = evaluate_directory(dir, dir / "targets.json");
  CHECK(std::abs(r.mean_distance - f.pooled) < 1e-9);
  CHECK(*r.mean_preparing_seconds == 1.5);
  std::filesystem::remove(dir / "b.points.json");
  CHECK_THROWS_AS(evaluate_directory(dir, dir / "targets.json"), ContractError);
  std::filesystem::remove_all(dir);
}
