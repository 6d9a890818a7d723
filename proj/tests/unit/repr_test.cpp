#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "doctest.h"
#include "latentprobe/error.hpp"
#include "latentprobe/repr_analysis.hpp"

using namespace latentprobe;
namespace fs = std::filesystem;

namespace {

ProbeRecord cell(const std::string& id, const std::string& lang, int pct, int layer, std::vector<float> h,
                 std::int64_t rank = 1) {
  return ProbeRecord{id, lang, Ratio::from_percent(pct), layer, rank, std::move(h)};
}

ProbeSet small_set() {
  ProbeSet s;
  s.meta.model_id = "unit/2d";
  s.meta.vocab_size = 100;
  s.meta.num_layers = 1;
  s.meta.hidden_dim = 2;
  s.records = {cell("p", "en", 0, 0, {1, 0}, 10), cell("p", "en", 0, 1, {0, 1}, 2),
               cell("p", "bn", 0, 0, {1, 1}, 30), cell("p", "bn", 0, 1, {0, 2}, 4)};
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("latentprobe_repr_" + name + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

void rewrite_records(const fs::path& dir, const std::string& text) {
  std::ofstream(dir / "records.jsonl", std::ios::trunc) << text;
}

}  // namespace

TEST_CASE("cosine") {
  const std::vector<float> a = {1, 0}, b = {0, 1}, c = {2, 0}, d = {-1, 0};
  CHECK(cosine(a, b) == 0.0);
  CHECK(cosine(a, c) == 1.0);
  CHECK(cosine(a, d) == -1.0);
  const std::vector<double> u = {1, 1}, v = {1, 0};
  CHECK(cosine(u, v) == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(cosine(a, std::vector<float>{1, 0, 0}), Error);
  CHECK_THROWS_AS(cosine(a, std::vector<float>{0, 0}), Error);
}

TEST_CASE("probe directory round trip") {
  const fs::path dir = fresh_dir("rt");
  const ProbeSet original = small_set();
  write_probe_dir(dir, original);
  const ProbeSet back = load_probe_dir(dir);
  CHECK(back.meta.model_id == "unit/2d");
  CHECK(back.meta.hidden_dim == 2);
  REQUIRE(back.records.size() == 4);
  CHECK(back.records[3].language == "bn");
  CHECK(back.records[3].gold_rank == 4);
  CHECK(*back.records[3].hidden == std::vector<float>{0, 2});
  CHECK(fs::file_size(dir / "hidden.bin") == 4 * 2 * sizeof(float));
  fs::remove_all(dir);
}

TEST_CASE("probe directory validation") {
  const fs::path dir = fresh_dir("bad");
  write_probe_dir(dir, small_set());
  auto load_fails = [&](const std::string& records) {
    rewrite_records(dir, records);
    CHECK_THROWS_AS(load_probe_dir(dir), Error);
  };
  const std::string ok = R"({"id":"p","language":"en","ratio":0.5,"layer":0,"gold_rank":3,"hidden_ref":[0,2]})";
  rewrite_records(dir, ok + "\n");
  CHECK(load_probe_dir(dir).records.size() == 1);

  load_fails(ok + "\n" + ok + "\n");  // duplicate key
  load_fails(R"({"id":"p","language":"en","ratio":0.5,"layer":0,"gold_rank":0})" "\n");
  load_fails(R"({"id":"p","language":"en","ratio":0.5,"layer":2,"gold_rank":1})" "\n");
  load_fails(R"({"id":"p","language":"en","ratio":0.5,"layer":0,"gold_rank":1,"hidden_ref":[0,3]})" "\n");
  load_fails(R"({"id":"p","language":"en","ratio":0.5,"layer":0,"gold_rank":1,"hidden_ref":[1000,2]})" "\n");
  load_fails(R"({"id":"p","language":"en","ratio":0.555,"layer":0,"gold_rank":1})" "\n");  // off-percent ratio
  load_fails("not json\n");

  fs::remove(dir / "meta.json");
  rewrite_records(dir, ok + "\n");
  CHECK_THROWS_AS(load_probe_dir(dir), Error);
  fs::remove_all(dir);
}

TEST_CASE("rank trajectory") {
  const auto set = small_set();
  const auto en = rank_trajectory(set.records, "en");
  REQUIRE(en.size() == 2);
  CHECK(en[0].layer == 0);
  CHECK(en[0].mean_rank == 10.0);
  CHECK(en[1].mean_rank == 2.0);
  auto records = set.records;
  records.push_back(cell("q", "en", 0, 0, {1, 0}, 20));
  CHECK(rank_trajectory(records, "en")[0].mean_rank == 15.0);
  CHECK(rank_trajectory(records, "en")[0].count == 2);
  CHECK_THROWS_AS(rank_trajectory(records, "zh"), Error);
}

TEST_CASE("similarity to reference") {
  const auto set = small_set();
  std::vector<ProbeRecord> en, bn;
  for (const auto& r : set.records) (r.language == "en" ? en : bn).push_back(r);
  bn.push_back(cell("q", "bn", 0, 0, {1, 0}));  // no English counterpart

  const auto by_layer = similarity_to_reference(bn, en, Axis::kByLayer);
  CHECK(by_layer.language == "bn");
  CHECK(by_layer.matched_cells == 2);
  CHECK(by_layer.dropped_cells == 1);
  REQUIRE(by_layer.points.size() == 2);
  CHECK(by_layer.points[0].coordinate == 0.0);
  CHECK(by_layer.points[0].mean == doctest::Approx(1 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK(by_layer.points[1].mean == 1.0);

  const auto by_step = similarity_to_reference(bn, en, Axis::kByStep);
  REQUIRE(by_step.points.size() == 1);
  CHECK(by_step.points[0].coordinate == 0.0);
  CHECK(by_step.points[0].count == 2);
  CHECK(by_step.points[0].mean == doctest::Approx((1 / std::sqrt(2.0) + 1.0) / 2).epsilon(1e-12));
}

TEST_CASE("grouped similarity") {
  // en is the reference; bn and zh are compared against it and each other.
  std::vector<ProbeRecord> records = {
      cell("p", "en", 100, 0, {1, 0}), cell("p", "bn", 100, 0, {1, 0}), cell("p", "zh", 100, 0, {0, 1}),
      cell("q", "en", 100, 0, {0, 1}), cell("q", "bn", 100, 0, {1, 0}), cell("q", "zh", 100, 0, {0, 1}),
  };
  const Correctness correctness = {{{"p", "bn"}, true}, {{"q", "bn"}, false}, {{"p", "zh"}, true},
                                   {{"q", "zh"}, true}};
  const auto groups = grouped_similarity(records, correctness, "en");
  auto find = [&](const std::string& lang, Group g, Target t, Axis a) -> const GroupedSimilarity* {
    for (const auto& x : groups) {
      if (x.language == lang && x.group == g && x.target == t && x.axis == a) return &x;
    }
    return nullptr;
  };
  const auto* bn_correct_en = find("bn", Group::kCorrect, Target::kEnglish, Axis::kByLayer);
  REQUIRE(bn_correct_en);
  CHECK(bn_correct_en->problems == 1);
  CHECK(bn_correct_en->points.at(0).mean == 1.0);
  const auto* bn_wrong_en = find("bn", Group::kIncorrect, Target::kEnglish, Axis::kByLayer);
  REQUIRE(bn_wrong_en);
  CHECK(bn_wrong_en->points.at(0).mean == 0.0);
  // For bn the only other language is zh.
  const auto* bn_correct_others = find("bn", Group::kCorrect, Target::kAvgOthers, Axis::kByLayer);
  REQUIRE(bn_correct_others);
  CHECK_FALSE(bn_correct_others->unavailable);
  CHECK(bn_correct_others->points.at(0).mean == 0.0);
  const auto* zh_wrong = find("zh", Group::kIncorrect, Target::kEnglish, Axis::kByLayer);
  REQUIRE(zh_wrong);
  CHECK(zh_wrong->problems == 0);
  CHECK(zh_wrong->points.empty());

  // With a single non-reference language there is nothing to average over.
  std::vector<ProbeRecord> two;
  for (const auto& r : records) {
    if (r.language != "zh") two.push_back(r);
  }
  for (const auto& g : grouped_similarity(two, correctness, "en")) {
    if (g.target == Target::kAvgOthers) CHECK(g.unavailable);
  }
}
