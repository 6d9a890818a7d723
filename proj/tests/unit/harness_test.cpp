#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/harness.hpp"
#include "latentprobe/repr_analysis.hpp"

using namespace latentprobe;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// The fixture problems: p1 (apples, gold 7) and p2 (books, gold 72).
std::string answer_for(std::string_view prompt) {
  const bool books = prompt.find("book") != std::string_view::npos || prompt.find("বই") != std::string_view::npos;
  return books ? "72" : "7";
}

// Reasoning model: two-step traces that state the answer in the second step,
// and the right answer for every elicitation.
class ScriptedModel : public Backend {
 public:
  std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) override {
    std::lock_guard lock(mutex_);
    ++calls;
    const std::string a = answer_for(prompt);
    const bool elicitation = prompt.ends_with("\\boxed{");
    std::vector<Completion> out;
    for (int i = 0; i < config.n_samples; ++i) {
      out.push_back({elicitation ? a + "}" : "Step one. Then " + a + ".\n</think>\n\n\\boxed{" + a + "}", i});
    }
    return out;
  }
  int calls = 0;

 private:
  std::mutex mutex_;
};

// Editor: paraphrases by prefixing the original question, and answers
// solvability prompts with the fixture answer.
class ScriptedEditor : public Backend {
 public:
  std::vector<Completion> complete(std::string_view prompt, const SamplingConfig&) override {
    std::lock_guard lock(mutex_);
    ++calls;
    if (prompt.find("FINAL_ANSWER") != std::string_view::npos) {
      return {{"work\nFINAL_ANSWER: " + answer_for(prompt), 0}};
    }
    const std::string marker = "Original problem:\n";
    std::string question(prompt.substr(prompt.find(marker) + marker.size()));
    question.pop_back();  // trailing newline
    return {{json{{"paraphrase", "Restated: " + question}, {"changes", "prefix"}}.dump(), 0}};
  }
  int calls = 0;

 private:
  std::mutex mutex_;
};

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("latentprobe_harness_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::copy_file(fs::path(FIXTURE_DIR) / "e2e/problems.jsonl", dir / "problems.jsonl");
    fs::copy_file(fs::path(FIXTURE_DIR) / "e2e/language_packs.json", dir / "language_packs.json");
  }
  ~Workspace() { fs::remove_all(dir); }

  RunConfig config(json overrides = json::object()) const {
    json j = {{"dataset", "mgsm"},
              {"languages", {"en", "bn"}},
              {"model", "scripted"},
              {"problems", "problems.jsonl"},
              {"language_packs", "language_packs.json"},
              {"backend", {{"mock_fixture", "unused.jsonl"}}},
              {"editor", {{"mock_fixture", "unused.jsonl"}}},
              {"sampling", {{"n_samples", 2}}},
              {"k_values", {1, 2}},
              {"output_dir", "out"},
              {"workers", 4}};
    j.merge_patch(overrides);
    return parse_run_config(j.dump(), dir);
  }
};

}  // namespace

TEST_CASE("config hash ignores formatting, not content") {
  const std::string a = R"({"model": "m", "languages": ["en"], "k_values": [1]})";
  const std::string b = "{\n  \"languages\" : [\"en\"],\n  \"k_values\": [1],\n  \"model\":\"m\"\n}";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 64);
  CHECK(config_hash(a) != config_hash(R"({"model": "m2", "languages": ["en"], "k_values": [1]})"));
  CHECK(config_hash(a) != config_hash(R"({"model": "m", "languages": ["en"], "k_values": [1, 5]})"));
  CHECK(config_hash(a) != config_hash(R"({"model": "m", "languages": ["en", "bn"], "k_values": [1]})"));
}

TEST_CASE("config parsing") {
  const Workspace ws;
  const RunConfig c = ws.config();
  CHECK(c.problems == ws.dir / "problems.jsonl");
  CHECK(c.output_dir == ws.dir / "out");
  CHECK(c.sampling.n_samples == 2);
  CHECK(c.sampling.max_tokens == 4096);
  CHECK(c.selection_k == 2);  // min(10, n_samples)
  CHECK(c.editor);
  CHECK(c.editor->sampling.n_samples == 1);
  CHECK(c.grid().size() == 11);
  CHECK(c.backend.mock_fixture == ws.dir / "unused.jsonl");

  const RunConfig aime = ws.config({{"dataset", "aime"}, {"grid", {0, 25, 50, 75, 100}}});
  CHECK(aime.sampling.max_tokens == 16384);
  CHECK(aime.grid().size() == 5);

  auto rejects = [&](const json& overrides, const std::string& needle) {
    try {
      ws.config(overrides);
      FAIL("accepted " << overrides.dump());
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kConfig);
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };
  rejects({{"temprature", 0.5}}, "temprature");
  rejects({{"sampling", {{"temp", 0.5}}}}, "temp");
  rejects({{"backend", {{"mock_fixture", "x"}, {"base_url", "http://h"}}}}, "both");
  rejects({{"backend", {{"mock_fixture", nullptr}}}}, "either");
  rejects({{"k_values", {1, 3}}}, "k value 3");
  rejects({{"languages", json::array()}}, "languages");
  rejects({{"languages", {"en", "en"}}}, "duplicates");
  rejects({{"grouping_ratio", 35}}, "grid");
  rejects({{"grid", {0, 40}}}, "grid");
  rejects({{"workers", 0}}, "workers");
  rejects({{"dataset", "gsm8k"}}, "gsm8k");
  rejects({{"model", nullptr}}, "model");
  CHECK_THROWS_AS(parse_run_config("[]", ws.dir), Error);
  CHECK_THROWS_AS(parse_run_config("{", ws.dir), Error);
}

TEST_CASE("eval records round trip") {
  const std::vector<EvalRecord> records = {{"p1", "en", Ratio::from_percent(30), {true, false}, true},
                                           {"p1", "bn", Ratio::from_percent(100), {false, false}, false}};
  std::stringstream s;
  write_eval_records(s, records);
  const auto back = parse_eval_records(s);
  REQUIRE(back.size() == 2);
  CHECK(back[0].ratio == Ratio::from_percent(30));
  CHECK(back[0].correct == std::vector<bool>{true, false});
  CHECK(back[0].gold_in_prefix);
  CHECK(back[1].language == "bn");
  std::stringstream bad("{\"id\": \"p1\"}\n");
  CHECK_THROWS_AS(parse_eval_records(bad), Error);
}

TEST_CASE("stages end to end with injected backends") {
  const Workspace ws;
  const RunConfig config = ws.config();
  auto model = std::make_shared<ScriptedModel>();
  auto editor = std::make_shared<ScriptedEditor>();
  std::ostringstream log;
  StageOptions options;
  options.backend = model;
  options.editor_backend = editor;
  options.log = &log;
  const fs::path out = config.output_dir;

  // Downstream stages refuse to run before their producers.
  CHECK_THROWS_AS(cmd_metrics(config, options), Error);
  CHECK_THROWS_AS(cmd_truncate_eval(config, options), Error);

  const StageStats gen = cmd_generate(config, options);
  CHECK(gen.backend_requests == 4);
  CHECK(load_trace_records(out / "traces.jsonl").size() == 4);

  // Two-step traces give three distinct prefixes (0, 1, 2 steps kept) per
  // problem over the eleven ratios; the rest come from the cache or share an
  // in-flight request, whatever the worker count.
  const StageStats te = cmd_truncate_eval(config, options);
  CHECK(te.backend_requests == 12);
  CHECK(te.cache_hits == 44 - 12);
  const std::string records = read(out / "eval_records.jsonl");

  SUBCASE("resume replays without backend requests") {
    StageOptions resume = options;
    resume.resume = true;
    const StageStats again = cmd_truncate_eval(config, resume);
    CHECK(again.backend_requests == 0);
    CHECK(read(out / "eval_records.jsonl") == records);
    CHECK(cmd_generate(config, resume).backend_requests == 0);
  }

  SUBCASE("metrics, perturbation, solvability, representations, report") {
    cmd_metrics(config, options);
    const std::string metrics = read(out / "metrics.csv");
    CHECK(metrics.starts_with("# latent-probe " + std::string(tool_version()) +
                              " config_hash=" + config.config_hash));
    // Always correct; the answer is visible only once both steps are kept:
    // AUGC = (1 - 0.9) * (0 + 1) / 2 and LRS = 0.9 + (1 - 0.9) / 2, exact over
    // the double grid points (0.9 is slightly above nine tenths).
    CHECK(metrics.find("mgsm,scripted,en,1,1,0.04999999999999999,0.95,\n") != std::string::npos);

    const StageStats pert = cmd_perturb(config, options);
    CHECK(editor->calls == 4);  // one accepted paraphrase per selected problem
    CHECK(pert.backend_requests > 0);
    const std::string mem = read(out / "memorization.csv");
    CHECK(mem.find("numedit,scripted,w/o trace,en,2,1") != std::string::npos);
    CHECK(mem.find("paraphrase,scripted,w/ trace,bn,2,1") != std::string::npos);
    CHECK(mem.find("upper bound") != std::string::npos);

    cmd_solvability(config, options);
    const std::string solv = read(out / "solvability.csv");
    CHECK(solv.find("scripted,en,2,1,") != std::string::npos);

    ProbeSet probes;
    probes.meta = {"unit/2d", 10, 1, 2, "", ""};
    for (const char* lang : {"en", "bn"}) {
      for (const char* id : {"p1", "p2"}) {
        for (int pct : {0, 100}) {
          for (int layer : {0, 1}) {
            const float x = std::string(lang) == "en" ? 1.0f : 0.5f;
            probes.records.push_back({id, lang, Ratio::from_percent(pct), layer, layer + 1, std::vector<float>{x, 1}});
          }
        }
      }
    }
    write_probe_dir(ws.dir / "probes", probes);
    const RunConfig with_probes = ws.config({{"probes", "probes"}});
    cmd_analyze_repr(with_probes, options);
    CHECK(read(out / "ranks.csv").find("en,1,2,4") != std::string::npos);
    CHECK(read(out / "similarity.csv").find("bn,by_layer,0,") != std::string::npos);
    CHECK(read(out / "grouped_similarity.csv").find("bn,correct,english,by_layer,2,0,") != std::string::npos);

    cmd_report(config, options);
    const std::string report = read(out / "report.md");
    CHECK(report.find("absent") == std::string::npos);
    CHECK(report.find("## Causal decomposition") != std::string::npos);
    CHECK(report.find(config.config_hash) != std::string::npos);
  }
}

TEST_CASE("perturbation stages need an editor") {
  const Workspace ws;
  json overrides = {{"editor", nullptr}};
  const RunConfig config = ws.config(overrides);
  CHECK_FALSE(config.editor);
  StageOptions options;
  options.backend = std::make_shared<ScriptedModel>();
  std::ostringstream log;
  options.log = &log;
  cmd_generate(config, options);
  cmd_truncate_eval(config, options);
  try {
    cmd_perturb(config, options);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfig);
  }
}

TEST_CASE("stage dispatch") {
  CHECK(stage_names().size() == 7);
  const Workspace ws;
  CHECK_THROWS_AS(run_stage("train", ws.config()), Error);
  std::ostringstream log;
  StageOptions options;
  options.log = &log;
  run_stage("report", ws.config(), options);
  const std::string report = read(ws.dir / "out/report.md");
  CHECK(report.find("absent (metrics.csv not found)") != std::string::npos);
  CHECK(report.find("absent (causal.json not found)") != std::string::npos);
}
