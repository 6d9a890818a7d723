#include "latentprobe/harness.hpp"

#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "latentprobe/answer_judge.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/hashing.hpp"
#include "latentprobe/perturbation.hpp"
#include "latentprobe/repr_analysis.hpp"
#include "latentprobe/worker_pool.hpp"

#ifndef LATENTPROBE_VERSION_STRING
#define LATENTPROBE_VERSION_STRING "0.0.0"
#endif

namespace latentprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view tool_version() { return LATENTPROBE_VERSION_STRING; }

RatioGrid RunConfig::grid() const { return grid_override ? *grid_override : grid_for(dataset); }

std::string config_hash(std::string_view json_text) {
  try {
    return sha256_hex(json::parse(json_text).dump());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

namespace {

// ---------------------------------------------------------------- config

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

void reject_unknown(const json& obj, std::string_view where, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (std::string_view k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + std::string(where));
  }
}

SamplingConfig parse_sampling(const json& j, SamplingConfig base) {
  if (!j.is_object()) throw ConfigError("sampling must be an object");
  reject_unknown(j, "sampling", {"temperature", "top_p", "seed", "max_tokens", "n_samples"});
  base.temperature = j.value("temperature", base.temperature);
  base.top_p = j.value("top_p", base.top_p);
  base.seed = j.value("seed", base.seed);
  base.max_tokens = j.value("max_tokens", base.max_tokens);
  base.n_samples = j.value("n_samples", base.n_samples);
  base.validate();
  return base;
}

BackendSpec parse_backend(const json& j, const fs::path& base, const std::string& default_model,
                          std::string_view where, std::initializer_list<std::string_view> extra_keys = {}) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  std::vector<std::string_view> known = {"mock_fixture", "base_url",    "model",
                                         "retry_limit",  "initial_backoff_ms", "timeout_seconds",
                                         "per_sample_requests"};
  known.insert(known.end(), extra_keys.begin(), extra_keys.end());
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in " + std::string(where));
    }
  }
  BackendSpec spec;
  if (j.contains("mock_fixture")) spec.mock_fixture = resolve(base, j.at("mock_fixture").get<std::string>());
  spec.http.base_url = j.value("base_url", std::string());
  spec.http.model = j.value("model", default_model);
  spec.http.retry_limit = j.value("retry_limit", spec.http.retry_limit);
  spec.http.initial_backoff_ms = j.value("initial_backoff_ms", spec.http.initial_backoff_ms);
  spec.http.timeout_seconds = j.value("timeout_seconds", spec.http.timeout_seconds);
  spec.http.per_sample_requests = j.value("per_sample_requests", false);
  if (!spec.mock_fixture && spec.http.base_url.empty()) {
    throw ConfigError(std::string(where) + " needs either mock_fixture or base_url");
  }
  if (spec.mock_fixture && !spec.http.base_url.empty()) {
    throw ConfigError(std::string(where) + " sets both mock_fixture and base_url");
  }
  return spec;
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text, const fs::path& base_dir) {
  RunConfig config;
  config.config_hash = config_hash(json_text);
  try {
    const json j = json::parse(json_text);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown(j, "config",
                   {"dataset", "languages", "model", "problems", "language_packs", "backend", "editor", "sampling",
                    "grid", "k_values", "output_dir", "workers", "probes", "turn_separator", "abbreviations",
                    "numedit_seed", "paraphrase_max_retries", "selection_k", "causal_k", "grouping_ratio",
                    "reference_language"});
    for (const char* required : {"dataset", "languages", "model", "problems", "language_packs", "backend",
                                 "output_dir"}) {
      if (!j.contains(required)) throw ConfigError(std::string("config lacks required key '") + required + "'");
    }
    config.dataset = parse_dataset(j.at("dataset").get<std::string>());
    config.languages = j.at("languages").get<std::vector<std::string>>();
    if (config.languages.empty()) throw ConfigError("languages must not be empty");
    if (std::set<std::string>(config.languages.begin(), config.languages.end()).size() != config.languages.size()) {
      throw ConfigError("languages contains duplicates");
    }
    config.model = j.at("model").get<std::string>();
    config.problems = resolve(base_dir, j.at("problems").get<std::string>());
    config.language_packs = resolve(base_dir, j.at("language_packs").get<std::string>());
    config.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());
    config.backend = parse_backend(j.at("backend"), base_dir, config.model, "backend");
    config.backend.http.api_key = api_key_from_environment();

    config.sampling = SamplingConfig::defaults_for(config.dataset);
    if (j.contains("sampling")) config.sampling = parse_sampling(j.at("sampling"), config.sampling);

    if (j.contains("editor")) {
      const json& e = j.at("editor");
      EditorSpec editor;
      editor.backend = parse_backend(e, base_dir, config.model, "editor", {"sampling"});
      editor.backend.http.api_key = config.backend.http.api_key;
      SamplingConfig editor_sampling = SamplingConfig::defaults_for(config.dataset);
      editor_sampling.n_samples = 1;
      editor.sampling = e.contains("sampling") ? parse_sampling(e.at("sampling"), editor_sampling) : editor_sampling;
      config.editor = std::move(editor);
    }

    if (j.contains("grid")) config.grid_override = RatioGrid(j.at("grid").get<std::vector<int>>());
    if (j.contains("k_values")) config.k_values = j.at("k_values").get<std::vector<int>>();
    config.workers = j.value("workers", config.workers);
    if (j.contains("probes")) config.probes = resolve(base_dir, j.at("probes").get<std::string>());
    config.glue.turn_separator = j.value("turn_separator", config.glue.turn_separator);
    if (j.contains("abbreviations")) {
      config.segmentation.abbreviations = j.at("abbreviations").get<std::vector<std::string>>();
    }
    config.numedit_seed = j.value("numedit_seed", config.numedit_seed);
    config.paraphrase_max_retries = j.value("paraphrase_max_retries", config.paraphrase_max_retries);
    config.selection_k = j.value("selection_k", std::min(config.selection_k, config.sampling.n_samples));
    config.causal_k = j.value("causal_k", config.causal_k);
    config.grouping_ratio_percent = j.value("grouping_ratio", config.grouping_ratio_percent);
    config.reference_language = j.value("reference_language", config.reference_language);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  if (config.k_values.empty()) throw ConfigError("k_values must not be empty");
  for (int k : config.k_values) {
    if (k < 1 || k > config.sampling.n_samples) {
      throw ConfigError("k value " + std::to_string(k) + " outside [1, n_samples=" +
                        std::to_string(config.sampling.n_samples) + "]");
    }
  }
  for (int k : {config.selection_k, config.causal_k}) {
    if (k < 1 || k > config.sampling.n_samples) {
      throw ConfigError("selection_k/causal_k must lie in [1, n_samples]");
    }
  }
  if (config.workers < 1) throw ConfigError("workers must be >= 1");
  if (config.paraphrase_max_retries < 0) throw ConfigError("paraphrase_max_retries must be >= 0");
  if (!config.grid().contains(Ratio::from_percent(config.grouping_ratio_percent))) {
    throw ConfigError("grouping_ratio " + std::to_string(config.grouping_ratio_percent) + " is not on the grid");
  }
  return config;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------- records

void write_eval_records(std::ostream& out, const std::vector<EvalRecord>& records) {
  for (const EvalRecord& r : records) {
    json flags = json::array();
    for (bool b : r.correct) flags.push_back(b);
    json row = {{"id", r.problem_id},
                {"language", r.language},
                {"ratio", r.ratio.percent()},
                {"correct", flags},
                {"gold_in_prefix", r.gold_in_prefix}};
    out << row.dump() << '\n';
  }
}

std::vector<EvalRecord> parse_eval_records(std::istream& in) {
  std::vector<EvalRecord> records;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json row = json::parse(line);
      EvalRecord r;
      r.problem_id = row.at("id").get<std::string>();
      r.language = row.at("language").get<std::string>();
      r.ratio = Ratio::from_percent(row.at("ratio").get<int>());
      r.correct = row.at("correct").get<std::vector<bool>>();
      r.gold_in_prefix = row.at("gold_in_prefix").get<bool>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ValidationError("eval records line " + std::to_string(number) + ": " + e.what());
    }
  }
  return records;
}

namespace {

// ---------------------------------------------------------------- helpers

std::ostream& log_of(const StageOptions& options) { return options.log ? *options.log : std::clog; }

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out + '\n';
}

std::vector<std::string> parse_csv_row(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

std::string header_line(const RunConfig& config) {
  return "latent-probe " + std::string(tool_version()) + " config_hash=" + config.config_hash;
}

json header_json(const RunConfig& config) {
  return {{"tool", "latent-probe"}, {"version", std::string(tool_version())}, {"config_hash", config.config_hash}};
}

fs::path artifact(const RunConfig& config, std::string_view name) { return config.output_dir / name; }

fs::path require(const RunConfig& config, std::string_view name, std::string_view producer) {
  fs::path p = artifact(config, name);
  if (!fs::exists(p)) {
    throw ConfigError("missing upstream file " + p.string() + " (run '" + std::string(producer) + "' first)");
  }
  return p;
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

std::shared_ptr<Backend> make_backend(const BackendSpec& spec, std::ostream& log) {
  if (spec.mock_fixture) return std::make_shared<MockBackend>(MockBackend::load(*spec.mock_fixture));
  auto* sink = &log;
  return std::make_shared<HttpBackend>(spec.http, [sink](const std::string& m) { *sink << "  http: " << m << '\n'; });
}

std::shared_ptr<InferenceGateway> make_gateway(const RunConfig& config, const StageOptions& options,
                                               std::string_view cache_name, bool editor) {
  std::shared_ptr<Backend> backend = editor ? options.editor_backend : options.backend;
  if (!backend) {
    if (editor) {
      if (!config.editor) throw ConfigError("this stage needs an 'editor' backend in the config");
      backend = make_backend(config.editor->backend, log_of(options));
    } else {
      backend = make_backend(config.backend, log_of(options));
    }
  }
  const fs::path cache_path = config.output_dir / "cache" / (std::string(cache_name) + ".jsonl");
  fs::create_directories(cache_path.parent_path());
  return std::make_shared<InferenceGateway>(backend, std::make_shared<ResponseCache>(cache_path, options.resume));
}

struct Inputs {
  LanguagePacks packs;
  // language -> problems in file order
  std::map<LanguageCode, std::vector<Problem>> problems;
};

Inputs load_inputs(const RunConfig& config) {
  Inputs in{load_language_packs(config.language_packs), {}};
  for (const LanguageCode& lang : config.languages) {
    if (!in.packs.contains(lang)) throw ConfigError("language '" + lang + "' has no language pack");
  }
  for (Problem& p : load_problems(config.problems, config.dataset)) in.problems[p.language].push_back(std::move(p));
  for (const LanguageCode& lang : config.languages) {
    if (!in.problems.contains(lang)) throw ConfigError("no problems for language '" + lang + "'");
  }
  return in;
}

CanonicalNumber gold_of(const Problem& p) {
  auto gold = normalize(p.gold_answer);
  if (!gold) throw ValidationError("gold answer of '" + p.id + "' is not numeric");
  return *gold;
}

std::vector<EvalRecord> load_eval_records(const RunConfig& config) {
  std::ifstream in(require(config, "eval_records.jsonl", "truncate-eval"), std::ios::binary);
  return parse_eval_records(in);
}

std::vector<EvalRecord> records_for(const std::vector<EvalRecord>& all, const LanguageCode& lang) {
  std::vector<EvalRecord> out;
  for (const EvalRecord& r : all) {
    if (r.language == lang) out.push_back(r);
  }
  return out;
}

std::vector<EvalRecord> at_ratio(const std::vector<EvalRecord>& records, Ratio ratio) {
  std::vector<EvalRecord> out;
  for (const EvalRecord& r : records) {
    if (r.ratio == ratio) out.push_back(r);
  }
  return out;
}

void report_gateway(std::ostream& log, std::string_view stage, const InferenceGateway& gw) {
  log << stage << ": backend requests " << gw.backend_requests() << ", cache hits " << gw.cache_hits() << '\n';
}

}  // namespace

// ---------------------------------------------------------------- stages

StageStats cmd_generate(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  const Inputs in = load_inputs(config);
  auto gateway = make_gateway(config, options, "generate", false);

  struct Task {
    const Problem* problem;
    const LanguagePack* pack;
  };
  std::vector<Task> tasks;
  for (const LanguageCode& lang : config.languages) {
    for (const Problem& p : in.problems.at(lang)) tasks.push_back({&p, &in.packs.at(lang)});
  }

  SamplingConfig sampling = config.sampling;
  sampling.n_samples = 1;
  auto outputs = run_ordered<Completion>(tasks.size(), static_cast<std::size_t>(config.workers), [&](std::size_t i) {
    const auto prompt = build_generation_prompt(*tasks[i].problem, *tasks[i].pack, config.glue);
    return gateway->generate(prompt, sampling).front();
  });

  std::vector<TraceRecord> traces;
  std::size_t truncated_outputs = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (outputs[i].finish_reason == FinishReason::kLength) ++truncated_outputs;
    // The open marker sits in the prompt; restore it so the trace is self-contained.
    traces.push_back({tasks[i].problem->id, tasks[i].problem->language, config.model,
                      config.glue.markers.open + outputs[i].text});
  }
  auto out = open_out(artifact(config, "traces.jsonl"));
  write_trace_records(out, traces);

  log << "generate: " << traces.size() << " traces (" << config.languages.size() << " languages)";
  if (truncated_outputs) log << ", " << truncated_outputs << " hit max_tokens";
  log << '\n';
  report_gateway(log, "generate", *gateway);
  return {gateway->backend_requests(), gateway->cache_hits()};
}

StageStats cmd_truncate_eval(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  const Inputs in = load_inputs(config);
  const auto trace_records = load_trace_records(require(config, "traces.jsonl", "generate"));
  const RatioGrid grid = config.grid();

  std::map<std::pair<LanguageCode, std::string>, ReasoningTrace> traces;
  for (const TraceRecord& t : trace_records) {
    traces.emplace(std::pair{t.language, t.id},
                   extract_trace(t.output, t.language, config.glue.markers, config.segmentation));
    traces.at({t.language, t.id}).problem_id = t.id;
  }

  struct Task {
    const Problem* problem;
    const LanguagePack* pack;
    const ReasoningTrace* trace;
    Ratio ratio;
  };
  std::vector<Task> tasks;
  std::vector<StepStats> stats;
  for (const LanguageCode& lang : config.languages) {
    std::vector<ReasoningTrace> lang_traces;
    for (const Problem& p : in.problems.at(lang)) {
      auto it = traces.find({lang, p.id});
      if (it == traces.end()) throw ValidationError("no trace for problem '" + p.id + "' in language '" + lang + "'");
      lang_traces.push_back(it->second);
      for (Ratio r : grid.ratios()) tasks.push_back({&p, &in.packs.at(lang), &it->second, r});
    }
    StepStats s = trace_statistics(lang_traces, config.dataset);
    s.language = lang;
    stats.push_back(s);
  }

  auto gateway = make_gateway(config, options, "truncate_eval", false);

  struct Outcome {
    EvalRecord record;
    int kept_steps = 0;
    std::vector<Completion> completions;
    std::vector<Judgment> judgments;
  };
  auto outcomes = run_ordered<Outcome>(tasks.size(), static_cast<std::size_t>(config.workers), [&](std::size_t i) {
    const Task& t = tasks[i];
    const TruncatedTrace truncated = truncate(*t.trace, t.ratio);
    const auto prompt = build_elicitation_prompt(*t.problem, truncated, *t.pack, config.glue);
    const CanonicalNumber gold = gold_of(*t.problem);
    Outcome o;
    o.completions = gateway->generate(prompt, config.sampling);
    o.kept_steps = truncated.kept_steps;
    o.record.problem_id = t.problem->id;
    o.record.language = t.problem->language;
    o.record.ratio = t.ratio;
    o.record.gold_in_prefix = gold_in_prefix(truncated, gold);
    for (const Completion& c : o.completions) {
      // The elicitation prefix opens the box; the completion closes it.
      o.judgments.push_back(judge_boxed(t.pack->elicitation_prefix() + c.text, gold));
      o.record.correct.push_back(o.judgments.back().correct);
    }
    return o;
  });

  auto predictions = open_out(artifact(config, "predictions.jsonl"));
  auto judgments = open_out(artifact(config, "judgments.jsonl"));
  std::vector<EvalRecord> records;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const Outcome& o = outcomes[i];
    for (std::size_t s = 0; s < o.completions.size(); ++s) {
      json p = {{"id", o.record.problem_id},
                {"language", o.record.language},
                {"ratio", o.record.ratio.percent()},
                {"sample", s},
                {"finish_reason", std::string(to_string(o.completions[s].finish_reason))},
                {"text", o.completions[s].text}};
      predictions << p.dump() << '\n';
      const Judgment& jd = o.judgments[s];
      json row = {{"id", o.record.problem_id},
                  {"language", o.record.language},
                  {"ratio", o.record.ratio.percent()},
                  {"sample", s},
                  {"kept_steps", o.kept_steps},
                  {"total_steps", tasks[i].trace->size()},
                  {"extracted", jd.extracted ? json(*jd.extracted) : json(nullptr)},
                  {"canonical", jd.canonical ? json(jd.canonical->render()) : json(nullptr)},
                  {"correct", jd.correct},
                  {"failure", jd.failure ? json(std::string(to_string(*jd.failure))) : json(nullptr)}};
      judgments << row.dump() << '\n';
    }
    records.push_back(o.record);
  }
  auto rec_out = open_out(artifact(config, "eval_records.jsonl"));
  write_eval_records(rec_out, records);

  auto stats_out = open_out(artifact(config, "trace_stats.csv"));
  stats_out << "# " << header_line(config) << '\n';
  stats_out << csv_row({"dataset", "language", "count", "mean_steps", "median_steps"});
  for (const StepStats& s : stats) {
    stats_out << csv_row({std::string(to_string(s.dataset)), s.language, std::to_string(s.count), fmt(s.mean_steps),
                          fmt(s.median_steps)});
  }

  for (const LanguageCode& lang : config.languages) {
    const std::size_t n = in.problems.at(lang).size();
    log << "truncate-eval: " << lang << ": " << n << " problems x " << grid.size() << " ratios = " << n * grid.size()
        << " records\n";
  }
  report_gateway(log, "truncate-eval", *gateway);
  return {gateway->backend_requests(), gateway->cache_hits()};
}

void cmd_metrics(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  const auto all = load_eval_records(config);
  const RatioGrid grid = config.grid();

  auto csv = open_out(artifact(config, "metrics.csv"));
  csv << "# " << header_line(config) << '\n';
  csv << csv_row({"dataset", "model", "language", "k", "autc", "augc", "lrs", "undefined_g_points"});
  json curves = json::array();
  json causal = json::array();

  const auto curve_json = [](const LanguageCode& lang, std::string_view metric, const MetricCurve& c) {
    return json{{"language", lang},     {"metric", metric},   {"k", c.k},
                {"ratios", c.ratios},   {"values", c.values}, {"support", c.support}};
  };

  for (const LanguageCode& lang : config.languages) {
    const auto records = records_for(all, lang);
    if (records.empty()) throw ValidationError("eval records hold nothing for language '" + lang + "'");
    for (int k : config.k_values) {
      const MetricCurve a = accuracy_curve(records, grid, k);
      const MetricCurve g = gold_in_trace_curve(records, grid, k);
      const MetricSummary s = summarize(a, g);
      std::string undefined;
      for (double r : s.undefined_g_points) undefined += (undefined.empty() ? "" : ";") + fmt(r);
      csv << csv_row({std::string(to_string(config.dataset)), config.model, lang, std::to_string(k), fmt(s.autc),
                      fmt(s.augc), fmt(s.lrs), undefined});
      curves.push_back(curve_json(lang, "accuracy", a));
      curves.push_back(curve_json(lang, "gold_in_trace", g));
    }
    for (const CausalBreakdown& b : causal_decomposition(records, grid, config.causal_k)) {
      causal.push_back({{"language", lang},
                        {"k", b.k},
                        {"ratio_prev", b.ratio_prev},
                        {"ratio_cur", b.ratio_cur},
                        {"newly_correct", b.newly_correct},
                        {"new_in_added", b.case_new_in_added},
                        {"earlier_in_trace", b.case_earlier_in_trace},
                        {"not_in_trace", b.case_not_in_trace}});
    }
    log << "metrics: " << lang << ": " << records.size() << " records / " << grid.size() << " ratios = "
        << records.size() / grid.size() << " problems\n";
  }
  auto curves_out = open_out(artifact(config, "curves.json"));
  curves_out << json{{"header", header_json(config)}, {"curves", curves}}.dump(2) << '\n';
  auto causal_out = open_out(artifact(config, "causal.json"));
  causal_out << json{{"header", header_json(config)}, {"breakdowns", causal}}.dump(2) << '\n';
}

namespace {

json variant_json(const EditedProblem& e) {
  json span = nullptr;
  if (e.edited_span) {
    span = {{"offset", e.edited_span->offset},
            {"original", e.edited_span->original},
            {"replacement", e.edited_span->replacement}};
  }
  return {{"original_id", e.original_id},
          {"language", e.language},
          {"edit_type", std::string(to_string(e.edit_type))},
          {"text", e.text},
          {"edited_span", span},
          {"seed", e.seed ? json(*e.seed) : json(nullptr)},
          {"native_script", e.native_script},
          {"numeric_multiset_preserved", e.numeric_multiset_preserved},
          {"changes", e.changes},
          {"editor_calls", e.editor_calls}};
}

EditedProblem variant_from_json(const json& j) {
  EditedProblem e;
  e.original_id = j.at("original_id").get<std::string>();
  e.language = j.at("language").get<std::string>();
  e.edit_type = parse_edit_type(j.at("edit_type").get<std::string>());
  e.text = j.at("text").get<std::string>();
  return e;
}

}  // namespace

StageStats cmd_perturb(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  const Inputs in = load_inputs(config);
  const auto all = load_eval_records(config);
  auto editor = make_gateway(config, options, "perturb_editor", true);
  auto model = make_gateway(config, options, "perturb_model", false);

  struct Task {
    const Problem* problem;
    const LanguagePack* pack;
  };
  std::vector<Task> tasks;
  std::map<LanguageCode, std::set<std::string>> selections;
  for (const LanguageCode& lang : config.languages) {
    const auto zero = at_ratio(records_for(all, lang), Ratio::from_percent(0));
    selections[lang] = memorization_selection(zero, config.selection_k);
    for (const Problem& p : in.problems.at(lang)) {
      if (selections[lang].contains(p.id)) tasks.push_back({&p, &in.packs.at(lang)});
    }
  }

  struct Outcome {
    std::optional<EditedProblem> numedit;
    std::optional<EditedProblem> paraphrase;
    std::string skip_reason;
    // (edit, setup) -> per-sample (extracted, matches gold)
    std::map<std::pair<EditType, Setup>, std::vector<std::pair<std::optional<std::string>, bool>>> predictions;
  };

  auto outcomes = run_ordered<Outcome>(tasks.size(), static_cast<std::size_t>(config.workers), [&](std::size_t i) {
    const Problem& p = *tasks[i].problem;
    const LanguagePack& pack = *tasks[i].pack;
    const CanonicalNumber gold = gold_of(p);
    Outcome o;
    o.numedit = num_edit(p, config.numedit_seed);
    try {
      o.paraphrase = request_paraphrase(p, pack.display_name(), *editor, config.editor ? config.editor->sampling
                                                                                         : SamplingConfig{},
                                        config.paraphrase_max_retries);
    } catch (const ParaphraseExhausted& e) {
      o.skip_reason = e.what();
    }
    for (const auto* variant : {&o.numedit, &o.paraphrase}) {
      if (!*variant) continue;
      Problem edited = p;
      edited.text = (*variant)->text;
      const EditType edit = (*variant)->edit_type;

      TruncatedTrace empty{p.id, p.language, Ratio::from_percent(0), 0, {}};
      auto& without = o.predictions[{edit, Setup::kWithoutTrace}];
      for (const Completion& c :
           model->generate(build_elicitation_prompt(edited, empty, pack, config.glue), config.sampling)) {
        const Judgment jd = judge_boxed(pack.elicitation_prefix() + c.text, gold);
        without.emplace_back(jd.extracted, jd.correct);
      }
      auto& with = o.predictions[{edit, Setup::kWithTrace}];
      for (const Completion& c : model->generate(build_generation_prompt(edited, pack, config.glue), config.sampling)) {
        const Judgment jd = judge_boxed(c.text, gold);
        with.emplace_back(jd.extracted, jd.correct);
      }
    }
    return o;
  });

  auto variants = open_out(artifact(config, "variants.jsonl"));
  auto predictions = open_out(artifact(config, "memorization_predictions.jsonl"));
  std::map<LanguageCode, MemorizationInputs> inputs;
  std::map<LanguageCode, std::map<EditType, std::set<std::string>>> covered;
  std::size_t skipped_numedit = 0, skipped_paraphrase = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Problem& p = *tasks[i].problem;
    const Outcome& o = outcomes[i];
    MemorizationInputs& mi = inputs[p.language];
    for (const auto* variant : {&o.numedit, &o.paraphrase}) {
      if (*variant) {
        variants << variant_json(**variant).dump() << '\n';
        covered[p.language][(*variant)->edit_type].insert(p.id);
      }
    }
    if (!o.numedit) {
      ++skipped_numedit;
      log << "perturb: " << p.language << "/" << p.id << ": no editable number, NumEdit skipped\n";
    }
    if (!o.paraphrase) {
      ++skipped_paraphrase;
      log << "perturb: " << p.language << "/" << p.id << ": " << o.skip_reason << '\n';
    }
    for (const auto& [key, samples] : o.predictions) {
      std::vector<bool> flags;
      for (std::size_t s = 0; s < samples.size(); ++s) {
        flags.push_back(samples[s].second);
        json row = {{"id", p.id},
                    {"language", p.language},
                    {"edit_type", std::string(to_string(key.first))},
                    {"setup", std::string(to_string(key.second))},
                    {"sample", s},
                    {"extracted", samples[s].first ? json(*samples[s].first) : json(nullptr)},
                    {"matches_original_gold", samples[s].second}};
        predictions << row.dump() << '\n';
      }
      mi.matches[key][p.id] = std::move(flags);
    }
  }

  auto csv = open_out(artifact(config, "memorization.csv"));
  csv << "# " << header_line(config) << '\n';
  csv << "# NumEdit values are an upper bound on memorization: some edits keep the original answer\n";
  csv << csv_row({"edit_type", "model", "setup", "language", "n", "value"});
  for (const LanguageCode& lang : config.languages) {
    MemorizationInputs mi = inputs[lang];
    mi.model = config.model;
    mi.language = lang;
    mi.k = config.selection_k;
    for (EditType edit : {EditType::kNumEdit, EditType::kParaphrase}) {
      mi.selection = covered[lang][edit];
      for (const MemorizationRow& row : memorization_eval(mi)) {
        if (row.edit_type != edit) continue;
        csv << csv_row({std::string(to_string(row.edit_type)), row.model, std::string(to_string(row.setup)),
                        row.language, std::to_string(row.n), fmt(row.value)});
      }
    }
    log << "perturb: " << lang << ": selection " << selections[lang].size() << ", numedit "
        << covered[lang][EditType::kNumEdit].size() << ", paraphrase " << covered[lang][EditType::kParaphrase].size()
        << '\n';
  }
  if (skipped_numedit || skipped_paraphrase) {
    log << "perturb: skipped " << skipped_numedit << " NumEdit and " << skipped_paraphrase << " Paraphrase variants\n";
  }
  report_gateway(log, "perturb (editor)", *editor);
  report_gateway(log, "perturb (model)", *model);
  return {editor->backend_requests() + model->backend_requests(), editor->cache_hits() + model->cache_hits()};
}

StageStats cmd_solvability(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  const Inputs in = load_inputs(config);
  std::ifstream vin(require(config, "variants.jsonl", "perturb"), std::ios::binary);
  std::map<std::pair<LanguageCode, std::string>, std::map<EditType, std::string>> variants;
  std::string line;
  std::size_t number = 0;
  while (std::getline(vin, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const EditedProblem e = variant_from_json(json::parse(line));
      variants[{e.language, e.original_id}][e.edit_type] = e.text;
    } catch (const json::exception& e) {
      throw ValidationError("variants line " + std::to_string(number) + ": " + e.what());
    }
  }
  auto judge = make_gateway(config, options, "solvability", true);
  SamplingConfig sampling = config.editor ? config.editor->sampling : SamplingConfig{};
  sampling.n_samples = 1;

  struct Task {
    const Problem* problem;
    std::string numedit;
    std::string paraphrase;
  };
  std::vector<Task> tasks;
  for (const LanguageCode& lang : config.languages) {
    for (const Problem& p : in.problems.at(lang)) {
      auto it = variants.find({lang, p.id});
      if (it == variants.end()) continue;
      if (!it->second.contains(EditType::kNumEdit) || !it->second.contains(EditType::kParaphrase)) continue;
      tasks.push_back({&p, it->second.at(EditType::kNumEdit), it->second.at(EditType::kParaphrase)});
    }
  }

  auto items = run_ordered<SolvabilityItem>(tasks.size(), static_cast<std::size_t>(config.workers), [&](std::size_t i) {
    const Task& t = tasks[i];
    const std::string name = in.packs.at(t.problem->language).display_name();
    const auto ask = [&](const std::string& question) {
      return judge->generate_text(build_solvability_prompt(question, name), sampling).front().text;
    };
    return SolvabilityItem{t.problem->id, gold_of(*t.problem), ask(t.problem->text), ask(t.numedit),
                           ask(t.paraphrase)};
  });

  auto predictions = open_out(artifact(config, "solvability_predictions.jsonl"));
  for (std::size_t i = 0; i < items.size(); ++i) {
    predictions << json{{"id", items[i].problem_id},
                        {"language", tasks[i].problem->language},
                        {"original", items[i].original_output},
                        {"numedit", items[i].numedit_output},
                        {"paraphrase", items[i].paraphrase_output}}
                       .dump()
                << '\n';
  }
  const std::string judge_model = config.editor ? config.editor->backend.http.model : config.model;
  auto csv = open_out(artifact(config, "solvability.csv"));
  csv << "# " << header_line(config) << '\n';
  csv << csv_row({"judge_model", "language", "n", "orig_acc", "numedit_match", "paraphrase_match"});
  for (const LanguageCode& lang : config.languages) {
    std::vector<SolvabilityItem> subset;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (tasks[i].problem->language == lang) subset.push_back(items[i]);
    }
    const SolvabilityMetrics m = solvability_eval(subset);
    csv << csv_row({judge_model, lang, std::to_string(m.n), fmt(m.orig_acc), fmt(m.numedit_match),
                    fmt(m.paraphrase_match)});
    log << "solvability: " << lang << ": " << m.n << " problems with both variants\n";
  }
  report_gateway(log, "solvability", *judge);
  return {judge->backend_requests(), judge->cache_hits()};
}

void cmd_analyze_repr(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  if (!config.probes) throw ConfigError("analyze-repr needs 'probes' in the config");
  if (!fs::exists(*config.probes)) throw ConfigError("missing probe directory " + config.probes->string());
  const ProbeSet probes = load_probe_dir(*config.probes);
  const auto all = load_eval_records(config);

  auto ranks = open_out(artifact(config, "ranks.csv"));
  ranks << "# " << header_line(config) << " model_id=" << probes.meta.model_id << '\n';
  ranks << csv_row({"language", "layer", "mean_rank", "count"});
  for (const LanguageCode& lang : config.languages) {
    for (const RankPoint& p : rank_trajectory(probes.records, lang)) {
      ranks << csv_row({lang, std::to_string(p.layer), fmt(p.mean_rank), std::to_string(p.count)});
    }
  }

  std::map<LanguageCode, std::vector<ProbeRecord>> by_language;
  for (const ProbeRecord& r : probes.records) {
    if (r.hidden) by_language[r.language].push_back(r);
  }
  auto sim = open_out(artifact(config, "similarity.csv"));
  sim << "# " << header_line(config) << " reference=" << config.reference_language << '\n';
  sim << csv_row({"language", "axis", "coordinate", "mean", "count"});
  for (const LanguageCode& lang : config.languages) {
    if (lang == config.reference_language) continue;
    for (Axis axis : {Axis::kByLayer, Axis::kByStep}) {
      const auto table =
          similarity_to_reference(by_language[lang], by_language[config.reference_language], axis);
      for (const SimilarityPoint& p : table.points) {
        sim << csv_row({lang, std::string(to_string(axis)), fmt(p.coordinate), fmt(p.mean), std::to_string(p.count)});
      }
      if (table.dropped_cells) {
        log << "analyze-repr: " << lang << " " << to_string(axis) << ": " << table.dropped_cells
            << " cells without a reference counterpart\n";
      }
    }
  }

  Correctness correctness;
  const Ratio at = Ratio::from_percent(config.grouping_ratio_percent);
  for (const EvalRecord& r : all) {
    if (r.ratio == at) correctness[{r.problem_id, r.language}] = solved_at_k(r, config.selection_k);
  }
  std::vector<ProbeRecord> hidden;
  for (const LanguageCode& lang : config.languages) {
    hidden.insert(hidden.end(), by_language[lang].begin(), by_language[lang].end());
  }
  auto grouped = open_out(artifact(config, "grouped_similarity.csv"));
  grouped << "# " << header_line(config) << " reference=" << config.reference_language << " correctness=pass@"
          << config.selection_k << "@" << config.grouping_ratio_percent << "%\n";
  grouped << csv_row({"language", "group", "target", "axis", "problems", "coordinate", "mean", "count", "unavailable"});
  for (const GroupedSimilarity& g : grouped_similarity(hidden, correctness, config.reference_language)) {
    const std::vector<std::string> head = {g.language, std::string(to_string(g.group)), std::string(to_string(g.target)),
                                           std::string(to_string(g.axis)), std::to_string(g.problems)};
    if (g.points.empty()) {
      auto row = head;
      row.insert(row.end(), {"", "", "0", g.unavailable ? "true" : "false"});
      grouped << csv_row(row);
    }
    for (const SimilarityPoint& p : g.points) {
      auto row = head;
      row.insert(row.end(), {fmt(p.coordinate), fmt(p.mean), std::to_string(p.count), g.unavailable ? "true" : "false"});
      grouped << csv_row(row);
    }
  }
  log << "analyze-repr: " << probes.records.size() << " probe records, " << hidden.size() << " with hidden vectors\n";
}

namespace {

void csv_section(std::ostream& md, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string line;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '#') {
      md << "_" << line.substr(std::min<std::size_t>(2, line.size())) << "_\n\n";
      continue;
    }
    const auto fields = parse_csv_row(line);
    md << "|";
    for (const std::string& f : fields) md << ' ' << (f.empty() ? "–" : f) << " |";
    md << '\n';
    if (!header_done) {
      md << "|";
      for (std::size_t i = 0; i < fields.size(); ++i) md << "---|";
      md << '\n';
      header_done = true;
    }
  }
  md << '\n';
}

}  // namespace

void cmd_report(const RunConfig& config, const StageOptions& options) {
  std::ostream& log = log_of(options);
  auto md = open_out(artifact(config, "report.md"));
  md << "# latent-probe report\n\n";
  md << "- version: " << tool_version() << '\n';
  md << "- config hash: `" << config.config_hash << "`\n";
  md << "- dataset: " << to_string(config.dataset) << '\n';
  md << "- model: " << config.model << '\n';
  md << "- languages: ";
  for (std::size_t i = 0; i < config.languages.size(); ++i) md << (i ? ", " : "") << config.languages[i];
  md << "\n- ratio grid (%): ";
  const auto percents = config.grid().percents();
  for (std::size_t i = 0; i < percents.size(); ++i) md << (i ? ", " : "") << percents[i];
  md << "\n\n";

  const std::vector<std::pair<std::string, std::string>> sections = {
      {"Trace statistics", "trace_stats.csv"},
      {"Truncation metrics", "metrics.csv"},
      {"Memorization", "memorization.csv"},
      {"Solvability", "solvability.csv"},
      {"Logit-lens gold rank", "ranks.csv"},
      {"Similarity to reference", "similarity.csv"},
      {"Grouped similarity", "grouped_similarity.csv"},
  };
  std::size_t present = 0;
  for (const auto& [title, file] : sections) {
    md << "## " << title << "\n\n";
    const fs::path p = artifact(config, file);
    if (fs::exists(p)) {
      csv_section(md, p);
      ++present;
    } else {
      md << "absent (" << file << " not found)\n\n";
    }
    if (file == "metrics.csv") {
      md << "## Causal decomposition\n\n";
      const fs::path cp = artifact(config, "causal.json");
      if (!fs::exists(cp)) {
        md << "absent (causal.json not found)\n\n";
        continue;
      }
      std::ifstream in(cp, std::ios::binary);
      const json causal = json::parse(in);
      md << "| language | k | interval | newly correct | new in added | earlier in trace | not in trace |\n";
      md << "|---|---|---|---|---|---|---|\n";
      for (const json& b : causal.at("breakdowns")) {
        md << "| " << b.at("language").get<std::string>() << " | " << b.at("k").get<int>() << " | "
           << fmt(b.at("ratio_prev").get<double>()) << "–" << fmt(b.at("ratio_cur").get<double>()) << " | "
           << b.at("newly_correct").get<int>() << " | " << b.at("new_in_added").get<int>() << " | "
           << b.at("earlier_in_trace").get<int>() << " | " << b.at("not_in_trace").get<int>() << " |\n";
      }
      md << '\n';
      ++present;
    }
  }
  log << "report: " << present << " sections present, " << sections.size() + 1 - present << " absent\n";
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"generate",    "truncate-eval", "metrics", "perturb",
                                                 "solvability", "analyze-repr",  "report"};
  return names;
}

StageStats run_stage(std::string_view stage, const RunConfig& config, const StageOptions& options) {
  if (stage == "generate") return cmd_generate(config, options);
  if (stage == "truncate-eval") return cmd_truncate_eval(config, options);
  if (stage == "perturb") return cmd_perturb(config, options);
  if (stage == "solvability") return cmd_solvability(config, options);
  if (stage == "metrics") {
    cmd_metrics(config, options);
  } else if (stage == "analyze-repr") {
    cmd_analyze_repr(config, options);
  } else if (stage == "report") {
    cmd_report(config, options);
  } else {
    throw ConfigError("unknown stage '" + std::string(stage) + "'");
  }
  return {};
}

}  // namespace latentprobe
