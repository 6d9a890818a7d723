#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "latentprobe/corpus.hpp"
#include "latentprobe/inference_gateway.hpp"
#include "latentprobe/language_control.hpp"
#include "latentprobe/metrics.hpp"
#include "latentprobe/truncation.hpp"

namespace latentprobe {

std::string_view tool_version();

struct BackendSpec {
  // Replay fixture; when absent the HTTP options are used.
  std::optional<std::filesystem::path> mock_fixture;
  HttpBackendOptions http;
};

struct EditorSpec {
  BackendSpec backend;
  SamplingConfig sampling;
};

struct RunConfig {
  Dataset dataset = Dataset::kMgsm;
  std::vector<LanguageCode> languages;
  std::string model;
  std::filesystem::path problems;
  std::filesystem::path language_packs;
  BackendSpec backend;
  std::optional<EditorSpec> editor;
  SamplingConfig sampling;
  std::optional<RatioGrid> grid_override;
  std::vector<int> k_values{1, 5, 10};
  std::filesystem::path output_dir;
  int workers = 8;
  std::optional<std::filesystem::path> probes;
  PromptGlue glue;
  SegmentationOptions segmentation;
  std::uint64_t numedit_seed = 42;
  int paraphrase_max_retries = 5;
  // pass@k used for the memorization selection and correct/incorrect groups.
  int selection_k = 10;
  int causal_k = 1;
  int grouping_ratio_percent = 100;
  LanguageCode reference_language = "en";

  std::string config_hash;

  RatioGrid grid() const;
};

// SHA-256 of the config re-serialized with sorted keys and no whitespace, so
// formatting changes do not alter it but any field change does.
std::string config_hash(std::string_view json_text);

// Relative paths resolve against `base_dir`. Throws ConfigError.
RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

void write_eval_records(std::ostream& out, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> parse_eval_records(std::istream& in);

struct StageOptions {
  bool resume = false;
  std::ostream* log = nullptr;
  // Test seams: used instead of the configured backends when set.
  std::shared_ptr<Backend> backend;
  std::shared_ptr<Backend> editor_backend;
};

struct StageStats {
  std::uint64_t backend_requests = 0;
  std::uint64_t cache_hits = 0;
};

StageStats cmd_generate(const RunConfig& config, const StageOptions& options = {});
StageStats cmd_truncate_eval(const RunConfig& config, const StageOptions& options = {});
void cmd_metrics(const RunConfig& config, const StageOptions& options = {});
StageStats cmd_perturb(const RunConfig& config, const StageOptions& options = {});
StageStats cmd_solvability(const RunConfig& config, const StageOptions& options = {});
void cmd_analyze_repr(const RunConfig& config, const StageOptions& options = {});
void cmd_report(const RunConfig& config, const StageOptions& options = {});

const std::vector<std::string>& stage_names();
// Dispatches by CLI name; throws ConfigError for an unknown stage.
StageStats run_stage(std::string_view stage, const RunConfig& config, const StageOptions& options = {});

}  // namespace latentprobe
