#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latentprobe/corpus.hpp"
#include "latentprobe/truncation.hpp"

namespace latentprobe {

struct ProbeMeta {
  std::string model_id;
  std::int64_t vocab_size = 0;
  int num_layers = 0;  // layers 0 (embeddings) .. num_layers
  int hidden_dim = 0;
  std::string probe_position_rule;
  std::string gold_token_rule;
};

struct ProbeRecord {
  std::string problem_id;
  LanguageCode language;
  Ratio ratio;
  int layer = 0;
  std::int64_t gold_rank = 1;  // 1 = highest lens score
  std::optional<std::vector<float>> hidden;
};

struct ProbeSet {
  ProbeMeta meta;
  std::vector<ProbeRecord> records;
};

// Reads a probe directory: meta.json, records.jsonl and (when any record has
// a hidden_ref) hidden.bin of little-endian float32. hidden_ref is
// [byte offset, element count]. Throws ValidationError on duplicate keys,
// ranks below 1, layers outside [0, num_layers], or vectors that do not
// match hidden_dim or fall outside hidden.bin.
ProbeSet load_probe_dir(const std::filesystem::path& dir);
void write_probe_dir(const std::filesystem::path& dir, const ProbeSet& probes);

// dot(u, v) / (|u| |v|), accumulated in double.
double cosine(std::span<const float> u, std::span<const float> v);
double cosine(std::span<const double> u, std::span<const double> v);

struct RankPoint {
  int layer = 0;
  double mean_rank = 0.0;
  std::size_t count = 0;
};

// Mean gold rank per layer over every (problem, ratio) of `language`.
std::vector<RankPoint> rank_trajectory(std::span<const ProbeRecord> records, const LanguageCode& language);

enum class Axis { kByLayer, kByStep };

std::string_view to_string(Axis axis);

struct SimilarityPoint {
  double coordinate = 0.0;  // layer index or truncation ratio
  double mean = 0.0;
  std::size_t count = 0;
};

struct SimilarityTable {
  LanguageCode language;
  Axis axis = Axis::kByLayer;
  std::vector<SimilarityPoint> points;
  std::size_t matched_cells = 0;
  std::size_t dropped_cells = 0;  // target cells without a counterpart
};

// Pairs target and reference records on (problem, ratio, layer), takes the
// cosine per pair and averages over ratios (by layer) or layers (by step).
SimilarityTable similarity_to_reference(std::span<const ProbeRecord> target, std::span<const ProbeRecord> reference,
                                        Axis axis);

enum class Group { kCorrect, kIncorrect };
enum class Target { kEnglish, kAvgOthers };

std::string_view to_string(Group group);
std::string_view to_string(Target target);

struct GroupedSimilarity {
  LanguageCode language;
  Group group = Group::kCorrect;
  Target target = Target::kEnglish;
  Axis axis = Axis::kByLayer;
  std::size_t problems = 0;  // problems in the group
  std::vector<SimilarityPoint> points;
  // avg_others needs at least one language besides the target and reference.
  bool unavailable = false;
};

// (problem id, language) -> solved under pass@k.
using Correctness = std::map<std::pair<std::string, LanguageCode>, bool>;

// For every non-reference language, splits its problems by its own
// correctness and compares each cell against the reference language and
// against the mean over all other languages (reference and self excluded).
std::vector<GroupedSimilarity> grouped_similarity(std::span<const ProbeRecord> records, const Correctness& correctness,
                                                  const LanguageCode& reference = "en");

}  // namespace latentprobe
