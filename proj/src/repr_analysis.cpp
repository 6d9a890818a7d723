#include "latentprobe/repr_analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "latentprobe/error.hpp"

namespace latentprobe {

using json = nlohmann::json;

namespace {

static_assert(sizeof(float) == 4, "probe vectors are float32");

float float_from_le(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

void float_to_le(float v, std::string& out) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<char>((bits >> shift) & 0xFF));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

using CellKey = std::tuple<std::string, int, int>;  // problem, ratio percent, layer

}  // namespace

ProbeSet load_probe_dir(const std::filesystem::path& dir) {
  ProbeSet set;
  try {
    const json meta = json::parse(read_file(dir / "meta.json"));
    set.meta.model_id = meta.at("model_id").get<std::string>();
    set.meta.vocab_size = meta.at("vocab_size").get<std::int64_t>();
    set.meta.num_layers = meta.at("num_layers").get<int>();
    set.meta.hidden_dim = meta.at("hidden_dim").get<int>();
    set.meta.probe_position_rule = meta.value("probe_position_rule", "");
    set.meta.gold_token_rule = meta.value("gold_token_rule", "");
  } catch (const json::exception& e) {
    throw ValidationError((dir / "meta.json").string() + ": " + e.what());
  }

  std::string hidden_bytes;
  if (std::filesystem::exists(dir / "hidden.bin")) hidden_bytes = read_file(dir / "hidden.bin");

  std::set<std::tuple<std::string, std::string, int, int>> keys;
  std::istringstream lines(read_file(dir / "records.jsonl"));
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = (dir / "records.jsonl").string() + ":" + std::to_string(number) + ": ";
    ProbeRecord r;
    try {
      const json row = json::parse(line);
      r.problem_id = row.at("id").get<std::string>();
      r.language = row.at("language").get<std::string>();
      r.ratio = Ratio::from_real(row.at("ratio").get<double>());
      r.layer = row.at("layer").get<int>();
      r.gold_rank = row.at("gold_rank").get<std::int64_t>();
      const auto ref = row.find("hidden_ref");
      if (ref != row.end() && !ref->is_null()) {
        const auto offset = (*ref).at(0).get<std::uint64_t>();
        const auto length = (*ref).at(1).get<std::uint64_t>();
        if (length != static_cast<std::uint64_t>(set.meta.hidden_dim)) {
          throw ValidationError(where + "hidden vector length " + std::to_string(length) + " != hidden_dim");
        }
        if (offset % 4 != 0 || offset + length * 4 > hidden_bytes.size()) {
          throw ValidationError(where + "hidden_ref outside hidden.bin");
        }
        std::vector<float> v(length);
        const auto* base = reinterpret_cast<const unsigned char*>(hidden_bytes.data()) + offset;
        for (std::size_t i = 0; i < length; ++i) v[i] = float_from_le(base + 4 * i);
        for (float x : v) {
          if (!std::isfinite(x)) throw ValidationError(where + "non-finite hidden value");
        }
        r.hidden = std::move(v);
      }
    } catch (const json::exception& e) {
      throw ValidationError(where + e.what());
    }
    if (r.gold_rank < 1) throw ValidationError(where + "gold_rank below 1");
    if (r.layer < 0 || r.layer > set.meta.num_layers) throw ValidationError(where + "layer out of range");
    if (!keys.emplace(r.problem_id, r.language, r.ratio.percent(), r.layer).second) {
      throw ValidationError(where + "duplicate (id, language, ratio, layer)");
    }
    set.records.push_back(std::move(r));
  }
  return set;
}

void write_probe_dir(const std::filesystem::path& dir, const ProbeSet& probes) {
  std::filesystem::create_directories(dir);
  const json meta = {
      {"model_id", probes.meta.model_id},
      {"vocab_size", probes.meta.vocab_size},
      {"num_layers", probes.meta.num_layers},
      {"hidden_dim", probes.meta.hidden_dim},
      {"probe_position_rule", probes.meta.probe_position_rule},
      {"gold_token_rule", probes.meta.gold_token_rule},
  };
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';

  std::string hidden;
  std::ofstream records(dir / "records.jsonl", std::ios::binary);
  for (const ProbeRecord& r : probes.records) {
    json row = {{"id", r.problem_id}, {"language", r.language}, {"ratio", r.ratio.value()},
                {"layer", r.layer},   {"gold_rank", r.gold_rank}, {"hidden_ref", nullptr}};
    if (r.hidden) {
      row["hidden_ref"] = {hidden.size(), r.hidden->size()};
      for (float x : *r.hidden) float_to_le(x, hidden);
    }
    records << row.dump() << '\n';
  }
  std::ofstream(dir / "hidden.bin", std::ios::binary) << hidden;
}

namespace {

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) {
    throw ValidationError("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                          std::to_string(v.size()));
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    uu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
    vv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  if (uu == 0.0 || vv == 0.0) throw ValidationError("cosine: zero vector");
  const double c = dot / std::sqrt(uu * vv);
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace

double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }
double cosine(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }

std::vector<RankPoint> rank_trajectory(std::span<const ProbeRecord> records, const LanguageCode& language) {
  std::map<int, std::pair<double, std::size_t>> sums;
  for (const ProbeRecord& r : records) {
    if (r.language != language) continue;
    auto& [total, count] = sums[r.layer];
    total += static_cast<double>(r.gold_rank);
    ++count;
  }
  if (sums.empty()) throw ValidationError("rank_trajectory: no records for '" + language + "'");
  std::vector<RankPoint> out;
  for (const auto& [layer, acc] : sums) {
    out.push_back({layer, acc.first / static_cast<double>(acc.second), acc.second});
  }
  return out;
}

std::string_view to_string(Axis axis) { return axis == Axis::kByLayer ? "by_layer" : "by_step"; }
std::string_view to_string(Group group) { return group == Group::kCorrect ? "correct" : "incorrect"; }
std::string_view to_string(Target target) { return target == Target::kEnglish ? "english" : "avg_others"; }

namespace {

struct Cell {
  int ratio_percent;
  int layer;
  double value;
};

std::vector<SimilarityPoint> aggregate(const std::vector<Cell>& cells, Axis axis) {
  std::map<int, std::pair<double, std::size_t>> sums;
  for (const Cell& c : cells) {
    auto& [total, count] = sums[axis == Axis::kByLayer ? c.layer : c.ratio_percent];
    total += c.value;
    ++count;
  }
  std::vector<SimilarityPoint> points;
  for (const auto& [coord, acc] : sums) {
    const double coordinate = axis == Axis::kByLayer ? static_cast<double>(coord) : coord / 100.0;
    points.push_back({coordinate, acc.first / static_cast<double>(acc.second), acc.second});
  }
  return points;
}

std::map<CellKey, const ProbeRecord*> index_language(std::span<const ProbeRecord> records,
                                                     const LanguageCode& language) {
  std::map<CellKey, const ProbeRecord*> index;
  for (const ProbeRecord& r : records) {
    if (r.language != language || !r.hidden) continue;
    index.emplace(CellKey{r.problem_id, r.ratio.percent(), r.layer}, &r);
  }
  return index;
}

}  // namespace

SimilarityTable similarity_to_reference(std::span<const ProbeRecord> target, std::span<const ProbeRecord> reference,
                                        Axis axis) {
  SimilarityTable table;
  table.axis = axis;
  if (target.empty()) throw ValidationError("similarity_to_reference: no target records");
  table.language = target.front().language;
  std::map<CellKey, const ProbeRecord*> ref_index;
  for (const ProbeRecord& r : reference) {
    if (r.language == table.language) {
      throw ValidationError("similarity_to_reference: target and reference are both '" + r.language + "'");
    }
    if (r.hidden) ref_index.emplace(CellKey{r.problem_id, r.ratio.percent(), r.layer}, &r);
  }
  std::vector<Cell> cells;
  for (const ProbeRecord& r : target) {
    if (r.language != table.language) throw ValidationError("similarity_to_reference: mixed target languages");
    auto it = r.hidden ? ref_index.find(CellKey{r.problem_id, r.ratio.percent(), r.layer}) : ref_index.end();
    if (it == ref_index.end()) {
      ++table.dropped_cells;
      continue;
    }
    cells.push_back({r.ratio.percent(), r.layer, cosine(*r.hidden, *it->second->hidden)});
  }
  if (cells.empty()) throw ValidationError("similarity_to_reference: no matched keys for '" + table.language + "'");
  table.matched_cells = cells.size();
  table.points = aggregate(cells, axis);
  return table;
}

std::vector<GroupedSimilarity> grouped_similarity(std::span<const ProbeRecord> records, const Correctness& correctness,
                                                  const LanguageCode& reference) {
  std::set<LanguageCode> languages;
  for (const ProbeRecord& r : records) languages.insert(r.language);
  std::map<LanguageCode, std::map<CellKey, const ProbeRecord*>> index;
  for (const LanguageCode& lang : languages) index[lang] = index_language(records, lang);
  const auto& ref_index = index[reference];

  std::vector<GroupedSimilarity> out;
  for (const LanguageCode& lang : languages) {
    if (lang == reference) continue;
    std::vector<LanguageCode> others;
    for (const LanguageCode& o : languages) {
      if (o != lang && o != reference) others.push_back(o);
    }

    std::map<std::string, bool> solved;
    for (const ProbeRecord& r : records) {
      if (r.language != lang || solved.count(r.problem_id)) continue;
      auto it = correctness.find({r.problem_id, lang});
      if (it == correctness.end()) {
        throw ValidationError("no correctness for probed problem '" + r.problem_id + "' in '" + lang + "'");
      }
      solved[r.problem_id] = it->second;
    }

    for (Group group : {Group::kCorrect, Group::kIncorrect}) {
      const bool want = group == Group::kCorrect;
      std::size_t members = 0;
      for (const auto& [id, ok] : solved) members += ok == want ? 1 : 0;

      std::vector<Cell> english_cells;
      std::vector<Cell> other_cells;
      for (const auto& [key, rec] : index[lang]) {
        if (solved.at(std::get<0>(key)) != want) continue;
        if (auto it = ref_index.find(key); it != ref_index.end()) {
          english_cells.push_back({std::get<1>(key), std::get<2>(key), cosine(*rec->hidden, *it->second->hidden)});
        }
        double total = 0.0;
        std::size_t count = 0;
        for (const LanguageCode& o : others) {
          const auto& other_index = index[o];
          if (auto it = other_index.find(key); it != other_index.end()) {
            total += cosine(*rec->hidden, *it->second->hidden);
            ++count;
          }
        }
        if (count > 0) other_cells.push_back({std::get<1>(key), std::get<2>(key), total / static_cast<double>(count)});
      }

      for (Axis axis : {Axis::kByLayer, Axis::kByStep}) {
        GroupedSimilarity english{lang, group, Target::kEnglish, axis, members, aggregate(english_cells, axis), false};
        GroupedSimilarity avg{lang, group, Target::kAvgOthers, axis, members, aggregate(other_cells, axis),
                              others.empty()};
        out.push_back(std::move(english));
        out.push_back(std::move(avg));
      }
    }
  }
  return out;
}

}  // namespace latentprobe
