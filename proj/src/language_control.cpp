#include "latentprobe/language_control.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "latentprobe/error.hpp"

namespace latentprobe {
namespace {

constexpr std::string_view kPlaceholder = "{question}";

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

}  // namespace

std::string_view to_string(ResourceTier tier) {
  switch (tier) {
    case ResourceTier::kHigh:
      return "high";
    case ResourceTier::kMid:
      return "mid";
    case ResourceTier::kLow:
      return "low";
  }
  return "unknown";
}

ResourceTier parse_resource_tier(std::string_view name) {
  if (name == "high") return ResourceTier::kHigh;
  if (name == "mid") return ResourceTier::kMid;
  if (name == "low") return ResourceTier::kLow;
  throw ConfigError("unknown resource tier '" + std::string(name) + "'");
}

std::optional<ResourceTier> known_resource_tier(std::string_view language) {
  static const std::map<std::string_view, ResourceTier> kTable = {
      {"en", ResourceTier::kHigh}, {"es", ResourceTier::kHigh}, {"de", ResourceTier::kHigh},
      {"fr", ResourceTier::kHigh}, {"ru", ResourceTier::kHigh}, {"zh", ResourceTier::kHigh},
      {"bn", ResourceTier::kMid},  {"ja", ResourceTier::kMid},  {"th", ResourceTier::kMid},
      {"sw", ResourceTier::kLow},  {"te", ResourceTier::kLow},
  };
  auto it = kTable.find(language);
  if (it == kTable.end()) return std::nullopt;
  return it->second;
}

LanguagePack::LanguagePack(LanguageCode language, std::string display_name, std::string prompt_template,
                           std::string hack_prefix, std::string elicitation_prefix, ResourceTier tier)
    : language_(std::move(language)),
      display_name_(std::move(display_name)),
      prompt_template_(std::move(prompt_template)),
      hack_prefix_(std::move(hack_prefix)),
      elicitation_prefix_(std::move(elicitation_prefix)),
      tier_(tier) {
  if (count_occurrences(prompt_template_, kPlaceholder) != 1) {
    throw ConfigError("language pack '" + language_ + "': prompt_template must contain exactly one {question}");
  }
  if (hack_prefix_.empty() || elicitation_prefix_.empty()) {
    throw ConfigError("language pack '" + language_ + "': hack_prefix and elicitation_prefix must be non-empty");
  }
  if (auto expected = known_resource_tier(language_); expected && *expected != tier_) {
    throw ConfigError("language pack '" + language_ + "': resource tier '" + std::string(to_string(tier_)) +
                      "' contradicts '" + std::string(to_string(*expected)) + "'");
  }
}

std::string LanguagePack::render_question(std::string_view question) const {
  std::string out = prompt_template_;
  out.replace(out.find(kPlaceholder), kPlaceholder.size(), question);
  return out;
}

LanguagePacks parse_language_packs(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("language packs: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("language packs: expected a JSON object keyed by language code");
  LanguagePacks packs;
  for (const auto& [code, entry] : doc.items()) {
    try {
      packs.emplace(code, LanguagePack(code, entry.at("display_name").get<std::string>(),
                                       entry.at("prompt_template").get<std::string>(),
                                       entry.at("hack_prefix").get<std::string>(),
                                       entry.at("elicitation_prefix").get<std::string>(),
                                       parse_resource_tier(entry.at("resource_tier").get<std::string>())));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("language pack '" + code + "': " + e.what());
    }
  }
  return packs;
}

LanguagePacks load_language_packs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_language_packs(buffer.str());
}

namespace {

std::string opening(const Problem& problem, const LanguagePack& pack, const PromptGlue& glue) {
  if (pack.language() != problem.language) {
    throw ValidationError("language pack '" + pack.language() + "' used for problem '" + problem.id +
                          "' in '" + problem.language + "'");
  }
  return pack.render_question(problem.text) + glue.turn_separator + glue.markers.open + "\n" +
         pack.hack_prefix() + "\n";
}

}  // namespace

AssembledPrompt build_generation_prompt(const Problem& problem, const LanguagePack& pack, const PromptGlue& glue) {
  return {PromptKind::kGeneration, opening(problem, pack, glue), problem.id, problem.language, std::nullopt};
}

AssembledPrompt build_elicitation_prompt(const Problem& problem, const TruncatedTrace& truncated,
                                         const LanguagePack& pack, const PromptGlue& glue) {
  if (truncated.problem_id != problem.id) {
    throw ValidationError("truncated trace for '" + truncated.problem_id + "' paired with problem '" +
                          problem.id + "'");
  }
  if (truncated.language != problem.language) {
    throw ValidationError("truncated trace language '" + truncated.language + "' differs from problem '" +
                          problem.language + "'");
  }
  std::string text = opening(problem, pack, glue);
  text += truncated.text();
  text += "\n" + glue.markers.close + "\n\n" + pack.elicitation_prefix();
  return {PromptKind::kElicitation, std::move(text), problem.id, problem.language, truncated.ratio};
}

}  // namespace latentprobe
