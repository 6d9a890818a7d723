#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "latentprobe/corpus.hpp"
#include "latentprobe/truncation.hpp"

namespace latentprobe {

enum class ResourceTier { kHigh, kMid, kLow };

std::string_view to_string(ResourceTier tier);
ResourceTier parse_resource_tier(std::string_view name);

// Static resource classification of the eleven benchmark languages; nullopt
// for languages outside it.
std::optional<ResourceTier> known_resource_tier(std::string_view language);

class LanguagePack {
 public:
  // Throws ConfigError when the template does not hold exactly one
  // "{question}" placeholder, a prefix is empty, or the tier contradicts the
  // static table.
  LanguagePack(LanguageCode language, std::string display_name, std::string prompt_template,
               std::string hack_prefix, std::string elicitation_prefix, ResourceTier tier);

  const LanguageCode& language() const { return language_; }
  const std::string& display_name() const { return display_name_; }
  const std::string& prompt_template() const { return prompt_template_; }
  const std::string& hack_prefix() const { return hack_prefix_; }
  const std::string& elicitation_prefix() const { return elicitation_prefix_; }
  ResourceTier resource_tier() const { return tier_; }

  std::string render_question(std::string_view question) const;

 private:
  LanguageCode language_;
  std::string display_name_;
  std::string prompt_template_;
  std::string hack_prefix_;
  std::string elicitation_prefix_;
  ResourceTier tier_;
};

using LanguagePacks = std::map<LanguageCode, LanguagePack>;

LanguagePacks parse_language_packs(std::string_view json_text);
LanguagePacks load_language_packs(const std::filesystem::path& path);

enum class PromptKind { kGeneration, kElicitation };

struct AssembledPrompt {
  PromptKind kind = PromptKind::kGeneration;
  std::string text;
  std::string problem_id;
  LanguageCode language;
  std::optional<Ratio> truncation_ratio;  // elicitation only
};

struct PromptGlue {
  // Placed between the rendered template and the opening think marker.
  std::string turn_separator = "\n";
  ThinkMarkers markers;
};

// template(question) + turn separator + "<think>\n" + hack prefix + "\n"
AssembledPrompt build_generation_prompt(const Problem& problem, const LanguagePack& pack,
                                        const PromptGlue& glue = {});

// Generation prompt + kept steps + "\n</think>\n\n" + elicitation prefix
AssembledPrompt build_elicitation_prompt(const Problem& problem, const TruncatedTrace& truncated,
                                         const LanguagePack& pack, const PromptGlue& glue = {});

}  // namespace latentprobe
