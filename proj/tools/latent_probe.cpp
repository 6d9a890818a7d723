#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multilingual latent-reasoning evaluation harness"};
  app.set_version_flag("--version", std::string(latentprobe::tool_version()));
  app.require_subcommand(1);

  std::string config_path;
  bool resume = false;
  for (const std::string& name : latentprobe::stage_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_flag("--resume", resume, "reuse cached responses from an earlier, interrupted run");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(latentprobe::ErrorKind::kConfig);
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const latentprobe::RunConfig config = latentprobe::load_run_config(config_path);
    latentprobe::StageOptions options;
    options.resume = resume;
    options.log = &std::cerr;
    latentprobe::run_stage(stage, config, options);
    return 0;
  } catch (const latentprobe::Error& e) {
    std::cerr << "latent-probe " << stage << ": " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "latent-probe " << stage << ": malformed input: " << e.what() << '\n';
    return static_cast<int>(latentprobe::ErrorKind::kValidation);
  } catch (const std::exception& e) {
    std::cerr << "latent-probe " << stage << ": " << e.what() << '\n';
    return static_cast<int>(latentprobe::ErrorKind::kValidation);
  }
}
