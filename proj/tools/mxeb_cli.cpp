// mxeb: command line front end for the experiment orchestrator.
//
//   mxeb <command> [--config FILE] [--seed S] [--out DIR] [--workers W] [--estimator E]
//
// Exit codes: 0 ok, 1 config error, 2 runtime failure, 3 partial failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "mxeb/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Cross-entropy benchmark experiments for monitored brick circuits"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mxeb::kVersion));

  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> workers;
  std::optional<std::string> estimator;

  for (const auto& name : mxeb::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config,-c", config_path, "JSON config file");
    sub->add_option("--seed", seed, "top-level seed (overrides the config)");
    sub->add_option("--out,-o", out_dir, "output directory");
    sub->add_option("--workers,-j", workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--estimator", estimator, "histogram | exact | rnn");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : mxeb::exit_config;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  mxeb::ExperimentConfig cfg;
  try {
    if (config_path) {
      const std::filesystem::path path(*config_path);
      std::string text;
      try {
        text = mxeb::read_file(path);
      } catch (const mxeb::Error& e) {
        throw mxeb::ConfigError(e.what());
      }
      cfg = mxeb::parse_config(text, path.parent_path());
    }
    if (seed) cfg.seed = *seed;
    if (workers) cfg.workers = *workers;
    if (estimator) {
      try {
        cfg.estimator = mxeb::parse_estimator(*estimator);
      } catch (const mxeb::Error& e) {
        throw mxeb::ConfigError(e.what());
      }
    }
  } catch (const mxeb::ConfigError& e) {
    mxeb::log_line(std::string("config error: ") + e.what());
    return mxeb::exit_config;
  }
  return mxeb::run_command(command, cfg, mxeb::output_dir(out_dir, command));
}
