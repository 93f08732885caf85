#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "app.hpp"

int main(int argc, char** argv) {
  using namespace mfcscore;
  CLI::App cli{"Mean field control solver: score-based forward-backward ODE training with an FBSDE baseline"};
  cli.require_subcommand(1);

  std::string config;
  app::Overrides o;
  std::vector<std::string> extra_reports;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--seeds", o.seeds, "Number of seeds (consecutive from the config seed)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--mode", o.mode, "Rollout mode: score or fbsde");
  };

  auto* train = cli.add_subcommand("train", "Train one configuration and write its artifacts");
  train->add_option("--config", config, "Run configuration (flat JSON)")->required();
  add_common(train);

  auto* compare = cli.add_subcommand("compare", "Train score and fbsde modes over several seeds");
  compare->add_option("--config", config, "Run configuration (flat JSON)")->required();
  add_common(compare);

  auto* plot = cli.add_subcommand("plot", "Render SVG figures from report.json files");
  plot->add_option("--config", config, "Report file (report.json)")->required();
  plot->add_option("reports", extra_reports, "Further report files for the across-seed band");
  add_common(plot);

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    cli.exit(e);
    return app::invalid;
  }

  try {
    if (train->parsed()) return app::cmd_train(config, o);
    if (compare->parsed()) return app::cmd_compare(config, o);
    std::vector<std::string> reports{config};
    reports.insert(reports.end(), extra_reports.begin(), extra_reports.end());
    return app::cmd_plot(reports, o.out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return app::invalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return app::failure;
  }
}
