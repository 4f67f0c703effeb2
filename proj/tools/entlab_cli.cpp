// entlab command-line driver: run scenarios, list checks, export dumps.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "entlab/scenario.hpp"

namespace sc = entlab::scenario;

namespace {

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const entlab::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return sc::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}

int run(const std::string& config, const std::string& output, std::vector<std::string> only, bool quiet) {
  return guarded([&] {
    const auto cfg = sc::load_config(config);
    sc::RunOptions opts;
    if (!output.empty()) opts.output_dir = output;
    opts.only = std::move(only);
    opts.log = quiet ? nullptr : &std::cout;
    const auto res = sc::run_scenario(cfg, opts);
    if (!quiet) std::cout << "report written to " << res.output_dir << "/report.json\n";
    return res.exit_code;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy dissipation lab: Langevin ensembles, Fokker-Planck solves and identity checks"};
  app.require_subcommand(1);

  std::string config, output, input, format = "csv";
  std::vector<std::string> only;
  bool quiet = false;

  auto* run_cmd = app.add_subcommand("run", "run every check listed in a scenario config");
  run_cmd->add_option("config", config, "scenario config (JSON)")->required();
  run_cmd->add_option("-o,--output", output, "output directory (overrides ENTLAB_OUTPUT_DIR and the config)");
  run_cmd->add_flag("-q,--quiet", quiet, "print nothing on success");

  auto* check_cmd = app.add_subcommand("check", "run selected checks of a scenario config");
  check_cmd->add_option("config", config, "scenario config (JSON)")->required();
  check_cmd->add_option("--only", only, "check names")->required()->delimiter(',');
  check_cmd->add_option("-o,--output", output, "output directory");
  check_cmd->add_flag("-q,--quiet", quiet, "print nothing on success");

  auto* list_cmd = app.add_subcommand("list-checks", "list registered checks");

  auto* export_cmd = app.add_subcommand("export", "convert a dump (.entf/.entg/.entl) or report.json");
  export_cmd->add_option("input", input, "file to convert")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  export_cmd->add_option("-o,--output", output, "write here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run_cmd) return run(config, output, {}, quiet);
  if (*check_cmd) return run(config, output, only, quiet);
  if (*list_cmd) {
    for (const auto& e : sc::registry())
      std::cout << e.name << "\t" << e.description << "\t[" << e.anchor << "]\n";
    return 0;
  }
  if (*export_cmd) {
    return guarded([&] {
      const auto f = format == "json" ? entlab::io::ExportFormat::json : entlab::io::ExportFormat::csv;
      if (output.empty()) {
        entlab::io::export_file(input, f, std::cout);
      } else {
        std::ofstream out(output);
        if (!out) entlab::fail(entlab::ErrorKind::io, "cannot open " + output + " for writing");
        entlab::io::export_file(input, f, out);
      }
      return 0;
    });
  }
  return 2;
}
