#include <iostream>

#include "CLI11.hpp"
#include "spdc/run.hpp"

using namespace spdc;

int main(int argc, char** argv) {
  CLI::App app{"spdc: partially observed SPDE control with jumps"};
  app.require_subcommand(1);
  std::string config, out = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  app.add_option("--config", config, "JSON run configuration")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override ensemble.seed");
  app.add_option("--threads", threads, "worker threads inside modules")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory");
  for (const auto& [name, cmd] : command_names()) app.add_subcommand(name, "run " + name);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  thread_count() = threads;
  try {
    const RunConfig c = load_config(config, seed);
    const Command cmd = command_from(app.get_subcommands().front()->get_name());
    const ResultsBundle R = run_command(c, cmd, out);
    for (const auto& k : R.checks)
      std::cout << (k.pass ? "PASS " : "FAIL ") << k.name << " (value " << k.value << ", bound " << k.bound << ")\n";
    std::cout << "results " << (std::filesystem::path(out) / (to_string(cmd) + ".json")).string() << " in "
              << R.wall_seconds << " s\n";
    return R.all_pass() ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
