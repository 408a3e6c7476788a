// kinlab command line: one run per invocation.
//
//   kinlab <task> (--config PATH | --preset NAME) [--seed N] [--out DIR] [--threads N]
//   kinlab run    (--config PATH | --preset NAME) ...   runs the tasks listed in the config
//
// Exit status: 0 all checks pass, 1 a check failed, 2 schema or precondition,
// 3 numerical failure, 4 capacity refusal.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <unistd.h>

#include "kinlab/runner.hpp"

namespace fs = std::filesystem;
using namespace kinlab;

namespace {

const char* status(const run::Check& c) { return !c.applicable ? "n/a " : (c.pass ? "PASS" : "FAIL"); }

// Artifacts are written to a staging directory and moved into place only when
// every task finished without an error.
int execute(const std::vector<std::string>& tasks, const config::Config& cfg, const std::string& out) {
  auto t0 = std::chrono::steady_clock::now();
  fs::path staging;
  if (!out.empty()) {
    staging = fs::path(out) / (".staging-" + std::to_string(::getpid()));
    fs::create_directories(staging);
  }
  run::Context ctx{staging.string()};
  config::json summary;
  summary["kinlab"] = version;
  summary["config_hash"] = cfg.hash();
  summary["config"] = cfg.resolved;
  summary["tasks"] = config::json::array();
  bool ok = true;
  try {
    for (auto& t : tasks) {
      auto s = run::run_task(t, cfg, ctx);
      for (auto& c : s.checks)
        std::cout << status(c) << "  " << t << ": " << c.name << "  value=" << c.value << " bound=" << c.bound
                  << (c.note.empty() ? "" : "  (" + c.note + ")") << '\n';
      ok = ok && s.passed();
      summary["tasks"].push_back(s.to_json());
    }
  } catch (...) {
    if (!staging.empty()) fs::remove_all(staging);
    throw;
  }
  summary["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summary["passed"] = ok;
  if (!staging.empty()) {
    std::ofstream(staging / "summary.json") << summary.dump(2) << '\n';
    for (auto& e : fs::directory_iterator(staging)) fs::rename(e.path(), fs::path(out) / e.path().filename());
    fs::remove(staging);
  }
  std::cout << (ok ? "all checks passed" : "some checks failed") << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinlab: linear kinetic equations with degenerate collision weights"};
  app.require_subcommand(1);
  std::string config_path, preset, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  auto add_flags = [&](CLI::App* sub) {
    auto* c = sub->add_option("--config", config_path, "JSON experiment config");
    auto* p = sub->add_option("--preset", preset, "bundled preset name");
    c->excludes(p);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out, "output directory (no files when omitted)");
    sub->add_option("--threads", threads, "override the worker count");
  };
  std::vector<CLI::App*> subs;
  for (auto& t : config::task_names()) subs.push_back(app.add_subcommand(t, "run the " + t + " task"));
  subs.push_back(app.add_subcommand("run", "run the tasks listed in the config"));
  for (auto* s : subs) add_flags(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (config_path.empty() == preset.empty()) throw SchemaError("exactly one of --config or --preset is required");
    config::Overrides ov{seed, threads};
    auto cfg = config::parse(config::load_json(preset.empty() ? config_path : config::preset_path(preset)), ov);
    std::string cmd = app.get_subcommands().front()->get_name();
    std::vector<std::string> tasks = cmd == "run" ? cfg.tasks : std::vector<std::string>{cmd};
    if (tasks.empty()) throw SchemaError("config lists no task");
    return execute(tasks, cfg, out);
  } catch (const Error& e) {
    std::cerr << "kinlab: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "kinlab: " << e.what() << '\n';
    return 3;
  }
}
