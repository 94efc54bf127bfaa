#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsg/config.hpp"
#include "dsg/error.hpp"
#include "dsg/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::string seed;
  std::string task;
  std::string constraint;
  std::string k;
  std::string out;
  std::vector<std::string> set;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--seed", f.seed, "seed for every random stream");
  cmd->add_option("--task", f.task, "sgcls or sgdet")->check(CLI::IsMember({"sgcls", "sgdet"}));
  cmd->add_option("--constraint", f.constraint, "with, none or both")->check(CLI::IsMember({"with", "none", "both"}));
  cmd->add_option("--k", f.k, "comma-separated K list, e.g. 10,20,50");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.set, "extra key=value override (repeatable)");
}

dsg::KeyValues overrides(const Flags& f) {
  dsg::KeyValues kv;
  if (!f.seed.empty()) kv["seed"] = f.seed;
  if (!f.task.empty()) kv["task"] = f.task;
  if (!f.constraint.empty()) kv["eval.constraint"] = f.constraint;
  if (!f.k.empty()) kv["eval.k"] = f.k;
  if (!f.out.empty()) kv["out"] = f.out;
  for (const auto& s : f.set) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw dsg::ConfigError("--set expects key=value, got '" + s + "'");
    kv[dsg::trim(s.substr(0, eq))] = dsg::trim(s.substr(eq + 1));
  }
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsgctl: dynamic scene-graph pipeline (synth, track, train, eval, report)"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"synth", "generate a synthetic dataset"},
      {"track", "group detections into tracklets and dump them"},
      {"train", "train the scene-graph model and write a checkpoint"},
      {"eval", "score predictions or a checkpoint against ground truth"},
      {"report", "render the latest metrics as tables"}};
  for (const auto& [name, help] : commands) add_flags(app.add_subcommand(name, help), flags);
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const dsg::RunConfig cfg = dsg::load_run_config(flags.config, overrides(flags));
    dsg::Run run(cfg, &std::cout);
    return run.execute(command);
  } catch (const dsg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const dsg::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const dsg::TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 4;
  } catch (const dsg::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
