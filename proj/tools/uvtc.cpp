// uvtc: temporal-consistency post-optimization for re-rendered videos.
//
//   uvtc run|stage1|stage2|reconstruct|metrics|noise-combine --config <file>
//        [--seed N] [--threads N] [--dump-uvt] [--set key=value ...]

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "uvtc/pipeline.hpp"

namespace {

void print_report(const uvtc::pipeline::MetricsReport& report) { std::cout << report.csv(); }

}  // namespace

int main(int argc, char** argv) {
  using namespace uvtc::pipeline;

  CLI::App app{"Temporal-consistency post-optimization over a unique video tensor"};
  app.require_subcommand(1);

  std::string config_path;
  long long seed = -1;
  int threads = 0;
  bool dump = false;
  std::vector<std::string> overrides;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"run", "ingest, Stage I, Stage II, export and metrics"},
      {"stage1", "exposure alignment only; writes aligned frames and embeddings"},
      {"stage2", "UVT optimization from persisted Stage I embeddings"},
      {"reconstruct", "gather/scatter the source video and report compression"},
      {"metrics", "temporal-consistency metrics of a frame sequence"},
      {"noise-combine", "blend two noise tensors with the decayed gamma schedule"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "flat key = value config file")->required();
    sub->add_option("--seed", seed, "random seed (overrides config)");
    sub->add_option("--threads", threads, "worker thread cap (overrides config)");
    sub->add_flag("--dump-uvt", dump, "write the UVT values and index map as tensor files");
    sub->add_option("--set", overrides, "config override key=value (repeatable)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    KeyValueConfig kv = KeyValueConfig::load(config_path);
    for (const auto& o : overrides) kv.apply_override(o);
    if (seed >= 0) kv.set("seed", std::to_string(seed));
    if (threads > 0) kv.set("threads", std::to_string(threads));
    if (dump) kv.set("dump_uvt", "true");
    const PipelineConfig cfg = PipelineConfig::from(kv);

    if (command == "run") {
      print_report(cmd_run(cfg));
    } else if (command == "stage1") {
      const auto curve = cmd_stage1(cfg);
      std::printf("stage1 final loss %.10g after %zu epochs\n", curve.empty() ? 0.0 : curve.back(), curve.size());
    } else if (command == "stage2") {
      print_report(cmd_stage2(cfg));
    } else if (command == "reconstruct") {
      print_report(cmd_reconstruct(cfg));
    } else if (command == "metrics") {
      print_report(cmd_metrics(cfg));
    } else if (command == "noise-combine") {
      cmd_noise_combine(cfg);
      std::printf("wrote %s\n", cfg.noise.output.c_str());
    }
  } catch (const uvtc::Error& e) {
    std::fprintf(stderr, "uvtc %s: %s\n", command.c_str(), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "uvtc %s: internal error: %s\n", command.c_str(), e.what());
    return 1;
  }
  return 0;
}
