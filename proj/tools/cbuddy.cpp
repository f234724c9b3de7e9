#include <iostream>

#include <CLI11.hpp>

#include "cbuddy/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Context-selection analysts, imitation assistant and teaming experiments"};
  app.require_subcommand(1);

  std::string manifest_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int workers = 0;
  bool force = false;
  int port = 8080;
  int subset = 0;

  const std::vector<std::string> stages = {"prepare-data", "train-analysts", "collect-traces", "train-assistant",
                                           "eval-team", "explain", "serve", "all"};
  for (const auto& name : stages) {
    auto* sub = app.add_subcommand(name, name == "all" ? "Run every stage except serve" : "Run the " + name + " stage");
    sub->add_option("--manifest", manifest_path, "Experiment manifest (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the manifest seed (takes precedence over CB_SEED)");
    sub->add_option("--out", out_dir, "Override the output directory");
    sub->add_option("--workers", workers, "Worker threads (0 = manifest or hardware)");
    sub->add_flag("--force", force, "Rerun even when inputs are unchanged");
    if (name == "serve") {
      sub->add_option("--port", port, "HTTP port");
      sub->add_option("--subset", subset, "Subset whose fresh alerts are served");
    }
  }

  CLI11_PARSE(app, argc, argv);
  const auto stage = cbuddy::stage_from_string(app.get_subcommands().front()->get_name());

  try {
    auto manifest = cbuddy::load_manifest(manifest_path);
    if (seed) manifest.seed = *seed;
    if (!out_dir.empty()) manifest.output_dir = out_dir;
    if (workers > 0) manifest.workers = workers;
    cbuddy::PipelineOptions options;
    options.force = force;
    options.log = &std::cout;
    options.serve_port = port;
    options.serve_subset = subset;
    cbuddy::run_pipeline(manifest, stage, options);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
