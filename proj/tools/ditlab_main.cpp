#include <cstdint>
#include <string>

#include "CLI11.hpp"
#include "ditlab/cli_bench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ditlab: latent diffusion-transformer laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      seed_set = true;
    });
  };

  for (const char* name :
       {"data-gen", "train", "sample", "bench-attn", "phase-sweep", "ua-verify"})
    add_common(app.add_subcommand(name));

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  return ditlab::run_command(command, config_path, out_dir, seed, seed_set);
}
