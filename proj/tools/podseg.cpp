#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "podseg/commands.hpp"

int main(int argc, char** argv) {
  podseg::CommandOptions o;
  CLI::App app{"podseg: silique segmentation on dense plant point clouds"};
  app.require_subcommand(1, 1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key=value config file");
    sub->add_option("--seed", o.seed, "seed override");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--set", o.set, "extra key=value overrides")->take_all();
  };
  auto* synth = app.add_subcommand("synth", "generate labelled synthetic plants and a split manifest");
  add_common(synth);

  auto* train = app.add_subcommand("train", "train a model on a synthesized dataset");
  add_common(train);
  train->add_option("--data", o.data, "dataset directory");
  train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  train->add_option("--variant", o.variant, "pst | v-pst-pg | f-pst-pg");

  auto* infer = app.add_subcommand("infer", "region-slide inference on cloud files");
  add_common(infer);
  infer->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  infer->add_option("--input", o.input, "cloud file or directory")->required();
  infer->add_option("--variant", o.variant, "pst | v-pst-pg | f-pst-pg");

  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  add_common(eval);
  eval->add_option("--pred", o.pred, "prediction directory")->required();
  eval->add_option("--gt", o.gt, "ground-truth directory")->required();

  auto* ablate = app.add_subcommand("ablate", "feature-flag and voxel-shape ablations");
  add_common(ablate);
  ablate->add_option("--data", o.data, "dataset directory (default: plants generated in memory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: code=usage msg=" << podseg::quote_message(e.what()) << "\n";
    return 2;
  }
  return podseg::run_command(app.get_subcommands().front()->get_name(), o, std::cout, std::cerr);
}
