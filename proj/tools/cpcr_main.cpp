#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cpcr/cli.hpp"

namespace {

struct CommonArgs {
  std::string profile = "desk";
  std::string config_path;
  cpcr::CliOverrides overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--profile", args.profile, "Base settings: paper or desk")
      ->check(CLI::IsMember({"paper", "desk"}));
  cmd->add_option("--config", args.config_path,
                  "JSON config overlaid on the profile");
  auto bind = [cmd](const char* flag, auto& slot, const char* help) {
    cmd->add_option_function<typename std::decay_t<decltype(slot)>::value_type>(
        flag, [&slot](const auto& v) { slot = v; }, help);
  };
  bind("--seed", args.overrides.seed, "Training seed");
  bind("--labeled-ratio", args.overrides.labeled_ratio,
       "Fraction of training patients with labels, in (0, 1]");
  bind("--out", args.overrides.out_dir, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch pyramid consistency training for segmentation"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args;
  std::string resume_from, checkpoint_path, eval_split = "val",
                           eval_branch = "up";
  bool oracle = false;

  CLI::App* gen = app.add_subcommand(
      "generate", "Write the synthetic dataset archive");
  add_common(gen, gen_args);

  CLI::App* train =
      app.add_subcommand("train", "Train and write checkpoints plus logs");
  add_common(train, train_args);
  train->add_option("--resume", resume_from,
                    "train_state checkpoint to continue from");

  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "Score a checkpoint on the val or test split");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint to score")
      ->required();
  eval_cmd->add_option("--split", eval_split, "Volumes to score")
      ->check(CLI::IsMember({"val", "test"}));
  eval_cmd->add_option("--branch", eval_branch, "Decoder used for prediction")
      ->check(CLI::IsMember({"up", "tr"}));
  eval_cmd->add_flag("--oracle", oracle,
                     "Recompute surface distances brute-force and compare");

  CLI::App* selftest = app.add_subcommand(
      "selftest", "Check built-in analytic values and metric oracles");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cpcr::cmd_generate(cpcr::load_run_config(
          gen_args.profile, gen_args.config_path, gen_args.overrides));
    }
    if (train->parsed()) {
      return cpcr::cmd_train(
          cpcr::load_run_config(train_args.profile, train_args.config_path,
                                train_args.overrides),
          resume_from);
    }
    if (eval_cmd->parsed()) {
      return cpcr::cmd_eval(
          cpcr::load_run_config(eval_args.profile, eval_args.config_path,
                                eval_args.overrides),
          checkpoint_path, eval_split, eval_branch, oracle);
    }
    if (selftest->parsed()) return cpcr::cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
