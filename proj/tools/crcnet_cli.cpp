#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "crcnet/checkpoint.hpp"
#include "crcnet/config.hpp"
#include "crcnet/dataset_io.hpp"
#include "crcnet/eval.hpp"
#include "crcnet/report.hpp"

namespace fs = std::filesystem;
using namespace crcnet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Run config file (key = value lines)");
  cmd->add_option("--set", args.overrides, "Override a config key (key=value); repeatable");
}

config::RunConfig load_config(const CommonArgs& args) {
  config::RunConfig cfg;
  if (!args.config_path.empty()) cfg = config::RunConfig::from_file(args.config_path);
  cfg.apply(args.overrides);
  return cfg;
}

template <typename T>
void override_if(config::RunConfig& cfg, const CLI::Option* opt, const std::string& key, const T& value) {
  if (opt->count() == 0) return;
  if constexpr (std::is_same_v<T, std::string>) {
    cfg.set(key, value);
  } else {
    cfg.set(key, std::to_string(value));
  }
}

std::vector<std::size_t> selected_folds(const config::RunConfig& cfg) {
  try {
    return cfg.folds();
  } catch (const config::ConfigError& e) {
    throw UsageError(e.what());
  }
}

data::Dataset open_dataset(const config::RunConfig& cfg) {
  const fs::path root = cfg.str("data");
  if (!fs::exists(root)) throw std::runtime_error("dataset not found: " + root.string());
  return data::load_dataset(root);
}

model::ModelParams load_fold(const config::RunConfig& cfg, std::size_t fold) {
  const fs::path path = cfg.run_dir() / ("fold" + std::to_string(fold) + ".ckpt");
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path.string());
  model::ModelParams params = model::init_params(cfg.model_config(), 0);
  model::load_checkpoint(params, path);
  return params;
}

std::string variant_name(const config::RunConfig& cfg) {
  std::string name = cfg.str("mode") + "-k" + cfg.str("k");
  if (cfg.str("annotation") != "mask") name += "-" + cfg.str("annotation");
  if (cfg.str("scales") != "1") name += "-ms";
  if (cfg.str("refine_iters") != "auto") name += "-r" + cfg.str("refine_iters");
  return name;
}

int cmd_gen_data(config::RunConfig cfg) {
  if (cfg.count("categories") < 8) throw UsageError("--categories must be at least 8 (4 folds need 2 test classes each)");
  if (cfg.count("categories") > data::kShapeFamilies.size()) {
    throw UsageError("--categories must be at most " + std::to_string(data::kShapeFamilies.size()));
  }
  if (cfg.count("size") < 32 || cfg.count("size") > 128 || cfg.count("size") % 8 != 0) {
    throw UsageError("--size must be a multiple of 8 in [32, 128]");
  }
  if (cfg.count("per_class") < 2) throw UsageError("--per-class must be at least 2");
  const auto ds = data::generate_synthetic_dataset(cfg.count("categories"), cfg.count("per_class"), cfg.count("size"),
                                                   static_cast<std::uint64_t>(cfg.integer("data_seed")));
  const fs::path manifest = data::save_dataset(ds, cfg.str("data"));
  report::write_text(fs::path(cfg.str("data")) / "config.echo", cfg.echo());
  std::cout << manifest.string() << "\n";
  return 0;
}

int cmd_train(const config::RunConfig& cfg) {
  const auto folds_to_train = selected_folds(cfg);
  const auto ds = open_dataset(cfg);
  const auto folds = data::make_fold_splits(ds.categories(), cfg.count("num_folds"));
  const auto tc = cfg.train_config();
  const fs::path run = cfg.run_dir();
  fs::create_directories(run);
  report::write_text(run / "config.echo", cfg.echo());

  std::vector<training::TrainLogRow> log;
  for (std::size_t f : folds_to_train) {
    auto result = training::train(ds, folds[f], tc, [&](const training::TrainLogRow& row) {
      std::cerr << "fold " << f << " epoch " << row.epoch << "/" << tc.epochs << " loss " << report::fixed(row.total, 4)
                << " miou " << report::fixed(row.miou, 4) << "\n";
    });
    model::save_checkpoint(result.params, run / ("fold" + std::to_string(f) + ".ckpt"));
    std::cout << "fold " << f << " final train mIoU " << report::fixed(result.log.back().miou, 4) << "\n";
    log.insert(log.end(), result.log.begin(), result.log.end());
  }
  report::write_text(run / "train_log.csv", report::train_log_csv(log));
  return 0;
}

int cmd_eval(const config::RunConfig& cfg) {
  const auto fold_ids = selected_folds(cfg);
  const auto settings = cfg.eval_settings();
  settings.validate();
  const auto ds = open_dataset(cfg);
  const auto folds = data::make_fold_splits(ds.categories(), cfg.count("num_folds"));
  std::vector<model::ModelParams> params;
  for (std::size_t f : fold_ids) params.push_back(load_fold(cfg, f));

  auto provider = [&](std::size_t f) {
    const auto pos = std::find(fold_ids.begin(), fold_ids.end(), f) - fold_ids.begin();
    return params[static_cast<std::size_t>(pos)];
  };
  const auto table = eval::cross_validation_eval(ds, folds, provider, settings, fold_ids);
  const fs::path run = cfg.run_dir();
  const fs::path out = run / cfg.str("eval_out");
  const std::string variant = variant_name(cfg);
  report::write_text(out, report::cv_csv(table, variant, settings.seed));
  if (settings.record_iterations) {
    report::write_text(run / (out.stem().string() + "_iterations.csv"),
                       report::iteration_csv(variant, table.mean_iteration_miou));
  }
  report::write_text(run / (out.stem().string() + ".echo"), cfg.echo());
  std::cout << variant << " mean mIoU " << report::fixed(table.mean_miou, 4) << " FBIoU "
            << report::fixed(table.mean_fbiou, 4) << " -> " << out.string() << "\n";
  return 0;
}

int cmd_ablate(const config::RunConfig& cfg) {
  const std::string axis = cfg.str("axis");
  const auto& axes = eval::ablation_axes();
  if (std::find(axes.begin(), axes.end(), axis) == axes.end()) {
    throw UsageError("unknown axis '" + axis + "' (valid: " + eval::join(axes) + ")");
  }
  const auto fold_ids = selected_folds(cfg);
  const auto settings = cfg.eval_settings();
  const auto ds = open_dataset(cfg);
  const auto folds = data::make_fold_splits(ds.categories(), cfg.count("num_folds"));
  auto cache = eval::training_cache(ds, folds);
  const auto rows = eval::ablation_run(ds, folds, cfg.train_config(), settings, axis, cache, fold_ids);
  const fs::path run = cfg.run_dir();
  const fs::path out = run / ("ablate_" + axis + ".csv");
  report::write_text(out, report::ablation_csv(rows, settings.seed));
  report::write_text(run / ("ablate_" + axis + ".echo"), cfg.echo());
  for (const auto& r : rows) std::cout << r.variant << " mean mIoU " << report::fixed(r.table.mean_miou, 4) << "\n";
  std::cout << "-> " << out.string() << "\n";
  return 0;
}

int cmd_plot(const std::string& csv, std::string out, std::string title) {
  const fs::path in(csv);
  const auto table = report::read_csv(in);
  if (title.empty()) title = in.stem().string();
  const std::string svg = report::plot_csv(table, title, in.string());
  if (out.empty()) out = (in.parent_path() / "plots" / (in.stem().string() + ".svg")).string();
  report::write_text(out, svg);
  std::cout << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation with cross-reference and recurrent refinement"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shape dataset");
  add_common(gen, gen_args);
  std::size_t categories = 0, per_class = 0, size = 0;
  std::int64_t data_seed = 0;
  std::string data_out;
  auto* o_categories = gen->add_option("--categories", categories, "Number of categories (8-12)");
  auto* o_per_class = gen->add_option("--per-class", per_class, "Images per category");
  auto* o_size = gen->add_option("--size", size, "Image side length in pixels");
  auto* o_data_seed = gen->add_option("--seed", data_seed, "Generator seed");
  auto* o_data_out = gen->add_option("--out", data_out, "Output directory");

  CommonArgs train_args;
  auto* train = app.add_subcommand("train", "Train one or more folds");
  add_common(train, train_args);
  std::string train_fold;
  auto* o_train_fold = train->add_option("--fold", train_fold, "Fold index, comma list, or all");

  CommonArgs eval_args;
  auto* evalc = app.add_subcommand("eval", "Evaluate trained folds on test episodes");
  add_common(evalc, eval_args);
  std::string eval_fold, scales, refine_iters, mode, annotation, eval_out;
  std::size_t k = 0, episodes = 0;
  bool iteration_curve = false;
  auto* o_eval_fold = evalc->add_option("--fold", eval_fold, "Fold index, comma list, or all");
  auto* o_scales = evalc->add_option("--scales", scales, "Comma-separated test scales, e.g. 0.75,1,1.25");
  auto* o_refine = evalc->add_option("--refine-iters", refine_iters, "Refinement iterations (or auto)");
  auto* o_k = evalc->add_option("--k", k, "Support shots");
  auto* o_mode = evalc->add_option("--mode", mode, "single, fusion, finetune or finetune_fusion");
  auto* o_annotation = evalc->add_option("--annotation", annotation, "mask or bbox");
  auto* o_episodes = evalc->add_option("--episodes", episodes, "Test episodes per fold");
  auto* o_eval_out = evalc->add_option("--out", eval_out, "CSV file name inside the run directory");
  auto* o_curve = evalc->add_flag("--iteration-curve", iteration_curve, "Also write per-iteration mIoU");

  CommonArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every variant of one ablation axis");
  add_common(ablate, ablate_args);
  std::string axis, ablate_fold;
  auto* o_axis = ablate->add_option("--axis", axis, "Ablation axis");
  auto* o_ablate_fold = ablate->add_option("--fold", ablate_fold, "Fold index, comma list, or all");

  auto* plot = app.add_subcommand("plot", "Render a metrics CSV as SVG");
  std::string plot_csv, plot_out, plot_title;
  plot->add_option("--csv", plot_csv, "Input CSV")->required();
  plot->add_option("--out", plot_out, "Output SVG (default: <csv dir>/plots/<name>.svg)");
  plot->add_option("--title", plot_title, "Chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_config(gen_args);
      override_if(cfg, o_categories, "categories", categories);
      override_if(cfg, o_per_class, "per_class", per_class);
      override_if(cfg, o_size, "size", size);
      override_if(cfg, o_data_seed, "data_seed", data_seed);
      override_if(cfg, o_data_out, "data", data_out);
      return cmd_gen_data(cfg);
    }
    if (train->parsed()) {
      auto cfg = load_config(train_args);
      override_if(cfg, o_train_fold, "fold", train_fold);
      return cmd_train(cfg);
    }
    if (evalc->parsed()) {
      auto cfg = load_config(eval_args);
      override_if(cfg, o_eval_fold, "fold", eval_fold);
      override_if(cfg, o_scales, "scales", scales);
      override_if(cfg, o_refine, "refine_iters", refine_iters);
      override_if(cfg, o_k, "k", k);
      override_if(cfg, o_mode, "mode", mode);
      override_if(cfg, o_annotation, "annotation", annotation);
      override_if(cfg, o_episodes, "episodes", episodes);
      override_if(cfg, o_eval_out, "eval_out", eval_out);
      if (o_curve->count()) cfg.set("iteration_curve", iteration_curve ? "true" : "false");
      return cmd_eval(cfg);
    }
    if (ablate->parsed()) {
      auto cfg = load_config(ablate_args);
      override_if(cfg, o_axis, "axis", axis);
      override_if(cfg, o_ablate_fold, "fold", ablate_fold);
      return cmd_ablate(cfg);
    }
    if (plot->parsed()) return cmd_plot(plot_csv, plot_out, plot_title);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const config::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
