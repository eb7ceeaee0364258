#include "cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "CLI11.hpp"
#include "resdense/checkpoint.hpp"
#include "resdense/config.hpp"
#include "resdense/log.hpp"
#include "resdense/metrics.hpp"
#include "resdense/rng.hpp"

namespace resdense::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct SynthArgs {
  std::string out;
  SynthOptions options;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const SynthSummary s = generate_synthetic_dataset(a.out, a.options);
  out << "wrote " << s.series << " series (" << s.covid << " covid, " << s.non_covid << " non_covid), "
      << s.slices << " slices to " << a.out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
};

RunConfig resolve_run_config(const std::string& config_path, const std::string& data, const std::string& out) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  if (!data.empty()) cfg.data.root = data;
  if (!out.empty()) cfg.output_dir = out;
  auto v = cfg.validate();
  const auto pv = cfg.validate_paths();
  v.insert(v.end(), pv.begin(), pv.end());
  if (!v.empty()) throw ConfigError(std::move(v));
  return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_run_config(a.config, a.data, a.out);
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "effective-config.json", run_config_to_json(cfg));

  const auto samples = load_dataset(cfg.data.root);
  const DatasetSplit split = split_train_val(samples, cfg.data.split_ratio, derive_seed(cfg.seed, "split"));
  out << "dataset: " << samples.size() << " series, " << split.train.size() << " train / " << split.val.size()
      << " val\n";

  auto model = ResDenseModel<float>::build(cfg.model, derive_seed(cfg.seed, "init"));
  out << "model: " << model.parameters().parameter_count() << " parameters\n";

  FitObserver observer;
  observer.on_epoch_end = [&](const EpochRecord& r, const ResDenseModel<float>&) {
    out << "epoch " << r.epoch << "/" << cfg.train.epochs << " stage " << r.stage << " train_loss "
        << fixed(r.train_loss) << " val_loss " << fixed(r.val_loss) << " val_acc " << fixed(r.val_acc, 4)
        << " val_macro_f1 " << fixed(r.val_macro_f1, 4) << '\n'
        << std::flush;
  };
  const FitResult result = fit(model, split, cfg.train, cfg.data.augment, observer);

  save_checkpoint(cfg.output_dir / "checkpoint.rdnc", *result.best_model);
  write_history_csv(cfg.output_dir / "history.csv", result.history);
  out << "best epoch " << result.best_epoch << "; wrote checkpoint.rdnc, history.csv, effective-config.json to "
      << cfg.output_dir.string() << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string config;
  std::string split = "all";
  std::size_t workers = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  std::optional<RunConfig> cfg;
  if (!a.config.empty()) cfg = load_run_config(a.config);
  if (a.split != "all" && !cfg) {
    throw ConfigError({"--split " + a.split + " needs --config to reproduce the train/val split"});
  }
  const ResDenseModel<float> model = load_checkpoint(a.checkpoint, cfg ? &cfg->model : nullptr);

  const auto samples = load_dataset(a.data);
  std::vector<SeriesSample> selected;
  if (a.split == "all") {
    selected = samples;
  } else {
    DatasetSplit split = split_train_val(samples, cfg->data.split_ratio, derive_seed(cfg->seed, "split"));
    selected = a.split == "train" ? std::move(split.train) : std::move(split.val);
  }
  if (selected.empty()) throw ValueError("no series to evaluate in " + a.data);

  const MetricsReport report = evaluate(model, selected, a.workers);
  const fs::path out_dir = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
  if (!out_dir.empty()) fs::create_directories(out_dir);
  write_text(out_dir / "metrics.json", metrics_to_json(report));
  out << metrics_table(report);
  return kExitOk;
}

struct PredictArgs {
  std::string checkpoint;
  std::string series;
  bool json = false;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  if (!fs::is_directory(a.series)) throw IoError("series directory not found: " + a.series);
  SeriesSample sample{fs::path(a.series).filename().string(), list_slices(a.series), SeriesLabel::non_covid};
  if (sample.slice_paths.empty()) throw IoError("no slices in series directory " + a.series);
  const ResDenseModel<float> model = load_checkpoint(a.checkpoint);
  PredictionRecord record = predict_series(model, sample);
  record.truth.reset();
  if (a.json) {
    out << prediction_to_json(record);
    return kExitOk;
  }
  for (std::size_t i = 0; i < record.slice_probs.size(); ++i) {
    out << "slice " << record.slice_names[i] << ' ' << fixed(record.slice_probs[i]) << '\n';
  }
  out << "aggregate " << fixed(record.aggregate) << ' ' << to_string(record.predicted) << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-backbone CT series classifier: synthetic data, training, evaluation, prediction", "resdense"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labeled CT dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory (must be empty or absent)")->required();
  synth_cmd->add_option("--series", synth.options.n_series, "Number of series")->capture_default_str();
  synth_cmd->add_option("--slices", synth.options.slices_per_series, "Slices per series")->capture_default_str();
  synth_cmd->add_option("--size", synth.options.image_size, "Image side length")->capture_default_str();
  synth_cmd->add_option("--signal", synth.options.class_signal, "Class signal strength in (0, 1]")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth.options.seed, "Random seed")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train the fusion model");
  train_cmd->add_option("--config", train.config, "JSON run config (defaults when omitted)");
  train_cmd->add_option("--data", train.data, "Dataset root, overrides data.root");
  train_cmd->add_option("--out", train.out, "Output directory, overrides output_dir");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled dataset");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint.rdnc")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset root")->required();
  eval_cmd->add_option("--out", eval.out, "Directory for metrics.json (checkpoint directory by default)");
  eval_cmd->add_option("--config", eval.config, "Run config; required for --split train|val");
  eval_cmd->add_option("--split", eval.split, "Series to evaluate")
      ->check(CLI::IsMember({"all", "train", "val"}))
      ->capture_default_str();
  eval_cmd->add_option("--workers", eval.workers, "Parallel evaluation threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "Score one series folder");
  predict_cmd->add_option("--checkpoint", predict.checkpoint, "checkpoint.rdnc")->required();
  predict_cmd->add_option("--series", predict.series, "Series directory")->required();
  predict_cmd->add_flag("--json", predict.json, "Print JSON instead of text");

  std::vector<const char*> argv{"resdense"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const auto previous_sink = log::set_sink([&err](std::string_view level, std::string_view message) {
    err << level << ": " << message << '\n';
  });
  int code = kExitOk;
  try {
    if (synth_cmd->parsed()) code = cmd_synth(synth, out);
    if (train_cmd->parsed()) code = cmd_train(train, out);
    if (eval_cmd->parsed()) code = cmd_eval(eval, out);
    if (predict_cmd->parsed()) code = cmd_predict(predict, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    code = kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    code = kExitUsage;
  }
  log::set_sink(previous_sink);
  return code;
}

}  // namespace resdense::cli
