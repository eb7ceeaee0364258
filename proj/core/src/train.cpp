#include "resdense/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "resdense/metrics.hpp"
#include "resdense/ops.hpp"
#include "resdense/rng.hpp"

namespace resdense {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::rmsprop ? "rmsprop" : "adam"; }
std::string to_string(LossKind kind) { return kind == LossKind::binary_ce ? "binary_ce" : "categorical_ce"; }

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> v;
  if (batch_size < 1) v.push_back("train.batch_size: must be at least 1");
  if (epochs < 1) v.push_back("train.epochs: must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    v.push_back("train.learning_rate: must be finite and non-negative");
  }
  if (!(stage1_fraction >= 0.0 && stage1_fraction <= 1.0)) v.push_back("train.stage1_fraction: must be in [0, 1]");
  if (!(stage2_unfreeze_fraction >= 0.0 && stage2_unfreeze_fraction <= 1.0)) {
    v.push_back("train.stage2_unfreeze_fraction: must be in [0, 1]");
  }
  if (!(rmsprop.rho >= 0.0 && rmsprop.rho < 1.0)) v.push_back("train.rmsprop.rho: must be in [0, 1)");
  if (!(rmsprop.epsilon > 0.0)) v.push_back("train.rmsprop.epsilon: must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) v.push_back("train.adam.beta1: must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) v.push_back("train.adam.beta2: must be in [0, 1)");
  if (!(adam.epsilon > 0.0)) v.push_back("train.adam.epsilon: must be positive");
  return v;
}

std::size_t TrainConfig::stage1_epochs() const {
  return std::min<std::size_t>(epochs, static_cast<std::size_t>(std::llround(stage1_fraction * epochs)));
}

// ---------------------------------------------------------------------------
// optimizers

template <typename T>
OptimizerState<T> OptimizerState<T>::make(const ParameterStore<T>& store, const TrainConfig& config) {
  OptimizerState s;
  s.kind = config.optimizer;
  s.rmsprop = config.rmsprop;
  s.adam = config.adam;
  const auto entries = store.entries();
  s.first.resize(entries.size());
  s.second.resize(entries.size());
  s.steps.assign(entries.size(), 0);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].kind != ParamKind::parameter) continue;
    s.first[i].assign(entries[i].tensor.numel(), 0.0);
    if (s.kind == OptimizerKind::adam) s.second[i].assign(entries[i].tensor.numel(), 0.0);
  }
  return s;
}

template <typename T>
void optimizer_step(ParameterStore<T>& store, OptimizerState<T>& state, const FreezeMask& mask,
                    double learning_rate) {
  auto entries = store.entries();
  if (state.first.size() != entries.size()) {
    throw Error("optimizer state was built for a different parameter set");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (e.kind != ParamKind::parameter || mask.contains(e.name)) continue;
    if (!e.tensor.has_grad()) throw Error("parameter " + e.name + " has no gradient");
    const auto g = e.tensor.grad();
    auto w = e.tensor.mutable_data();
    auto& m1 = state.first[i];
    if (state.kind == OptimizerKind::rmsprop) {
      const double rho = state.rmsprop.rho, eps = state.rmsprop.epsilon;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m1[j] = rho * m1[j] + (1.0 - rho) * gj * gj;
        w[j] = static_cast<T>(w[j] - learning_rate * gj / std::sqrt(m1[j] + eps));
      }
    } else {
      auto& m2 = state.second[i];
      const double b1 = state.adam.beta1, b2 = state.adam.beta2, eps = state.adam.epsilon;
      const auto t = static_cast<double>(++state.steps[i]);
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m1[j] = b1 * m1[j] + (1.0 - b1) * gj;
        m2[j] = b2 * m2[j] + (1.0 - b2) * gj * gj;
        w[j] = static_cast<T>(w[j] - learning_rate * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + eps));
      }
    }
  }
}

template <typename T>
FreezeMask make_freeze_mask(const ResDenseModel<T>& model, int stage, const TrainConfig& config) {
  if (stage != 1 && stage != 2) throw ValueError("freeze stage must be 1 or 2");
  const auto& store = model.parameters();
  std::set<std::string, std::less<>> frozen_layers;
  for (const std::string prefix : {"resnet.", "densenet."}) {
    const auto layers = store.layers(prefix);
    std::size_t n_frozen = layers.size();
    if (stage == 2) {
      const auto n_train = static_cast<std::size_t>(
          std::llround(config.stage2_unfreeze_fraction * static_cast<double>(layers.size())));
      n_frozen = layers.size() - std::min(n_train, layers.size());
    }
    frozen_layers.insert(layers.begin(), layers.begin() + static_cast<std::ptrdiff_t>(n_frozen));
  }
  FreezeMask mask;
  for (const auto& e : store.entries()) {
    if (e.kind == ParamKind::parameter && frozen_layers.contains(e.layer)) mask.insert(e.name);
  }
  return mask;
}

template <typename T>
void apply_freeze_mask(ParameterStore<T>& store, const FreezeMask& mask) {
  for (auto& e : store.entries()) {
    if (e.kind != ParamKind::parameter) continue;
    e.tensor.set_requires_grad(!mask.contains(e.name));
    e.tensor.clear_grad();
  }
}

template <typename T>
Tensor<T> loss_value(const Tensor<T>& probs, std::span<const int> labels, LossKind kind, TapePtr<T> tape) {
  return kind == LossKind::binary_ce ? binary_cross_entropy(probs, labels, tape)
                                     : categorical_cross_entropy(probs, labels, tape);
}

// ---------------------------------------------------------------------------
// fit

namespace {

struct SliceRef {
  std::size_t series;
  std::size_t slice;
};

struct ValidationResult {
  double loss = 0.0;
  MetricsReport report;
};

ValidationResult validate_epoch(const ResDenseModel<float>& model, const std::vector<PreprocessedSeries>& val,
                                LossKind loss_kind) {
  std::vector<PredictionRecord> records;
  std::vector<float> rows;
  std::vector<int> labels;
  for (const auto& s : val) {
    const Tensor<float> probs = forward_slices(model, s.slices);
    rows.insert(rows.end(), probs.data().begin(), probs.data().end());
    labels.insert(labels.end(), s.slices.size(), label_index(s.label));
    records.push_back(make_record(s.series_id, model.positive_probabilities(probs), s.label));
  }
  const std::size_t k = model.config().head_outputs();
  const Tensor<float> all({labels.size(), k}, std::move(rows));
  ValidationResult out;
  out.loss = loss_value(all, std::span<const int>(labels), loss_kind).item();
  out.report = report_from_predictions(records);
  return out;
}

std::vector<PreprocessedSeries> preprocess_all(const std::vector<SeriesSample>& samples, const ModelConfig& cfg) {
  std::vector<PreprocessedSeries> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(preprocess_series(s, cfg.input_height, cfg.input_width));
  return out;
}

}  // namespace

FitResult fit(ResDenseModel<float>& model, const DatasetSplit& split, const TrainConfig& config,
              const AugmentOptions& augment, const FitObserver& observer) {
  return fit(model, preprocess_all(split.train, model.config()), preprocess_all(split.val, model.config()),
             config, augment, observer);
}

FitResult fit(ResDenseModel<float>& model, const std::vector<PreprocessedSeries>& train,
              const std::vector<PreprocessedSeries>& val, const TrainConfig& config,
              const AugmentOptions& augment, const FitObserver& observer) {
  if (auto v = config.validate(); !v.empty()) throw ConfigError(std::move(v));
  if (train.empty() || val.empty()) throw ValueError("fit needs non-empty train and val sets");
  const bool sigmoid_head = model.config().head == HeadKind::sigmoid_binary;
  if (sigmoid_head != (config.loss == LossKind::binary_ce)) {
    throw ConfigError({"train.loss: " + to_string(config.loss) + " does not match model.head " +
                       to_string(model.config().head)});
  }

  std::vector<SliceRef> items;
  for (std::size_t s = 0; s < train.size(); ++s) {
    for (std::size_t k = 0; k < train[s].slices.size(); ++k) items.push_back({s, k});
  }
  if (items.empty()) throw ValueError("fit: training series contain no slices");

  auto& params = model.parameters();
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::mt19937_64 augment_rng(derive_seed(config.seed, "augment"));
  OptimizerState<float> state = OptimizerState<float>::make(params, config);
  const std::size_t stage1_epochs = config.stage1_epochs();

  FitResult result;
  FreezeMask mask;
  int current_stage = 0;
  double best_f1 = -1.0, best_loss = 0.0;
  std::vector<SliceImage> batch;
  std::vector<int> labels;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const int stage = epoch < stage1_epochs ? 1 : 2;
    if (stage != current_stage) {
      mask = make_freeze_mask(model, stage, config);
      apply_freeze_mask(params, mask);
      current_stage = stage;
    }
    std::shuffle(items.begin(), items.end(), shuffle_rng);

    double loss_sum = 0.0;
    for (std::size_t begin = 0, b = 1; begin < items.size(); begin += config.batch_size, ++b) {
      const std::size_t end = std::min(items.size(), begin + config.batch_size);
      batch.clear();
      labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const auto& series = train[items[i].series];
        batch.push_back(resdense::augment(series.slices[items[i].slice], augment_rng, augment));
        labels.push_back(label_index(series.label));
      }
      Tape<float> tape;
      const Tensor<float> probs = model.forward(images_to_tensor(batch), Mode::train, &tape);
      const Tensor<float> loss = loss_value(probs, std::span<const int>(labels), config.loss, &tape);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        apply_freeze_mask(params, {});
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                             std::to_string(b));
      }
      tape.backward(loss);
      optimizer_step(params, state, mask, config.learning_rate);
      loss_sum += value * static_cast<double>(end - begin);
    }

    const ValidationResult val_result = validate_epoch(model, val, config.loss);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.stage = stage;
    rec.train_loss = loss_sum / static_cast<double>(items.size());
    rec.val_loss = val_result.loss;
    rec.val_acc = val_result.report.accuracy;
    rec.val_macro_f1 = val_result.report.macro_f1;
    if (!std::isfinite(rec.val_loss)) {
      apply_freeze_mask(params, {});
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
    }
    result.history.push_back(rec);

    if (rec.val_macro_f1 > best_f1 || (rec.val_macro_f1 == best_f1 && rec.val_loss < best_loss)) {
      best_f1 = rec.val_macro_f1;
      best_loss = rec.val_loss;
      result.best_epoch = rec.epoch;
      result.best_model = std::make_unique<ResDenseModel<float>>(model.clone());
    }
    if (observer.on_epoch_end) observer.on_epoch_end(rec, model);
  }
  apply_freeze_mask(params, {});
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,val_acc,val_macro_f1\n";
  char line[160];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss, r.val_acc,
                  r.val_macro_f1);
    out += line;
  }
  return out;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << history_csv(history);
  if (!out) throw IoError("failed writing " + path.string());
}

double slice_accuracy(const ResDenseModel<float>& model, const std::vector<PreprocessedSeries>& series) {
  std::size_t correct = 0, total = 0;
  for (const auto& s : series) {
    for (double p : predict_slices(model, s.slices)) {
      correct += decide(p) == s.label ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw ValueError("slice_accuracy: no slices");
  return static_cast<double>(correct) / static_cast<double>(total);
}

#define RESDENSE_INSTANTIATE_TRAIN(T)                                                                   \
  template struct OptimizerState<T>;                                                                   \
  template void optimizer_step<T>(ParameterStore<T>&, OptimizerState<T>&, const FreezeMask&, double); \
  template FreezeMask make_freeze_mask<T>(const ResDenseModel<T>&, int, const TrainConfig&);          \
  template void apply_freeze_mask<T>(ParameterStore<T>&, const FreezeMask&);                          \
  template Tensor<T> loss_value<T>(const Tensor<T>&, std::span<const int>, LossKind, Tape<T>*);

RESDENSE_INSTANTIATE_TRAIN(float)
RESDENSE_INSTANTIATE_TRAIN(double)

}  // namespace resdense
