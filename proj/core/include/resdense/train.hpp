#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "resdense/data.hpp"
#include "resdense/model.hpp"

namespace resdense {

enum class OptimizerKind { rmsprop, adam };
enum class LossKind { binary_ce, categorical_ce };

std::string to_string(OptimizerKind kind);
std::string to_string(LossKind kind);

struct RmspropOptions {
  double rho = 0.9;
  double epsilon = 1e-7;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::rmsprop;
  LossKind loss = LossKind::binary_ce;
  // Leading share of epochs run with both backbones frozen.
  double stage1_fraction = 0.25;
  // Trailing share of each backbone's layers trainable in stage 2.
  double stage2_unfreeze_fraction = 0.5;
  RmspropOptions rmsprop;
  AdamOptions adam;
  std::uint64_t seed = 42;

  std::vector<std::string> validate() const;
  std::size_t stage1_epochs() const;
};

// Names of parameters excluded from updates.
using FreezeMask = std::set<std::string, std::less<>>;

template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::rmsprop;
  RmspropOptions rmsprop;
  AdamOptions adam;
  // Indexed like ParameterStore::entries(); empty for buffers.
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  // Adam step count per parameter, so frozen entries keep their own clock.
  std::vector<std::uint64_t> steps;

  static OptimizerState make(const ParameterStore<T>& store, const TrainConfig& config);
};

// One update of every unmasked parameter from its accumulated gradient.
// Masked parameters and their state are left untouched. An unmasked
// parameter without a gradient raises Error.
template <typename T>
void optimizer_step(ParameterStore<T>& store, OptimizerState<T>& state, const FreezeMask& mask,
                    double learning_rate);

// Stage 1 masks every backbone parameter. Stage 2 masks the leading layers
// of each backbone so that round(fraction * layers) trailing layers train.
template <typename T>
FreezeMask make_freeze_mask(const ResDenseModel<T>& model, int stage, const TrainConfig& config);

// Sets requires_grad to false on masked parameters and true elsewhere.
template <typename T>
void apply_freeze_mask(ParameterStore<T>& store, const FreezeMask& mask);

template <typename T>
Tensor<T> loss_value(const Tensor<T>& probs, std::span<const int> labels, LossKind kind,
                     TapePtr<T> tape = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  int stage = 1;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double val_macro_f1 = 0.0;
};

struct FitObserver {
  std::function<void(const EpochRecord&, const ResDenseModel<float>&)> on_epoch_end;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  // Parameters after the best epoch by val macro-F1, ties to lower val loss.
  std::unique_ptr<ResDenseModel<float>> best_model;
};

// Two-stage fine-tuning. Slices are the training unit, each labeled with its
// series label; validation metrics are series level.
FitResult fit(ResDenseModel<float>& model, const DatasetSplit& split, const TrainConfig& config,
              const AugmentOptions& augment = {}, const FitObserver& observer = {});

// Same as above on already preprocessed series.
FitResult fit(ResDenseModel<float>& model, const std::vector<PreprocessedSeries>& train,
              const std::vector<PreprocessedSeries>& val, const TrainConfig& config,
              const AugmentOptions& augment = {}, const FitObserver& observer = {});

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
std::string history_csv(const std::vector<EpochRecord>& history);

// Fraction of slices whose thresholded probability matches the series label.
double slice_accuracy(const ResDenseModel<float>& model, const std::vector<PreprocessedSeries>& series);

extern template struct OptimizerState<float>;
extern template struct OptimizerState<double>;

}  // namespace resdense
