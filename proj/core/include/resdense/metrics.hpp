#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resdense/data.hpp"
#include "resdense/model.hpp"

namespace resdense {

inline constexpr double kDecisionThreshold = 0.5;

// Scores at or above the threshold are covid.
SeriesLabel decide(double score, double threshold = kDecisionThreshold);

// Arithmetic mean. Terms are summed in sorted order, so the result does not
// depend on slice order.
double aggregate_score(std::span<const double> slice_probs);

struct PredictionRecord {
  std::string series_id;
  std::vector<std::string> slice_names;
  std::vector<double> slice_probs;
  double aggregate = 0.0;
  SeriesLabel predicted = SeriesLabel::non_covid;
  std::optional<SeriesLabel> truth;
};

PredictionRecord make_record(std::string series_id, std::vector<double> slice_probs,
                             std::optional<SeriesLabel> truth = std::nullopt);

// N x K head outputs, one infer-mode forward per slice.
Tensor<float> forward_slices(const ResDenseModel<float>& model, std::span<const SliceImage> slices);

// Positive-class probability per preprocessed slice.
std::vector<double> predict_slices(const ResDenseModel<float>& model, std::span<const SliceImage> slices);

// Loads and preprocesses every slice; an unreadable slice raises IoError
// naming it.
PredictionRecord predict_series(const ResDenseModel<float>& model, const SeriesSample& sample);
PredictionRecord predict_series(const ResDenseModel<float>& model, const PreprocessedSeries& series);

// 2PR / (P + R), or 0 when P + R == 0.
double f1_score(double precision, double recall);

// Unweighted mean. Throws ValueError on an empty list.
double macro_f1(std::span<const double> per_class_f1);

// Counts with covid as the positive class.
struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  Confusion& operator+=(const Confusion& other);
  bool operator==(const Confusion&) const = default;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  Confusion confusion;
  ClassMetrics covid;
  ClassMetrics non_covid;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n_series = 0;
};

MetricsReport report_from_confusion(const Confusion& confusion);

// Every record must carry a truth label.
Confusion confusion_from(std::span<const PredictionRecord> records);
MetricsReport report_from_predictions(std::span<const PredictionRecord> records);

// predict_series over all samples. workers > 1 spreads series over threads;
// results are identical for any worker count.
MetricsReport evaluate(const ResDenseModel<float>& model, std::span<const SeriesSample> samples,
                       std::size_t workers = 1, std::vector<PredictionRecord>* records = nullptr);

std::string metrics_to_json(const MetricsReport& report);

// Percentages in an aligned two-column table.
std::string metrics_table(const MetricsReport& report);

std::string prediction_to_json(const PredictionRecord& record);

}  // namespace resdense
