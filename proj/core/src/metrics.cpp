#include "resdense/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace resdense {

SeriesLabel decide(double score, double threshold) {
  return score >= threshold ? SeriesLabel::covid : SeriesLabel::non_covid;
}

double aggregate_score(std::span<const double> slice_probs) {
  if (slice_probs.empty()) throw ValueError("aggregate_score: series has no slices");
  std::vector<double> sorted(slice_probs.begin(), slice_probs.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double p : sorted) total += p;
  return total / static_cast<double>(sorted.size());
}

PredictionRecord make_record(std::string series_id, std::vector<double> slice_probs,
                             std::optional<SeriesLabel> truth) {
  PredictionRecord r;
  r.series_id = std::move(series_id);
  r.aggregate = aggregate_score(slice_probs);
  r.slice_probs = std::move(slice_probs);
  r.predicted = decide(r.aggregate);
  r.truth = truth;
  return r;
}

Tensor<float> forward_slices(const ResDenseModel<float>& model, std::span<const SliceImage> slices) {
  if (slices.empty()) throw ValueError("forward_slices: no slices");
  const std::size_t k = model.config().head_outputs();
  std::vector<float> rows;
  rows.reserve(slices.size() * k);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const Tensor<float> probs = model.forward(images_to_tensor(slices.subspan(i, 1)), Mode::infer);
    rows.insert(rows.end(), probs.data().begin(), probs.data().end());
  }
  return Tensor<float>({slices.size(), k}, std::move(rows));
}

std::vector<double> predict_slices(const ResDenseModel<float>& model, std::span<const SliceImage> slices) {
  return model.positive_probabilities(forward_slices(model, slices));
}

PredictionRecord predict_series(const ResDenseModel<float>& model, const PreprocessedSeries& series) {
  PredictionRecord r = make_record(series.series_id, predict_slices(model, series.slices), series.label);
  return r;
}

PredictionRecord predict_series(const ResDenseModel<float>& model, const SeriesSample& sample) {
  const auto& cfg = model.config();
  PreprocessedSeries pre = preprocess_series(sample, cfg.input_height, cfg.input_width);
  PredictionRecord r = predict_series(model, pre);
  for (const auto& p : sample.slice_paths) r.slice_names.push_back(p.filename().string());
  return r;
}

double f1_score(double precision, double recall) {
  if (precision < 0 || precision > 1 || recall < 0 || recall > 1) {
    throw ValueError("f1_score: precision and recall must lie in [0, 1]");
  }
  const double denom = precision + recall;
  return denom == 0.0 ? 0.0 : 2.0 * precision * recall / denom;
}

double macro_f1(std::span<const double> per_class_f1) {
  if (per_class_f1.empty()) throw ValueError("macro_f1: no classes");
  double total = 0.0;
  for (double f : per_class_f1) total += f;
  return total / static_cast<double>(per_class_f1.size());
}

Confusion& Confusion::operator+=(const Confusion& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  tn += other.tn;
  return *this;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

ClassMetrics class_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassMetrics m;
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

}  // namespace

MetricsReport report_from_confusion(const Confusion& c) {
  MetricsReport r;
  r.confusion = c;
  r.n_series = c.total();
  r.covid = class_metrics(c.tp, c.fp, c.fn);
  r.non_covid = class_metrics(c.tn, c.fn, c.fp);
  const double per_class[] = {r.covid.f1, r.non_covid.f1};
  r.macro_f1 = macro_f1(per_class);
  r.accuracy = ratio(c.tp + c.tn, c.total());
  return r;
}

Confusion confusion_from(std::span<const PredictionRecord> records) {
  Confusion c;
  for (const auto& r : records) {
    if (!r.truth) throw ValueError("series " + r.series_id + " has no ground-truth label");
    const bool actual = *r.truth == SeriesLabel::covid;
    const bool predicted = r.predicted == SeriesLabel::covid;
    if (actual && predicted) ++c.tp;
    if (!actual && predicted) ++c.fp;
    if (actual && !predicted) ++c.fn;
    if (!actual && !predicted) ++c.tn;
  }
  return c;
}

MetricsReport report_from_predictions(std::span<const PredictionRecord> records) {
  return report_from_confusion(confusion_from(records));
}

MetricsReport evaluate(const ResDenseModel<float>& model, std::span<const SeriesSample> samples,
                       std::size_t workers, std::vector<PredictionRecord>* records) {
  std::vector<PredictionRecord> out(samples.size());
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(samples.size(), 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) out[i] = predict_series(model, samples[i]);
  } else {
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < samples.size(); i += workers) {
          try {
            out[i] = predict_series(model, samples[i]);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  MetricsReport report = report_from_predictions(out);
  if (records != nullptr) *records = std::move(out);
  return report;
}

std::string metrics_to_json(const MetricsReport& r) {
  const auto class_json = [](const ClassMetrics& m) {
    return nlohmann::ordered_json{{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
  };
  nlohmann::ordered_json j;
  j["f1_covid"] = r.covid.f1;
  j["f1_non_covid"] = r.non_covid.f1;
  j["macro_f1"] = r.macro_f1;
  j["accuracy"] = r.accuracy;
  j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}};
  j["n_series"] = r.n_series;
  j["covid"] = class_json(r.covid);
  j["non_covid"] = class_json(r.non_covid);
  return j.dump(2) + "\n";
}

std::string metrics_table(const MetricsReport& r) {
  const auto row = [](const char* name, double fraction) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "| %-16s | %7.2f |\n", name, 100.0 * fraction);
    return std::string(buf);
  };
  std::string out;
  out += "| Metric           |   Value |\n";
  out += "|------------------|---------|\n";
  out += row("F1 (COVID)", r.covid.f1);
  out += row("F1 (Non-COVID)", r.non_covid.f1);
  out += row("Macro F1", r.macro_f1);
  out += row("Accuracy", r.accuracy);
  char buf[96];
  std::snprintf(buf, sizeof buf, "series: %zu  tp=%zu fp=%zu fn=%zu tn=%zu\n", r.n_series, r.confusion.tp,
                r.confusion.fp, r.confusion.fn, r.confusion.tn);
  out += buf;
  return out;
}

std::string prediction_to_json(const PredictionRecord& r) {
  nlohmann::ordered_json j;
  j["series_id"] = r.series_id;
  j["slice_names"] = r.slice_names;
  j["slices"] = r.slice_probs;
  j["aggregate"] = r.aggregate;
  j["label"] = to_string(r.predicted);
  return j.dump(2) + "\n";
}

}  // namespace resdense
