#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idd/data_synth.hpp"
#include "idd/models.hpp"
#include "idd/tensor.hpp"

namespace idd::metrics {

/// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;  // N×N
  std::int64_t ignored = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int n);

  std::int64_t at(int gt, int pred) const { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
  std::int64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
  std::int64_t total() const;  // Σ counts + ignored

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Throws std::invalid_argument on shape mismatch or a prediction outside
/// [0, N).
ConfusionMatrix& accumulate_confusion(ConfusionMatrix& cm, const LabelMap& predictions, const LabelMap& labels);

/// Per-pixel argmax over the class axis (lowest index wins ties).
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits);

struct IouResult {
  std::vector<std::optional<double>> per_class;  // nullopt: zero denominator
  double miou = 0.0;                             // over defined classes; 0 if none
  int defined = 0;
};

IouResult compute_iou(const ConfusionMatrix& cm);

/// Diagnostic: per image, class tokens are rescaled to unit mean norm and the
/// defined edges of the distance graph are averaged; the result is the mean
/// over images with at least two present classes. nullopt if there are none.
std::optional<double> mean_interclass_distance(models::Model<float>& model, std::span<const data::Sample> samples,
                                               int batch_size = 20);

/// Same statistic from already computed features (B×C×H×W) and labels.
/// Adds to *sum / *images so callers can stream batches.
template <typename T>
void accumulate_interclass_distance(const Tensor<T>& features, const LabelMap& labels, int num_classes,
                                    double* sum, std::int64_t* images);

ConfusionMatrix confusion_for(models::Model<float>& model, std::span<const data::Sample> samples,
                              int batch_size = 20);

struct MetricsReport {
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  std::int64_t params = 0;
  std::optional<double> mean_interclass_distance;
};

/// Exactly the keys per_class_iou, miou, params, mean_interclass_distance;
/// undefined values are null.
nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

MetricsReport evaluate_model(models::Model<float>& model, std::span<const data::Sample> samples,
                             bool with_distance = true, int batch_size = 20);

// -- static plots -----------------------------------------------------------

std::string render_iou_svg(const MetricsReport& report, const std::string& title);

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

std::string render_curves_svg(const std::vector<Series>& series, const std::string& title,
                              const std::string& x_label, const std::string& y_label);

}  // namespace idd::metrics
