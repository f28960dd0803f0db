#include "idd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "idd/interclass.hpp"

namespace idd::metrics {

ConfusionMatrix::ConfusionMatrix(int n) : num_classes(n), counts(static_cast<std::size_t>(n) * n, 0) {
  if (n < 1) throw std::invalid_argument("ConfusionMatrix: num_classes must be >= 1");
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}) + ignored;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  ignored += other.ignored;
  return *this;
}

ConfusionMatrix& accumulate_confusion(ConfusionMatrix& cm, const LabelMap& predictions, const LabelMap& labels) {
  if (predictions.n != labels.n || predictions.h != labels.h || predictions.w != labels.w) {
    throw std::invalid_argument("accumulate_confusion: prediction and label maps differ in shape");
  }
  const int N = cm.num_classes;
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const int p = predictions.data[i];
    if (p >= N) {
      throw std::invalid_argument("accumulate_confusion: prediction " + std::to_string(p) + " outside [0, " +
                                  std::to_string(N) + ")");
    }
  }
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const int g = labels.data[i];
    if (g == kIgnoreLabel) {
      ++cm.ignored;
      continue;
    }
    if (g >= N) throw std::invalid_argument("accumulate_confusion: label " + std::to_string(g) + " out of range");
    ++cm.at(g, predictions.data[i]);
  }
  return cm;
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  LabelMap out(logits.n(), logits.h(), logits.w());
  const std::size_t P = logits.shape().plane();
  for (int n = 0; n < logits.n(); ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      int best = 0;
      T best_v = logits.plane(n, 0)[p];
      for (int c = 1; c < logits.c(); ++c) {
        const T v = logits.plane(n, c)[p];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.data[n * P + p] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

IouResult compute_iou(const ConfusionMatrix& cm) {
  const int N = cm.num_classes;
  IouResult r;
  r.per_class.resize(N);
  double sum = 0.0;
  for (int c = 0; c < N; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < N; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t denom = row + col - tp;
    if (denom == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += *r.per_class[c];
    ++r.defined;
  }
  r.miou = r.defined > 0 ? sum / r.defined : 0.0;
  return r;
}

template <typename T>
void accumulate_interclass_distance(const Tensor<T>& features, const LabelMap& labels, int num_classes,
                                    double* sum, std::int64_t* images) {
  const Tensor<double> f = tensor_cast<double>(features);
  for (int n = 0; n < labels.n; ++n) {
    const std::size_t P = labels.plane();
    Tensor<double> one(1, f.c(), f.h(), f.w());
    std::copy(f.sample(n), f.sample(n) + one.size(), one.data());
    LabelMap lab(1, labels.h, labels.w);
    std::copy(labels.data.begin() + n * P, labels.data.begin() + (n + 1) * P, lab.data.begin());
    auto tokens = interclass::compute_class_tokens(one, lab, num_classes);
    const auto present = tokens.present_classes();
    if (present.size() < 2) continue;
    double mean_norm = 0.0;
    for (int k : present) {
      double s = 0.0;
      for (double v : tokens.tokens[k]) s += v * v;
      mean_norm += std::sqrt(s);
    }
    mean_norm /= static_cast<double>(present.size());
    if (mean_norm > 0.0) {
      for (int k : present)
        for (double& v : tokens.tokens[k]) v /= mean_norm;
    }
    const auto g = interclass::compute_distance_graph(tokens, num_classes);
    double acc = 0.0;
    int edges = 0;
    for (std::size_t a = 0; a < present.size(); ++a) {
      for (std::size_t b = a + 1; b < present.size(); ++b) {
        acc += g.edge(present[a], present[b]);
        ++edges;
      }
    }
    *sum += acc / edges;
    ++*images;
  }
}

namespace {

template <typename Fn>
void for_each_batch(std::span<const data::Sample> samples, int batch_size, Fn&& fn) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    fn(data::make_batch(samples.subspan(start, end - start)));
  }
}

}  // namespace

std::optional<double> mean_interclass_distance(models::Model<float>& model, std::span<const data::Sample> samples,
                                               int batch_size) {
  double sum = 0.0;
  std::int64_t images = 0;
  for_each_batch(samples, batch_size, [&](const data::Batch& b) {
    const auto out = model.forward(b.images, false);
    accumulate_interclass_distance(out.features, b.labels, model.spec().num_classes, &sum, &images);
  });
  if (images == 0) return std::nullopt;
  return sum / static_cast<double>(images);
}

ConfusionMatrix confusion_for(models::Model<float>& model, std::span<const data::Sample> samples, int batch_size) {
  ConfusionMatrix cm(model.spec().num_classes);
  for_each_batch(samples, batch_size, [&](const data::Batch& b) {
    const auto out = model.forward(b.images, false);
    accumulate_confusion(cm, argmax_labels(out.logits), b.labels);
  });
  return cm;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) {
    if (v) per.push_back(*v);
    else per.push_back(nullptr);
  }
  nlohmann::json j;
  j["per_class_iou"] = per;
  j["miou"] = r.miou;
  j["params"] = r.params;
  if (r.mean_interclass_distance) j["mean_interclass_distance"] = *r.mean_interclass_distance;
  else j["mean_interclass_distance"] = nullptr;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  for (const auto& v : j.at("per_class_iou")) {
    if (v.is_null()) r.per_class_iou.emplace_back();
    else r.per_class_iou.emplace_back(v.get<double>());
  }
  r.miou = j.at("miou").get<double>();
  r.params = j.at("params").get<std::int64_t>();
  const auto& d = j.at("mean_interclass_distance");
  if (!d.is_null()) r.mean_interclass_distance = d.get<double>();
  return r;
}

MetricsReport evaluate_model(models::Model<float>& model, std::span<const data::Sample> samples, bool with_distance,
                             int batch_size) {
  ConfusionMatrix cm(model.spec().num_classes);
  double sum = 0.0;
  std::int64_t images = 0;
  for_each_batch(samples, batch_size, [&](const data::Batch& b) {
    const auto out = model.forward(b.images, false);
    accumulate_confusion(cm, argmax_labels(out.logits), b.labels);
    if (with_distance) {
      accumulate_interclass_distance(out.features, b.labels, model.spec().num_classes, &sum, &images);
    }
  });
  const IouResult iou = compute_iou(cm);
  MetricsReport r;
  r.per_class_iou = iou.per_class;
  r.miou = iou.miou;
  r.params = static_cast<std::int64_t>(model.param_count().total());
  if (images > 0) r.mean_interclass_distance = sum / static_cast<double>(images);
  return r;
}

// ---------------------------------------------------------------- SVG ----

namespace {

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace

std::string render_iou_svg(const MetricsReport& report, const std::string& title) {
  const int n = static_cast<int>(report.per_class_iou.size());
  const double left = 50, top = 40, plot_h = 200, bar_w = 40, gap = 12;
  const double width = left + n * (bar_w + gap) + 20;
  const double height = top + plot_h + 50;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << " (mIoU " << fmt(report.miou)
    << ")</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 10 << "\" y2=\"" << top + plot_h
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h * (1.0 - t / 4.0);
    o << "<text x=\"" << left - 8 << "\" y=\"" << fmt(y + 4, 1) << "\" text-anchor=\"end\">" << fmt(t / 4.0, 2)
      << "</text>\n";
  }
  for (int c = 0; c < n; ++c) {
    const double x = left + gap / 2 + c * (bar_w + gap);
    const auto& v = report.per_class_iou[c];
    if (v) {
      const double h = plot_h * *v;
      o << "<rect x=\"" << fmt(x, 1) << "\" y=\"" << fmt(top + plot_h - h, 1) << "\" width=\"" << bar_w
        << "\" height=\"" << fmt(h, 1) << "\" fill=\"" << kPalette[c % 8] << "\"/>\n";
      o << "<text x=\"" << fmt(x + bar_w / 2, 1) << "\" y=\"" << fmt(top + plot_h - h - 4, 1)
        << "\" text-anchor=\"middle\">" << fmt(*v, 2) << "</text>\n";
    } else {
      o << "<text x=\"" << fmt(x + bar_w / 2, 1) << "\" y=\"" << fmt(top + plot_h - 4, 1)
        << "\" text-anchor=\"middle\">n/a</text>\n";
    }
    o << "<text x=\"" << fmt(x + bar_w / 2, 1) << "\" y=\"" << fmt(top + plot_h + 16, 1)
      << "\" text-anchor=\"middle\">" << c << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string render_curves_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                              const std::string& y_label) {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double left = 60, top = 40, pw = 480, ph = 260;
  const double width = left + pw + 160, height = top + ph + 50;
  auto sx = [&](double x) { return left + pw * (x - x0) / (x1 - x0); };
  auto sy = [&](double y) { return top + ph * (1.0 - (y - y0) / (y1 - y0)); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(width, 0) << "\" height=\"" << fmt(height, 0)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << left << "\" y=\"" << top + ph + 16 << "\">" << fmt(x0, 0) << "</text>\n";
  o << "<text x=\"" << left + pw << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"end\">" << fmt(x1, 0)
    << "</text>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << top + ph + 34 << "\" text-anchor=\"middle\">"
    << escape(x_label) << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << fmt(y1) << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << top + ph << "\" text-anchor=\"end\">" << fmt(y0) << "</text>\n";
  o << "<text x=\"14\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 14 " << top + ph / 2
    << ")\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* colour = kPalette[i % 8];
    if (!s.points.empty()) {
      o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : s.points) o << fmt(sx(x), 1) << ',' << fmt(sy(y), 1) << ' ';
      o << "\"/>\n";
    }
    const double ly = top + 12 + 16 * static_cast<double>(i);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 30 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

template LabelMap argmax_labels(const Tensor<float>&);
template LabelMap argmax_labels(const Tensor<double>&);
template void accumulate_interclass_distance(const Tensor<float>&, const LabelMap&, int, double*, std::int64_t*);
template void accumulate_interclass_distance(const Tensor<double>&, const LabelMap&, int, double*, std::int64_t*);

}  // namespace idd::metrics
