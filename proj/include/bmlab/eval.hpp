#pragma once

// Oracle-box mask prediction and a COCO-style mask AP evaluator over IoU
// thresholds 0.50:0.05:0.95 (101-point interpolated precision, averaged over
// classes that have groundtruth).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/imgproc.hpp"
#include "bmlab/model.hpp"
#include "bmlab/synthdata.hpp"

namespace bmlab {

inline constexpr std::size_t kNumIouThresholds = 10;

inline double iou_threshold(std::size_t k) { return static_cast<double>(50 + 5 * k) / 100.0; }

struct APReport {
  std::array<double, kNumIouThresholds> ap_per_threshold{};
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;

  void finalize() {
    double s = 0.0;
    for (double v : ap_per_threshold) s += v;
    ap = s / static_cast<double>(kNumIouThresholds);
    ap50 = ap_per_threshold[0];
    ap75 = ap_per_threshold[5];
  }
};

struct Prediction {
  std::size_t cls = 0;
  BinaryMask mask;  // image frame
  double score = 0.0;
};

struct GroundTruth {
  std::size_t cls = 0;
  BinaryMask mask;
};

// Per-scene predictions and groundtruth for the evaluator.
struct EvalScene {
  std::vector<GroundTruth> gts;
  std::vector<Prediction> preds;
};

namespace detail {

// 101-point interpolated AP from per-detection TP flags already in score order.
inline double interpolated_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t ctp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ctp += tp[i] ? 1 : 0;
    recall[i] = static_cast<double>(ctp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(ctp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double acc = 0.0;
  for (std::size_t k = 0; k <= 100; ++k) {
    const double r = static_cast<double>(k) / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) acc += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return acc / 101.0;
}

}  // namespace detail

// AP at one IoU threshold, averaged over classes with at least one GT.
inline double average_precision_at(const std::vector<EvalScene>& scenes, double threshold,
                                   const std::vector<std::vector<std::vector<double>>>& ious) {
  std::map<std::size_t, std::size_t> gt_per_class;
  for (const auto& s : scenes) {
    for (const auto& g : s.gts) ++gt_per_class[g.cls];
  }
  if (gt_per_class.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [cls, ngt] : gt_per_class) {
    struct Det {
      double score;
      bool tp;
    };
    std::vector<Det> dets;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
      const auto& s = scenes[si];
      std::vector<std::size_t> order;
      for (std::size_t p = 0; p < s.preds.size(); ++p) {
        if (s.preds[p].cls == cls) order.push_back(p);
      }
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return s.preds[a].score > s.preds[b].score; });
      std::vector<bool> taken(s.gts.size(), false);
      for (std::size_t p : order) {
        // Best still-unmatched GT of this class at IoU >= threshold; ties keep the first.
        double best = threshold;
        std::optional<std::size_t> match;
        for (std::size_t g = 0; g < s.gts.size(); ++g) {
          if (taken[g] || s.gts[g].cls != cls) continue;
          const double iou = ious[si][p][g];
          if (iou < best) continue;
          if (match && iou == best) continue;
          best = iou;
          match = g;
        }
        if (match) taken[*match] = true;
        dets.push_back(Det{s.preds[p].score, match.has_value()});
      }
    }
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });
    std::vector<bool> tp;
    tp.reserve(dets.size());
    for (const auto& d : dets) tp.push_back(d.tp);
    sum += detail::interpolated_ap(tp, ngt);
  }
  return sum / static_cast<double>(gt_per_class.size());
}

inline std::vector<std::vector<std::vector<double>>> pairwise_ious(const std::vector<EvalScene>& scenes) {
  std::vector<std::vector<std::vector<double>>> ious(scenes.size());
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const auto& s = scenes[si];
    ious[si].assign(s.preds.size(), std::vector<double>(s.gts.size(), 0.0));
    for (std::size_t p = 0; p < s.preds.size(); ++p) {
      for (std::size_t g = 0; g < s.gts.size(); ++g) ious[si][p][g] = mask_iou(s.preds[p].mask, s.gts[g].mask);
    }
  }
  return ious;
}

inline APReport compute_ap(const std::vector<EvalScene>& scenes) {
  const auto ious = pairwise_ious(scenes);
  APReport rep;
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
    rep.ap_per_threshold[k] = average_precision_at(scenes, iou_threshold(k), ious);
  }
  rep.finalize();
  return rep;
}

// ---------------------------------------------------------------------------
// Prediction with a trained model.

struct InstancePrediction {
  BinaryMask roi_mask;   // 28 x 28, RoI frame
  BinaryMask mask;       // image frame
  double score = 0.5;
  std::vector<double> mask_prob;                     // 28 x 28
  std::optional<std::vector<double>> boundary_prob;  // 28 x 28
};

// Thresholds one RoI's class-channel logits (strictly > 0.5 after sigmoid),
// scores it by mean foreground probability (0.5 if empty) and pastes it to
// the image frame over `box`.
inline InstancePrediction predict_from_logits(std::span<const double> logits28, const Box& box,
                                              std::size_t height, std::size_t width) {
  const std::size_t n = kMaskOutSize * kMaskOutSize;
  if (logits28.size() != n) throw ShapeError("predict_from_logits: expected 28 x 28 logits");
  InstancePrediction out;
  out.roi_mask = BinaryMask(kMaskOutSize, kMaskOutSize);
  out.mask_prob.resize(n);
  std::vector<double> bin(n, 0.0);
  double fg_sum = 0.0;
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = sigmoid_scalar(logits28[i]);
    out.mask_prob[i] = p;
    if (p > 0.5) {
      bin[i] = 1.0;
      out.roi_mask.set(i / kMaskOutSize, i % kMaskOutSize, true);
      fg_sum += p;
      ++fg;
    }
  }
  out.score = fg ? fg_sum / static_cast<double>(fg) : 0.5;
  out.mask = paste_mask(bin, kMaskOutSize, box, height, width);
  return out;
}

inline std::vector<InstancePrediction> predict_scene(const Model& m, const SceneSample& s) {
  NoGradGuard ng;
  std::vector<InstancePrediction> out;
  if (s.instances.empty()) return out;
  const SceneForward f = forward_scene(m, s);
  const std::size_t K = m.head.num_classes, plane = kMaskOutSize * kMaskOutSize;
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    const std::size_t off = (i * K + f.classes[i]) * plane;
    auto logits = f.outputs.mask_logits.data().subspan(off, plane);
    InstancePrediction p = predict_from_logits(logits, s.instances[i].box, s.height, s.width);
    if (f.outputs.boundary_logits) {
      auto bl = f.outputs.boundary_logits->data().subspan(off, plane);
      std::vector<double> bp(plane);
      for (std::size_t k = 0; k < plane; ++k) bp[k] = sigmoid_scalar(bl[k]);
      p.boundary_prob = std::move(bp);
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Worker count: BMLAB_THREADS if set (>= 1), else hardware concurrency.
inline std::size_t eval_threads() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("BMLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

// Scenes are split across threads; results land in scene order so the report
// does not depend on the thread count.
inline std::vector<EvalScene> collect_predictions(const Model& m, const std::vector<SceneSample>& data,
                                                  std::size_t threads = eval_threads()) {
  std::vector<EvalScene> scenes(data.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < data.size(); i += step) {
      auto preds = predict_scene(m, data[i]);
      EvalScene es;
      for (std::size_t k = 0; k < data[i].instances.size(); ++k) {
        const auto& inst = data[i].instances[k];
        es.gts.push_back(GroundTruth{inst.cls, inst.mask});
        es.preds.push_back(Prediction{inst.cls, std::move(preds[k].mask), preds[k].score});
      }
      scenes[i] = std::move(es);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, data.size()));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  return scenes;
}

inline APReport evaluate(const Model& m, const std::vector<SceneSample>& data) {
  if (data.empty()) throw ContractError("evaluate: dataset is empty");
  return compute_ap(collect_predictions(m, data));
}

// ---------------------------------------------------------------------------
// Report export.

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

inline std::string threshold_label(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", iou_threshold(k));
  return buf;
}

// CSV: threshold, one column per report (map order), and a gain column
// (bmask - plain) when both keys are present.
inline std::string format_ap_curve(const std::map<std::string, APReport>& reports) {
  if (reports.empty()) throw ContractError("ap curve export needs at least one report");
  const bool gain = reports.count("plain") && reports.count("bmask");
  std::ostringstream os;
  os << "threshold";
  for (const auto& [name, _] : reports) os << ',' << name;
  if (gain) os << ",gain";
  os << '\n';
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
    os << threshold_label(k);
    for (const auto& [_, r] : reports) os << ',' << format_number(r.ap_per_threshold[k]);
    if (gain) {
      os << ',' << format_number(reports.at("bmask").ap_per_threshold[k] - reports.at("plain").ap_per_threshold[k]);
    }
    os << '\n';
  }
  return os.str();
}

// Minimal line chart of AP vs IoU threshold, fixed 640 x 400 viewBox.
inline std::string format_ap_svg(const std::map<std::string, APReport>& reports) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 400\" width=\"640\" height=\"400\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
  os << "<line x1=\"60\" y1=\"360\" x2=\"620\" y2=\"360\" stroke=\"black\"/>\n";
  os << "<line x1=\"60\" y1=\"20\" x2=\"60\" y2=\"360\" stroke=\"black\"/>\n";
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
    const double x = 60.0 + 560.0 * static_cast<double>(k) / 9.0;
    os << "<text x=\"" << x << "\" y=\"380\" font-size=\"11\" text-anchor=\"middle\">" << threshold_label(k)
       << "</text>\n";
  }
  std::size_t ci = 0;
  for (const auto& [name, r] : reports) {
    const char* color = kColors[ci % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
      const double x = 60.0 + 560.0 * static_cast<double>(k) / 9.0;
      const double y = 360.0 - 340.0 * r.ap_per_threshold[k];
      os << (k ? " " : "") << x << ',' << y;
    }
    os << "\"/>\n";
    os << "<text x=\"500\" y=\"" << 40 + 16 * ci << "\" font-size=\"12\" fill=\"" << color << "\">" << name
       << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing: " + path.string());
}

inline void ap_curve_export(const std::map<std::string, APReport>& reports, const std::filesystem::path& csv_path,
                            bool with_svg = false) {
  write_text_file(csv_path, format_ap_curve(reports));
  if (with_svg) {
    auto svg = csv_path;
    svg.replace_extension(".svg");
    write_text_file(svg, format_ap_svg(reports));
  }
}

}  // namespace bmlab
