#pragma once

// The CLI verbs as library functions: each takes an effective config, writes
// its artifacts under cfg.out and logs progress to `log`.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bmlab/config.hpp"
#include "bmlab/eval.hpp"
#include "bmlab/model.hpp"
#include "bmlab/png.hpp"
#include "bmlab/train.hpp"

namespace bmlab {

namespace fs = std::filesystem;

struct Datasets {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
};

inline std::vector<SceneSample> load_or_generate(const std::string& path, const DatasetSpec& spec) {
  if (path.empty()) return generate(spec);
  if (!fs::exists(path)) throw ConfigError("dataset file '" + path + "' does not exist");
  return load_dataset(path).samples;
}

inline std::vector<SceneSample> train_split(const ExperimentConfig& cfg) {
  return load_or_generate(cfg.train_path, cfg.train_data);
}
inline std::vector<SceneSample> val_split(const ExperimentConfig& cfg) {
  return load_or_generate(cfg.val_path, cfg.val_data());
}

inline void prepare_out_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out);
  write_text_file(fs::path(cfg.out) / "config.txt", format_config(cfg));
}

inline std::string format_loss_csv(const TrainConfig& tc, const TrainResult& r) {
  std::string out = "iteration,lr,mask_loss,boundary_loss,total\n";
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    const auto& c = r.curve[i];
    out += std::to_string(i) + "," + format_number(tc.lr_at(i)) + "," + format_number(c.mask_loss) + "," +
           format_number(c.boundary_loss) + "," + format_number(c.total) + "\n";
  }
  return out;
}

inline std::string format_ap_json(const APReport& r) {
  nlohmann::ordered_json j;
  j["ap"] = r.ap;
  j["ap50"] = r.ap50;
  j["ap75"] = r.ap75;
  nlohmann::ordered_json per;
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) per[threshold_label(k)] = r.ap_per_threshold[k];
  j["per_threshold"] = per;
  return j.dump(2) + "\n";
}

// Trains one model on `data` and writes checkpoint.bin + loss.csv.
inline Model train_run(const ExperimentConfig& cfg, const std::vector<SceneSample>& data, std::ostream& log) {
  Model model = build_model(cfg.backbone, cfg.head, cfg.init_seed());
  const TrainConfig tc = cfg.train_config();
  const std::size_t every = std::max<std::size_t>(1, tc.iterations / 10);
  TrainResult res = train(model, tc, data, [&](std::size_t it, const LossReport& r) {
    if ((it + 1) % every == 0 || it + 1 == tc.iterations) {
      log << "  iter " << (it + 1) << "/" << tc.iterations << " loss " << std::fixed << std::setprecision(4)
          << r.total << " (mask " << r.mask_loss << ", boundary " << r.boundary_loss << ")" << std::defaultfloat
          << "\n";
    }
  });
  save_checkpoint(model.params, fs::path(cfg.out) / "checkpoint.bin");
  write_text_file(fs::path(cfg.out) / "loss.csv", format_loss_csv(tc, res));
  return model;
}

inline void write_ap_report(const ExperimentConfig& cfg, const APReport& rep) {
  ap_curve_export({{std::string(to_string(cfg.head.variant)), rep}}, fs::path(cfg.out) / "ap.csv");
  write_text_file(fs::path(cfg.out) / "ap.json", format_ap_json(rep));
}

inline void print_ap(std::ostream& log, const APReport& r) {
  log << std::fixed << std::setprecision(4) << "AP " << r.ap << "  AP50 " << r.ap50 << "  AP75 " << r.ap75
      << std::defaultfloat << "\n";
}

inline Model load_model(const ExperimentConfig& cfg) {
  const fs::path ck = cfg.checkpoint_path();
  if (!fs::exists(ck)) throw ConfigError("checkpoint '" + ck.string() + "' does not exist");
  Model model = build_model(cfg.backbone, cfg.head, cfg.init_seed());
  load_checkpoint(model.params, ck);
  return model;
}

// ---------------------------------------------------------------------------

inline void cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  prepare_out_dir(cfg);
  const auto data = train_split(cfg);
  log << "training " << to_string(cfg.head.variant) << " head on " << data.size() << " scenes\n";
  train_run(cfg, data, log);
  log << "wrote " << (fs::path(cfg.out) / "checkpoint.bin").string() << "\n";
}

inline APReport cmd_eval(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Model model = load_model(cfg);
  const auto data = val_split(cfg);
  prepare_out_dir(cfg);
  const APReport rep = evaluate(model, data);
  write_ap_report(cfg, rep);
  print_ap(log, rep);
  return rep;
}

inline void cmd_flops(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.head.validate();
  const MacReport rep = count_macs(cfg.head);
  log << "mask head " << to_string(cfg.head.variant) << " at C=" << cfg.head.channels
      << " (predictors excluded)\n";
  for (const auto& l : rep.layers) log << "  " << std::left << std::setw(18) << l.name << l.macs << "\n";
  log << "  " << std::left << std::setw(18) << "total" << rep.total << std::fixed << std::setprecision(3) << "  ("
      << static_cast<double>(rep.total) / 1e9 << "G)" << std::defaultfloat << "\n";
}

// Writes train.bmds and val.bmds for the configured splits.
inline void cmd_generate(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  prepare_out_dir(cfg);
  const auto tr = generate(cfg.train_data);
  const auto va = generate(cfg.val_data());
  save_dataset(tr, cfg.train_data.height, cfg.train_data.width, fs::path(cfg.out) / "train.bmds");
  save_dataset(va, cfg.train_data.height, cfg.train_data.width, fs::path(cfg.out) / "val.bmds");
  log << "wrote " << tr.size() << " train and " << va.size() << " val scenes\n";
}

// ---------------------------------------------------------------------------
// Ablation matrices.

struct AblationRow {
  std::string id;
  std::function<void(ExperimentConfig&)> apply;
};

inline std::vector<std::string> ablation_matrix_names() { return {"fusion", "loss", "target", "roi", "compute"}; }

inline std::vector<AblationRow> ablation_rows(const std::string& matrix) {
  auto bmask = [](ExperimentConfig& c) { c.head.variant = HeadVariant::BMask; };
  if (matrix == "fusion") {
    auto row = [bmask](bool m2b, bool b2m) {
      return [bmask, m2b, b2m](ExperimentConfig& c) {
        bmask(c);
        c.head.m2b_fusion = m2b;
        c.head.b2m_fusion = b2m;
      };
    };
    return {{"none", row(false, false)}, {"m2b", row(true, false)}, {"b2m", row(false, true)}, {"both", row(true, true)}};
  }
  if (matrix == "loss") {
    auto row = [bmask](BoundaryLossKind k) {
      return [bmask, k](ExperimentConfig& c) {
        bmask(c);
        c.head.loss.kind = k;
      };
    };
    return {{"bce", row(BoundaryLossKind::Bce)},
            {"weighted_bce", row(BoundaryLossKind::WeightedBce)},
            {"dice", row(BoundaryLossKind::Dice)},
            {"dice_bce", row(BoundaryLossKind::DiceBce)}};
  }
  if (matrix == "target") {
    auto row = [bmask](BoundaryTarget t) {
      return [bmask, t](ExperimentConfig& c) {
        bmask(c);
        c.head.loss.target = t;
      };
    };
    return {{"none", row(BoundaryTarget::None)}, {"mask", row(BoundaryTarget::Mask)}, {"boundary", row(BoundaryTarget::Boundary)}};
  }
  if (matrix == "roi") {
    auto row = [bmask](BoundarySource s, std::size_t size) {
      return [bmask, s, size](ExperimentConfig& c) {
        bmask(c);
        c.head.boundary_source = s;
        c.head.boundary_roi_size = size;
      };
    };
    return {{"p2-p5@14", row(BoundarySource::SameAsMask, 14)},
            {"p2@14", row(BoundarySource::P2, 14)},
            {"p2-p5@28", row(BoundarySource::SameAsMask, 28)},
            {"p2@28", row(BoundarySource::P2, 28)}};
  }
  if (matrix == "compute") {
    auto row = [](HeadVariant v) { return [v](ExperimentConfig& c) { c.head.variant = v; }; };
    return {{"plain", row(HeadVariant::Plain)}, {"lmh", row(HeadVariant::Lmh)}, {"bmask", row(HeadVariant::BMask)}};
  }
  throw ConfigError("ablate.matrix: unknown matrix '" + matrix + "' (expected fusion|loss|target|roi|compute)");
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Elementwise median over seeds of every per-threshold value and aggregate.
inline APReport median_report(const std::vector<APReport>& runs) {
  APReport out;
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.ap_per_threshold[k]);
    out.ap_per_threshold[k] = median(v);
  }
  std::vector<double> ap, ap50, ap75;
  for (const auto& r : runs) {
    ap.push_back(r.ap);
    ap50.push_back(r.ap50);
    ap75.push_back(r.ap75);
  }
  out.ap = median(ap);
  out.ap50 = median(ap50);
  out.ap75 = median(ap75);
  return out;
}

struct AblationResult {
  std::string matrix;
  std::vector<std::string> row_ids;
  std::map<std::string, std::vector<APReport>> runs;  // row id -> one report per seed
  std::map<std::string, APReport> medians;
  std::map<std::string, std::uint64_t> macs;  // compute matrix only, at C=256
};

inline std::uint64_t reference_macs(HeadConfig h) {
  h.channels = 256;
  return count_macs(h).total;
}

inline std::string format_ablation_csv(const AblationResult& r) {
  const bool with_macs = !r.macs.empty();
  std::string out = with_macs ? "row,ap,ap50,ap75,macs\n" : "row,ap,ap50,ap75\n";
  for (const auto& id : r.row_ids) {
    const auto& m = r.medians.at(id);
    out += id + "," + format_number(m.ap) + "," + format_number(m.ap50) + "," + format_number(m.ap75);
    if (with_macs) out += "," + std::to_string(r.macs.at(id));
    out += "\n";
  }
  return out;
}

inline std::string format_ablation_runs_csv(const AblationResult& r, const std::vector<std::uint64_t>& seeds) {
  std::string out = "row,seed,ap,ap50,ap75\n";
  for (const auto& id : r.row_ids) {
    const auto& runs = r.runs.at(id);
    for (std::size_t s = 0; s < runs.size(); ++s) {
      out += id + "," + std::to_string(seeds[s]) + "," + format_number(runs[s].ap) + "," +
             format_number(runs[s].ap50) + "," + format_number(runs[s].ap75) + "\n";
    }
  }
  return out;
}

// Every row is trained and evaluated for seeds seed, seed+1, ... on shared
// data. Row/seed artifacts go to <out>/<matrix>/<row>/seed_<s>/.
inline AblationResult cmd_ablate(const ExperimentConfig& base, std::ostream& log) {
  base.validate();
  const auto rows = ablation_rows(base.ablate_matrix);
  const auto train_data = train_split(base);
  const auto val_data = val_split(base);
  prepare_out_dir(base);

  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < base.ablate_seeds; ++s) seeds.push_back(base.seed + s);

  AblationResult res;
  res.matrix = base.ablate_matrix;
  for (const auto& row : rows) {
    res.row_ids.push_back(row.id);
    ExperimentConfig rc = base;
    row.apply(rc);
    rc.validate();
    if (res.matrix == "compute") res.macs[row.id] = reference_macs(rc.head);
    for (std::uint64_t seed : seeds) {
      ExperimentConfig c = rc;
      c.seed = seed;
      c.out = (fs::path(base.out) / res.matrix / row.id / ("seed_" + std::to_string(seed))).string();
      prepare_out_dir(c);
      log << res.matrix << "/" << row.id << " seed " << seed << "\n";
      const Model m = train_run(c, train_data, log);
      const APReport rep = evaluate(m, val_data);
      write_ap_report(c, rep);
      log << "  ";
      print_ap(log, rep);
      res.runs[row.id].push_back(rep);
    }
    res.medians[row.id] = median_report(res.runs[row.id]);
  }
  const fs::path dir = fs::path(base.out);
  write_text_file(dir / ("ablation_" + res.matrix + ".csv"), format_ablation_csv(res));
  write_text_file(dir / ("ablation_" + res.matrix + "_runs.csv"), format_ablation_runs_csv(res, seeds));
  ap_curve_export(res.medians, dir / ("ap_curve_" + res.matrix + ".csv"), true);
  log << format_ablation_csv(res);
  return res;
}

// ---------------------------------------------------------------------------
// Qualitative overlays: [image + GT outline | predicted mask fill | boundary heatmap].

inline constexpr std::uint8_t kClassColors[3][3] = {{230, 80, 80}, {80, 200, 80}, {80, 120, 240}};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline RgbImage render_overlay(const SceneSample& s, const std::vector<InstancePrediction>& preds) {
  const std::size_t H = s.height, W = s.width, plane = H * W;
  RgbImage img(H, 3 * W);
  auto put = [&](std::size_t panel, std::size_t i, std::size_t j, double r, double g, double b) {
    auto* p = img.at(i, panel * W + j);
    p[0] = to_byte(r);
    p[1] = to_byte(g);
    p[2] = to_byte(b);
  };
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double r = s.image[i * W + j], g = s.image[plane + i * W + j], b = s.image[2 * plane + i * W + j];
      put(0, i, j, r, g, b);
      put(1, i, j, 0.5 * r, 0.5 * g, 0.5 * b);
    }
  }
  std::vector<double> heat(plane, 0.0);
  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    const auto& inst = s.instances[k];
    const auto* col = kClassColors[inst.cls % 3];
    const BinaryMask gt_edge = extract_boundary(inst.mask);
    const BinaryMask& pm = preds[k].mask;
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        if (gt_edge(i, j)) put(0, i, j, 1.0, 1.0, 0.0);
        if (pm(i, j)) {
          auto* p = img.at(i, W + j);
          for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>((p[c] + 2 * col[c]) / 3);
        }
      }
    }
    std::vector<double> edge;
    if (preds[k].boundary_prob) {
      edge = paste_values(*preds[k].boundary_prob, kMaskOutSize, inst.box, H, W);
    } else {
      edge = extract_boundary(pm).as_doubles();
    }
    for (std::size_t i = 0; i < plane; ++i) heat[i] = std::max(heat[i], edge[i]);
  }
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double v = heat[i * W + j];
      put(2, i, j, 3.0 * v, 3.0 * v - 1.0, 3.0 * v - 2.0);
    }
  }
  return img;
}

// Writes <out>/viz/scene_<k>.png for the first viz.count validation scenes.
inline std::vector<fs::path> cmd_visualize(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const Model model = load_model(cfg);
  const auto data = val_split(cfg);
  if (cfg.viz_count > data.size()) {
    throw ConfigError("viz.count (" + std::to_string(cfg.viz_count) + ") exceeds dataset size (" +
                      std::to_string(data.size()) + ")");
  }
  prepare_out_dir(cfg);
  const fs::path dir = fs::path(cfg.out) / "viz";
  fs::create_directories(dir);
  std::vector<fs::path> written;
  for (std::size_t k = 0; k < cfg.viz_count; ++k) {
    std::ostringstream name;
    name << "scene_" << std::setw(3) << std::setfill('0') << k << ".png";
    const fs::path p = dir / name.str();
    write_png(render_overlay(data[k], predict_scene(model, data[k])), p);
    written.push_back(p);
  }
  log << "wrote " << written.size() << " overlays to " << dir.string() << "\n";
  return written;
}

}  // namespace bmlab
