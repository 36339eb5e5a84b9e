#include "pointforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace pointforge::eval {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("eval: " + msg); }

double box_iou(const geom::Box3D& a, const geom::Box3D& b, MetricSpace space) {
  return space == MetricSpace::k3D ? geom::iou_3d(a, b) : geom::iou_bev(a, b);
}

// Detection indices in sweep order: confidence descending, ties by index.
std::vector<int> sweep_order(const std::vector<double>& confidences) {
  std::vector<int> order(confidences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return confidences[static_cast<size_t>(a)] > confidences[static_cast<size_t>(b)];
  });
  return order;
}

// PR points of the sorted sweep; TP counts weighted by `weight` in both
// numerators (1 for plain AP, heading accuracy for APH).
std::vector<PrPoint> weighted_curve(const std::vector<ScoredMatch>& matches, int gt_count,
                                    bool heading_weighted) {
  std::vector<double> conf(matches.size());
  for (size_t i = 0; i < matches.size(); ++i) conf[i] = matches[i].confidence;
  const std::vector<int> order = sweep_order(conf);
  std::vector<PrPoint> pr;
  pr.reserve(matches.size());
  double cum_tp = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    const ScoredMatch& m = matches[static_cast<size_t>(order[i])];
    if (m.tp) {
      if (!(m.heading_error >= 0.0 && m.heading_error <= M_PI + 1e-12))
        fail("heading error outside [0, pi]");
      cum_tp += heading_weighted ? 1.0 - m.heading_error / M_PI : 1.0;
    }
    pr.push_back({cum_tp / gt_count, cum_tp / static_cast<double>(i + 1)});
  }
  return pr;
}

// Mean over thresholds {1/40,...,1} of the best precision at recall >= t.
double interpolate_r40(const std::vector<PrPoint>& pr) {
  // Best precision from each sweep position onward; recall is non-decreasing.
  std::vector<double> best(pr.size());
  double running = 0.0;
  for (size_t i = pr.size(); i-- > 0;) {
    running = std::max(running, pr[i].precision);
    best[i] = running;
  }
  const int positions = 40;
  double total = 0.0;
  size_t j = 0;
  for (int k = 1; k <= positions; ++k) {
    const double r = static_cast<double>(k) / positions;
    while (j < pr.size() && pr[j].recall < r - 1e-12) ++j;
    if (j < pr.size()) total += best[j];
  }
  return total / positions;
}

double ap_impl(const std::vector<ScoredMatch>& matches, int gt_count, bool heading_weighted) {
  if (gt_count < 1) fail("ap undefined without ground truth");
  if (matches.empty()) return 0.0;
  return interpolate_r40(weighted_curve(matches, gt_count, heading_weighted));
}

int bin_of(const std::vector<double>& edges, double d) {
  int bin = 0;
  for (size_t i = 1; i < edges.size(); ++i)
    if (d >= edges[i]) bin = static_cast<int>(i);
  return bin;
}

double bev_distance(const geom::Box3D& b) {
  return std::sqrt(b.center.x * b.center.x + b.center.y * b.center.y);
}

}  // namespace

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::kL1: return "l1";
    case Difficulty::kL2: return "l2";
    case Difficulty::kEasy: return "easy";
    case Difficulty::kModerate: return "moderate";
    case Difficulty::kHard: return "hard";
    case Difficulty::kIgnored: return "ignored";
  }
  return "?";
}

std::vector<MatchResult> match(const std::vector<geom::Box3D>& det_boxes,
                               const std::vector<double>& confidences,
                               const std::vector<geom::Box3D>& gt_boxes, double iou_threshold,
                               MetricSpace space) {
  if (det_boxes.size() != confidences.size()) fail("match: detections/confidences mismatch");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) fail("match: threshold outside (0,1]");
  std::vector<MatchResult> out(det_boxes.size());
  std::vector<bool> taken(gt_boxes.size(), false);
  for (int di : sweep_order(confidences)) {
    const geom::Box3D& det = det_boxes[static_cast<size_t>(di)];
    int best = -1;
    double best_iou = 0.0;
    for (size_t gi = 0; gi < gt_boxes.size(); ++gi) {
      if (taken[gi]) continue;
      const double iou = box_iou(det, gt_boxes[gi], space);
      if (iou >= iou_threshold && iou > best_iou) {
        best = static_cast<int>(gi);
        best_iou = iou;
      }
    }
    MatchResult& r = out[static_cast<size_t>(di)];
    if (best >= 0) {
      taken[static_cast<size_t>(best)] = true;
      r.tp = true;
      r.gt_index = best;
      r.iou = best_iou;
      const double d = geom::wrap_angle(det.yaw - gt_boxes[static_cast<size_t>(best)].yaw);
      r.heading_error = std::abs(d);
    }
  }
  return out;
}

std::vector<PrPoint> pr_curve(const std::vector<ScoredMatch>& matches, int gt_count) {
  if (gt_count < 1) fail("pr_curve undefined without ground truth");
  return weighted_curve(matches, gt_count, false);
}

double ap_r40(const std::vector<ScoredMatch>& matches, int gt_count) {
  return ap_impl(matches, gt_count, false);
}

double ap_heading_r40(const std::vector<ScoredMatch>& matches, int gt_count) {
  return ap_impl(matches, gt_count, true);
}

std::vector<RangeBinResult> map_by_range(const std::vector<FrameEval>& frames,
                                         const std::vector<double>& edges, double iou_threshold,
                                         MetricSpace space) {
  if (edges.empty() || edges.front() != 0.0) fail("map_by_range: edges must start at 0");
  for (size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) fail("map_by_range: edges must increase");

  std::vector<RangeBinResult> bins(edges.size());
  for (size_t i = 0; i < edges.size(); ++i) {
    bins[i].lo = edges[i];
    bins[i].hi = i + 1 < edges.size() ? edges[i + 1] : -1.0;
  }
  std::vector<std::vector<ScoredMatch>> per_bin(edges.size());
  for (const FrameEval& fr : frames) {
    for (const geom::Box3D& g : fr.gt_boxes)
      ++bins[static_cast<size_t>(bin_of(edges, bev_distance(g)))].gt_count;
    const std::vector<MatchResult> mr =
        match(fr.det_boxes, fr.confidences, fr.gt_boxes, iou_threshold, space);
    for (size_t i = 0; i < mr.size(); ++i) {
      const geom::Box3D& anchor_box =
          mr[i].tp ? fr.gt_boxes[static_cast<size_t>(mr[i].gt_index)] : fr.det_boxes[i];
      const int bin = bin_of(edges, bev_distance(anchor_box));
      per_bin[static_cast<size_t>(bin)].push_back(
          {fr.confidences[i], mr[i].tp, mr[i].heading_error});
    }
  }
  for (size_t i = 0; i < bins.size(); ++i) {
    if (bins[i].gt_count < 1) continue;
    bins[i].defined = true;
    bins[i].ap = ap_r40(per_bin[i], bins[i].gt_count);
    bins[i].pr = weighted_curve(per_bin[i], bins[i].gt_count, false);
  }
  return bins;
}

void save_ground_truth(const std::string& path, const std::vector<GtRecord>& gts) {
  std::ofstream out(path);
  if (!out) fail("save_ground_truth: cannot open " + path);
  out << "frame class cx cy cz l w h yaw points height occlusion truncation\n";
  out << std::fixed << std::setprecision(6);
  for (const GtRecord& g : gts) {
    if (g.class_name.empty() || g.class_name.find_first_of(" \t\n") != std::string::npos)
      fail("save_ground_truth: class name must be a single token");
    out << g.frame_id << ' ' << g.class_name << ' ' << g.box.center.x << ' ' << g.box.center.y
        << ' ' << g.box.center.z << ' ' << g.box.l << ' ' << g.box.w << ' ' << g.box.h << ' '
        << g.box.yaw << ' ' << g.point_count << ' ' << g.bbox_height << ' ' << g.occlusion << ' '
        << g.truncation << '\n';
  }
  if (!out) fail("save_ground_truth: write failed for " + path);
}

std::vector<GtRecord> load_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("load_ground_truth: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) fail("load_ground_truth: missing header in " + path);
  std::vector<GtRecord> gts;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    GtRecord g;
    double cx, cy, cz, l, w, h, yaw;
    if (!(ss >> g.frame_id >> g.class_name >> cx >> cy >> cz >> l >> w >> h >> yaw >>
          g.point_count >> g.bbox_height >> g.occlusion >> g.truncation))
      fail("load_ground_truth: malformed line '" + line + "'");
    g.box = geom::make_box3d({cx, cy, cz}, l, w, h, yaw);
    gts.push_back(std::move(g));
  }
  return gts;
}

std::vector<Difficulty> difficulty_split(const std::vector<GtRecord>& gts, DifficultyMode mode) {
  std::vector<Difficulty> out;
  out.reserve(gts.size());
  for (const GtRecord& g : gts) {
    if (mode == DifficultyMode::kWod) {
      out.push_back(g.point_count > 5 ? Difficulty::kL1 : Difficulty::kL2);
      continue;
    }
    if (g.bbox_height >= 40.0 && g.occlusion == 0 && g.truncation <= 0.15)
      out.push_back(Difficulty::kEasy);
    else if (g.bbox_height >= 25.0 && g.occlusion <= 1 && g.truncation <= 0.30)
      out.push_back(Difficulty::kModerate);
    else if (g.bbox_height >= 25.0 && g.occlusion <= 2 && g.truncation <= 0.50)
      out.push_back(Difficulty::kHard);
    else
      out.push_back(Difficulty::kIgnored);
  }
  return out;
}

EvalReport evaluate(const std::vector<head::DetectionRecord>& dets,
                    const std::vector<GtRecord>& gts, const SuiteConfig& cfg) {
  if (cfg.class_names.size() != cfg.iou_thresholds.size())
    fail("evaluate: class/threshold count mismatch");
  std::set<int> frame_ids;
  for (const auto& d : dets) frame_ids.insert(d.frame_id);
  for (const auto& g : gts) frame_ids.insert(g.frame_id);

  EvalReport report;
  for (size_t ci = 0; ci < cfg.class_names.size(); ++ci) {
    const std::string& cname = cfg.class_names[ci];
    const double thr = cfg.iou_thresholds[ci];
    ClassReport cr;
    cr.class_name = cname;
    cr.iou_threshold = thr;

    // Per-frame boxes for this class, plus the class's GT records in frame
    // order for difficulty attribution.
    std::vector<FrameEval> frames;
    std::vector<std::vector<const GtRecord*>> frame_gt_records;
    for (int fid : frame_ids) {
      FrameEval fe;
      std::vector<const GtRecord*> recs;
      for (const auto& d : dets)
        if (d.frame_id == fid && d.class_name == cname) {
          fe.det_boxes.push_back(d.box);
          fe.confidences.push_back(d.confidence);
        }
      for (const auto& g : gts)
        if (g.frame_id == fid && g.class_name == cname) {
          fe.gt_boxes.push_back(g.box);
          recs.push_back(&g);
        }
      frames.push_back(std::move(fe));
      frame_gt_records.push_back(std::move(recs));
    }
    for (const auto& recs : frame_gt_records) cr.gt_count += static_cast<int>(recs.size());
    cr.defined = cr.gt_count >= 1;

    if (cr.defined) {
      // Per-frame difficulty labels, plus bucket GT totals so every populated
      // bucket exists before the sweep starts collecting false positives.
      std::vector<std::vector<Difficulty>> frame_diff(frames.size());
      std::map<Difficulty, int> diff_gt;
      for (size_t fi = 0; fi < frames.size(); ++fi) {
        std::vector<GtRecord> frame_recs;
        for (const GtRecord* r : frame_gt_records[fi]) frame_recs.push_back(*r);
        frame_diff[fi] = difficulty_split(frame_recs, cfg.difficulty);
        for (Difficulty d : frame_diff[fi])
          if (d != Difficulty::kIgnored) ++diff_gt[d];
      }
      std::map<Difficulty, std::vector<ScoredMatch>> per_diff;
      for (const auto& [d, n] : diff_gt)
        if (n > 0) per_diff[d] = {};

      std::vector<ScoredMatch> sweep_3d, sweep_bev;
      for (size_t fi = 0; fi < frames.size(); ++fi) {
        const FrameEval& fe = frames[fi];
        const auto mr3 = match(fe.det_boxes, fe.confidences, fe.gt_boxes, thr, MetricSpace::k3D);
        const auto mrb = match(fe.det_boxes, fe.confidences, fe.gt_boxes, thr, MetricSpace::kBev);
        for (size_t i = 0; i < mr3.size(); ++i) {
          sweep_3d.push_back({fe.confidences[i], mr3[i].tp, mr3[i].heading_error});
          sweep_bev.push_back({fe.confidences[i], mrb[i].tp, mrb[i].heading_error});
          // Buckets: a TP counts only in its ground truth's bucket, a TP on an
          // ignored ground truth counts nowhere, an unmatched detection is a
          // false positive for every bucket.
          if (mr3[i].tp) {
            const Difficulty d = frame_diff[fi][static_cast<size_t>(mr3[i].gt_index)];
            if (per_diff.count(d))
              per_diff[d].push_back({fe.confidences[i], true, mr3[i].heading_error});
          } else {
            for (auto& [d, v] : per_diff) (void)d, v.push_back({fe.confidences[i], false, 0.0});
          }
        }
      }

      cr.ap_3d = ap_r40(sweep_3d, cr.gt_count);
      cr.aph_3d = ap_heading_r40(sweep_3d, cr.gt_count);
      cr.ap_bev = ap_r40(sweep_bev, cr.gt_count);
      cr.pr_3d = pr_curve(sweep_3d, cr.gt_count);
      cr.range_bins = map_by_range(frames, cfg.range_edges, thr, MetricSpace::k3D);
      for (const auto& [d, sweep] : per_diff) {
        DifficultyResult dr;
        dr.level = d;
        dr.gt_count = diff_gt[d];
        dr.defined = true;
        dr.ap = ap_r40(sweep, dr.gt_count);
        cr.difficulties.push_back(dr);
      }
      report.map_3d += cr.ap_3d;
      ++report.defined_classes;
    }
    report.classes.push_back(std::move(cr));
  }
  if (report.defined_classes > 0) report.map_3d /= report.defined_classes;
  return report;
}

void write_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) fail("write_report: cannot open " + path);
  out << std::fixed << std::setprecision(4);
  out << "classes " << report.classes.size() << " defined " << report.defined_classes
      << " map_3d " << report.map_3d << "\n";
  for (const ClassReport& cr : report.classes) {
    out << "class " << cr.class_name << " iou " << cr.iou_threshold << " gt " << cr.gt_count
        << "\n";
    if (!cr.defined) {
      out << "  (no ground truth)\n";
      continue;
    }
    out << "  ap_3d " << cr.ap_3d << " ap_bev " << cr.ap_bev << " aph_3d " << cr.aph_3d << "\n";
    for (const RangeBinResult& b : cr.range_bins) {
      out << "  range [" << b.lo << ", ";
      if (b.hi < 0)
        out << "inf";
      else
        out << b.hi;
      out << ") gt " << b.gt_count;
      if (b.defined)
        out << " ap " << b.ap << "\n";
      else
        out << " ap -\n";
    }
    for (const DifficultyResult& d : cr.difficulties)
      out << "  difficulty " << difficulty_name(d.level) << " gt " << d.gt_count << " ap " << d.ap
          << "\n";
  }
  if (!out) fail("write_report: write failed for " + path);
}

void write_pr_csv(const std::string& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const std::string& name, const std::vector<PrPoint>& pr) {
    const std::string path = dir + "/" + name;
    std::ofstream out(path);
    if (!out) fail("write_pr_csv: cannot open " + path);
    out << "recall,precision\n" << std::fixed << std::setprecision(9);
    for (const PrPoint& p : pr) out << p.recall << ',' << p.precision << '\n';
    if (!out) fail("write_pr_csv: write failed for " + path);
  };
  for (const ClassReport& cr : report.classes) {
    if (!cr.defined) continue;
    dump("pr_" + cr.class_name + ".csv", cr.pr_3d);
    for (size_t i = 0; i < cr.range_bins.size(); ++i)
      if (cr.range_bins[i].defined)
        dump("pr_" + cr.class_name + "_range" + std::to_string(i) + ".csv", cr.range_bins[i].pr);
  }
}

}  // namespace pointforge::eval
