#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "podseg/cloud.hpp"

namespace podseg {

// ---- semantic ------------------------------------------------------------------------

struct ClassScores {
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou = 0, prec = 0, rec = 0, f1 = 0;
};

struct SemanticReport {
  std::vector<ClassScores> per_class;
  double miou = 0, mprec = 0, mrec = 0, mf1 = 0;
  double oacc = 0;
  std::size_t correct = 0, total = 0;
};

namespace detail {

// A class absent from both prediction and ground truth scores 1.
inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline double f1_score(double prec, double rec) { return prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0; }

inline SemanticReport semantic_metrics(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes = 2) {
  if (pred.size() != gt.size()) throw std::invalid_argument("semantic_metrics: length mismatch");
  if (gt.empty()) throw std::invalid_argument("semantic_metrics: empty input");
  if (num_classes < 1) throw std::invalid_argument("semantic_metrics: num_classes must be >= 1");
  SemanticReport r;
  r.per_class.resize(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || gt[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
      throw std::invalid_argument("semantic_metrics: label out of range at point " + std::to_string(i));
    if (pred[i] == gt[i]) {
      ++r.per_class[static_cast<std::size_t>(gt[i])].tp;
      ++r.correct;
    } else {
      ++r.per_class[static_cast<std::size_t>(pred[i])].fp;
      ++r.per_class[static_cast<std::size_t>(gt[i])].fn;
    }
  }
  r.total = gt.size();
  for (auto& c : r.per_class) {
    c.iou = detail::ratio(c.tp, c.tp + c.fp + c.fn);
    c.prec = detail::ratio(c.tp, c.tp + c.fp);
    c.rec = detail::ratio(c.tp, c.tp + c.fn);
    c.f1 = f1_score(c.prec, c.rec);
    r.miou += c.iou;
    r.mprec += c.prec;
    r.mrec += c.rec;
    r.mf1 += c.f1;
  }
  const double k = num_classes;
  r.miou /= k;
  r.mprec /= k;
  r.mrec /= k;
  r.mf1 /= k;
  r.oacc = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

// ---- instance --------------------------------------------------------------------------

using Instance = std::vector<std::int64_t>;  // ascending point indices

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t{0.5, 0.75, 0.9};
  return t;
}

struct InstanceReport {
  double mcov = 0, mwcov = 0;
  std::vector<double> thresholds;
  std::vector<double> mprec, mrec;
  std::vector<std::size_t> tp;  // per threshold
  std::size_t num_gt = 0, num_pred = 0;
  std::vector<double> gt_best_iou;    // max_j IoU per ground-truth instance
  std::vector<double> pred_best_iou;  // max_i IoU per prediction
  std::vector<double> weights;        // w_i
};

// Sizes and pairwise intersections of two instance lists, via per-point owner ids.
struct OverlapTable {
  std::vector<std::size_t> gt_size, pred_size;
  std::vector<std::vector<std::size_t>> inter;  // [gt][pred]

  double iou(std::size_t i, std::size_t j) const {
    const auto k = inter[i][j];
    const auto u = gt_size[i] + pred_size[j] - k;
    return u == 0 ? 0.0 : static_cast<double>(k) / static_cast<double>(u);
  }
};

inline OverlapTable overlap_table(const std::vector<Instance>& pred, const std::vector<Instance>& gt) {
  OverlapTable t;
  t.inter.assign(gt.size(), std::vector<std::size_t>(pred.size(), 0));
  std::unordered_map<std::int64_t, std::vector<std::size_t>> owner;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    t.gt_size.push_back(gt[i].size());
    for (auto p : gt[i]) owner[p].push_back(i);
  }
  for (std::size_t j = 0; j < pred.size(); ++j) {
    t.pred_size.push_back(pred[j].size());
    for (auto p : pred[j]) {
      auto it = owner.find(p);
      if (it == owner.end()) continue;
      for (auto i : it->second) ++t.inter[i][j];
    }
  }
  return t;
}

// With one_to_one, each ground-truth instance may validate at most one
// prediction: predictions are taken by descending IoU and matched greedily.
inline InstanceReport instance_metrics(const std::vector<Instance>& pred, const std::vector<Instance>& gt,
                                       const std::vector<double>& thresholds = default_thresholds(),
                                       bool one_to_one = false) {
  if (gt.empty()) throw std::invalid_argument("instance_metrics: empty ground truth");
  InstanceReport r;
  r.thresholds = thresholds;
  r.num_gt = gt.size();
  r.num_pred = pred.size();
  const auto t = overlap_table(pred, gt);
  std::size_t total = 0;
  for (const auto& g : gt) total += g.size();
  if (total == 0) throw std::invalid_argument("instance_metrics: ground-truth instances are empty");
  r.gt_best_iou.assign(gt.size(), 0.0);
  r.pred_best_iou.assign(pred.size(), 0.0);
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double v = t.iou(i, j);
      r.gt_best_iou[i] = std::max(r.gt_best_iou[i], v);
      r.pred_best_iou[j] = std::max(r.pred_best_iou[j], v);
    }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double w = static_cast<double>(gt[i].size()) / static_cast<double>(total);
    r.weights.push_back(w);
    r.mcov += r.gt_best_iou[i];
    r.mwcov += w * r.gt_best_iou[i];
  }
  r.mcov /= static_cast<double>(gt.size());
  for (double theta : thresholds) {
    std::size_t tp = 0;
    if (!one_to_one) {
      for (double v : r.pred_best_iou) tp += v > theta;
    } else {
      struct Pair {
        double iou;
        std::size_t i, j;
      };
      std::vector<Pair> pairs;
      for (std::size_t i = 0; i < gt.size(); ++i)
        for (std::size_t j = 0; j < pred.size(); ++j)
          if (double v = t.iou(i, j); v > theta) pairs.push_back({v, i, j});
      std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
      std::vector<bool> gt_used(gt.size()), pred_used(pred.size());
      for (const auto& p : pairs) {
        if (gt_used[p.i] || pred_used[p.j]) continue;
        gt_used[p.i] = pred_used[p.j] = true;
        ++tp;
      }
    }
    r.tp.push_back(tp);
    r.mprec.push_back(pred.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(pred.size()));
    // several predictions may match one instance under best-match counting
    r.mrec.push_back(std::min(1.0, static_cast<double>(tp) / static_cast<double>(gt.size())));
  }
  return r;
}

// Unweighted mean of per-sample reports.
inline InstanceReport mean_report(const std::vector<InstanceReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("mean_report: no reports");
  InstanceReport m;
  m.thresholds = reports[0].thresholds;
  m.mprec.assign(m.thresholds.size(), 0.0);
  m.mrec.assign(m.thresholds.size(), 0.0);
  m.tp.assign(m.thresholds.size(), 0);
  for (const auto& r : reports) {
    if (r.thresholds != m.thresholds) throw std::invalid_argument("mean_report: threshold sets differ");
    m.mcov += r.mcov;
    m.mwcov += r.mwcov;
    m.num_gt += r.num_gt;
    m.num_pred += r.num_pred;
    for (std::size_t k = 0; k < m.thresholds.size(); ++k) {
      m.mprec[k] += r.mprec[k];
      m.mrec[k] += r.mrec[k];
      m.tp[k] += r.tp[k];
    }
  }
  const double n = static_cast<double>(reports.size());
  m.mcov /= n;
  m.mwcov /= n;
  for (std::size_t k = 0; k < m.thresholds.size(); ++k) {
    m.mprec[k] /= n;
    m.mrec[k] /= n;
  }
  return m;
}

// Predictions whose best IoU with the ground truth exceeds theta.
inline std::size_t count_detected(const std::vector<Instance>& pred, const std::vector<Instance>& gt, double theta) {
  const auto t = overlap_table(pred, gt);
  std::size_t n = 0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double best = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) best = std::max(best, t.iou(i, j));
    n += best > theta;
  }
  return n;
}

inline double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("rmse: length mismatch");
  if (a.empty()) throw std::invalid_argument("rmse: empty input");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

// Instances of a labelled cloud grouped by id, ordered by id.
inline std::vector<Instance> instances_from_labels(const std::vector<int>& inst) {
  std::map<int, Instance> by_id;
  for (std::size_t i = 0; i < inst.size(); ++i)
    if (inst[i] >= 0) by_id[inst[i]].push_back(static_cast<std::int64_t>(i));
  std::vector<Instance> out;
  for (auto& [_, v] : by_id) out.push_back(std::move(v));
  return out;
}

// ---- voxelization class proportions -----------------------------------------------------

struct ClassProportions {
  std::vector<double> before;  // fraction of points per class
  std::vector<double> after;   // fraction of voxels per class
  std::size_t num_points = 0, num_voxels = 0;
};

// Majority vote per voxel; ties go to the silique class when it is among the
// tied classes, otherwise to the lower class id.
inline int majority_label(const std::vector<int>& counts) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(counts.size()); ++c)
    if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
  if (kSilique < static_cast<int>(counts.size()) &&
      counts[static_cast<std::size_t>(kSilique)] == counts[static_cast<std::size_t>(best)])
    return kSilique;
  return best;
}

inline ClassProportions voxel_class_proportions(const LabeledCloud& cloud, const VoxelGrid& grid, int num_classes = 2) {
  if (!cloud.sem) throw std::invalid_argument("voxel_class_proportions: cloud has no semantic labels");
  const auto& sem = *cloud.sem;
  ClassProportions r;
  r.before.assign(static_cast<std::size_t>(num_classes), 0.0);
  r.after.assign(static_cast<std::size_t>(num_classes), 0.0);
  for (int s : sem) r.before.at(static_cast<std::size_t>(s)) += 1;
  r.num_points = sem.size();
  const auto m = dynamic_voxelize(cloud, grid);
  r.num_voxels = m.num_voxels();
  for (const auto& members : m.voxel_to_points) {
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (auto i : members) ++counts[static_cast<std::size_t>(sem[static_cast<std::size_t>(i)])];
    r.after[static_cast<std::size_t>(majority_label(counts))] += 1;
  }
  for (auto& v : r.before) v /= static_cast<double>(std::max<std::size_t>(1, r.num_points));
  for (auto& v : r.after) v /= static_cast<double>(std::max<std::size_t>(1, r.num_voxels));
  return r;
}

// ---- reports ---------------------------------------------------------------------------------

inline std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

inline void write_semantic_table(std::ostream& os, const SemanticReport& r) {
  os << "class        IoU    Prec    Rec     F1\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    os << std::left << std::setw(10) << (c == static_cast<std::size_t>(kSilique) ? "silique" : c == 0 ? "non-silique" : std::to_string(c))
       << std::right << std::setw(7) << pct(s.iou) << std::setw(8) << pct(s.prec) << std::setw(8) << pct(s.rec)
       << std::setw(8) << pct(s.f1) << "\n";
  }
  os << std::left << std::setw(10) << "mean" << std::right << std::setw(7) << pct(r.miou) << std::setw(8) << pct(r.mprec)
     << std::setw(8) << pct(r.mrec) << std::setw(8) << pct(r.mf1) << "\n";
  os << "oAcc " << pct(r.oacc) << "\n";
}

inline void write_semantic_csv(std::ostream& os, const SemanticReport& r) {
  os << "class,iou,prec,rec,f1\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    os << c << ',' << s.iou << ',' << s.prec << ',' << s.rec << ',' << s.f1 << '\n';
  }
  os << "mean," << r.miou << ',' << r.mprec << ',' << r.mrec << ',' << r.mf1 << '\n';
  os << "oacc," << r.oacc << ",,,\n";
}

inline void write_instance_table(std::ostream& os, const InstanceReport& r) {
  os << "mCov " << pct(r.mcov) << "  mWCov " << pct(r.mwcov) << "\n";
  for (std::size_t k = 0; k < r.thresholds.size(); ++k)
    os << "theta " << r.thresholds[k] << "  mPrec " << pct(r.mprec[k]) << "  mRec " << pct(r.mrec[k]) << "\n";
}

inline void write_instance_csv(std::ostream& os, const InstanceReport& r) {
  os << "metric,value\nmcov," << r.mcov << "\nmwcov," << r.mwcov << '\n';
  for (std::size_t k = 0; k < r.thresholds.size(); ++k)
    os << "mprec_" << static_cast<int>(std::lround(r.thresholds[k] * 100)) << ',' << r.mprec[k] << "\nmrec_"
       << static_cast<int>(std::lround(r.thresholds[k] * 100)) << ',' << r.mrec[k] << '\n';
}

}  // namespace podseg
