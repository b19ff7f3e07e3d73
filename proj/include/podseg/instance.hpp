#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "podseg/cloud.hpp"
#include "podseg/layers.hpp"

namespace podseg {

enum class Variant { pst, v_pst_pg, f_pst_pg };

inline Variant parse_variant(const std::string& s) {
  if (s == "pst") return Variant::pst;
  if (s == "v-pst-pg" || s == "V") return Variant::v_pst_pg;
  if (s == "f-pst-pg" || s == "F") return Variant::f_pst_pg;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::pst: return "pst";
    case Variant::v_pst_pg: return "v-pst-pg";
    case Variant::f_pst_pg: return "f-pst-pg";
  }
  return "?";
}

struct InstanceHeadConfig {
  double r = 0.01;
  std::size_t min_cluster_points = 10;
  double nms_iou = 0.3;
  int prep_epoch = 8;
  std::size_t score_channels = 32;  // C_3
  std::size_t offset_hidden = 32;
  double iou_low = 0.25;
  double iou_high = 0.75;

  void validate() const {
    if (!(r > 0)) throw std::invalid_argument("clustering radius must be positive");
    if (!(nms_iou > 0 && nms_iou < 1)) throw std::invalid_argument("nms_iou must lie in (0,1)");
    if (prep_epoch < 0) throw std::invalid_argument("prep_epoch must be >= 0");
    if (!(iou_low < iou_high)) throw std::invalid_argument("score ramp needs iou_low < iou_high");
  }
};

enum class Space { original, shifted };

struct InstanceProposal {
  IndexList members;  // ascending, into the original points
  Space space = Space::original;
  int sem_class = kSilique;
  double score = 0.0;
};

// ---- offset branch -----------------------------------------------------------------

template <typename T>
void init_offset_branch(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t hidden) {
  nn::init_mlp(params, prefix, in, hidden, 3);
}

template <typename T>
Var<T> offset_branch(nn::Context<T>& ctx, Var<T> features, const std::string& prefix) {
  return nn::mlp_apply(ctx, features, prefix);
}

inline std::vector<Vec3> shifted_coords(const std::vector<Vec3>& p, const Tensor<double>& os) {
  if (os.rows() != p.size() || os.cols() != 3) throw ShapeError("shifted_coords: offsets must be N x 3");
  std::vector<Vec3> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int a = 0; a < 3; ++a) out[i][a] = p[i][a] + os(i, static_cast<std::size_t>(a));
  return out;
}

// Per point c_i - p_i for its ground-truth instance (zero elsewhere), and the
// mask of points that carry an instance.
inline std::pair<Tensor<double>, std::vector<std::uint8_t>> centroid_targets(const std::vector<Vec3>& p,
                                                                           const std::vector<int>& inst) {
  std::unordered_map<int, std::pair<Vec3, std::size_t>> sums;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (inst[i] < 0) continue;
    auto& [s, n] = sums[inst[i]];
    for (int a = 0; a < 3; ++a) s[a] += p[i][a];
    ++n;
  }
  Tensor<double> t(p.size(), 3);
  std::vector<std::uint8_t> mask(p.size(), 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (inst[i] < 0) continue;
    const auto& [s, n] = sums[inst[i]];
    for (int a = 0; a < 3; ++a) t(i, static_cast<std::size_t>(a)) = s[a] / static_cast<double>(n) - p[i][a];
    mask[i] = 1;
  }
  return {std::move(t), std::move(mask)};
}

template <typename T>
struct OffsetLosses {
  Var<T> reg;
  Var<T> dir;
};

// L_reg = mean |os - (c - p)|_1, L_dir = -mean cos(os, c - p) over masked points.
template <typename T>
OffsetLosses<T> offset_losses(Var<T> os, std::shared_ptr<const Tensor<T>> targets,
                              std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  return {ag::offset_l1_loss(os, targets, mask), ag::offset_dir_loss(os, targets, mask)};
}

// ---- clustering ----------------------------------------------------------------------

namespace detail {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;
  }
};

inline std::uint64_t cell_key(std::int64_t x, std::int64_t y, std::int64_t z) {
  auto u = [](std::int64_t v) { return static_cast<std::uint64_t>(v + (std::int64_t{1} << 20)) & 0x1fffff; };
  return (u(z) << 42) | (u(y) << 21) | u(x);
}

}  // namespace detail

struct Cluster {
  IndexList members;
  int sem_class = 0;
};

// Connected components of the graph joining points of the same class at
// distance <= r. Points whose class is not in `classes` (empty: all classes)
// are masked out. Components below min_points are dropped; the rest are
// ordered by their smallest member.
inline std::vector<Cluster> cluster_points(const std::vector<Vec3>& coords, const std::vector<int>& labels, double r,
                                           std::size_t min_points, const std::vector<int>& classes = {kSilique}) {
  if (!(r > 0)) throw std::invalid_argument("cluster_points: r must be positive");
  if (labels.size() != coords.size()) throw std::invalid_argument("cluster_points: label count differs");
  const std::size_t n = coords.size();
  auto wanted = [&](int c) { return classes.empty() || std::find(classes.begin(), classes.end(), c) != classes.end(); };
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
  std::vector<std::array<std::int64_t, 3>> cell(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!wanted(labels[i])) continue;
    for (int a = 0; a < 3; ++a) cell[i][a] = static_cast<std::int64_t>(std::floor(coords[i][a] / r));
    grid[detail::cell_key(cell[i][0], cell[i][1], cell[i][2])].push_back(i);
  }
  detail::DisjointSets ds(n);
  const double r2 = r * r;
  for (std::size_t i = 0; i < n; ++i) {
    if (!wanted(labels[i])) continue;
    for (std::int64_t dz = -1; dz <= 1; ++dz)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          auto it = grid.find(detail::cell_key(cell[i][0] + dx, cell[i][1] + dy, cell[i][2] + dz));
          if (it == grid.end()) continue;
          for (std::size_t j : it->second) {
            if (j <= i || labels[j] != labels[i]) continue;
            double d2 = 0;
            for (int a = 0; a < 3; ++a) d2 += (coords[i][a] - coords[j][a]) * (coords[i][a] - coords[j][a]);
            if (d2 <= r2) ds.unite(i, j);
          }
        }
  }
  std::unordered_map<std::size_t, std::size_t> root_to_cluster;
  std::vector<Cluster> all;
  for (std::size_t i = 0; i < n; ++i) {
    if (!wanted(labels[i])) continue;
    const std::size_t root = ds.find(i);
    auto [it, fresh] = root_to_cluster.try_emplace(root, all.size());
    if (fresh) all.push_back({{}, labels[i]});
    all[it->second].members.push_back(static_cast<std::int64_t>(i));
  }
  std::vector<Cluster> out;
  for (auto& c : all)
    if (c.members.size() >= min_points) out.push_back(std::move(c));
  return out;
}

// Clusters in the original and the shifted space; members always index the
// original points. Original-space proposals come first.
inline std::vector<InstanceProposal> dual_set_cluster(const std::vector<Vec3>& p, const std::vector<Vec3>& ps,
                                                      const std::vector<int>& sem, const InstanceHeadConfig& cfg) {
  std::vector<InstanceProposal> out;
  for (Space s : {Space::original, Space::shifted})
    for (auto& c : cluster_points(s == Space::original ? p : ps, sem, cfg.r, cfg.min_cluster_points))
      out.push_back({std::move(c.members), s, c.sem_class, 0.0});
  return out;
}

// ---- IoU helpers -------------------------------------------------------------------------

// |a ∩ b| / |a ∪ b| for ascending index lists.
inline double set_iou(const IndexList& a, const IndexList& b) {
  std::size_t i = 0, j = 0, inter = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] < b[j]) ++i;
    else if (b[j] < a[i]) ++j;
    else { ++inter; ++i; ++j; }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Ground-truth instances as ascending point lists, ordered by instance id.
inline std::vector<IndexList> instances_of(const std::vector<int>& inst) {
  std::map<int, IndexList> by_id;
  for (std::size_t i = 0; i < inst.size(); ++i)
    if (inst[i] >= 0) by_id[inst[i]].push_back(static_cast<std::int64_t>(i));
  std::vector<IndexList> out;
  for (auto& [_, m] : by_id) out.push_back(std::move(m));
  return out;
}

// Best IoU of a point set against labelled instances, counting overlaps via
// the per-point instance id.
inline double best_iou(const IndexList& members, const std::vector<int>& inst,
                       const std::unordered_map<int, std::size_t>& inst_sizes) {
  std::unordered_map<int, std::size_t> overlap;
  for (auto i : members) {
    const int id = inst[static_cast<std::size_t>(i)];
    if (id >= 0) ++overlap[id];
  }
  double best = 0.0;
  for (const auto& [id, k] : overlap) {
    const double uni = static_cast<double>(members.size() + inst_sizes.at(id) - k);
    best = std::max(best, static_cast<double>(k) / uni);
  }
  return best;
}

inline std::unordered_map<int, std::size_t> instance_sizes(const std::vector<int>& inst) {
  std::unordered_map<int, std::size_t> out;
  for (int id : inst)
    if (id >= 0) ++out[id];
  return out;
}

// ---- ScoreNet --------------------------------------------------------------------------------

template <typename T>
void init_score_net(ModelParams<T>& params, const std::string& prefix, std::size_t in, std::size_t c3) {
  params.add_dense(prefix + ".feat", in, c3);
  params.add_dense(prefix + ".point", c3 + 3, c3);
  params.add_dense(prefix + ".fc", c3, c3);
  params.add_dense(prefix + ".out", c3, 1);
}

// Per-proposal score logits (M x 1): gather G through an extra dense layer,
// append member coordinates centred on the proposal mean, dense layer, max
// over members, then a two-layer MLP. Scores are sigmoid(logits).
template <typename T>
Var<T> score_logits(nn::Context<T>& ctx, Var<T> g, const std::vector<Vec3>& coords,
                    const std::vector<InstanceProposal>& proposals, const std::string& prefix) {
  if (proposals.empty()) throw std::invalid_argument("score_logits: no proposals");
  auto gather = std::make_shared<IndexList>();
  auto groups = std::make_shared<Groups>();
  std::vector<T> centred;
  for (const auto& prop : proposals) {
    Vec3 mean{0, 0, 0};
    for (auto i : prop.members)
      for (int a = 0; a < 3; ++a) mean[a] += coords[static_cast<std::size_t>(i)][a];
    for (int a = 0; a < 3; ++a) mean[a] /= static_cast<double>(prop.members.size());
    IndexList rows;
    for (auto i : prop.members) {
      rows.push_back(static_cast<std::int64_t>(gather->size()));
      gather->push_back(i);
      for (int a = 0; a < 3; ++a) centred.push_back(static_cast<T>(coords[static_cast<std::size_t>(i)][a] - mean[a]));
    }
    groups->push_back(std::move(rows));
  }
  Var<T> h = ag::relu(nn::dense(ctx, g, prefix + ".feat"));
  Var<T> members = ag::concat_cols(ag::gather_rows(h, std::shared_ptr<const IndexList>(gather)),
                                   ctx.graph.constant(Tensor<T>::from_rows(gather->size(), 3, std::move(centred))));
  Var<T> pooled = ag::segment_reduce(ag::relu(nn::dense(ctx, members, prefix + ".point")),
                                     std::shared_ptr<const Groups>(groups), Reduce::max);
  return nn::dense(ctx, ag::relu(nn::dense(ctx, pooled, prefix + ".fc")), prefix + ".out");
}

template <typename T>
void score_clusters(nn::Context<T>& ctx, Var<T> g, const std::vector<Vec3>& coords,
                    std::vector<InstanceProposal>& proposals, const std::string& prefix) {
  if (proposals.empty()) return;
  const auto& z = score_logits(ctx, g, coords, proposals, prefix).value();
  for (std::size_t k = 0; k < proposals.size(); ++k)
    proposals[k].score = static_cast<double>(ag::sigmoid_scalar(z[k]));
}

// IoU ramp: below low -> 0, above high -> 1, linear in between.
inline double score_target(double iou, const InstanceHeadConfig& cfg) {
  if (iou <= cfg.iou_low) return 0.0;
  if (iou >= cfg.iou_high) return 1.0;
  return (iou - cfg.iou_low) / (cfg.iou_high - cfg.iou_low);
}

inline std::vector<double> score_targets(const std::vector<InstanceProposal>& proposals, const std::vector<int>& gt_inst,
                                         const InstanceHeadConfig& cfg) {
  const auto sizes = instance_sizes(gt_inst);
  std::vector<double> out;
  for (const auto& p : proposals) out.push_back(score_target(best_iou(p.members, gt_inst, sizes), cfg));
  return out;
}

// Binary cross-entropy between the scores and the ramped best-IoU targets.
template <typename T>
Var<T> score_loss(Var<T> logits, const std::vector<InstanceProposal>& proposals, const std::vector<int>& gt_inst,
                  const InstanceHeadConfig& cfg) {
  auto t = score_targets(proposals, gt_inst, cfg);
  auto targets = std::make_shared<std::vector<T>>(t.begin(), t.end());
  return ag::bce_logits(logits, std::shared_ptr<const std::vector<T>>(targets));
}

// Greedy NMS by descending score (ties to the lower index). Returns kept
// proposal indices in selection order.
inline std::vector<std::size_t> nms(const std::vector<InstanceProposal>& proposals, double iou_threshold) {
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return proposals[a].score > proposals[b].score; });
  std::vector<std::size_t> kept;
  for (auto i : order) {
    bool keep = true;
    for (auto k : kept)
      if (set_iou(proposals[i].members, proposals[k].members) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  return kept;
}

// Per-point instance ids from the kept proposals; a point claimed by several
// goes to the higher-scoring one (earlier in `kept`).
struct InstanceAssignment {
  std::vector<int> inst;
  std::vector<double> score;
  std::vector<IndexList> instances;
  std::vector<double> instance_scores;
};

inline InstanceAssignment assign_instances(std::size_t n, const std::vector<InstanceProposal>& proposals,
                                           const std::vector<std::size_t>& kept) {
  InstanceAssignment a;
  a.inst.assign(n, kNoInstance);
  a.score.assign(n, 0.0);
  for (auto k : kept) {
    const int id = static_cast<int>(a.instances.size());
    a.instances.push_back(proposals[k].members);
    a.instance_scores.push_back(proposals[k].score);
    for (auto i : proposals[k].members) {
      auto& slot = a.inst[static_cast<std::size_t>(i)];
      if (slot == kNoInstance) {
        slot = id;
        a.score[static_cast<std::size_t>(i)] = proposals[k].score;
      }
    }
  }
  return a;
}

// ---- loss schedule ---------------------------------------------------------------------------

struct TrainSchedule {
  bool sem = true;
  bool offset = false;  // L_o_reg and L_o_dir
  bool score = false;
  bool freeze_pst = false;

  int loss_count() const { return (sem ? 1 : 0) + (offset ? 2 : 0) + (score ? 1 : 0); }
};

// Epochs count from 1. Up to the preparation epoch the instance variants
// train the semantic and offset losses; afterwards V adds the score loss and F
// drops the semantic loss and freezes the backbone.
inline TrainSchedule train_schedule(Variant variant, int epoch, const InstanceHeadConfig& cfg) {
  TrainSchedule s;
  if (variant == Variant::pst) return s;
  s.offset = true;
  if (epoch <= cfg.prep_epoch) return s;
  s.score = true;
  if (variant == Variant::f_pst_pg) {
    s.sem = false;
    s.freeze_pst = true;
  }
  return s;
}

inline TrainSchedule train_schedule(const std::string& variant, int epoch, const InstanceHeadConfig& cfg) {
  return train_schedule(parse_variant(variant), epoch, cfg);
}

// ---- exports ------------------------------------------------------------------------------------

namespace detail {

inline void put_double(std::string& line, double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, res.ptr);
}

}  // namespace detail

// Both coordinate sets with labels: one header line, then N rows "0 x y z sem"
// for the original points and N rows "1 x y z sem" for the shifted ones.
inline void export_shift_diagnostics(const std::vector<Vec3>& p, const std::vector<Vec3>& ps, const std::vector<int>& sem,
                                     const std::string& path) {
  if (p.size() != ps.size() || p.size() != sem.size())
    throw std::invalid_argument("export_shift_diagnostics: length mismatch");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "# podseg-shift v1 columns=set,x,y,z,sem\n";
  for (int set = 0; set < 2; ++set) {
    const auto& pts = set == 0 ? p : ps;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::string line = std::to_string(set);
      for (int a = 0; a < 3; ++a) {
        line += ' ';
        detail::put_double(line, pts[i][a]);
      }
      line += ' ' + std::to_string(sem[i]) + '\n';
      os << line;
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

struct ShiftDiagnostics {
  std::vector<Vec3> original, shifted;
  std::vector<int> sem;
};

inline ShiftDiagnostics read_shift_diagnostics(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  ShiftDiagnostics d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const char* s = line.data();
    const char* end = s + line.size();
    int set = 0, label = 0;
    Vec3 p{};
    auto skip = [&] { while (s < end && *s == ' ') ++s; };
    auto r = std::from_chars(s, end, set);
    bool ok = r.ec == std::errc();
    s = r.ptr;
    for (int a = 0; a < 3 && ok; ++a) {
      skip();
      auto q = std::from_chars(s, end, p[a]);
      ok = q.ec == std::errc();
      s = q.ptr;
    }
    skip();
    if (ok) {
      auto q = std::from_chars(s, end, label);
      ok = q.ec == std::errc();
    }
    if (!ok) throw std::runtime_error("malformed shift diagnostics at line " + std::to_string(lineno));
    if (set == 0) {
      d.original.push_back(p);
      d.sem.push_back(label);
    } else {
      d.shifted.push_back(p);
    }
  }
  return d;
}

// Instance predictions: "x y z sem inst_pred score" per point. Points outside
// every instance carry inst_pred -1 and score 0.
inline void write_instances(const std::string& path, const std::vector<Vec3>& coords, const std::vector<int>& sem,
                            const InstanceAssignment& a) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "# podseg-instances v1 columns=x,y,z,sem,inst_pred,score\n";
  for (std::size_t i = 0; i < coords.size(); ++i) {
    std::string line;
    for (int k = 0; k < 3; ++k) {
      detail::put_double(line, coords[i][k]);
      line += ' ';
    }
    line += std::to_string(sem[i]) + ' ' + std::to_string(a.inst[i]) + ' ';
    detail::put_double(line, a.score[i]);
    line += '\n';
    os << line;
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace podseg
