#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "podseg/config.hpp"
#include "podseg/dataset.hpp"
#include "podseg/metrics.hpp"
#include "podseg/train.hpp"

namespace podseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Bad invocation: exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while running a well-formed command: exit code 1.
class CommandError : public std::runtime_error {
 public:
  CommandError(std::string code, const std::string& msg) : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

struct CommandOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<std::string> variant;
  std::string data;   // dataset directory (train, ablate)
  std::string input;  // cloud file or directory (infer)
  std::string pred, gt;
  std::vector<std::string> set;  // key=value overrides
};

inline RunConfig resolve_config(const CommandOptions& o, const std::string& fallback_config = {}) {
  RunConfig cfg;
  if (!o.config.empty()) cfg = load_config(o.config);
  else if (!fallback_config.empty() && fs::exists(fallback_config)) cfg = load_config(fallback_config);
  std::string overrides;
  for (const auto& kv : o.set) overrides += kv + "\n";
  apply_config_text(cfg, overrides, "--set");
  if (o.seed) cfg.seed = *o.seed;
  if (o.variant) apply_config_text(cfg, "variant=" + *o.variant, "--variant");
  cfg.validate();
  return cfg;
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw CommandError("io", "cannot create directory " + dir);
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw CommandError("io", "cannot write " + path.string());
}

inline std::vector<fs::path> cloud_files(const std::string& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw CommandError("io", "not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".txt") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline LabeledCloud load_cloud(const fs::path& path) {
  try {
    return read_cloud(path.string());
  } catch (const CloudFormatError& e) {
    throw CommandError("format", e.what());
  } catch (const std::runtime_error& e) {
    throw CommandError("io", e.what());
  }
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : os_(path, std::ios::app) {
    if (!os_) throw CommandError("io", "cannot open log " + path.string());
  }
  void write(const json& j) { os_ << j.dump() << '\n' << std::flush; }

 private:
  std::ofstream os_;
};

inline json losses_json(const StepLosses& s) {
  return {{"loss", s.total}, {"sem", s.sem},   {"off_reg", s.off_reg},
          {"off_dir", s.off_dir}, {"score", s.score}, {"proposals", s.proposals}};
}

// Manifest ids resolved to the train/val/test lists of the configured split.
struct DataPlan {
  std::vector<std::string> train, val, test;
};

inline DataPlan read_manifest(const std::string& dir, const RunConfig& cfg) {
  const fs::path path = fs::path(dir) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw CommandError("data", "no manifest.json in " + dir);
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw CommandError("format", "manifest.json: " + std::string(e.what()));
  }
  DataPlan plan;
  try {
    const auto ids = m.at("ids").get<std::vector<std::string>>();
    auto pick = [&](const json& idx) {
      std::vector<std::string> out;
      for (auto i : idx.get<std::vector<std::size_t>>()) out.push_back(ids.at(i));
      return out;
    };
    if (m.at("split") == "fixed") {
      plan.train = pick(m.at("train"));
      plan.val = pick(m.at("val"));
      plan.test = pick(m.at("test"));
    } else {
      const auto& folds = m.at("folds");
      const std::size_t k = cfg.train.fold, v = (k + 1) % folds.size();
      plan.test = pick(folds.at(k));
      plan.val = pick(folds.at(v));
      for (std::size_t f = 0; f < folds.size(); ++f)
        if (f != k && f != v) {
          auto part = pick(folds.at(f));
          plan.train.insert(plan.train.end(), part.begin(), part.end());
        }
    }
  } catch (const json::exception& e) {
    throw CommandError("format", "manifest.json: " + std::string(e.what()));
  } catch (const std::out_of_range& e) {
    throw CommandError("format", "manifest.json: index out of range");
  }
  if (cfg.train.max_plants && plan.train.size() > cfg.train.max_plants) plan.train.resize(cfg.train.max_plants);
  return plan;
}

inline std::vector<LabeledCloud> load_ids(const std::string& dir, const std::vector<std::string>& ids) {
  std::vector<LabeledCloud> out;
  for (const auto& id : ids) out.push_back(load_cloud(fs::path(dir) / (id + ".txt")));
  return out;
}

inline std::array<unsigned char, 3> class_color(int sem) {
  return sem == kSilique ? std::array<unsigned char, 3>{230, 190, 40} : std::array<unsigned char, 3>{60, 150, 70};
}

inline std::array<unsigned char, 3> instance_color(int id) {
  const auto h = mix_seed(0x1234, static_cast<std::uint64_t>(id));
  return {static_cast<unsigned char>(64 + h % 192), static_cast<unsigned char>(64 + (h >> 8) % 192),
          static_cast<unsigned char>(64 + (h >> 16) % 192)};
}

// ASCII PLY, coloured by instance where one is assigned, else by class.
inline void write_colored_ply(const fs::path& path, const std::vector<Vec3>& coords, const std::vector<int>& sem,
                              const std::vector<int>* inst) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(coords.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\n"
                    "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (std::size_t i = 0; i < coords.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      append_double(out, coords[i][k]);
      out += ' ';
    }
    const int id = inst ? (*inst)[i] : kNoInstance;
    const auto c = id >= 0 ? instance_color(id) : class_color(sem[i]);
    out += std::to_string(c[0]) + ' ' + std::to_string(c[1]) + ' ' + std::to_string(c[2]) + '\n';
  }
  write_text(path, out);
}

inline void write_probs(const fs::path& path, const Tensor<double>& probs) {
  std::string out = "# podseg-prob v1 columns=";
  for (std::size_t c = 0; c < probs.cols(); ++c) out += (c ? ",p" : "p") + std::to_string(c);
  out += '\n';
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (std::size_t c = 0; c < probs.cols(); ++c) {
      if (c) out += ' ';
      append_double(out, probs(i, c));
    }
    out += '\n';
  }
  write_text(path, out);
}

inline std::string require(const std::string& v, const std::string& flag) {
  if (v.empty()) throw UsageError(flag + " is required");
  return v;
}

}  // namespace detail

// ---- synth -------------------------------------------------------------------------------------

inline int cmd_synth(const CommandOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::string dir = o.out.empty() ? cfg.data_dir : o.out;
  detail::ensure_dir(dir);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cfg.synth_plants; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "plant_%03zu", i);
    PlantSpec spec = cfg.plant;
    spec.seed = mix_seed(cfg.seed, i);
    LabeledCloud c;
    try {
      c = generate_plant(spec, name);
    } catch (const std::runtime_error& e) {
      throw CommandError("generator", std::string(name) + ": " + e.what());
    }
    detail::write_text(fs::path(dir) / (std::string(name) + ".txt"), format_cloud(c));
    ids.push_back(name);
  }
  DatasetSplit split;
  try {
    split = make_splits(ids, cfg.split, cfg.seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json m = {{"format", "podseg-dataset v1"}, {"seed", cfg.seed}, {"ids", ids}};
  if (cfg.split == SplitMode::fixed) {
    m["split"] = "fixed";
    m["train"] = split.train;
    m["val"] = split.val;
    m["test"] = split.test;
  } else {
    m["split"] = "sixfold";
    m["folds"] = split.folds;
  }
  detail::write_text(fs::path(dir) / "manifest.json", m.dump(2) + "\n");
  detail::write_text(fs::path(dir) / "run.cfg", config_text(cfg));
  out << "synth: " << ids.size() << " clouds in " << dir << "\n";
  return 0;
}

// ---- train -------------------------------------------------------------------------------------

inline int cmd_train(const CommandOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::string data = o.data.empty() ? cfg.data_dir : o.data;
  const std::string run = o.out.empty() ? cfg.out_dir : o.out;
  const auto plan = detail::read_manifest(data, cfg);
  if (plan.train.empty()) throw CommandError("data", "split has no training clouds");
  auto train_clouds = detail::load_ids(data, plan.train);
  auto val_clouds = detail::load_ids(data, plan.val);
  std::vector<LabeledCloud> patches, heldout;
  for (std::size_t i = 0; i < train_clouds.size(); ++i) {
    const auto& c = train_clouds[i];
    if (!c.has_sem() || (cfg.model.has_instance_head() && !c.has_inst()))
      throw CommandError("data", c.id + ": labels required by variant " + to_string(cfg.model.variant) + " are missing");
    auto h = holdout_patches(c, cfg.patch, cfg.train.holdout_frac, mix_seed(cfg.seed, 0x401d + i));
    std::move(h.train.begin(), h.train.end(), std::back_inserter(patches));
    std::move(h.heldout.begin(), h.heldout.end(), std::back_inserter(heldout));
  }
  for (const auto& c : val_clouds)
    if (!c.has_sem()) throw CommandError("data", c.id + ": validation cloud lacks labels");

  detail::ensure_dir(run);
  detail::write_text(fs::path(run) / "run.cfg", config_text(cfg));
  Trainer trainer(cfg, std::move(patches), std::move(val_clouds));
  if (!o.checkpoint.empty()) {
    try {
      trainer.load(o.checkpoint);
    } catch (const CheckpointError& e) {
      throw CommandError("checkpoint", e.what());
    }
  }
  detail::JsonlLog log(fs::path(run) / "train.jsonl");
  trainer.on_step = [&](int epoch, std::int64_t step, double lr, const StepLosses& s) {
    json j = detail::losses_json(s);
    j["kind"] = "step";
    j["epoch"] = epoch;
    j["step"] = step;
    j["lr"] = lr;
    j["pst_grad_norm"] = s.pst_grad_norm;
    log.write(j);
  };
  const auto last = (fs::path(run) / "last.ckpt").string(), best = (fs::path(run) / "best.ckpt").string();
  while (trainer.epoch() < cfg.train.epochs) {
    EpochLog e;
    try {
      e = trainer.run_epoch();
    } catch (const NonFiniteGradient& err) {
      throw CommandError("diverged", err.what());
    }
    json j = detail::losses_json(e.mean);
    j["kind"] = "epoch";
    j["epoch"] = e.epoch;
    j["steps"] = e.steps;
    j["lr"] = e.lr;
    j["pst_grad_norm"] = e.max_pst_grad_norm;
    if (e.validated) {
      j["val_loss"] = e.val_loss;
      j["val_miou"] = e.val_miou;
    }
    if (e.train_oacc) j["train_oacc"] = *e.train_oacc;
    j["best"] = e.improved;
    log.write(j);
    trainer.save(last);
    if (e.improved) trainer.save(best);
    if (e.stop) break;
  }
  json fin = {{"kind", "final"}, {"epoch", trainer.epoch()}, {"best_epoch", trainer.best_epoch()},
              {"best_loss", trainer.best_loss()}};
  if (!heldout.empty()) fin["heldout_oacc"] = trainer.evaluate(heldout, trainer.epoch()).oacc;
  log.write(fin);
  out << "train: " << trainer.epoch() << " epochs, best epoch " << trainer.best_epoch() << ", run " << run << "\n";
  return 0;
}

// ---- infer -------------------------------------------------------------------------------------

inline void load_model_checkpoint(ModelParams<float>& params, const std::string& path) {
  try {
    auto tensors = read_checkpoint(path);
    const bool prefixed = std::any_of(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.name.rfind("model.", 0) == 0; });
    if (prefixed) std::erase_if(tensors, [](const NamedTensor& t) { return t.name.rfind("model.", 0) != 0; });
    load_named(params, tensors, true, prefixed ? "model." : "");
  } catch (const CheckpointError& e) {
    throw CommandError("checkpoint", e.what());
  }
}

inline int cmd_infer(const CommandOptions& o, std::ostream& out) {
  const std::string ckpt = detail::require(o.checkpoint, "--checkpoint");
  const std::string input = detail::require(o.input, "--input");
  const std::string dir = detail::require(o.out, "--out");
  const RunConfig cfg = resolve_config(o, (fs::path(ckpt).parent_path() / "run.cfg").string());
  if (!fs::exists(ckpt)) throw CommandError("io", "no checkpoint at " + ckpt);
  ModelParams<float> params(cfg.seed);
  init_model(params, cfg.model);
  load_model_checkpoint(params, ckpt);

  std::vector<fs::path> files;
  if (fs::is_directory(input)) files = detail::cloud_files(input);
  else if (fs::exists(input)) files.push_back(input);
  else throw CommandError("io", "no such input " + input);
  if (files.empty()) throw CommandError("data", "no cloud files in " + input);

  const bool inst = cfg.model.has_instance_head();
  for (const char* sub : {"pred", "prob", "color"}) detail::ensure_dir((fs::path(dir) / sub).string());
  if (inst)
    for (const char* sub : {"inst", "shift"}) detail::ensure_dir((fs::path(dir) / sub).string());
  for (const auto& f : files) {
    auto cloud = detail::load_cloud(f);
    if (cloud.size() == 0) throw CommandError("data", f.string() + ": empty cloud");
    const auto pred = infer_cloud(params, cfg.model, cfg.patch, cloud);
    LabeledCloud p;
    p.id = cloud.id;
    p.coords = cloud.coords;
    p.sem = pred.semantic.labels;
    if (inst) p.inst = pred.instances.inst;
    const std::string name = cloud.id + ".txt";
    detail::write_text(fs::path(dir) / "pred" / name, format_cloud(p));
    detail::write_probs(fs::path(dir) / "prob" / name, pred.semantic.probs);
    detail::write_colored_ply(fs::path(dir) / "color" / (cloud.id + ".ply"), p.coords, *p.sem, inst ? &*p.inst : nullptr);
    if (inst) {
      write_instances((fs::path(dir) / "inst" / name).string(), p.coords, *p.sem, pred.instances);
      export_shift_diagnostics(p.coords, pred.shifted, *p.sem, (fs::path(dir) / "shift" / name).string());
    }
    out << "infer: " << cloud.id << " " << cloud.size() << " points";
    if (inst) out << ", " << pred.instances.instances.size() << " instances";
    out << "\n";
  }
  return 0;
}

// ---- eval --------------------------------------------------------------------------------------

inline int cmd_eval(const CommandOptions& o, std::ostream& out) {
  const std::string pred_dir = detail::require(o.pred, "--pred");
  const std::string gt_dir = detail::require(o.gt, "--gt");
  const RunConfig cfg = resolve_config(o);
  const auto preds = detail::cloud_files(pred_dir);
  if (preds.empty()) throw CommandError("data", "no prediction files in " + pred_dir);
  const auto gts = detail::cloud_files(gt_dir);
  std::vector<std::string> pred_names, gt_names;
  for (const auto& p : preds) pred_names.push_back(p.filename().string());
  for (const auto& g : gts) gt_names.push_back(g.filename().string());
  for (const auto& n : pred_names)
    if (!std::binary_search(gt_names.begin(), gt_names.end(), n))
      throw CommandError("id_mismatch", "prediction " + n + " has no ground truth in " + gt_dir);

  std::vector<int> all_pred, all_gt;
  std::vector<InstanceReport> inst_reports;
  for (const auto& name : pred_names) {
    const auto p = detail::load_cloud(fs::path(pred_dir) / name);
    const auto g = detail::load_cloud(fs::path(gt_dir) / name);
    if (p.size() != g.size()) throw CommandError("id_mismatch", name + ": point counts differ");
    if (!p.has_sem() || !g.has_sem()) throw CommandError("data", name + ": semantic labels missing");
    all_pred.insert(all_pred.end(), p.sem->begin(), p.sem->end());
    all_gt.insert(all_gt.end(), g.sem->begin(), g.sem->end());
    if (p.has_inst() && g.has_inst()) {
      const auto gi = instances_from_labels(*g.inst);
      if (!gi.empty()) inst_reports.push_back(instance_metrics(instances_from_labels(*p.inst), gi));
    }
  }
  SemanticReport sem;
  try {
    sem = semantic_metrics(all_pred, all_gt, static_cast<int>(cfg.model.num_classes));
  } catch (const std::invalid_argument& e) {
    throw CommandError("data", e.what());
  }
  std::ostringstream table, csv;
  write_semantic_table(table, sem);
  write_semantic_csv(csv, sem);
  out << table.str();
  std::optional<InstanceReport> ir;
  if (!inst_reports.empty()) {
    ir = mean_report(inst_reports);
    std::ostringstream it;
    write_instance_table(it, *ir);
    out << it.str();
  }
  if (!o.out.empty()) {
    detail::ensure_dir(o.out);
    detail::write_text(fs::path(o.out) / "semantic.csv", csv.str());
    detail::write_text(fs::path(o.out) / "semantic.txt", table.str());
    if (ir) {
      std::ostringstream a, b;
      write_instance_csv(a, *ir);
      write_instance_table(b, *ir);
      detail::write_text(fs::path(o.out) / "instance.csv", a.str());
      detail::write_text(fs::path(o.out) / "instance.txt", b.str());
    }
  }
  return 0;
}

// ---- ablate ------------------------------------------------------------------------------------

struct FeatureRow {
  std::string name;
  AugmentFlags flags;
  double miou = 0, oacc = 0;
};

struct VoxelShapeRow {
  std::uint64_t seed = 0;
  std::array<double, 4> l1{};  // l=w>h, l=h>w, w=h>l, cube
  bool flat_closer() const { return l1[0] < l1[3]; }
};

inline const std::array<Vec3, 4>& ablation_voxel_shapes() {
  static const std::array<Vec3, 4> shapes{Vec3{0.006, 0.006, 0.0025}, Vec3{0.006, 0.0025, 0.006},
                                          Vec3{0.0025, 0.006, 0.006}, Vec3{0.0045, 0.0045, 0.0045}};
  return shapes;
}

inline double proportion_l1(const ClassProportions& p) {
  double s = 0;
  for (std::size_t c = 0; c < p.before.size(); ++c) s += std::abs(p.after[c] - p.before[c]);
  return s;
}

inline VoxelShapeRow voxel_shape_row(const PlantSpec& base, std::uint64_t seed) {
  PlantSpec spec = base;
  spec.seed = seed;
  const auto cloud = generate_plant(spec);
  VoxelShapeRow r;
  r.seed = seed;
  const auto& shapes = ablation_voxel_shapes();
  for (std::size_t k = 0; k < shapes.size(); ++k)
    r.l1[k] = proportion_l1(voxel_class_proportions(cloud, VoxelGrid::around(cloud.coords, shapes[k])));
  return r;
}

inline std::vector<FeatureRow> feature_rows() {
  auto f = [](bool v, bool l2) {
    AugmentFlags a;
    a.use_cluster_centroid = true;
    a.use_voxel_center = v;
    a.use_l2_norm = l2;
    return a;
  };
  return {{"{C}", f(false, false)}, {"{C,L2}", f(false, true)}, {"{C,V}", f(true, false)}, {"{C,V,L2}", f(true, true)}};
}

inline FeatureRow run_feature_row(FeatureRow row, const RunConfig& base, const std::vector<LabeledCloud>& train,
                                  const std::vector<LabeledCloud>& test) {
  RunConfig cfg = base;
  cfg.model.flags = row.flags;
  cfg.model.variant = Variant::pst;
  cfg.train.epochs = cfg.ablate_epochs;
  cfg.train.early_stop_oacc = 0;
  std::vector<LabeledCloud> patches;
  for (const auto& c : train) {
    auto p = training_patches(c, cfg.patch);
    std::move(p.begin(), p.end(), std::back_inserter(patches));
  }
  Trainer t(cfg, std::move(patches));
  for (int e = 0; e < cfg.train.epochs; ++e) t.run_epoch();
  std::vector<int> pred, gt;
  for (const auto& c : test) {
    const auto out = infer_cloud(t.params(), cfg.model, cfg.patch, c);
    pred.insert(pred.end(), out.semantic.labels.begin(), out.semantic.labels.end());
    gt.insert(gt.end(), c.sem->begin(), c.sem->end());
  }
  const auto r = semantic_metrics(pred, gt, static_cast<int>(cfg.model.num_classes));
  row.miou = r.miou;
  row.oacc = r.oacc;
  return row;
}

inline int cmd_ablate(const CommandOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::string dir = detail::require(o.out, "--out");
  std::vector<LabeledCloud> train, test;
  if (!o.data.empty()) {
    const auto plan = detail::read_manifest(o.data, cfg);
    train = detail::load_ids(o.data, plan.train);
    test = detail::load_ids(o.data, plan.test.empty() ? plan.val : plan.test);
  } else {
    // in-memory plants, split like synth would
    std::vector<LabeledCloud> all;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cfg.synth_plants; ++i) {
      PlantSpec spec = cfg.plant;
      spec.seed = mix_seed(cfg.seed, i);
      all.push_back(generate_plant(spec, "plant_" + std::to_string(i)));
      ids.push_back(all.back().id);
    }
    DatasetSplit s;
    try {
      s = make_splits(ids, SplitMode::fixed, cfg.seed);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("ablate: ") + e.what());
    }
    for (auto i : s.train) train.push_back(all[i]);
    for (auto i : s.test) test.push_back(all[i]);
    if (cfg.train.max_plants && train.size() > cfg.train.max_plants) train.resize(cfg.train.max_plants);
  }
  if (train.empty() || test.empty()) throw CommandError("data", "ablation needs training and test clouds");
  detail::ensure_dir(dir);
  detail::write_text(fs::path(dir) / "run.cfg", config_text(cfg));

  std::ostringstream fcsv, table;
  fcsv << "features,miou,oacc\n";
  table << "features     mIoU    oAcc\n";
  for (auto row : feature_rows()) {
    row = run_feature_row(row, cfg, train, test);
    fcsv << '"' << row.name << "\"," << row.miou << ',' << row.oacc << '\n';
    char line[96];
    std::snprintf(line, sizeof line, "%-10s %6s  %6s\n", row.name.c_str(), pct(row.miou).c_str(), pct(row.oacc).c_str());
    table << line;
  }

  std::ostringstream vcsv;
  vcsv << "seed,l1_lw_gt_h,l1_lh_gt_w,l1_wh_gt_l,l1_cube,flat_closer\n";
  int wins = 0;
  for (int s = 1; s <= cfg.ablate_seeds; ++s) {
    const auto r = voxel_shape_row(cfg.plant, mix_seed(cfg.seed, 0xb0c5 + static_cast<std::uint64_t>(s)));
    wins += r.flat_closer();
    vcsv << s;
    for (double v : r.l1) vcsv << ',' << v;
    vcsv << ',' << (r.flat_closer() ? 1 : 0) << '\n';
  }
  table << "\nflat voxel closer than cube on " << wins << "/" << cfg.ablate_seeds << " seeds\n";
  detail::write_text(fs::path(dir) / "ablate_features.csv", fcsv.str());
  detail::write_text(fs::path(dir) / "ablate_voxels.csv", vcsv.str());
  detail::write_text(fs::path(dir) / "ablate.txt", table.str());
  out << table.str();
  return 0;
}

// ---- dispatch ----------------------------------------------------------------------------------

inline std::string quote_message(const std::string& msg) {
  std::string out = "\"";
  for (char c : msg) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

// Runs one subcommand; failures become a single "error: code=... msg=..." line.
inline int run_command(const std::string& name, const CommandOptions& o, std::ostream& out, std::ostream& err) {
  try {
    if (name == "synth") return cmd_synth(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "infer") return cmd_infer(o, out);
    if (name == "eval") return cmd_eval(o, out);
    if (name == "ablate") return cmd_ablate(o, out);
    throw UsageError("unknown subcommand '" + name + "'");
  } catch (const UsageError& e) {
    err << "error: code=usage msg=" << quote_message(e.what()) << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: code=config msg=" << quote_message(e.what()) << "\n";
    return 2;
  } catch (const CommandError& e) {
    err << "error: code=" << e.code() << " msg=" << quote_message(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: code=runtime msg=" << quote_message(e.what()) << "\n";
    return 1;
  }
}

}  // namespace podseg
