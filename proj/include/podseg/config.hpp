#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/dataset.hpp"
#include "podseg/model.hpp"

namespace podseg {

struct TrainSettings {
  int epochs = 300;
  std::size_t batch_size = 4;
  int val_every = 2;
  double weight_decay = 0.05;
  double base_lr = 1e-5;
  double max_lr = 1e-3;
  std::int64_t cycle_len = 200;  // steps
  double early_stop_oacc = 0.0;  // stop once training oAcc reaches this (0: never)
  double holdout_frac = 0.0;     // share of offset-0 patches withheld from training
  std::size_t max_plants = 0;    // 0: all training plants
  std::size_t fold = 0;          // sixfold splits: test fold; the next fold validates
  bool augment = false;          // random z-rotation and x-mirror of training patches
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::size_t synth_plants = 12;
  SplitMode split = SplitMode::fixed;
  PlantSpec plant{};
  ModelConfig model{};
  PatchSpec patch{};
  TrainSettings train{};
  int ablate_epochs = 4;
  int ablate_seeds = 10;

  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace cfgio {

inline std::string fmt(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double to_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

template <typename I>
I to_int(const std::string& key, const std::string& s) {
  I v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

inline bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Entry {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename I>
Entry int_entry(const std::string& key, I& v) {
  return {[&v] { return std::to_string(v); }, [&v, key](const std::string& s) { v = to_int<I>(key, s); }};
}

inline Entry real_entry(const std::string& key, double& v) {
  return {[&v] { return fmt(v); }, [&v, key](const std::string& s) { v = to_double(key, s); }};
}

inline Entry bool_entry(const std::string& key, bool& v) {
  return {[&v] { return std::string(v ? "true" : "false"); }, [&v, key](const std::string& s) { v = to_bool(key, s); }};
}

inline Entry string_entry(std::string& v) {
  return {[&v] { return v; }, [&v](const std::string& s) { v = s; }};
}

template <std::size_t N, typename E>
Entry array_entry(const std::string& key, std::array<E, N>& v) {
  return {[&v] {
            std::string out;
            for (std::size_t i = 0; i < N; ++i) out += (i ? "," : "") + (std::is_floating_point_v<E> ? fmt(v[i]) : std::to_string(v[i]));
            return out;
          },
          [&v, key](const std::string& s) {
            auto parts = split(s);
            if (parts.size() != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
            for (std::size_t i = 0; i < N; ++i) {
              if constexpr (std::is_floating_point_v<E>) v[i] = to_double(key, trim(parts[i]));
              else v[i] = to_int<E>(key, trim(parts[i]));
            }
          }};
}

inline Entry list_entry(const std::string& key, std::vector<double>& v) {
  return {[&v] {
            std::string out;
            for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
            return out;
          },
          [&v, key](const std::string& s) {
            v.clear();
            for (const auto& p : split(s)) v.push_back(to_double(key, trim(p)));
          }};
}

// Every key of the config bound to its field, in output order.
inline std::vector<std::pair<std::string, Entry>> registry(RunConfig& c) {
  std::vector<std::pair<std::string, Entry>> r;
  auto add = [&](const std::string& k, Entry e) { r.emplace_back(k, std::move(e)); };
  add("seed", int_entry("seed", c.seed));
  add("data_dir", string_entry(c.data_dir));
  add("out_dir", string_entry(c.out_dir));
  add("synth.plants", int_entry("synth.plants", c.synth_plants));
  add("synth.split", {[&c] { return std::string(c.split == SplitMode::fixed ? "fixed" : "sixfold"); },
                      [&c](const std::string& s) {
                        if (s == "fixed") c.split = SplitMode::fixed;
                        else if (s == "sixfold") c.split = SplitMode::sixfold;
                        else throw ConfigError("synth.split: expected fixed or sixfold");
                      }});
  auto& p = c.plant;
  add("plant.tillers_min", int_entry("plant.tillers_min", p.tillers_min));
  add("plant.tillers_max", int_entry("plant.tillers_max", p.tillers_max));
  add("plant.siliques_min", int_entry("plant.siliques_min", p.siliques_min));
  add("plant.siliques_max", int_entry("plant.siliques_max", p.siliques_max));
  add("plant.silique_length_min", real_entry("plant.silique_length_min", p.silique_length_min));
  add("plant.silique_length_max", real_entry("plant.silique_length_max", p.silique_length_max));
  add("plant.silique_radius_min", real_entry("plant.silique_radius_min", p.silique_radius_min));
  add("plant.silique_radius_max", real_entry("plant.silique_radius_max", p.silique_radius_max));
  add("plant.stem_height", real_entry("plant.stem_height", p.stem_height));
  add("plant.stem_radius", real_entry("plant.stem_radius", p.stem_radius));
  add("plant.tiller_radius", real_entry("plant.tiller_radius", p.tiller_radius));
  add("plant.tiller_length_min", real_entry("plant.tiller_length_min", p.tiller_length_min));
  add("plant.tiller_length_max", real_entry("plant.tiller_length_max", p.tiller_length_max));
  add("plant.spacing", real_entry("plant.spacing", p.spacing));
  add("plant.jitter", real_entry("plant.jitter", p.jitter));
  add("plant.min_centroid_gap", real_entry("plant.min_centroid_gap", p.min_centroid_gap));
  add("plant.min_surface_gap", real_entry("plant.min_surface_gap", p.min_surface_gap));
  auto& m = c.model;
  add("model.voxel_size", array_entry("model.voxel_size", m.voxel_size));
  add("model.use_cluster_centroid", bool_entry("model.use_cluster_centroid", m.flags.use_cluster_centroid));
  add("model.use_voxel_center", bool_entry("model.use_voxel_center", m.flags.use_voxel_center));
  add("model.use_l2_norm", bool_entry("model.use_l2_norm", m.flags.use_l2_norm));
  add("model.voxel_offset", {[&m] { return std::string(m.offset_mode == VoxelOffsetMode::center ? "center" : "index"); },
                             [&m](const std::string& s) {
                               if (s == "center") m.offset_mode = VoxelOffsetMode::center;
                               else if (s == "index") m.offset_mode = VoxelOffsetMode::index;
                               else throw ConfigError("model.voxel_offset: expected center or index");
                             }});
  add("model.dvfe_mid", int_entry("model.dvfe_mid", m.dvfe_mid));
  add("model.dvfe_out", int_entry("model.dvfe_out", m.dvfe_out));
  add("model.window", array_entry("model.window", m.window.window_size));
  add("model.blocks", int_entry("model.blocks", m.window.num_blocks));
  add("model.channels", int_entry("model.channels", m.window.channels));
  add("model.heads", int_entry("model.heads", m.window.heads));
  add("model.mlp_hidden", int_entry("model.mlp_hidden", m.window.mlp_hidden));
  add("model.shift_sign", int_entry("model.shift_sign", m.window.shift_sign));
  add("model.point_hidden", int_entry("model.point_hidden", m.point_hidden));
  add("model.point_out", int_entry("model.point_out", m.point_out));
  add("model.num_classes", int_entry("model.num_classes", m.num_classes));
  add("model.input_extent", real_entry("model.input_extent", m.input_extent));
  add("variant", {[&m] { return to_string(m.variant); },
                  [&m](const std::string& s) {
                    try {
                      m.variant = parse_variant(s);
                    } catch (const std::invalid_argument& e) {
                      throw ConfigError(std::string("variant: ") + e.what());
                    }
                  }});
  auto& in = m.inst;
  add("inst.r", real_entry("inst.r", in.r));
  add("inst.min_cluster_points", int_entry("inst.min_cluster_points", in.min_cluster_points));
  add("inst.nms_iou", real_entry("inst.nms_iou", in.nms_iou));
  add("inst.prep_epoch", int_entry("inst.prep_epoch", in.prep_epoch));
  add("inst.score_channels", int_entry("inst.score_channels", in.score_channels));
  add("inst.offset_hidden", int_entry("inst.offset_hidden", in.offset_hidden));
  add("inst.iou_low", real_entry("inst.iou_low", in.iou_low));
  add("inst.iou_high", real_entry("inst.iou_high", in.iou_high));
  add("patch.len", real_entry("patch.len", c.patch.patch_len));
  add("patch.offsets", list_entry("patch.offsets", c.patch.offsets));
  add("patch.stride", real_entry("patch.stride", c.patch.stride));
  add("patch.min_points", int_entry("patch.min_points", c.patch.min_patch_points));
  auto& t = c.train;
  add("train.epochs", int_entry("train.epochs", t.epochs));
  add("train.batch_size", int_entry("train.batch_size", t.batch_size));
  add("train.val_every", int_entry("train.val_every", t.val_every));
  add("train.weight_decay", real_entry("train.weight_decay", t.weight_decay));
  add("train.base_lr", real_entry("train.base_lr", t.base_lr));
  add("train.max_lr", real_entry("train.max_lr", t.max_lr));
  add("train.cycle_len", int_entry("train.cycle_len", t.cycle_len));
  add("train.early_stop_oacc", real_entry("train.early_stop_oacc", t.early_stop_oacc));
  add("train.holdout_frac", real_entry("train.holdout_frac", t.holdout_frac));
  add("train.max_plants", int_entry("train.max_plants", t.max_plants));
  add("train.fold", int_entry("train.fold", t.fold));
  add("train.augment", bool_entry("train.augment", t.augment));
  add("ablate.epochs", int_entry("ablate.epochs", c.ablate_epochs));
  add("ablate.seeds", int_entry("ablate.seeds", c.ablate_seeds));
  return r;
}

}  // namespace cfgio

inline void RunConfig::validate() const {
  if (synth_plants == 0) throw ConfigError("synth.plants must be >= 1");
  try {
    plant.validate();
    model.validate();
    patch.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.val_every < 1) throw ConfigError("train.val_every must be >= 1");
  if (!(train.base_lr > 0) || train.max_lr < train.base_lr) throw ConfigError("need 0 < train.base_lr <= train.max_lr");
  if (train.cycle_len < 2) throw ConfigError("train.cycle_len must be >= 2");
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (train.holdout_frac < 0 || train.holdout_frac >= 1) throw ConfigError("train.holdout_frac must lie in [0,1)");
  if (train.fold >= 6) throw ConfigError("train.fold must lie in 0..5");
  if (ablate_epochs < 1 || ablate_seeds < 1) throw ConfigError("ablate.epochs and ablate.seeds must be >= 1");
}

// Applies "key=value" lines; '#' starts a comment. Unknown keys are errors.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source = "<config>") {
  auto reg = cfgio::registry(cfg);
  std::map<std::string, cfgio::Entry*> by_key;
  for (auto& [k, e] : reg) by_key[k] = &e;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = cfgio::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    const std::string key = cfgio::trim(line.substr(0, eq)), value = cfgio::trim(line.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + "unknown key '" + key + "'");
    try {
      it->second->set(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str(), path);
  return cfg;
}

// The effective config, one key per line; feeding it back reproduces `cfg`.
inline std::string config_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string out;
  for (auto& [k, e] : cfgio::registry(copy)) out += k + "=" + e.get() + "\n";
  return out;
}

}  // namespace podseg
