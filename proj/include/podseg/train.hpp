#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "podseg/config.hpp"
#include "podseg/metrics.hpp"
#include "podseg/model.hpp"
#include "podseg/optim.hpp"

namespace podseg {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Cubes of every configured tiling offset, small ones merged into neighbours.
// Points listed in `exclude` are removed from each cube first.
inline std::vector<LabeledCloud> training_patches(const LabeledCloud& cloud, const PatchSpec& spec,
                                                  const std::vector<std::uint8_t>* exclude = nullptr) {
  std::vector<LabeledCloud> out;
  for (std::size_t k = 0; k < spec.offsets.size(); ++k) {
    auto patches = crop_patches(cloud, spec, spec.offsets[k]);
    if (exclude) {
      for (auto& p : patches) std::erase_if(p.index, [&](std::int64_t i) { return (*exclude)[static_cast<std::size_t>(i)] != 0; });
      std::erase_if(patches, [](const Patch& p) { return p.index.empty(); });
    }
    patches = merge_small_patches(std::move(patches), spec.min_patch_points);
    for (std::size_t i = 0; i < patches.size(); ++i) {
      if (patches[i].index.size() < spec.min_patch_points) continue;
      auto sub = cloud.subset(patches[i].index);
      sub.id = cloud.id + "/t" + std::to_string(k) + "p" + std::to_string(i);
      out.push_back(std::move(sub));
    }
  }
  return out;
}

// Training-time copy of a patch rotated about the vertical axis through its
// center, mirrored in x half of the time.
inline LabeledCloud augment_patch(const LabeledCloud& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double a = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
  const double mirror = rng() & 1 ? -1.0 : 1.0;
  const auto b = bounds_of(p.coords);
  const double cx = 0.5 * (b.min[0] + b.max[0]), cy = 0.5 * (b.min[1] + b.max[1]);
  const double c = std::cos(a), s = std::sin(a);
  LabeledCloud out = p;
  for (auto& q : out.coords) {
    const double x = mirror * (q[0] - cx), y = q[1] - cy;
    q[0] = cx + c * x - s * y;
    q[1] = cy + s * x + c * y;
  }
  return out;
}

struct HoldoutSplit {
  std::vector<LabeledCloud> train;    // training cubes without the held-out points
  std::vector<LabeledCloud> heldout;  // whole held-out cubes of the first tiling
  std::vector<std::uint8_t> held;     // per point of the source cloud
};

// Withholds a share of the first tiling's cubes; their points appear in no
// training cube of any tiling.
inline HoldoutSplit holdout_patches(const LabeledCloud& cloud, const PatchSpec& spec, double frac, std::uint64_t seed) {
  if (frac < 0 || frac >= 1) throw std::invalid_argument("holdout fraction must lie in [0,1)");
  HoldoutSplit s;
  s.held.assign(cloud.size(), 0);
  auto first = merge_small_patches(crop_patches(cloud, spec, spec.offsets.front()), spec.min_patch_points);
  std::vector<std::size_t> order(first.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::llround(frac * static_cast<double>(first.size())));
  if (n_held >= first.size() && frac > 0) throw std::invalid_argument("holdout leaves no training cubes");
  order.resize(n_held);
  std::sort(order.begin(), order.end());
  for (auto k : order) {
    for (auto i : first[k].index) s.held[static_cast<std::size_t>(i)] = 1;
    auto sub = cloud.subset(first[k].index);
    sub.id = cloud.id + "/h" + std::to_string(k);
    s.heldout.push_back(std::move(sub));
  }
  s.train = training_patches(cloud, spec, n_held ? &s.held : nullptr);
  return s;
}

struct StepLosses {
  double total = 0, sem = 0, off_reg = 0, off_dir = 0, score = 0;
  double pst_grad_norm = 0;
  std::size_t proposals = 0;
};

struct EpochLog {
  int epoch = 0;
  std::size_t steps = 0;
  double lr = 0;  // at the last step
  StepLosses mean;
  double max_pst_grad_norm = 0;
  bool validated = false;
  double val_loss = 0, val_miou = 0;
  std::optional<double> train_oacc;
  bool improved = false;  // selection loss reached a new minimum
  bool stop = false;      // early-stop target met
};

struct EvalResult {
  double loss = 0;
  double oacc = 0;
  std::size_t points = 0;
};

class Trainer {
 public:
  // `val` are whole clouds; an empty set selects by training loss instead.
  Trainer(RunConfig cfg, std::vector<LabeledCloud> train, std::vector<LabeledCloud> val = {})
      : cfg_(std::move(cfg)), params_(cfg_.seed), train_(std::move(train)), val_(std::move(val)) {
    cfg_.validate();
    if (train_.empty()) throw std::invalid_argument("trainer: no training patches");
    for (const auto& p : train_)
      if (!p.has_sem() || (cfg_.model.has_instance_head() && !p.has_inst()))
        throw std::invalid_argument("trainer: training patch '" + p.id + "' lacks labels");
    init_model(params_, cfg_.model);
    opt_.weight_decay = cfg_.train.weight_decay;
    opt_.base_lr = cfg_.train.base_lr;
    opt_.max_lr = cfg_.train.max_lr;
    opt_.cycle_len = cfg_.train.cycle_len;
    for (const auto& c : val_) {
      auto ps = training_patches(c, single_tiling());
      val_patches_.insert(val_patches_.end(), std::make_move_iterator(ps.begin()), std::make_move_iterator(ps.end()));
    }
  }

  const RunConfig& config() const { return cfg_; }
  ModelParams<float>& params() { return params_; }
  const ModelParams<float>& params() const { return params_; }
  const OptimState<float>& optim() const { return opt_; }
  int epoch() const { return epoch_; }
  double best_loss() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  std::size_t num_train_patches() const { return train_.size(); }

  // Called after every optimizer step with (epoch, step count, lr used, losses).
  std::function<void(int, std::int64_t, double, const StepLosses&)> on_step;

  // One optimizer step on `batch` with the loss schedule of epoch `epoch`.
  StepLosses step(const std::vector<const LabeledCloud*>& batch, int epoch, std::uint64_t seed) {
    const auto sched = train_schedule(cfg_.model.variant, epoch, cfg_.model.inst);
    params_.set_frozen("pst", sched.freeze_pst);
    params_.zero_grad();
    Graph<float> g;
    nn::Context<float> ctx{g, params_, true};
    std::vector<LabeledCloud> moved;
    std::vector<const LabeledCloud*> inputs = batch;
    if (cfg_.train.augment) {
      moved.reserve(batch.size());
      for (std::size_t k = 0; k < batch.size(); ++k) {
        moved.push_back(augment_patch(*batch[k], mix_seed(seed, 0xa000 + k)));
        inputs[k] = &moved.back();
      }
    }
    const auto b = prepare_batch<float>(inputs, cfg_.model, Phase::training, seed);
    auto [loss, parts] = batch_loss(ctx, b, sched);
    g.backward(loss);
    double sq = 0;
    for (const auto& [name, p] : params_)
      if (name.rfind("pst.", 0) == 0)
        for (float v : p.grad.values()) sq += static_cast<double>(v) * static_cast<double>(v);
    parts.pst_grad_norm = std::sqrt(sq);
    adamw_step(params_, opt_, cyclic_lr(opt_.step, opt_));
    return parts;
  }

  EpochLog run_epoch() {
    const int epoch = epoch_ + 1;
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(cfg_.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    const std::size_t bs = cfg_.train.batch_size;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<const LabeledCloud*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(&train_[order[i]]);
      log.lr = cyclic_lr(opt_.step, opt_);
      const auto s = step(batch, epoch, mix_seed(cfg_.seed ^ 0x5eedULL, static_cast<std::uint64_t>(opt_.step)));
      if (on_step) on_step(epoch, opt_.step, log.lr, s);
      log.mean.total += s.total;
      log.mean.sem += s.sem;
      log.mean.off_reg += s.off_reg;
      log.mean.off_dir += s.off_dir;
      log.mean.score += s.score;
      log.mean.proposals += s.proposals;
      log.max_pst_grad_norm = std::max(log.max_pst_grad_norm, s.pst_grad_norm);
      ++log.steps;
    }
    const double n = static_cast<double>(log.steps);
    for (double* v : {&log.mean.total, &log.mean.sem, &log.mean.off_reg, &log.mean.off_dir, &log.mean.score}) *v /= n;
    epoch_ = epoch;

    const bool due = epoch % cfg_.train.val_every == 0 || epoch == cfg_.train.epochs;
    if (due && !val_.empty()) {
      log.validated = true;
      log.val_loss = evaluate(val_patches_, epoch).loss;
      log.val_miou = validation_miou();
      if (log.val_loss < best_) {
        best_ = log.val_loss;
        best_epoch_ = epoch;
        log.improved = true;
      }
    } else if (val_.empty() && log.mean.total < best_) {
      best_ = log.mean.total;
      best_epoch_ = epoch;
      log.improved = true;
    }
    if (cfg_.train.early_stop_oacc > 0 && due) {
      log.train_oacc = evaluate(train_, epoch).oacc;
      log.stop = *log.train_oacc >= cfg_.train.early_stop_oacc;
    }
    return log;
  }

  // Eval-mode losses of the epoch's schedule and point accuracy over `patches`.
  EvalResult evaluate(const std::vector<LabeledCloud>& patches, int epoch) {
    auto sched = train_schedule(cfg_.model.variant, epoch, cfg_.model.inst);
    EvalResult r;
    std::size_t correct = 0, batches = 0;
    const std::size_t bs = cfg_.train.batch_size;
    for (std::size_t start = 0; start < patches.size(); start += bs) {
      std::vector<const LabeledCloud*> batch;
      for (std::size_t i = start; i < std::min(patches.size(), start + bs); ++i) batch.push_back(&patches[i]);
      Graph<float> g;
      nn::Context<float> ctx{g, params_, false};
      const auto b = prepare_batch<float>(batch, cfg_.model, Phase::inference, 0);
      auto [loss, parts, out] = batch_loss_with_output(ctx, b, sched);
      r.loss += parts.total;
      ++batches;
      const auto& z = out.logits.value();
      for (std::size_t i = 0; i < z.rows(); ++i) correct += argmax_row(z.data() + i * z.cols(), z.cols()) == (*b.sem)[i];
      r.points += z.rows();
    }
    r.loss /= static_cast<double>(std::max<std::size_t>(batches, 1));
    r.oacc = r.points ? static_cast<double>(correct) / static_cast<double>(r.points) : 0.0;
    return r;
  }

  double validation_miou() {
    std::vector<int> pred, gt;
    for (const auto& c : val_) {
      auto out = infer_cloud(params_, cfg_.model, cfg_.patch, c);
      pred.insert(pred.end(), out.semantic.labels.begin(), out.semantic.labels.end());
      gt.insert(gt.end(), c.sem->begin(), c.sem->end());
    }
    return semantic_metrics(pred, gt, static_cast<int>(cfg_.model.num_classes)).miou;
  }

  // Parameters, optimizer moments and trainer counters.
  std::vector<NamedTensor> state_tensors() const {
    auto out = to_named(params_, "model.");
    auto o = optim_to_named(opt_);
    out.insert(out.end(), o.begin(), o.end());
    Tensor<float> st(1, 5);
    const auto best_bits = std::bit_cast<std::uint64_t>(best_);
    const std::uint32_t words[5] = {static_cast<std::uint32_t>(epoch_), static_cast<std::uint32_t>(best_bits),
                                    static_cast<std::uint32_t>(best_bits >> 32), static_cast<std::uint32_t>(best_epoch_),
                                    static_cast<std::uint32_t>(opt_.step)};
    for (int i = 0; i < 5; ++i) st[static_cast<std::size_t>(i)] = std::bit_cast<float>(words[i]);
    out.push_back({"trainer.state", st});
    return out;
  }

  void save(const std::string& path) const { write_checkpoint(path, state_tensors()); }

  void load(const std::string& path) { restore(read_checkpoint(path)); }

  void restore(const std::vector<NamedTensor>& tensors) {
    std::vector<NamedTensor> model, optim;
    const NamedTensor* st = nullptr;
    for (const auto& t : tensors) {
      if (t.name.rfind("model.", 0) == 0) model.push_back(t);
      else if (t.name.rfind("optim.", 0) == 0) optim.push_back(t);
      else if (t.name == "trainer.state") st = &t;
    }
    if (!st || st->value.size() != 5) throw CheckpointError("checkpoint lacks trainer state");
    load_named(params_, model, true, "model.");
    opt_.first_moment.clear();
    opt_.second_moment.clear();
    optim_from_named(opt_, optim);
    std::uint32_t w[5];
    for (int i = 0; i < 5; ++i) w[i] = std::bit_cast<std::uint32_t>(st->value[static_cast<std::size_t>(i)]);
    epoch_ = static_cast<int>(w[0]);
    best_ = std::bit_cast<double>(static_cast<std::uint64_t>(w[1]) | (static_cast<std::uint64_t>(w[2]) << 32));
    best_epoch_ = static_cast<int>(w[3]);
    opt_.step = w[4];  // exact even past float's integer range
  }

 private:
  PatchSpec single_tiling() const {
    PatchSpec s = cfg_.patch;
    s.offsets = {s.offsets.front()};
    return s;
  }

  std::pair<Var<float>, StepLosses> batch_loss(nn::Context<float>& ctx, const PreparedBatch<float>& b,
                                               const TrainSchedule& sched) {
    auto [loss, parts, out] = batch_loss_with_output(ctx, b, sched);
    return {loss, parts};
  }

  std::tuple<Var<float>, StepLosses, ModelOutput<float>> batch_loss_with_output(nn::Context<float>& ctx,
                                                                                 const PreparedBatch<float>& b,
                                                                                 const TrainSchedule& sched) {
    auto& g = ctx.graph;
    auto out = forward(ctx, b, cfg_.model);
    StepLosses parts;
    std::vector<Var<float>> terms;
    // the semantic loss is always computed for logging; only scheduled terms are summed
    const auto ce = ag::cross_entropy_logits(out.logits, b.sem);
    parts.sem = ce.value()[0];
    if (sched.sem) terms.push_back(ce);
    if (out.offsets && (sched.offset || sched.score)) {
      auto [tgt, mask] = centroid_targets(b.coords, b.inst);
      auto targets = std::make_shared<const Tensor<float>>(tgt.template cast<float>());
      auto m = std::make_shared<const std::vector<std::uint8_t>>(std::move(mask));
      if (sched.offset) {
        auto ol = offset_losses(*out.offsets, targets, m);
        parts.off_reg = ol.reg.value()[0];
        parts.off_dir = ol.dir.value()[0];
        terms.push_back(ol.reg);
        terms.push_back(ol.dir);
      }
      if (sched.score) {
        const auto& z = out.logits.value();
        std::vector<int> pred(z.rows());
        for (std::size_t i = 0; i < z.rows(); ++i) pred[i] = argmax_row(z.data() + i * z.cols(), z.cols());
        const auto os = out.offsets->value().template cast<double>();
        const auto shifted = shifted_coords(b.coords, os);
        auto props = batch_proposals(b.point_base, b.coords, shifted, pred, cfg_.model.inst);
        parts.proposals = props.size();
        if (!props.empty()) {
          auto logits = score_logits(ctx, out.g, b.coords, props, "ins.score");
          auto sl = score_loss(logits, props, b.inst, cfg_.model.inst);
          parts.score = sl.value()[0];
          terms.push_back(sl);
        }
      }
    }
    Var<float> total = terms.empty() ? g.constant(Tensor<float>(1, 1)) : terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
    parts.total = total.value()[0];
    return {total, parts, out};
  }

  RunConfig cfg_;
  ModelParams<float> params_;
  OptimState<float> opt_;
  std::vector<LabeledCloud> train_, val_, val_patches_;
  int epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
};

}  // namespace podseg
