// The incremental training loop: per-stage SGD on new data plus exemplars,
// augmented old-class features in the classification loss, exemplar
// herding, class-balanced classifier fine-tuning and evaluation.
#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccfa/augment.hpp"
#include "ccfa/data.hpp"
#include "ccfa/eval.hpp"
#include "ccfa/losses.hpp"
#include "ccfa/memory.hpp"
#include "ccfa/model.hpp"
#include "ccfa/numerics.hpp"

namespace ccfa {

struct LrSchedule {
  double initial = 0.1;
  std::vector<std::size_t> milestones{25, 35};
  double factor = 0.1;

  double at(std::size_t epoch) const {
    double lr = initial;
    for (std::size_t m : milestones)
      if (epoch >= m) lr *= factor;
    return lr;
  }
};

enum class Augmentation { none, ccfa, gaussian_noise };

inline const char* to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::ccfa: return "ccfa";
    case Augmentation::gaussian_noise: return "gaussian_noise";
  }
  return "?";
}

struct StageConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  LrSchedule lr;
  double momentum = 0.9;
  LossConfig loss;
  Augmentation augmentation = Augmentation::none;
  AttackConfig attack;
  double noise_sigma = 1.0;  // gaussian_noise augmentation
  std::size_t finetune_epochs = 10;
  LrSchedule finetune_lr{0.05, {}, 0.1};
  std::size_t finetune_batch_size = 32;
  bool finetune_attack_current = false;  // attack the pre-fine-tune model instead of the previous stage
  bool oversample_memory = false;         // draw exemplars as often as a mean new-task class
  bool trace_attacks = false;             // record per-step attack loss for observers

  void validate() const {
    if (batch_size < 1 || finetune_batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
    loss.validate();
    if (augmentation == Augmentation::ccfa) attack.validate();
  }
};

struct ModelConfig {
  ExtractorKind extractor = ExtractorKind::identity;
  std::vector<std::size_t> hidden;  // mlp hidden widths
  std::size_t feature_dim = 0;      // 0: same as input
  ClassifierKind classifier = ClassifierKind::cosine;
  double eta = 1.0;
  std::size_t proxies = 1;
  double nca_margin = 0.0;
};

// ---------------------------------------------------------------------------
// Optimiser

struct Velocity {
  std::vector<DenseLayer> extractor;
  Matrix classifier;
};

namespace detail {
inline void momentum_update(Matrix& param, Matrix& vel, const Matrix& grad, double lr, double mu) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols())
    throw DimensionError("sgd_step: gradient " + grad.shape() + " vs parameter " + param.shape());
  if (vel.rows() != param.rows() || vel.cols() != param.cols()) vel = Matrix(param.rows(), param.cols());
  for (std::size_t i = 0; i < param.size(); ++i) {
    vel.data()[i] = mu * vel.data()[i] + grad.data()[i];
    param.data()[i] -= lr * vel.data()[i];
  }
}
inline void momentum_update(std::vector<double>& param, std::vector<double>& vel,
                            const std::vector<double>& grad, double lr, double mu) {
  if (grad.size() != param.size()) throw DimensionError("sgd_step: bias gradient length mismatch");
  if (vel.size() != param.size()) vel.assign(param.size(), 0.0);
  for (std::size_t i = 0; i < param.size(); ++i) {
    vel[i] = mu * vel[i] + grad[i];
    param[i] -= lr * vel[i];
  }
}
}  // namespace detail

/// v <- momentum * v + g; theta <- theta - lr * v. Velocity buffers are
/// (re)initialised to zero when their shape does not match the parameter.
inline void sgd_step(Model& model, const ModelGrads& grads, double lr, double momentum,
                     Velocity& vel, bool update_extractor = true) {
  detail::momentum_update(model.classifier.weights(), vel.classifier, grads.classifier, lr, momentum);
  if (!update_extractor) return;
  auto& layers = model.extractor.layers();
  if (grads.extractor.size() != layers.size()) throw DimensionError("sgd_step: extractor layer count mismatch");
  vel.extractor.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    detail::momentum_update(layers[l].weight, vel.extractor[l].weight, grads.extractor[l].weight, lr, momentum);
    detail::momentum_update(layers[l].bias, vel.extractor[l].bias, grads.extractor[l].bias, lr, momentum);
  }
}

// ---------------------------------------------------------------------------
// Run state

struct StageLog {
  std::vector<double> train_epoch_loss;
  std::vector<double> finetune_epoch_loss;
};

struct RunState {
  Model model;
  std::optional<ModelSnapshot> previous;  // frozen model from the end of the last stage
  MemoryBuffer memory;
  std::size_t completed = 0;  // number of finished stages
  std::vector<MetricsRecord> records;
  std::vector<StageLog> logs;
};

enum class Phase { train, finetune };

struct StepInfo {
  Phase phase = Phase::train;
  std::size_t stage = 0;  // 1-based
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::size_t batch_rows = 0;
  std::size_t cls_rows = 0;
  std::size_t alg_rows = 0;
  const Labels* labels = nullptr;
  const AugmentedBatch* augmented = nullptr;
  double loss = 0.0;
  const std::vector<AttackLog>* attack_logs = nullptr;  // only with StageConfig::trace_attacks
};

using StepObserver = std::function<void(const StepInfo&)>;

namespace detail {

struct StepContext {
  const TaskStream* stream;
  const StageConfig* cfg;
  const ModelSnapshot* attack_snapshot;  // null: no augmentation
  const ModelSnapshot* distill_snapshot; // null: no distillation
  const ImportanceVector* importance;
  std::size_t n_old;
  double stage_weight;
  Phase phase;
  std::size_t stage;
};

inline double run_epoch(Model& model, Velocity& vel, const std::vector<std::size_t>& order,
                        std::size_t batch_size, double lr, const StepContext& ctx, Rng epoch_rng,
                        std::size_t epoch, const StepObserver& observer) {
  const bool finetune = ctx.phase == Phase::finetune;
  LossConfig loss_cfg = ctx.cfg->loss;
  if (finetune || ctx.distill_snapshot == nullptr) loss_cfg.alg = AlgKind::none;
  double sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0, bi = 0; start < order.size(); start += batch_size, ++bi) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
    const Matrix x = ctx.stream->train.x.gather_rows(idx);
    Labels y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = ctx.stream->train.y[idx[i]];

    const ExtractorTrace trace = model.extractor.forward_trace(x);
    AugmentedBatch aug;
    std::vector<AttackLog> attack_logs;
    if (ctx.attack_snapshot != nullptr) {
      Rng aug_rng = epoch_rng.derive("augment").derive(bi);
      if (ctx.cfg->augmentation == Augmentation::ccfa) {
        aug = augment(trace.out.values, y, model.classifier, ctx.attack_snapshot, ctx.cfg->attack, aug_rng,
                      ctx.cfg->trace_attacks ? &attack_logs : nullptr);
      } else if (ctx.cfg->augmentation == Augmentation::gaussian_noise) {
        aug = gaussian_noise_augment(trace.out.values, y, ctx.attack_snapshot, aug_rng,
                                     ctx.cfg->attack.multiplier, ctx.cfg->noise_sigma);
      }
    }
    Matrix old_features;
    if (loss_cfg.alg != AlgKind::none) old_features = ctx.distill_snapshot->extractor().forward(x);

    BatchTerms terms;
    terms.trace = &trace;
    terms.labels = &y;
    terms.aug_features = aug.empty() ? nullptr : &aug.features;
    terms.aug_labels = aug.empty() ? nullptr : &aug.labels;
    terms.old_features = loss_cfg.alg != AlgKind::none ? &old_features : nullptr;
    terms.importance = ctx.importance;
    terms.n_old = ctx.n_old;
    terms.stage_weight = ctx.stage_weight;
    const LossBreakdown lb = total_loss(loss_cfg, model, terms);
    if (!std::isfinite(lb.total)) throw NumericError("training loss became non-finite");
    sgd_step(model, lb.grads, lr, ctx.cfg->momentum, vel, !finetune);
    sum += lb.total;
    ++batches;
    if (observer) {
      StepInfo info{ctx.phase, ctx.stage, epoch, bi, idx.size(), lb.cls_rows, lb.alg_rows, &y, &aug, lb.total,
                    ctx.cfg->trace_attacks ? &attack_logs : nullptr};
      observer(info);
    }
  }
  return batches == 0 ? 0.0 : sum / static_cast<double>(batches);
}

}  // namespace detail

/// Creates the stage-1 model for a stream.
inline Model initial_model(const ModelConfig& mc, std::size_t input_dim, std::size_t classes, Rng rng) {
  Model m;
  const std::size_t fd = mc.feature_dim == 0 ? input_dim : mc.feature_dim;
  Rng erng = rng.derive("extractor");
  switch (mc.extractor) {
    case ExtractorKind::identity: m.extractor = FeatureExtractor::identity(input_dim); break;
    case ExtractorKind::linear: m.extractor = FeatureExtractor::linear(input_dim, fd, erng); break;
    case ExtractorKind::mlp: m.extractor = FeatureExtractor::mlp(input_dim, mc.hidden, fd, erng); break;
  }
  Rng crng = rng.derive("classifier");
  const std::size_t d = m.extractor.output_dim();
  m.classifier = mc.classifier == ClassifierKind::cosine
                     ? Classifier::cosine(classes, d, mc.eta, crng)
                     : Classifier::lsc(classes, d, mc.proxies, mc.eta, mc.nca_margin, crng);
  return m;
}

/// Trains stage `k` (0-based task index) on the task's data plus exemplars.
/// From the second stage on, the classifier is first expanded to the task's
/// classes, and the previous-stage snapshot drives augmentation and
/// distillation.
inline RunState train_stage(RunState state, const TaskStream& stream, std::size_t k,
                            const StageConfig& cfg, Rng rng, const StepObserver& observer = {}) {
  cfg.validate();
  if (k >= stream.num_tasks()) throw std::out_of_range("train_stage: no such task");
  if (k > 0 && !state.previous) throw std::logic_error("train_stage: stage >= 2 needs the previous snapshot");
  const Task& task = stream.tasks[k];
  const std::size_t n_old = k == 0 ? 0 : stream.classes_through(k - 1);

  if (state.model.classifier.num_classes() < stream.classes_through(k)) {
    Rng erng = rng.derive("expand");
    state.model.classifier = expand_classifier(state.model.classifier, task.classes, erng);
  }

  std::vector<std::size_t> pool = task.train;
  std::vector<std::size_t> mem = k > 0 ? state.memory.all_indices() : std::vector<std::size_t>{};
  if (!cfg.oversample_memory) pool.insert(pool.end(), mem.begin(), mem.end());

  std::optional<ImportanceVector> importance;
  if (k > 0 && cfg.loss.alg == AlgKind::afc_disc) {
    if (mem.empty()) throw std::logic_error("train_stage: importance estimation needs exemplars");
    Labels my(mem.size());
    for (std::size_t i = 0; i < mem.size(); ++i) my[i] = stream.train.y[mem[i]];
    importance = afc_importance(*state.previous, stream.train.x.gather_rows(mem), my);
  }

  const ModelSnapshot* prev = k > 0 ? &*state.previous : nullptr;
  detail::StepContext ctx{&stream,
                          &cfg,
                          cfg.augmentation == Augmentation::none ? nullptr : prev,
                          prev,
                          importance ? &*importance : nullptr,
                          n_old,
                          afc_stage_weight(stream.classes_through(k), task.classes.size()),
                          Phase::train,
                          k + 1};

  Velocity vel;
  StageLog log;
  Rng shuffle_rng = rng.derive("shuffle");
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order = pool;
    if (cfg.oversample_memory && !mem.empty()) {
      // Each exemplar class appears as often as an average new class.
      const std::size_t per_class = task.classes.empty() ? 1 : task.train.size() / task.classes.size();
      const std::size_t reps = std::max<std::size_t>(1, per_class / std::max<std::size_t>(1, state.memory.budget));
      for (std::size_t r = 0; r < reps; ++r) order.insert(order.end(), mem.begin(), mem.end());
    }
    Rng er = shuffle_rng.derive(e);
    er.shuffle(order);
    log.train_epoch_loss.push_back(detail::run_epoch(state.model, vel, order, cfg.batch_size, cfg.lr.at(e),
                                                     ctx, rng.derive("epoch").derive(e), e, observer));
  }
  state.logs.push_back(std::move(log));
  return state;
}

/// Class-balanced epoch order over the buffer: every class contributes as
/// many rows as the largest class, cycling through its shuffled exemplars.
inline std::vector<std::size_t> balanced_order(const MemoryBuffer& buffer, Rng& rng) {
  std::size_t most = 0;
  for (const auto& [c, idx] : buffer.exemplars) most = std::max(most, idx.size());
  std::vector<std::size_t> order;
  for (const auto& [c, idx] : buffer.exemplars) {
    if (idx.empty()) continue;
    std::vector<std::size_t> own = idx;
    rng.shuffle(own);
    for (std::size_t i = 0; i < most; ++i) order.push_back(own[i % own.size()]);
  }
  rng.shuffle(order);
  return order;
}

/// Trains only the classifier on the class-balanced exemplar buffer, with
/// augmentation active from the second stage on. Extractor parameters are
/// left untouched.
inline RunState finetune_classifier(RunState state, const TaskStream& stream, std::size_t k,
                                    const StageConfig& cfg, Rng rng, const StepObserver& observer = {}) {
  if (cfg.finetune_epochs == 0) return state;
  if (state.memory.empty()) throw std::logic_error("finetune_classifier: empty memory buffer");
  std::optional<ModelSnapshot> current;
  const ModelSnapshot* attack = nullptr;
  if (k > 0 && cfg.augmentation != Augmentation::none) {
    if (cfg.finetune_attack_current) {
      // Frozen copy of the pre-fine-tune model, restricted to its old classes.
      Model m = state.model;
      const std::size_t n_old = stream.classes_through(k - 1) * m.classifier.proxies_per_class();
      Matrix w(n_old, m.classifier.dim());
      std::copy_n(m.classifier.weights().data().begin(), w.size(), w.data().begin());
      m.classifier.weights() = w;
      current.emplace(k + 1, std::move(m));
      attack = &*current;
    } else {
      if (!state.previous) throw std::logic_error("finetune_classifier: missing previous snapshot");
      attack = &*state.previous;
    }
  }
  detail::StepContext ctx{&stream, &cfg, attack, nullptr, nullptr,
                          k == 0 ? 0 : stream.classes_through(k - 1), 1.0, Phase::finetune, k + 1};
  Velocity vel;
  Rng order_rng = rng.derive("balanced");
  if (state.logs.empty()) state.logs.emplace_back();
  for (std::size_t e = 0; e < cfg.finetune_epochs; ++e) {
    Rng er = order_rng.derive(e);
    const auto order = balanced_order(state.memory, er);
    state.logs.back().finetune_epoch_loss.push_back(
        detail::run_epoch(state.model, vel, order, cfg.finetune_batch_size, cfg.finetune_lr.at(e), ctx,
                          rng.derive("epoch").derive(e), e, observer));
  }
  return state;
}

struct ExperimentSettings {
  ModelConfig model;
  StageConfig stage;
  std::size_t memory_budget = 20;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// Points captured at the start of stage 2 for plotting: exemplar features,
/// augmented features of the first minibatch, and first-task training data.
struct PointDump {
  Matrix memory;
  Labels memory_labels;
  Matrix augmented;
  Labels augmented_labels;
  Matrix traindata;
  Labels traindata_labels;
};

struct ExperimentResult {
  RunState state;
  Summary summary;
  std::optional<PointDump> points;
  std::vector<double> wall_seconds;
};

using StageCallback = std::function<void(const RunState&)>;

/// Runs every remaining stage of the stream: train, herd exemplars, fine-tune
/// the classifier, snapshot and evaluate on all classes seen so far. Resumes
/// from `resume` when given; per-stage randomness depends only on
/// (seed, stage), so a resumed run matches an uninterrupted one.
inline ExperimentResult run_experiment(const TaskStream& stream, const ExperimentSettings& s,
                                       const StepObserver& observer = {},
                                       std::optional<RunState> resume = std::nullopt,
                                       const StageCallback& on_stage = {}) {
  stream.validate();
  if (stream.num_tasks() == 0) throw std::invalid_argument("run_experiment: empty stream");
  const Rng root(s.seed);
  ExperimentResult res;
  RunState state;
  if (resume) {
    state = std::move(*resume);
  } else {
    state.model = initial_model(s.model, stream.dim(), stream.tasks[0].classes.size(), root.derive("init"));
    state.memory.budget = s.memory_budget;
  }

  std::optional<PointDump> pending;  // filled just before stage 2 trains
  const StepObserver obs = [&](const StepInfo& info) {
    if (pending && info.stage == 2 && info.phase == Phase::train) {
      if (info.augmented != nullptr) {
        pending->augmented = info.augmented->features;
        pending->augmented_labels = info.augmented->labels;
      }
      res.points = std::move(pending);
      pending.reset();
    }
    if (observer) observer(info);
  };

  for (std::size_t k = state.completed; k < stream.num_tasks(); ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    const Rng stage_rng = root.derive("stage").derive(k);
    if (k == 1) {
      PointDump pd;
      const auto mem = state.memory.all_indices();
      pd.memory = state.previous->extractor().forward(stream.train.x.gather_rows(mem));
      for (std::size_t i : mem) pd.memory_labels.push_back(stream.train.y[i]);
      std::vector<std::size_t> tr = stream.tasks[0].train;
      if (tr.size() > 1000) tr.resize(1000);
      pd.traindata = state.previous->extractor().forward(stream.train.x.gather_rows(tr));
      for (std::size_t i : tr) pd.traindata_labels.push_back(stream.train.y[i]);
      pending = std::move(pd);
    }
    state = train_stage(std::move(state), stream, k, s.stage, stage_rng.derive("train"), obs);
    state.memory = update_buffer(state.memory, stream.train, stream.tasks[k], state.model.extractor,
                                 s.memory_budget, k + 1);
    state = finetune_classifier(std::move(state), stream, k, s.stage, stage_rng.derive("finetune"), obs);
    state.previous.emplace(snapshot(state.model, k + 1));
    MetricsRecord rec = evaluate(state.model, stream, k);
    const auto t1 = std::chrono::steady_clock::now();
    rec.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
    res.wall_seconds.push_back(rec.wall_seconds);
    state.records.push_back(std::move(rec));
    state.completed = k + 1;
    if (on_stage) on_stage(state);
  }
  res.summary = summarize(state.records, s.config_hash, s.seed);
  res.state = std::move(state);
  return res;
}

}  // namespace ccfa
