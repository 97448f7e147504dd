#include "ttc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ttc/errors.hpp"
#include "ttc/glob.hpp"

namespace ttc {

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd-momentum") return OptimizerKind::sgd_momentum;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd_momentum ? "sgd-momentum" : "adamw";
}

LrSchedule parse_schedule(std::string_view name) {
  if (name == "constant") return LrSchedule::constant;
  if (name == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + std::string(name) + "'");
}

std::string_view schedule_name(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "cosine";
}

std::string RunRecord::to_text() const {
  std::ostringstream os;
  os << "method = " << method << "\n";
  os << "stage = " << stage << "\n";
  os << "trainable_params = " << trainable_params << "\n";
  os << "total_params = " << total_params << "\n";
  os << "final_train_loss = " << format_double(final_train_loss) << "\n";
  if (final_accuracy >= 0)
    os << "final_accuracy = " << format_double(final_accuracy) << "\n";
  if (val_accuracy >= 0)
    os << "val_accuracy = " << format_double(val_accuracy) << "\n";
  if (test_accuracy >= 0)
    os << "test_accuracy = " << format_double(test_accuracy) << "\n";
  if (chosen_lr > 0) os << "chosen_lr = " << format_double(chosen_lr) << "\n";
  if (chosen_epochs > 0) os << "chosen_epochs = " << chosen_epochs << "\n";
  os << "wall_seconds = " << format_double(wall_seconds) << "\n";
  for (const auto& p : checkpoint_paths) os << "checkpoint = " << p << "\n";
  os << "trainable_names =";
  for (const auto& n : resolved_trainable) os << " " << n;
  os << "\n";
  if (!config_snapshot.empty()) {
    os << "--- config ---\n";
    os << config_snapshot;
  }
  return os.str();
}

std::string RunRecord::epochs_csv() const {
  std::ostringstream os;
  os << "epoch,lr,train_loss,eval_accuracy\n";
  for (const auto& e : epochs) {
    os << e.epoch << "," << format_double(e.lr) << ","
       << format_double(e.train_loss) << ",";
    if (e.eval_accuracy >= 0) os << format_double(e.eval_accuracy);
    os << "\n";
  }
  return os.str();
}

void write_run_record(const std::filesystem::path& dir,
                      const RunRecord& record,
                      const TransformerModel& model) {
  // independent recount must agree with the plan's counts
  std::size_t trainable = 0;
  for (const auto& [name, t] : model.named_parameters())
    if (t.requires_grad()) trainable += t.numel();
  if (trainable != record.trainable_params)
    throw Error("run record: trainable count " +
                std::to_string(record.trainable_params) +
                " does not match model recount " + std::to_string(trainable));
  if (model.total_param_count() != record.total_params)
    throw Error("run record: total count mismatch");
  std::filesystem::create_directories(dir);
  auto write_atomic = [&](const std::filesystem::path& p,
                          const std::string& text) {
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
      std::ofstream os(tmp, std::ios::trunc);
      if (!os) throw IoError("cannot write " + tmp.string());
      os << text;
    }
    std::filesystem::rename(tmp, p);
  };
  write_atomic(dir / "run_record.txt", record.to_text());
  write_atomic(dir / "run.csv", record.epochs_csv());
}

TrainPlan freezing_policy(Method m, const TransformerModel& model) {
  TrainPlan plan;
  plan.trainable = method_trainable_globs(m);
  // policy sanity: globs must resolve against this model
  (void)model.resolve_names(plan.trainable);
  return plan;
}

namespace {

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(b);
  auto lv = logits.data();
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (lv[i * c + j] > lv[i * c + best]) best = j;  // ties: lowest index
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n,
                                                         std::size_t bs) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t off = 0; off < n; off += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = off; i < std::min(n, off + bs); ++i)
      idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

// Per-parameter optimizer state, keyed by name.
class Optimizer {
 public:
  Optimizer(const TrainPlan& plan) : plan_(plan) {}

  void step(TransformerModel& model,
            const std::vector<std::string>& trainable, double lr) {
    ++t_;
    for (const auto& name : trainable) {
      Tensor& p = model.param(name);
      auto theta = p.mutable_data();
      std::vector<double>& g = scratch_;
      g.assign(theta.size(), 0.0);
      if (p.has_grad()) {
        auto gv = p.grad();
        std::copy(gv.begin(), gv.end(), g.begin());
      }
      if (plan_.optimizer == OptimizerKind::sgd_momentum) {
        auto& vel = state_[name].m;
        vel.resize(theta.size(), 0.0);
        for (std::size_t i = 0; i < theta.size(); ++i) {
          double grad = g[i] + plan_.weight_decay * theta[i];
          vel[i] = plan_.momentum * vel[i] + grad;
          theta[i] -= lr * vel[i];
        }
      } else {
        auto& st = state_[name];
        st.m.resize(theta.size(), 0.0);
        st.v.resize(theta.size(), 0.0);
        const double bc1 = 1.0 - std::pow(plan_.beta1, t_);
        const double bc2 = 1.0 - std::pow(plan_.beta2, t_);
        for (std::size_t i = 0; i < theta.size(); ++i) {
          st.m[i] = plan_.beta1 * st.m[i] + (1.0 - plan_.beta1) * g[i];
          st.v[i] = plan_.beta2 * st.v[i] + (1.0 - plan_.beta2) * g[i] * g[i];
          const double mhat = st.m[i] / bc1;
          const double vhat = st.v[i] / bc2;
          theta[i] -= lr * (mhat / (std::sqrt(vhat) + plan_.adam_eps) +
                            plan_.weight_decay * theta[i]);
        }
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  TrainPlan plan_;
  std::map<std::string, State> state_;
  std::vector<double> scratch_;
  int t_ = 0;
};

double schedule_lr(const TrainPlan& plan, std::size_t epoch) {
  if (plan.schedule == LrSchedule::constant) return plan.lr;
  return plan.lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(plan.epochs)));
}

}  // namespace

double evaluate_accuracy(const TransformerModel& model, const Dataset& data,
                         std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  autograd::NoGradGuard ng;
  std::size_t correct = 0;
  for (const auto& batch : sequential_batches(data.size(), batch_size)) {
    Tensor logits = model.forward(data.images(batch)).logits;
    std::vector<int> pred = argmax_rows(logits);
    std::vector<int> truth = data.labels_at(batch);
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == truth[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_loss(const TransformerModel& model, const Dataset& data,
                     std::size_t batch_size) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  autograd::NoGradGuard ng;
  double total = 0.0;
  for (const auto& batch : sequential_batches(data.size(), batch_size)) {
    double loss =
        softmax_crossentropy(model.forward(data.images(batch)).logits,
                             data.labels_at(batch))
            .value();
    total += loss * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(data.size());
}

RunRecord train_model(TransformerModel& model, const Dataset& train,
                      const Dataset* eval_set, const TrainPlan& plan) {
  if (train.size() == 0) throw ConfigError("train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();

  model.set_trainable(plan.trainable);
  model.zero_grad();
  std::vector<std::string> trainable = model.resolve_names(plan.trainable);

  RunRecord record;
  record.resolved_trainable = trainable;
  record.total_params = model.total_param_count();
  for (const auto& name : trainable)
    record.trainable_params += model.param(name).numel();

  // frozen tensors must come back bit-identical
  std::map<std::string, std::uint64_t> frozen_hash;
  for (const auto& [name, t] : model.named_parameters())
    if (!t.requires_grad()) frozen_hash[name] = t.bit_hash();

  Optimizer opt(plan);
  SplitRng order_rng = SplitRng(plan.seed).split("order");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    const double lr = schedule_lr(plan, epoch);
    SplitRng erng = order_rng.split(epoch);
    erng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += plan.batch_size) {
      std::span<const std::size_t> idx(
          order.data() + off,
          std::min(plan.batch_size, order.size() - off));
      Tensor logits = model.forward(train.images(idx)).logits;
      Tensor loss = softmax_crossentropy(logits, train.labels_at(idx));
      const double lv = loss.value();
      if (!std::isfinite(lv))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch));
      model.zero_grad();
      loss.backward();
      opt.step(model, trainable, lr);
      loss_sum += lv;
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(batches);
    if (eval_set) m.eval_accuracy = evaluate_accuracy(model, *eval_set);
    record.epochs.push_back(m);
  }

  for (const auto& [name, hash] : frozen_hash)
    if (model.param(name).bit_hash() != hash)
      throw Error("train: frozen parameter '" + name + "' was mutated");

  if (!record.epochs.empty()) {
    record.final_train_loss = record.epochs.back().train_loss;
    record.final_accuracy = record.epochs.back().eval_accuracy;
  } else if (eval_set) {
    record.final_accuracy = evaluate_accuracy(model, *eval_set);
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return record;
}

RunRecord run_stage1(TransformerModel& model, const Dataset& train,
                     const Dataset* eval_set, const TrainPlan& plan) {
  const std::vector<std::string> allowed = {"*.norm*.{gamma,beta}", "head.*"};
  for (const auto& name : model.resolve_names(plan.trainable))
    if (!glob_match_any(allowed, name))
      throw ConfigError("stage 1 plan may tune only LayerNorm and head, got '" +
                        name + "'");
  RunRecord record = train_model(model, train, eval_set, plan);
  record.stage = "stage1";
  return record;
}

RunRecord run_stage2(TransformerModel& stage1_model, const Dataset& train,
                     const Dataset* eval_set, const ImportanceReport& report,
                     const Stage2Options& opts) {
  insert_ttc(stage1_model, report, opts.insert);
  TrainPlan plan = opts.plan;
  plan.trainable = {"*.ttc.*", "head.*"};
  if (opts.tune_ln) plan.trainable.push_back("*.norm*.{gamma,beta}");
  RunRecord record = train_model(stage1_model, train, eval_set, plan);
  record.stage = "stage2";
  return record;
}

void attach_method_modules(TransformerModel& model, const MethodConfig& cfg) {
  SplitRng rng = SplitRng(cfg.seed).split("attach");
  switch (cfg.method) {
    case Method::adapter: {
      std::size_t dim = cfg.adapter_dim ? cfg.adapter_dim
                                        : std::max<std::size_t>(
                                              1, model.spec().dim / 16);
      model.attach_adapter(dim, cfg.adapter_activation, rng);
      break;
    }
    case Method::vpt_shallow:
      model.attach_prompts(cfg.vpt_prompts, PromptDepth::shallow, rng);
      break;
    case Method::vpt_deep:
      model.attach_prompts(cfg.vpt_prompts, PromptDepth::deep, rng);
      break;
    case Method::ssf:
      model.attach_ssf(cfg.ssf_include_embed_sites);
      break;
    default:
      break;
  }
}

namespace {

struct CandidateResult {
  double best_val = -1.0;
  std::size_t best_epoch = 0;  // 1-based epoch count to reuse
  double lr = 0.0;
};

// Train with eval on the val split, track the best epoch.
CandidateResult fit_candidate(TransformerModel model, const Dataset& train,
                              const Dataset& val, const MethodConfig& cfg,
                              double lr,
                              std::vector<RunRecord>* out_records) {
  MethodConfig mc = cfg;
  mc.stage1.lr = lr;
  mc.stage2.lr = lr * (cfg.stage1.lr > 0 ? cfg.stage2.lr / cfg.stage1.lr
                                         : 1.0);
  CandidateResult res;
  res.lr = lr;
  std::vector<RunRecord> records;
  if (cfg.method == Method::ttc) {
    if (mc.stage1_enabled) {
      TrainPlan p1 = mc.stage1;
      p1.trainable = method_trainable_globs(Method::layernorm);
      records.push_back(run_stage1(model, train, &val, p1));
    }
    ImportanceReport report = compute_importance(model, train, mc.scoring);
    Stage2Options s2;
    s2.plan = mc.stage2;
    s2.insert = mc.insert;
    s2.tune_ln = mc.stage2_tune_ln;
    records.push_back(run_stage2(model, train, &val, report, s2));
  } else {
    TrainPlan plan = mc.stage1;
    plan.trainable = method_trainable_globs(cfg.method);
    records.push_back(train_model(model, train, &val, plan));
  }
  const RunRecord& last = records.back();
  for (const auto& e : last.epochs)
    if (e.eval_accuracy > res.best_val) {
      res.best_val = e.eval_accuracy;
      res.best_epoch = e.epoch + 1;
    }
  if (out_records)
    for (auto& r : records) out_records->push_back(std::move(r));
  return res;
}

}  // namespace

MethodRunResult run_method(const TransformerModel& pretrained,
                           const Dataset& train, const Dataset& val,
                           const Dataset& test, const MethodConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> grid = cfg.lr_grid;
  if (grid.empty()) grid.push_back(cfg.stage1.lr);

  // phase 1: hyperparameter selection on the train/val split
  CandidateResult best;
  for (double lr : grid) {
    TransformerModel candidate = pretrained.clone();
    attach_method_modules(candidate, cfg);
    CandidateResult r = fit_candidate(std::move(candidate), train, val, cfg,
                                      lr, nullptr);
    if (r.best_val > best.best_val) best = r;
  }
  if (best.best_epoch == 0) best.best_epoch = cfg.stage1.epochs;

  // phase 2: retrain on train+val with the chosen setting
  Dataset full = train;
  full.pixels.insert(full.pixels.end(), val.pixels.begin(), val.pixels.end());
  full.labels.insert(full.labels.end(), val.labels.begin(), val.labels.end());
  full.num_classes = std::max(full.num_classes, val.num_classes);

  MethodConfig mc = cfg;
  mc.stage1.lr = best.lr;
  mc.stage2.lr = best.lr * (cfg.stage1.lr > 0
                                ? cfg.stage2.lr / cfg.stage1.lr
                                : 1.0);

  MethodRunResult out{RunRecord{}, pretrained.clone(), std::nullopt,
                      std::nullopt};
  attach_method_modules(out.model, cfg);

  if (cfg.method == Method::ttc) {
    if (mc.stage1_enabled) {
      TrainPlan p1 = mc.stage1;
      p1.trainable = method_trainable_globs(Method::layernorm);
      out.stage1_record = run_stage1(out.model, full, nullptr, p1);
    }
    out.report = compute_importance(out.model, full, mc.scoring);
    Stage2Options s2;
    s2.plan = mc.stage2;
    s2.plan.epochs = best.best_epoch;
    s2.insert = mc.insert;
    s2.tune_ln = mc.stage2_tune_ln;
    out.record = run_stage2(out.model, full, nullptr, *out.report, s2);
  } else {
    TrainPlan plan = mc.stage1;
    plan.trainable = method_trainable_globs(cfg.method);
    plan.epochs = best.best_epoch;
    out.record = train_model(out.model, full, nullptr, plan);
  }
  out.record.method = std::string(method_name(cfg.method));
  out.record.chosen_lr = best.lr;
  out.record.chosen_epochs = best.best_epoch;
  out.record.val_accuracy = best.best_val;
  out.record.test_accuracy = evaluate_accuracy(out.model, test);
  out.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return out;
}

}  // namespace ttc
