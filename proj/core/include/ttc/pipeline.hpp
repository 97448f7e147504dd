#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ttc/dataset.hpp"
#include "ttc/model.hpp"
#include "ttc/petl.hpp"
#include "ttc/scoring.hpp"
#include "ttc/ttc_module.hpp"

namespace ttc {

enum class OptimizerKind { sgd_momentum, adamw };
OptimizerKind parse_optimizer(std::string_view name);
std::string_view optimizer_name(OptimizerKind k);

enum class LrSchedule { constant, cosine };
LrSchedule parse_schedule(std::string_view name);
std::string_view schedule_name(LrSchedule s);

/// Declarative description of one tuning stage.
struct TrainPlan {
  std::vector<std::string> trainable;  // name globs
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  LrSchedule schedule = LrSchedule::cosine;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double eval_accuracy = -1.0;  // -1 when no eval set
};

struct RunRecord {
  std::string method;
  std::string stage;
  std::string config_snapshot;
  std::vector<std::string> resolved_trainable;  // recorded verbatim
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::vector<EpochMetrics> epochs;
  double final_train_loss = 0.0;
  double final_accuracy = -1.0;
  double chosen_lr = 0.0;
  std::size_t chosen_epochs = 0;
  double val_accuracy = -1.0;
  double test_accuracy = -1.0;
  double wall_seconds = 0.0;
  std::vector<std::string> checkpoint_paths;

  std::string to_text() const;     // structured key=value report
  std::string epochs_csv() const;  // epoch,lr,train_loss,eval_accuracy
};

/// Write `run_record.txt` and `run.csv` into the directory. Recomputes the
/// model's trainable/total counts and refuses to write if they disagree
/// with the record.
void write_run_record(const std::filesystem::path& dir,
                      const RunRecord& record, const TransformerModel& model);

/// Trainable-set policy for each method; the head is always trainable.
/// Hyperparameters keep their defaults; callers override as needed.
TrainPlan freezing_policy(Method m, const TransformerModel& model);

double evaluate_accuracy(const TransformerModel& model, const Dataset& data,
                         std::size_t batch_size = 64);
double evaluate_loss(const TransformerModel& model, const Dataset& data,
                     std::size_t batch_size = 64);

/// Train in place. Frozen parameters are hash-checked before and after;
/// a mutation aborts the run. `eval_set` adds per-epoch accuracy.
RunRecord train_model(TransformerModel& model, const Dataset& train,
                      const Dataset* eval_set, const TrainPlan& plan);

/// Stage 1: LayerNorm + head tuning. Rejects plans whose resolved
/// trainable set contains anything else.
RunRecord run_stage1(TransformerModel& model, const Dataset& train,
                     const Dataset* eval_set, const TrainPlan& plan);

struct Stage2Options {
  TrainPlan plan;  // trainable globs filled from the policy
  InsertOptions insert;
  /// Tab.-3-style ablation: keep LayerNorm frozen during stage 2.
  bool tune_ln = true;
};

/// Stage 2: insert TTC from the report, then tune TTC (+ LN) + head.
RunRecord run_stage2(TransformerModel& stage1_model, const Dataset& train,
                     const Dataset* eval_set, const ImportanceReport& report,
                     const Stage2Options& opts);

/// Everything `run_method` needs besides data.
struct MethodConfig {
  Method method = Method::linear;
  TrainPlan stage1;        // the single stage for baseline methods
  TrainPlan stage2;        // ttc only
  bool stage1_enabled = true;   // ttc ablation: skip stage-1 training
  bool stage2_tune_ln = true;   // ttc ablation: freeze LN in stage 2
  ScoringConfig scoring;
  InsertOptions insert;
  std::size_t adapter_dim = 0;  // 0 = dim/16
  Activation adapter_activation = Activation::gelu;
  std::size_t vpt_prompts = 4;
  bool ssf_include_embed_sites = false;
  std::vector<double> lr_grid;  // candidate lrs; empty = configured lrs
  std::uint64_t seed = 0;
};

struct MethodRunResult {
  RunRecord record;
  TransformerModel model;
  std::optional<ImportanceReport> report;
  std::optional<RunRecord> stage1_record;  // ttc: the final stage-1 run
};

/// Full per-task protocol: fit candidates on the train split, pick lr and
/// epoch count by validation accuracy, retrain on train+val, report test
/// accuracy.
MethodRunResult run_method(const TransformerModel& pretrained,
                           const Dataset& train, const Dataset& val,
                           const Dataset& test, const MethodConfig& cfg);

/// Attach the method's module (adapter/prompts/ssf) to a fresh copy of the
/// backbone; ttc attachments happen later via insert_ttc.
void attach_method_modules(TransformerModel& model, const MethodConfig& cfg);

}  // namespace ttc
