#pragma once

#include <optional>
#include <string>
#include <vector>

#include "faitheval/attribution.hpp"
#include "faitheval/corpus.hpp"
#include "faitheval/metrics.hpp"
#include "faitheval/model.hpp"

namespace faitheval {

// Everything one `evaluate` run needs. Flags and the flat key=value
// config file both map 1:1 onto these fields; flags win.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir;
  std::string dataset_id = "synthetic";

  // Corpus: file mode when train/test paths are set, synthetic otherwise.
  std::string train_path;
  std::string dev_path;
  std::string test_path;
  SyntheticSpec synthetic;

  // Model: trained fresh unless model_path points at a saved one.
  int embed_dim = 16;
  int model_max_len = 32;
  int epochs = 30;
  double learning_rate = 1.0;
  int batch_size = 16;
  std::string model_path;

  std::vector<FaKind> fas = {
      FaKind::attention,      FaKind::scaled_attention,
      FaKind::input_x_grad,   FaKind::integrated_gradients,
      FaKind::deeplift,       FaKind::random,
  };
  std::vector<double> ratios = {0.01, 0.05, 0.10, 0.20, 0.50};
  int soft_samples = 16;  // M
  double epsilon = 0.0;   // diagnosticity win margin
  int ig_steps = 50;
  TokenScoreRule token_score_rule = TokenScoreRule::abs_sum;
  SoftAggregation soft_aggregation = SoftAggregation::mean_probability;

  std::string adapter_cmd;  // external predictor; empty = built-in model
  int adapter_timeout_ms = 10000;
  std::string attribution_import;  // JSONL scores for FaKind::external
  std::string external_fa_label = "external";

  bool file_mode() const { return !train_path.empty() || !test_path.empty(); }
  TrainingConfig training_config() const;
  CorpusLimits corpus_limits() const;
  void validate() const;
};

// Shared by the CLI and the config file loader; throws ParameterError on
// unknown keys or unparseable values.
void apply_config_entry(RunConfig& config, const std::string& key,
                        const std::string& value);
RunConfig load_run_config(const std::string& path);

// FAITHEVAL_WORKERS, default 1.
int worker_count_from_env();

struct RunSummary {
  std::string run_dir;
  std::size_t instance_count = 0;
  std::size_t excluded_instances = 0;
  double train_accuracy = 0.0;
  double dev_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<DiagnosticityReport> diagnosticity;
};

// Full evaluation sweep: per-instance metrics for every FA and its
// random counterpart, AOPC, soft metrics, diagnosticity and report
// files under config.output_dir. Deterministic per (config, seed),
// regardless of worker count.
RunSummary run_evaluation(const RunConfig& config);

// Per-ratio faithfulness and diagnosticity tables derived from a
// completed run directory (soft metrics appear as reference rows with an
// empty ratio column).
void emit_curves(const std::string& run_dir);

// Report file names inside a run directory.
namespace run_files {
inline constexpr const char* kPerInstance = "per_instance.csv";
inline constexpr const char* kCounterpart = "random_counterpart.csv";
inline constexpr const char* kAggregates = "aggregates.csv";
inline constexpr const char* kDiagnosticity = "diagnosticity.csv";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kModel = "model.json";
inline constexpr const char* kCurveFaithfulness = "curves_faithfulness.csv";
inline constexpr const char* kCurveDiagnosticity = "curves_diagnosticity.csv";
}  // namespace run_files

}  // namespace faitheval
