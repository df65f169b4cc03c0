#include "faitheval/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>
#include <tuple>

#include "faitheval/adapter.hpp"
#include "faitheval/perturbation.hpp"
#include "faitheval/text_format.hpp"
#include "faitheval/version.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace faitheval {

namespace {

// Stream ids under the run seed. Mask paths follow
// [seed, instance, mode, sample, token] so any schedule reproduces them.
constexpr std::uint64_t kCorpusStream = 0xC0;
constexpr std::uint64_t kTrainStream = 0x7A;
constexpr std::uint64_t kEvalStream = 0xE7;
constexpr std::uint64_t kFaRandomStream = 0xFA;
constexpr std::uint64_t kCounterpartStream = 0xCB;
constexpr std::uint64_t kMaskStream = 0x3A;

long parse_long(const std::string& value, const std::string& key) {
  char* end = nullptr;
  const long v = std::strtol(value.c_str(), &end, 10);
  if (end == nullptr || *end != '\0' || value.empty()) {
    throw ParameterError("config: cannot parse integer for '" + key + "'");
  }
  return v;
}

double parse_real(const std::string& value, const std::string& key) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end == nullptr || *end != '\0' || value.empty()) {
    throw ParameterError("config: cannot parse number for '" + key + "'");
  }
  return v;
}

}  // namespace

TrainingConfig RunConfig::training_config() const {
  TrainingConfig t;
  t.vocab_size = synthetic.vocab_size;
  t.class_count = synthetic.class_count;
  t.embed_dim = embed_dim;
  t.max_len = model_max_len;
  t.epochs = epochs;
  t.learning_rate = learning_rate;
  t.batch_size = batch_size;
  return t;
}

CorpusLimits RunConfig::corpus_limits() const {
  return CorpusLimits{synthetic.vocab_size, synthetic.class_count,
                      model_max_len};
}

void RunConfig::validate() const {
  if (output_dir.empty()) {
    throw ParameterError("config: output_dir is required");
  }
  if (ratios.empty()) {
    throw ParameterError("config: ratio grid must be non-empty");
  }
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0)) {
      throw ParameterError("config: ratios must lie in (0,1]");
    }
    if (i > 0 && !(ratios[i] > ratios[i - 1])) {
      throw ParameterError("config: ratios must be strictly increasing");
    }
  }
  if (soft_samples < 1) {
    throw ParameterError("config: soft_samples must be >= 1");
  }
  if (epsilon < 0.0) {
    throw ParameterError("config: epsilon must be >= 0");
  }
  if (ig_steps < 1) {
    throw ParameterError("config: ig_steps must be >= 1");
  }
  if (fas.empty()) {
    throw ParameterError("config: FA list must be non-empty");
  }
  for (std::size_t i = 0; i < fas.size(); ++i) {
    for (std::size_t j = i + 1; j < fas.size(); ++j) {
      if (fas[i] == fas[j]) {
        throw ParameterError("config: duplicate FA in list");
      }
    }
  }
  const bool has_external =
      std::find(fas.begin(), fas.end(), FaKind::external) != fas.end();
  if (has_external && attribution_import.empty()) {
    throw ParameterError(
        "config: external FA requires attribution_import path");
  }
  if (!adapter_cmd.empty()) {
    for (FaKind fa : fas) {
      if (fa == FaKind::scaled_attention ||
          fa == FaKind::integrated_gradients || fa == FaKind::deeplift) {
        throw ParameterError(
            std::string("config: FA '") + fa_name(fa) +
            "' needs model internals and cannot run through an adapter");
      }
    }
    if (adapter_timeout_ms <= 0) {
      throw ParameterError("config: adapter_timeout_ms must be > 0");
    }
  }
  if (file_mode()) {
    if (test_path.empty()) {
      throw ParameterError("config: file mode requires test_path");
    }
    if (train_path.empty() && model_path.empty()) {
      throw ParameterError(
          "config: file mode requires train_path or model_path");
    }
  } else {
    synthetic.validate();
    if (synthetic.max_len > model_max_len) {
      throw ParameterError(
          "config: synthetic max_len exceeds model_max_len");
    }
  }
  training_config().validate();
}

void apply_config_entry(RunConfig& c, const std::string& key,
                        const std::string& value) {
  if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_long(value, key));
  } else if (key == "output_dir") {
    c.output_dir = value;
  } else if (key == "dataset_id") {
    c.dataset_id = value;
  } else if (key == "train_path") {
    c.train_path = value;
  } else if (key == "dev_path") {
    c.dev_path = value;
  } else if (key == "test_path") {
    c.test_path = value;
  } else if (key == "vocab_size") {
    c.synthetic.vocab_size = static_cast<int>(parse_long(value, key));
  } else if (key == "class_count") {
    c.synthetic.class_count = static_cast<int>(parse_long(value, key));
  } else if (key == "keywords_per_class") {
    c.synthetic.keywords_per_class = static_cast<int>(parse_long(value, key));
  } else if (key == "injection_prob") {
    c.synthetic.injection_prob = parse_real(value, key);
  } else if (key == "min_len") {
    c.synthetic.min_len = static_cast<int>(parse_long(value, key));
  } else if (key == "max_len") {
    c.synthetic.max_len = static_cast<int>(parse_long(value, key));
  } else if (key == "train_size") {
    c.synthetic.train_size = static_cast<int>(parse_long(value, key));
  } else if (key == "dev_size") {
    c.synthetic.dev_size = static_cast<int>(parse_long(value, key));
  } else if (key == "test_size") {
    c.synthetic.test_size = static_cast<int>(parse_long(value, key));
  } else if (key == "embed_dim") {
    c.embed_dim = static_cast<int>(parse_long(value, key));
  } else if (key == "model_max_len") {
    c.model_max_len = static_cast<int>(parse_long(value, key));
  } else if (key == "epochs") {
    c.epochs = static_cast<int>(parse_long(value, key));
  } else if (key == "learning_rate") {
    c.learning_rate = parse_real(value, key);
  } else if (key == "batch_size") {
    c.batch_size = static_cast<int>(parse_long(value, key));
  } else if (key == "model_path") {
    c.model_path = value;
  } else if (key == "fas") {
    c.fas.clear();
    for (const auto& piece : split(value, ',')) {
      const auto name = trim(piece);
      const auto kind = fa_from_name(name);
      if (!kind) {
        throw ParameterError("config: unknown FA '" + name + "'");
      }
      c.fas.push_back(*kind);
    }
  } else if (key == "ratios") {
    c.ratios = parse_double_list(value);
  } else if (key == "soft_samples") {
    c.soft_samples = static_cast<int>(parse_long(value, key));
  } else if (key == "epsilon") {
    c.epsilon = parse_real(value, key);
  } else if (key == "ig_steps") {
    c.ig_steps = static_cast<int>(parse_long(value, key));
  } else if (key == "token_score_rule") {
    if (value == "abs_sum") {
      c.token_score_rule = TokenScoreRule::abs_sum;
    } else if (value == "l2_norm") {
      c.token_score_rule = TokenScoreRule::l2_norm;
    } else {
      throw ParameterError("config: token_score_rule must be abs_sum|l2_norm");
    }
  } else if (key == "soft_aggregation") {
    if (value == "mean_probability") {
      c.soft_aggregation = SoftAggregation::mean_probability;
    } else if (value == "mean_metric") {
      c.soft_aggregation = SoftAggregation::mean_metric;
    } else {
      throw ParameterError(
          "config: soft_aggregation must be mean_probability|mean_metric");
    }
  } else if (key == "adapter_cmd") {
    c.adapter_cmd = value;
  } else if (key == "adapter_timeout_ms") {
    c.adapter_timeout_ms = static_cast<int>(parse_long(value, key));
  } else if (key == "attribution_import") {
    c.attribution_import = value;
  } else if (key == "external_fa_label") {
    c.external_fa_label = value;
  } else {
    throw ParameterError("config: unknown key '" + key + "'");
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ParameterError("config: cannot open " + path);
  }
  RunConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config: line " + std::to_string(line_no) +
                           " is not key=value");
    }
    apply_config_entry(config, trim(text.substr(0, eq)),
                       trim(text.substr(eq + 1)));
  }
  return config;
}

int worker_count_from_env() {
  const char* raw = std::getenv("FAITHEVAL_WORKERS");
  if (raw == nullptr || *raw == '\0') return 1;
  const long v = parse_long(raw, "FAITHEVAL_WORKERS");
  if (v < 1) {
    throw ParameterError("FAITHEVAL_WORKERS must be >= 1");
  }
  return static_cast<int>(v);
}

namespace {

// Metric values for one scored explanation on one instance.
struct ExplanationEval {
  std::vector<std::optional<double>> ns_at_ratio;
  std::vector<std::optional<double>> nc_at_ratio;
  std::optional<double> aopc_ns;
  std::optional<double> aopc_nc;
  std::optional<double> soft_ns_value;
  std::optional<double> soft_nc_value;
};

struct InstanceFaResult {
  FaKind fa = FaKind::random;
  ExplanationEval explained;
  ExplanationEval counterpart;
};

struct InstanceResult {
  std::string id;
  bool excluded = false;
  std::vector<InstanceFaResult> fas;
};

using ImportMap = std::map<std::string, std::vector<double>>;

struct EvalContext {
  const RunConfig* config = nullptr;
  const ModelParams* params = nullptr;
  const ImportMap* imported = nullptr;
  RngStream eval_stream;
};

template <typename Fn>
auto with_context(const std::string& context, Fn&& fn) {
  try {
    return fn();
  } catch (const ParameterError& e) {
    throw ParameterError(context + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(context + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(context + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(context + ": " + e.what());
  } catch (const ConsistencyError& e) {
    throw ConsistencyError(context + ": " + e.what());
  } catch (const AdapterTimeout& e) {
    throw AdapterTimeout(context + ": " + e.what());
  } catch (const AdapterProcessExit& e) {
    throw AdapterProcessExit(context + ": " + e.what());
  } catch (const AdapterProtocolError& e) {
    throw AdapterProtocolError(context + ": " + e.what());
  }
}

InstanceResult eval_instance(const EvalContext& ctx, const TokenSequence& seq,
                             std::size_t instance_index,
                             AdapterClient* adapter) {
  const RunConfig& config = *ctx.config;
  const ModelParams& params = *ctx.params;
  const RngStream instance_stream = ctx.eval_stream.child(instance_index);

  InstanceResult result;
  result.id = seq.id;

  const Matrix x = embed(seq, params);
  const std::size_t t = x.rows();

  // Predicted class is fixed on the original input; every perturbed
  // input is scored against it.
  std::optional<ForwardTrace> trace;
  std::optional<AdapterResult> adapter_full;
  int predicted = 0;
  double p_full = 0.0;
  if (adapter == nullptr) {
    trace = forward(x, params);
    predicted = trace->predicted;
    p_full = trace->probs[predicted];
  } else {
    adapter_full = adapter->predict(seq.id + "#full", x);
    for (std::size_t c = 1; c < adapter_full->probs.size(); ++c) {
      if (adapter_full->probs[c] > adapter_full->probs[predicted]) {
        predicted = static_cast<int>(c);
      }
    }
    p_full = adapter_full->probs[predicted];
  }

  const auto prob_of = [&](const Matrix& m, const std::string& request_id) {
    if (adapter == nullptr) {
      return forward(m, params).probs[predicted];
    }
    return adapter->predict(seq.id + "#" + request_id, m).probs[predicted];
  };

  const double p_zero = prob_of(zero_baseline(x), "zero");

  // Degenerate normalizer excludes the instance from all four metrics;
  // rows are still emitted, so no prediction work is needed.
  result.excluded = std::max(0.0, p_full - p_zero) <= kDenominatorFloor;
  result.fas.resize(config.fas.size());
  for (std::size_t f = 0; f < config.fas.size(); ++f) {
    result.fas[f].fa = config.fas[f];
  }
  if (result.excluded) {
    return result;
  }

  std::optional<InputGradients> grads;
  if (adapter == nullptr) {
    const bool needs_grads =
        std::any_of(config.fas.begin(), config.fas.end(), [](FaKind fa) {
          return fa == FaKind::scaled_attention ||
                 fa == FaKind::input_x_grad;
        });
    if (needs_grads) {
      grads = backward_input_grad(*trace, params, predicted);
    }
  }

  const auto compute_scores = [&](FaKind fa,
                                  std::size_t fa_index) -> AttributionScores {
    switch (fa) {
      case FaKind::attention: {
        if (adapter != nullptr) {
          if (!adapter_full->attention) {
            throw AdapterProtocolError(
                "adapter does not return attention scores");
          }
          AttributionScores s;
          s.fa = FaKind::attention;
          s.raw = *adapter_full->attention;
          s.normalized = normalize_scores(s.raw);
          return s;
        }
        return attention_fa(*trace);
      }
      case FaKind::scaled_attention:
        return scaled_attention_fa(*trace, grads->wrt_attention);
      case FaKind::input_x_grad: {
        if (adapter != nullptr) {
          if (!adapter_full->grads) {
            throw AdapterProtocolError("adapter does not return gradients");
          }
          return input_x_grad(x, *adapter_full->grads,
                              config.token_score_rule);
        }
        return input_x_grad(x, grads->wrt_input, config.token_score_rule);
      }
      case FaKind::integrated_gradients:
        return integrated_gradients(x, params, predicted, config.ig_steps,
                                    config.token_score_rule)
            .scores;
      case FaKind::deeplift:
        return deeplift(x, params, predicted, config.token_score_rule).scores;
      case FaKind::random:
        return random_fa(
            instance_stream.child(kFaRandomStream).child(fa_index), t);
      case FaKind::external: {
        const auto it = ctx.imported->find(seq.id);
        if (it == ctx.imported->end()) {
          throw DataError("no imported attribution for instance '" + seq.id +
                          "'");
        }
        if (it->second.size() != t) {
          throw DataError("imported attribution length mismatch for '" +
                          seq.id + "'");
        }
        AttributionScores s;
        s.fa = FaKind::external;
        s.raw = it->second;
        s.normalized = normalize_scores(s.raw);
        return s;
      }
    }
    throw ParameterError("unknown FA kind");
  };

  // Mask streams are shared across FAs (common random numbers): the
  // path depends only on (instance, mode, sample, token).
  const RngStream retain_masks = instance_stream.child(kMaskStream).child(0);
  const RngStream remove_masks = instance_stream.child(kMaskStream).child(1);

  const auto eval_explanation = [&](const AttributionScores& scores,
                                    const std::string& tag) {
    ExplanationEval eval;
    eval.ns_at_ratio.resize(config.ratios.size());
    eval.nc_at_ratio.resize(config.ratios.size());

    std::vector<double> ns_values;
    std::vector<double> nc_values;
    for (std::size_t r = 0; r < config.ratios.size(); ++r) {
      const RationaleMask rationale =
          top_k_rationale(scores, config.ratios[r]);
      const double p_retain = prob_of(hard_retain(x, rationale),
                                      tag + ":ns:" + std::to_string(r));
      const double p_remove = prob_of(hard_remove(x, rationale),
                                      tag + ":nc:" + std::to_string(r));
      eval.ns_at_ratio[r] =
          normalized_sufficiency({p_full, p_retain, p_zero});
      eval.nc_at_ratio[r] =
          normalized_comprehensiveness({p_full, p_remove, p_zero});
      ns_values.push_back(*eval.ns_at_ratio[r]);
      nc_values.push_back(*eval.nc_at_ratio[r]);
    }
    eval.aopc_ns = aopc(ns_values, config.ratios.size());
    eval.aopc_nc = aopc(nc_values, config.ratios.size());

    SoftPerturbConfig retain_cfg{PerturbMode::retain, config.soft_samples,
                                 retain_masks};
    SoftPerturbConfig remove_cfg{PerturbMode::remove, config.soft_samples,
                                 remove_masks};
    std::vector<double> retain_probs;
    std::vector<double> remove_probs;
    const auto retain_samples = soft_perturb(x, scores.normalized, retain_cfg);
    for (std::size_t s = 0; s < retain_samples.size(); ++s) {
      retain_probs.push_back(
          prob_of(retain_samples[s], tag + ":sns:" + std::to_string(s)));
    }
    const auto remove_samples = soft_perturb(x, scores.normalized, remove_cfg);
    for (std::size_t s = 0; s < remove_samples.size(); ++s) {
      remove_probs.push_back(
          prob_of(remove_samples[s], tag + ":snc:" + std::to_string(s)));
    }
    eval.soft_ns_value =
        soft_ns(p_full, retain_probs, p_zero, config.soft_aggregation);
    eval.soft_nc_value =
        soft_nc(p_full, remove_probs, p_zero, config.soft_aggregation);
    return eval;
  };

  for (std::size_t f = 0; f < config.fas.size(); ++f) {
    const FaKind fa = config.fas[f];
    const std::string fa_tag = fa_name(fa);
    with_context("instance '" + seq.id + "' fa '" + fa_tag + "'", [&] {
      AttributionScores scores = compute_scores(fa, f);
      scores.instance_id = seq.id;
      result.fas[f].explained = eval_explanation(scores, fa_tag);

      AttributionScores counterpart = random_fa(
          instance_stream.child(kCounterpartStream).child(f), t);
      counterpart.instance_id = seq.id;
      result.fas[f].counterpart =
          eval_explanation(counterpart, fa_tag + ":cp");
    });
  }
  return result;
}

// ---- report emission ----------------------------------------------------

struct RecordRow {
  std::string instance_id;
  std::string fa;
  std::string metric;
  std::string ratio;    // empty unless ns/nc
  std::string samples;  // empty unless soft
  std::string value;    // empty when excluded
  bool excluded = false;
  std::string reason;
};

void append_rows(std::vector<RecordRow>& rows, const RunConfig& config,
                 const std::string& instance_id, const std::string& fa,
                 const ExplanationEval& eval, bool excluded) {
  const std::string reason = excluded ? kDegenerateReason : "";
  const auto value_str = [&](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  const auto ratio_value = [&](const std::vector<std::optional<double>>& vec,
                               std::size_t r) -> std::string {
    if (excluded || vec.size() <= r) return "";
    return value_str(vec[r]);
  };
  const std::string m = std::to_string(config.soft_samples);
  for (std::size_t r = 0; r < config.ratios.size(); ++r) {
    rows.push_back({instance_id, fa, "ns", format_double(config.ratios[r]), "",
                    ratio_value(eval.ns_at_ratio, r), excluded, reason});
  }
  for (std::size_t r = 0; r < config.ratios.size(); ++r) {
    rows.push_back({instance_id, fa, "nc", format_double(config.ratios[r]), "",
                    ratio_value(eval.nc_at_ratio, r), excluded, reason});
  }
  rows.push_back({instance_id, fa, "aopc_ns", "", "",
                  value_str(eval.aopc_ns), excluded, reason});
  rows.push_back({instance_id, fa, "aopc_nc", "", "",
                  value_str(eval.aopc_nc), excluded, reason});
  rows.push_back({instance_id, fa, "soft_ns", "", m,
                  value_str(eval.soft_ns_value), excluded, reason});
  rows.push_back({instance_id, fa, "soft_nc", "", m,
                  value_str(eval.soft_nc_value), excluded, reason});
}

void write_record_csv(const std::string& path,
                      const std::vector<RecordRow>& rows) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open report file " + path);
  }
  out << "instance_id,fa,metric,ratio,samples,value,excluded,reason\n";
  for (const auto& row : rows) {
    out << row.instance_id << ',' << row.fa << ',' << row.metric << ','
        << row.ratio << ',' << row.samples << ',' << row.value << ','
        << (row.excluded ? 1 : 0) << ',' << row.reason << "\n";
  }
}

struct PairSet {
  std::vector<std::pair<double, double>> pairs;
};

}  // namespace

RunSummary run_evaluation(const RunConfig& config) {
  config.validate();

  fs::create_directories(config.output_dir);
  const auto out_path = [&](const char* name) {
    return (fs::path(config.output_dir) / name).string();
  };

  const RngStream root(config.seed, {});

  // Corpora.
  std::vector<TokenSequence> train_corpus, dev_corpus, test_corpus;
  if (config.file_mode()) {
    const CorpusLimits limits = config.corpus_limits();
    if (!config.train_path.empty()) {
      train_corpus = load_corpus(config.train_path, limits);
    }
    if (!config.dev_path.empty()) {
      dev_corpus = load_corpus(config.dev_path, limits);
    }
    test_corpus = load_corpus(config.test_path, limits);
  } else {
    auto corpora = generate_synthetic(config.synthetic,
                                      root.child(kCorpusStream));
    train_corpus = std::move(corpora.train);
    dev_corpus = std::move(corpora.dev);
    test_corpus = std::move(corpora.test);
    save_corpus(out_path("train.jsonl"), train_corpus);
    save_corpus(out_path("dev.jsonl"), dev_corpus);
    save_corpus(out_path("test.jsonl"), test_corpus);
  }

  // Model.
  ModelParams params;
  std::vector<double> epoch_loss;
  if (!config.model_path.empty()) {
    params = load_model(config.model_path);
  } else {
    auto trained =
        train(train_corpus, config.training_config(), root.child(kTrainStream));
    params = std::move(trained.params);
    epoch_loss = std::move(trained.epoch_loss);
  }
  save_model(params, out_path(run_files::kModel));

  RunSummary summary;
  summary.run_dir = config.output_dir;
  summary.instance_count = test_corpus.size();
  if (!train_corpus.empty()) {
    summary.train_accuracy = accuracy(train_corpus, params);
  }
  if (!dev_corpus.empty()) {
    summary.dev_accuracy = accuracy(dev_corpus, params);
  }
  summary.test_accuracy = accuracy(test_corpus, params);

  // Imported attributions for the external FA.
  ImportMap imported;
  if (!config.attribution_import.empty()) {
    for (auto& rec : load_attribution_file(config.attribution_import)) {
      if (rec.fa_label == config.external_fa_label) {
        imported[rec.id] = std::move(rec.raw);
      }
    }
  }

  // Per-worker adapters, created up front so launch errors surface
  // before any thread starts.
  const int workers = worker_count_from_env();
  std::vector<std::unique_ptr<AdapterClient>> adapters(
      static_cast<std::size_t>(workers));
  if (!config.adapter_cmd.empty()) {
    AdapterEndpoint endpoint{config.adapter_cmd, kAdapterProtocolVersion,
                             config.adapter_timeout_ms};
    for (auto& slot : adapters) {
      slot = std::make_unique<AdapterClient>(endpoint);
    }
    for (FaKind fa : config.fas) {
      if (fa == FaKind::attention && !adapters[0]->provides_field("attention")) {
        throw ParameterError(
            "config: adapter does not provide attention scores");
      }
      if (fa == FaKind::input_x_grad && !adapters[0]->provides_field("grads")) {
        throw ParameterError("config: adapter does not provide gradients");
      }
    }
  }

  EvalContext ctx;
  ctx.config = &config;
  ctx.params = &params;
  ctx.imported = &imported;
  ctx.eval_stream = root.child(kEvalStream);

  std::vector<InstanceResult> results(test_corpus.size());
  {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::exception_ptr first_error;

    const auto worker_loop = [&](int worker_index) {
      AdapterClient* adapter =
          adapters[static_cast<std::size_t>(worker_index)].get();
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= test_corpus.size() || failed.load()) break;
        try {
          results[i] = eval_instance(ctx, test_corpus[i], i, adapter);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed.store(true);
          break;
        }
      }
    };

    if (workers == 1) {
      worker_loop(0);
    } else {
      std::vector<std::thread> threads;
      threads.reserve(static_cast<std::size_t>(workers));
      for (int w = 0; w < workers; ++w) {
        threads.emplace_back(worker_loop, w);
      }
      for (auto& th : threads) th.join();
    }
    if (first_error) std::rethrow_exception(first_error);
  }

  // Flatten to report rows (instance-id order is corpus order).
  std::vector<RecordRow> fa_rows;
  std::vector<RecordRow> counterpart_rows;
  for (const auto& res : results) {
    if (res.excluded) ++summary.excluded_instances;
    for (const auto& fa_res : res.fas) {
      append_rows(fa_rows, config, res.id, fa_name(fa_res.fa),
                  fa_res.explained, res.excluded);
      append_rows(counterpart_rows, config, res.id, fa_name(fa_res.fa),
                  fa_res.counterpart, res.excluded);
    }
  }
  write_record_csv(out_path(run_files::kPerInstance), fa_rows);
  write_record_csv(out_path(run_files::kCounterpart), counterpart_rows);

  // Per-FA aggregates.
  {
    std::ofstream out(out_path(run_files::kAggregates));
    if (!out) {
      throw DataError("cannot open aggregates file");
    }
    out << "fa,metric,ratio,mean,count,excluded\n";
    const auto emit = [&](const std::string& fa, const std::string& metric,
                          const std::string& ratio,
                          const std::vector<double>& values,
                          std::size_t excluded) {
      double mean = 0.0;
      for (double v : values) mean += v;
      out << fa << ',' << metric << ',' << ratio << ','
          << (values.empty()
                  ? ""
                  : format_double(mean / static_cast<double>(values.size())))
          << ',' << values.size() << ',' << excluded << "\n";
    };
    for (std::size_t f = 0; f < config.fas.size(); ++f) {
      const std::string fa = fa_name(config.fas[f]);
      std::size_t excluded = 0;
      for (const auto& res : results) {
        if (res.excluded) ++excluded;
      }
      for (std::size_t r = 0; r < config.ratios.size(); ++r) {
        std::vector<double> values;
        for (const auto& res : results) {
          if (!res.excluded) values.push_back(*res.fas[f].explained.ns_at_ratio[r]);
        }
        emit(fa, "ns", format_double(config.ratios[r]), values, excluded);
      }
      for (std::size_t r = 0; r < config.ratios.size(); ++r) {
        std::vector<double> values;
        for (const auto& res : results) {
          if (!res.excluded) values.push_back(*res.fas[f].explained.nc_at_ratio[r]);
        }
        emit(fa, "nc", format_double(config.ratios[r]), values, excluded);
      }
      const auto collect = [&](auto member) {
        std::vector<double> values;
        for (const auto& res : results) {
          if (!res.excluded) values.push_back(*(res.fas[f].explained.*member));
        }
        return values;
      };
      emit(fa, "aopc_ns", "", collect(&ExplanationEval::aopc_ns), excluded);
      emit(fa, "aopc_nc", "", collect(&ExplanationEval::aopc_nc), excluded);
      emit(fa, "soft_ns", "", collect(&ExplanationEval::soft_ns_value),
           excluded);
      emit(fa, "soft_nc", "", collect(&ExplanationEval::soft_nc_value),
           excluded);
    }
  }

  // Diagnosticity per (metric, fa) plus the all-FA average, with
  // rank-sum p-values comparing each soft metric's per-pair win
  // indicators against its hard counterpart's.
  {
    const auto pair_values = [&](std::size_t f, MetricKind metric,
                                 const InstanceFaResult& fa_res)
        -> std::optional<std::pair<double, double>> {
      (void)f;
      const auto pick = [&](const ExplanationEval& e) {
        switch (metric) {
          case MetricKind::ns: return e.aopc_ns;
          case MetricKind::nc: return e.aopc_nc;
          case MetricKind::soft_ns: return e.soft_ns_value;
          case MetricKind::soft_nc: return e.soft_nc_value;
        }
        return std::optional<double>{};
      };
      const auto u = pick(fa_res.explained);
      const auto v = pick(fa_res.counterpart);
      if (!u || !v) return std::nullopt;
      return std::make_pair(*u, *v);
    };

    const auto indicators = [&](const std::vector<std::pair<double, double>>&
                                    pairs) {
      std::vector<double> ind;
      ind.reserve(pairs.size());
      for (const auto& [u, v] : pairs) {
        ind.push_back(u > v + config.epsilon ? 1.0 : 0.0);
      }
      return ind;
    };

    std::ofstream out(out_path(run_files::kDiagnosticity));
    if (!out) {
      throw DataError("cannot open diagnosticity file");
    }
    out << "dataset,fa,metric,pairs,wins,ties,value,p_value_vs_hard\n";

    const std::vector<MetricKind> metric_order = {
        MetricKind::ns, MetricKind::nc, MetricKind::soft_ns,
        MetricKind::soft_nc};

    const auto run_group = [&](const std::string& fa_label,
                               const std::vector<std::size_t>& fa_indices) {
      std::map<MetricKind, std::vector<std::pair<double, double>>> by_metric;
      for (const auto& res : results) {
        if (res.excluded) continue;
        for (std::size_t f : fa_indices) {
          for (MetricKind metric : metric_order) {
            if (auto uv = pair_values(f, metric, res.fas[f])) {
              by_metric[metric].push_back(*uv);
            }
          }
        }
      }
      for (MetricKind metric : metric_order) {
        const auto& pairs = by_metric[metric];
        const DiagnosticityCount count =
            diagnosticity(pairs, config.epsilon);
        DiagnosticityReport report;
        report.metric = metric;
        report.fa_label = fa_label;
        report.dataset_id = config.dataset_id;
        report.pair_count = count.pairs;
        report.wins = count.wins;
        report.ties = count.ties;
        report.value = count.value;
        if (metric == MetricKind::soft_ns || metric == MetricKind::soft_nc) {
          const MetricKind hard = metric == MetricKind::soft_ns
                                      ? MetricKind::ns
                                      : MetricKind::nc;
          report.p_value =
              rank_sum_test(indicators(pairs), indicators(by_metric[hard]));
        }
        summary.diagnosticity.push_back(report);
        out << report.dataset_id << ',' << report.fa_label << ','
            << metric_name(metric) << ',' << report.pair_count << ','
            << report.wins << ',' << report.ties << ','
            << format_double(report.value) << ','
            << (report.p_value ? format_double(*report.p_value) : "") << "\n";
      }
    };

    for (std::size_t f = 0; f < config.fas.size(); ++f) {
      run_group(fa_name(config.fas[f]), {f});
    }
    std::vector<std::size_t> all(config.fas.size());
    std::iota(all.begin(), all.end(), 0);
    run_group("average", all);
  }

  // Manifest.
  {
    nlohmann::json j;
    j["format_version"] = kReportFormatVersion;
    j["library_version"] = kLibraryVersion;
    j["dataset_id"] = config.dataset_id;

    nlohmann::json cfg;
    cfg["seed"] = config.seed;
    cfg["output_dir"] = config.output_dir;
    cfg["dataset_id"] = config.dataset_id;
    cfg["train_path"] = config.train_path;
    cfg["dev_path"] = config.dev_path;
    cfg["test_path"] = config.test_path;
    cfg["synthetic"] = {
        {"vocab_size", config.synthetic.vocab_size},
        {"class_count", config.synthetic.class_count},
        {"keywords_per_class", config.synthetic.keywords_per_class},
        {"injection_prob", config.synthetic.injection_prob},
        {"min_len", config.synthetic.min_len},
        {"max_len", config.synthetic.max_len},
        {"train_size", config.synthetic.train_size},
        {"dev_size", config.synthetic.dev_size},
        {"test_size", config.synthetic.test_size},
    };
    cfg["embed_dim"] = config.embed_dim;
    cfg["model_max_len"] = config.model_max_len;
    cfg["epochs"] = config.epochs;
    cfg["learning_rate"] = config.learning_rate;
    cfg["batch_size"] = config.batch_size;
    cfg["model_path"] = config.model_path;
    nlohmann::json fa_names = nlohmann::json::array();
    for (FaKind fa : config.fas) fa_names.push_back(fa_name(fa));
    cfg["fas"] = fa_names;
    cfg["ratios"] = config.ratios;
    cfg["soft_samples"] = config.soft_samples;
    cfg["epsilon"] = config.epsilon;
    cfg["ig_steps"] = config.ig_steps;
    cfg["token_score_rule"] =
        config.token_score_rule == TokenScoreRule::abs_sum ? "abs_sum"
                                                           : "l2_norm";
    cfg["soft_aggregation"] =
        config.soft_aggregation == SoftAggregation::mean_probability
            ? "mean_probability"
            : "mean_metric";
    cfg["adapter_cmd"] = config.adapter_cmd;
    cfg["adapter_timeout_ms"] = config.adapter_timeout_ms;
    cfg["attribution_import"] = config.attribution_import;
    cfg["external_fa_label"] = config.external_fa_label;
    j["config"] = cfg;

    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(params.fingerprint()));
    j["model_fingerprint"] = fp;
    if (!epoch_loss.empty()) {
      j["epoch_loss"] = epoch_loss;
    }
    j["accuracy"] = {
        {"train", summary.train_accuracy},
        {"dev", summary.dev_accuracy},
        {"test", summary.test_accuracy},
    };
    const std::size_t rows_per_side =
        test_corpus.size() * config.fas.size() *
        (2 * config.ratios.size() + 4);
    j["counts"] = {
        {"instances", test_corpus.size()},
        {"excluded_instances", summary.excluded_instances},
        {"rows_per_side", rows_per_side},
        {"value_rows", (test_corpus.size() - summary.excluded_instances) *
                           config.fas.size() *
                           (2 * config.ratios.size() + 4)},
    };
    std::ofstream out(out_path(run_files::kManifest));
    if (!out) {
      throw DataError("cannot open manifest file");
    }
    out << j.dump(2) << "\n";
  }

  return summary;
}

// ---- curve emission ------------------------------------------------------

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConsistencyError("emit_curves: missing run artifact " + path);
  }
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (first) {
      table.header = std::move(fields);
      first = false;
    } else {
      table.rows.push_back(std::move(fields));
    }
  }
  if (table.header.empty()) {
    throw ConsistencyError("emit_curves: empty report file " + path);
  }
  return table;
}

// per_instance.csv columns.
constexpr std::size_t kColInstance = 0;
constexpr std::size_t kColFa = 1;
constexpr std::size_t kColMetric = 2;
constexpr std::size_t kColRatio = 3;
constexpr std::size_t kColValue = 5;
constexpr std::size_t kColExcluded = 6;

using ValueKey = std::tuple<std::string, std::string, std::string,
                            std::string>;  // instance, fa, metric, ratio

std::map<ValueKey, double> value_map(const CsvTable& table) {
  std::map<ValueKey, double> out;
  for (const auto& row : table.rows) {
    if (row.size() < 8 || row[kColExcluded] == "1" || row[kColValue].empty()) {
      continue;
    }
    out[{row[kColInstance], row[kColFa], row[kColMetric], row[kColRatio]}] =
        std::strtod(row[kColValue].c_str(), nullptr);
  }
  return out;
}

}  // namespace

void emit_curves(const std::string& run_dir) {
  const auto path_of = [&](const char* name) {
    return (fs::path(run_dir) / name).string();
  };

  nlohmann::json manifest;
  {
    std::ifstream in(path_of(run_files::kManifest));
    if (!in) {
      throw ConsistencyError("emit_curves: missing manifest in " + run_dir);
    }
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw ConsistencyError(std::string("emit_curves: bad manifest: ") +
                             e.what());
    }
  }
  std::vector<double> ratios;
  std::vector<std::string> fas;
  double epsilon = 0.0;
  try {
    ratios = manifest.at("config").at("ratios").get<std::vector<double>>();
    fas = manifest.at("config").at("fas").get<std::vector<std::string>>();
    epsilon = manifest.at("config").at("epsilon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConsistencyError(std::string("emit_curves: bad manifest: ") +
                           e.what());
  }

  const CsvTable fa_table = read_csv(path_of(run_files::kPerInstance));
  const CsvTable cp_table = read_csv(path_of(run_files::kCounterpart));
  const auto fa_values = value_map(fa_table);
  const auto cp_values = value_map(cp_table);

  // Instance ids in file order (deduplicated, order-preserving).
  std::vector<std::string> instances;
  for (const auto& row : fa_table.rows) {
    if (instances.empty() || instances.back() != row[kColInstance]) {
      if (std::find(instances.begin(), instances.end(), row[kColInstance]) ==
          instances.end()) {
        instances.push_back(row[kColInstance]);
      }
    }
  }

  const auto mean_over_instances = [&](const std::map<ValueKey, double>& map,
                                       const std::string& fa,
                                       const std::string& metric,
                                       const std::string& ratio)
      -> std::optional<double> {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& id : instances) {
      const auto it = map.find({id, fa, metric, ratio});
      if (it != map.end()) {
        sum += it->second;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  };

  // Faithfulness curves: per-ratio NS/NC means per FA, soft metrics as
  // reference rows with an empty ratio.
  {
    std::ofstream out(path_of(run_files::kCurveFaithfulness));
    if (!out) {
      throw DataError("emit_curves: cannot open faithfulness curve file");
    }
    out << "ratio,fa,metric,mean\n";
    for (const auto& fa : fas) {
      for (const std::string& metric : {std::string("ns"), std::string("nc")}) {
        for (double ratio : ratios) {
          const std::string ratio_str = format_double(ratio);
          const auto mean = mean_over_instances(fa_values, fa, metric,
                                                ratio_str);
          out << ratio_str << ',' << fa << ',' << metric << ','
              << (mean ? format_double(*mean) : "") << "\n";
        }
      }
    }
    for (const auto& fa : fas) {
      for (const std::string& metric :
           {std::string("soft_ns"), std::string("soft_nc")}) {
        const auto mean = mean_over_instances(fa_values, fa, metric, "");
        out << ',' << fa << ',' << metric << ','
            << (mean ? format_double(*mean) : "") << "\n";
      }
    }
  }

  // Diagnosticity curves: per-ratio NS/NC diagnosticity per FA, soft
  // metrics as reference rows.
  {
    std::ofstream out(path_of(run_files::kCurveDiagnosticity));
    if (!out) {
      throw DataError("emit_curves: cannot open diagnosticity curve file");
    }
    out << "ratio,fa,metric,diagnosticity,pairs,wins,ties\n";

    const auto emit_row = [&](const std::string& ratio_str,
                              const std::string& fa,
                              const std::string& metric) {
      std::vector<std::pair<double, double>> pairs;
      for (const auto& id : instances) {
        const auto u = fa_values.find({id, fa, metric, ratio_str});
        const auto v = cp_values.find({id, fa, metric, ratio_str});
        if (u != fa_values.end() && v != cp_values.end()) {
          pairs.emplace_back(u->second, v->second);
        }
      }
      if (pairs.empty()) {
        out << ratio_str << ',' << fa << ',' << metric << ",,0,0,0\n";
        return;
      }
      const auto count = diagnosticity(pairs, epsilon);
      out << ratio_str << ',' << fa << ',' << metric << ','
          << format_double(count.value) << ',' << count.pairs << ','
          << count.wins << ',' << count.ties << "\n";
    };

    for (const auto& fa : fas) {
      for (const std::string& metric : {std::string("ns"), std::string("nc")}) {
        for (double ratio : ratios) {
          emit_row(format_double(ratio), fa, metric);
        }
      }
    }
    for (const auto& fa : fas) {
      emit_row("", fa, "soft_ns");
      emit_row("", fa, "soft_nc");
    }
  }
}

}  // namespace faitheval
