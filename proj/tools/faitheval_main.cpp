#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "faitheval/attribution.hpp"
#include "faitheval/corpus.hpp"
#include "faitheval/harness.hpp"
#include "faitheval/metrics.hpp"
#include "faitheval/model.hpp"
#include "faitheval/perturbation.hpp"
#include "faitheval/text_format.hpp"
#include "faitheval/version.hpp"

namespace {

using namespace faitheval;

// Flags mirror the config-file keys; flags win over the file.
struct FlagSet {
  CLI::App* app;
  std::deque<std::pair<std::string, std::string>> values;

  void add(const std::string& key, const std::string& help) {
    values.emplace_back(key, "");
    app->add_option("--" + key, values.back().second, help);
  }

  void apply(RunConfig& config) const {
    for (const auto& [key, value] : values) {
      if (app->count("--" + key) > 0) {
        apply_config_entry(config, key, value);
      }
    }
  }
};

void add_run_flags(FlagSet& flags) {
  flags.add("seed", "global random seed");
  flags.add("output_dir", "run directory for report files");
  flags.add("dataset_id", "dataset label used in reports");
  flags.add("train_path", "training corpus (JSONL); empty = synthetic");
  flags.add("dev_path", "dev corpus (JSONL)");
  flags.add("test_path", "test corpus (JSONL); empty = synthetic");
  flags.add("vocab_size", "vocabulary size");
  flags.add("class_count", "number of classes");
  flags.add("keywords_per_class", "planted keywords per class");
  flags.add("injection_prob", "keyword injection probability");
  flags.add("min_len", "minimum synthetic sequence length");
  flags.add("max_len", "maximum synthetic sequence length");
  flags.add("train_size", "synthetic training set size");
  flags.add("dev_size", "synthetic dev set size");
  flags.add("test_size", "synthetic test set size");
  flags.add("embed_dim", "embedding dimension");
  flags.add("model_max_len", "maximum sequence length the model accepts");
  flags.add("epochs", "training epochs");
  flags.add("learning_rate", "training learning rate");
  flags.add("batch_size", "training batch size");
  flags.add("model_path", "load a saved model instead of training");
  flags.add("fas", "comma list of feature attributions to evaluate");
  flags.add("ratios", "comma list of rationale ratios");
  flags.add("soft_samples", "Bernoulli mask samples per soft metric (M)");
  flags.add("epsilon", "diagnosticity win margin");
  flags.add("ig_steps", "integrated-gradients path steps");
  flags.add("token_score_rule", "abs_sum | l2_norm");
  flags.add("soft_aggregation", "mean_probability | mean_metric");
  flags.add("adapter_cmd", "external predictor command (line protocol)");
  flags.add("adapter_timeout_ms", "adapter response timeout");
  flags.add("attribution_import", "JSONL attribution scores for fa=external");
  flags.add("external_fa_label", "fa label to select from the import file");
}

int run_selfcheck() {
  int failures = 0;
  const auto check = [&failures](const std::string& name, bool ok,
                                 const std::string& detail = "") {
    if (ok) {
      std::printf("[ok]   %s\n", name.c_str());
    } else {
      ++failures;
      std::printf("[FAIL] %s%s%s\n", name.c_str(), detail.empty() ? "" : ": ",
                  detail.c_str());
    }
  };
  const auto near = [](double a, double b, double tol) {
    return std::abs(a - b) <= tol;
  };

  {
    const auto p = softmax(std::vector<double>{0.0, 0.0, 0.0});
    check("softmax symmetry", near(p[0], 1.0 / 3.0, 1e-15) &&
                                  near(p[2], 1.0 / 3.0, 1e-15));
    const auto q = softmax(std::vector<double>{0.0, std::log(3.0)});
    check("softmax hand value", near(q[0], 0.25, 1e-12) &&
                                    near(q[1], 0.75, 1e-12));
  }
  {
    RngStream a(42, {1, 2});
    RngStream b = RngStream(42, {1}).child(2);
    bool same = true;
    for (int i = 0; i < 1000; ++i) {
      same = same && a.next_u64() == b.next_u64();
    }
    check("rng split associativity", same);
    check("rng stream independence",
          RngStream(42, {1}).next_u64() != RngStream(42, {2}).next_u64());
  }
  {
    const auto ones = bernoulli_mask(RngStream(7, {}), 1.0, 8);
    const auto zeros = bernoulli_mask(RngStream(7, {}), 0.0, 8);
    bool ok = true;
    for (auto v : ones) ok = ok && v == 1;
    for (auto v : zeros) ok = ok && v == 0;
    check("bernoulli degenerate masks", ok);
  }
  {
    Matrix a(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Matrix b(3, 3, {9, 8, 7, 6, 5, 4, 3, 2, 1});
    const Matrix c = matmul(a, b);
    check("matrix 3x3 oracle",
          c(0, 0) == 30 && c(1, 1) == 69 && c(2, 2) == 90 && c(0, 2) == 18);
  }
  {
    RngStream rng(11, {});
    bool ok = true;
    for (int rep = 0; rep < 10 && ok; ++rep) {
      auto params = ModelParams::init(12, 6, 2, 16, rng.child(rep));
      Matrix x(4, 6);
      RngStream xr = rng.child(100 + rep);
      for (auto& v : x.data()) v = 2.0 * xr.next_double() - 1.0;
      const auto trace = forward(x, params);
      const auto grads = backward_input_grad(trace, params, trace.predicted);
      const double h = 1e-5;
      for (std::size_t i = 0; i < x.size() && ok; i += 5) {
        Matrix xp = x, xm = x;
        xp.data()[i] += h;
        xm.data()[i] -= h;
        const double fd = (forward(xp, params).logits[trace.predicted] -
                           forward(xm, params).logits[trace.predicted]) /
                          (2 * h);
        const double a = grads.wrt_input.data()[i];
        ok = std::abs(a) < 1e-8 ? std::abs(a - fd) <= 1e-8
                                : std::abs(a - fd) / std::abs(a) <= 1e-4;
      }
      check("gradient vs finite difference (draw " + std::to_string(rep) + ")",
            ok);
    }
  }
  {
    RngStream rng(13, {});
    Matrix x(5, 4);
    for (auto& v : x.data()) v = rng.next_double() - 0.5;
    AttributionScores s;
    s.raw = {0.9, 0.1, 0.5, 0.3, 0.7};
    s.normalized = normalize_scores(s.raw);
    const auto r = top_k_rationale(s, 0.5);
    const Matrix kept = hard_retain(x, r);
    const Matrix removed = hard_remove(x, r);
    bool ok = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
      ok = ok && kept.data()[i] + removed.data()[i] == x.data()[i];
    }
    check("hard retain/remove partition", ok);
  }
  {
    const auto ns = normalized_sufficiency({0.9, 0.7, 0.4});
    const auto nc = normalized_comprehensiveness({0.9, 0.6, 0.4});
    const std::vector<double> retain{0.8};
    const std::vector<double> remove{0.5};
    const auto sns = soft_ns(0.9, retain, 0.4);
    const auto snc = soft_nc(0.9, remove, 0.4);
    check("metric hand values",
          ns && near(*ns, 0.6, 1e-12) && nc && near(*nc, 0.6, 1e-12) &&
              sns && near(*sns, 0.8, 1e-12) && snc && near(*snc, 0.8, 1e-12));
    const std::vector<double> grid{0.1, 0.1, 0.2, 0.3, 0.8};
    check("aopc hand value", near(aopc(grid, 5), 0.3, 1e-12));
    const std::vector<std::pair<double, double>> pairs{
        {1, 0}, {1, 0}, {1, 0}, {0, 1}};
    check("diagnosticity count", near(diagnosticity(pairs).value, 0.75, 0.0));
    const std::vector<double> a{1, 2, 3};
    const std::vector<double> b{4, 5, 6};
    check("rank-sum exact", near(rank_sum_test(a, b), 0.1, 1e-12));
  }

  std::printf(failures == 0 ? "selfcheck passed\n"
                            : "selfcheck FAILED (%d)\n",
              failures);
  return failures == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"faithfulness metrics for feature-attribution explanations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kLibraryVersion);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic corpus");
  std::string gen_out;
  FlagSet gen_flags{gen};
  gen->add_option("--out-dir", gen_out, "directory for train/dev/test.jsonl")
      ->required();
  add_run_flags(gen_flags);

  // train
  auto* tr = app.add_subcommand("train", "train the toy classifier");
  std::string tr_corpus, tr_out, tr_config;
  FlagSet tr_flags{tr};
  tr->add_option("--corpus", tr_corpus, "training corpus (JSONL)")->required();
  tr->add_option("--out", tr_out, "output model file")->required();
  tr->add_option("--config", tr_config, "key=value config file");
  add_run_flags(tr_flags);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "run the full metric sweep");
  std::string ev_config;
  FlagSet ev_flags{ev};
  ev->add_option("--config", ev_config, "key=value config file");
  add_run_flags(ev_flags);

  // curves
  auto* cv = app.add_subcommand("curves", "emit per-ratio curve files");
  std::string cv_run;
  cv->add_option("--run", cv_run, "completed run directory")->required();

  // selfcheck
  auto* sc = app.add_subcommand("selfcheck", "run built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      RunConfig config;
      gen_flags.apply(config);
      const auto corpora =
          generate_synthetic(config.synthetic,
                             RngStream(config.seed, {}).child(0xC0));
      std::filesystem::create_directories(gen_out);
      save_corpus(gen_out + "/train.jsonl", corpora.train);
      save_corpus(gen_out + "/dev.jsonl", corpora.dev);
      save_corpus(gen_out + "/test.jsonl", corpora.test);
      std::printf("wrote %zu/%zu/%zu instances under %s\n",
                  corpora.train.size(), corpora.dev.size(),
                  corpora.test.size(), gen_out.c_str());
    } else if (tr->parsed()) {
      RunConfig config;
      if (!tr_config.empty()) config = load_run_config(tr_config);
      tr_flags.apply(config);
      const auto corpus = load_corpus(tr_corpus, config.corpus_limits());
      const auto result = train(corpus, config.training_config(),
                                RngStream(config.seed, {}).child(0x7A));
      save_model(result.params, tr_out);
      std::printf("loss %s -> %s over %d epochs; train accuracy %s\n",
                  format_double(result.epoch_loss.front()).c_str(),
                  format_double(result.epoch_loss.back()).c_str(),
                  config.epochs,
                  format_double(accuracy(corpus, result.params)).c_str());
    } else if (ev->parsed()) {
      RunConfig config;
      if (!ev_config.empty()) config = load_run_config(ev_config);
      ev_flags.apply(config);
      const auto summary = run_evaluation(config);
      std::printf("run directory: %s\n", summary.run_dir.c_str());
      std::printf("instances: %zu (%zu excluded), test accuracy %s\n",
                  summary.instance_count, summary.excluded_instances,
                  format_double(summary.test_accuracy).c_str());
      for (const auto& report : summary.diagnosticity) {
        if (report.fa_label != "average") continue;
        std::string note;
        if (report.p_value) {
          note = ", p vs hard " + format_double(*report.p_value);
        }
        std::printf("diagnosticity %-8s avg %.3f (%zu pairs%s)\n",
                    metric_name(report.metric), report.value,
                    report.pair_count, note.c_str());
      }
    } else if (cv->parsed()) {
      emit_curves(cv_run);
      std::printf("curve files written under %s\n", cv_run.c_str());
    } else if (sc->parsed()) {
      return run_selfcheck();
    }
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
