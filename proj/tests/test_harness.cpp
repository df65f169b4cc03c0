#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "faitheval/harness.hpp"
#include "faitheval/text_format.hpp"

using namespace faitheval;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("faitheval_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::map<std::string, std::string> snapshot_dir(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      out[fs::relative(entry.path(), dir).string()] = read_file(entry.path());
    }
  }
  return out;
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) {
    if (c == '\n') ++n;
  }
  return n;
}

RunConfig small_config(const fs::path& out_dir) {
  RunConfig config;
  config.seed = 7;
  config.output_dir = out_dir.string();
  config.synthetic.train_size = 128;
  config.synthetic.dev_size = 16;
  config.synthetic.test_size = 24;
  config.epochs = 30;
  config.soft_samples = 8;
  config.ig_steps = 20;
  return config;
}

}  // namespace

TEST_CASE("corpus round-trips through JSONL") {
  SyntheticSpec spec;
  spec.train_size = 100;
  spec.dev_size = 0;
  spec.test_size = 1;
  const auto corpora = generate_synthetic(spec, RngStream(3, {0xC0}));
  const auto dir = fresh_dir("corpus_rt");
  const auto path = (dir / "c.jsonl").string();
  save_corpus(path, corpora.train);
  const auto loaded =
      load_corpus(path, CorpusLimits{spec.vocab_size, spec.class_count, 32});
  REQUIRE(loaded.size() == corpora.train.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].id == corpora.train[i].id);
    CHECK(loaded[i].tokens == corpora.train[i].tokens);
    CHECK(loaded[i].label == corpora.train[i].label);
  }
}

TEST_CASE("corpus loading rejects bad files") {
  const auto dir = fresh_dir("corpus_bad");
  const CorpusLimits limits{64, 2, 32};

  { std::ofstream(dir / "empty.jsonl"); }
  CHECK_THROWS_AS(load_corpus((dir / "empty.jsonl").string(), limits),
                  DataError);

  {
    std::ofstream out(dir / "oov.jsonl");
    out << R"({"id":"x-1","tokens":[5,99],"label":0})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus((dir / "oov.jsonl").string(), limits),
                       doctest::Contains("x-1"), DataError);

  {
    std::ofstream out(dir / "label.jsonl");
    out << R"({"id":"x-2","tokens":[5],"label":7})" << "\n";
  }
  CHECK_THROWS_AS(load_corpus((dir / "label.jsonl").string(), limits),
                  DataError);

  {
    std::ofstream out(dir / "parse.jsonl");
    out << R"({"id":"ok","tokens":[1],"label":0})" << "\n";
    out << "{broken" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus((dir / "parse.jsonl").string(), limits),
                       doctest::Contains("line 2"), DataError);

  CHECK_THROWS_AS(load_corpus((dir / "missing.jsonl").string(), limits),
                  DataError);
}

TEST_CASE("synthetic generation is deterministic and plants keywords") {
  SyntheticSpec spec;
  spec.train_size = 40;
  spec.dev_size = 8;
  spec.test_size = 8;
  const auto a = generate_synthetic(spec, RngStream(11, {0xC0}));
  const auto b = generate_synthetic(spec, RngStream(11, {0xC0}));
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].tokens == b.train[i].tokens);
    CHECK(a.train[i].label == b.train[i].label);
  }

  // injection_prob = 1: exactly one keyword, and it matches the label
  const int kw = spec.keyword_count();
  for (const auto& seq : a.train) {
    int keyword_hits = 0;
    int keyword_class = -1;
    for (int tok : seq.tokens) {
      CHECK(tok < spec.vocab_size);
      if (tok < kw) {
        ++keyword_hits;
        keyword_class = tok / spec.keywords_per_class;
      }
    }
    CHECK(keyword_hits == 1);
    CHECK(keyword_class == seq.label);
    CHECK(seq.tokens.size() >= static_cast<std::size_t>(spec.min_len));
    CHECK(seq.tokens.size() <= static_cast<std::size_t>(spec.max_len));
  }

  SyntheticSpec bad = spec;
  bad.min_len = 1;
  CHECK_THROWS_AS(generate_synthetic(bad, RngStream(1, {})), ParameterError);
  bad = spec;
  bad.vocab_size = bad.keyword_count();
  CHECK_THROWS_AS(generate_synthetic(bad, RngStream(1, {})), ParameterError);
}

TEST_CASE("config files parse and validate") {
  const auto dir = fresh_dir("config");
  {
    std::ofstream out(dir / "run.cfg");
    out << "# comment\n";
    out << "seed = 99\n";
    out << "ratios = 0.1, 0.5\n";
    out << "fas = attention, random\n";
    out << "soft_samples = 4\n";
    out << "output_dir = " << (dir / "out").string() << "\n";
  }
  const auto config = load_run_config((dir / "run.cfg").string());
  CHECK(config.seed == 99);
  CHECK(config.ratios == std::vector<double>{0.1, 0.5});
  REQUIRE(config.fas.size() == 2);
  CHECK(config.fas[0] == FaKind::attention);
  CHECK(config.fas[1] == FaKind::random);
  CHECK(config.soft_samples == 4);

  RunConfig c;
  CHECK_THROWS_AS(apply_config_entry(c, "bogus_key", "1"), ParameterError);
  CHECK_THROWS_AS(apply_config_entry(c, "seed", "abc"), ParameterError);
  CHECK_THROWS_AS(apply_config_entry(c, "fas", "nope"), ParameterError);

  c.output_dir = "x";
  c.ratios = {0.5, 0.1};
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c.ratios = {0.1, 0.5};
  c.soft_samples = 0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c.soft_samples = 4;
  c.fas = {FaKind::external};
  CHECK_THROWS_AS(c.validate(), ParameterError);  // import path missing
  c.fas = {FaKind::deeplift};
  c.adapter_cmd = "some-adapter";
  CHECK_THROWS_AS(c.validate(), ParameterError);  // needs internals
}

TEST_CASE("run_evaluation writes complete, deterministic reports") {
  const auto dir = fresh_dir("run_main");
  const RunConfig config = small_config(dir);

  const auto summary = run_evaluation(config);
  CHECK(summary.instance_count == 24);
  CHECK(summary.test_accuracy >= 0.95);
  CHECK(summary.train_accuracy >= 0.95);

  const std::size_t n = 24, f = 6, r = 5;
  const std::string per_instance = read_file(dir / run_files::kPerInstance);
  CHECK(count_lines(per_instance) == 1 + n * f * (2 * r + 4));
  const std::string counterpart = read_file(dir / run_files::kCounterpart);
  CHECK(count_lines(counterpart) == 1 + n * f * (2 * r + 4));

  // value-bearing rows = rows minus exclusions
  std::size_t value_rows = 0;
  std::istringstream lines(per_instance);
  std::string line;
  std::getline(lines, line);  // header
  while (std::getline(lines, line)) {
    const auto fields = split(line, ',');
    REQUIRE(fields.size() == 8);
    if (!fields[5].empty()) ++value_rows;
  }
  CHECK(value_rows == (n - summary.excluded_instances) * f * (2 * r + 4));

  // diagnosticity: one row per (fa + average) x metric
  const std::string diag = read_file(dir / run_files::kDiagnosticity);
  CHECK(count_lines(diag) == 1 + (f + 1) * 4);
  for (const auto& report : summary.diagnosticity) {
    CHECK(report.pair_count > 0);
    CHECK(report.value >= 0.0);
    CHECK(report.value <= 1.0);
    if (report.metric == MetricKind::soft_ns ||
        report.metric == MetricKind::soft_nc) {
      CHECK(report.p_value.has_value());
    }
  }

  // determinism: identical config -> byte-identical run directory
  const auto first = snapshot_dir(dir);
  run_evaluation(config);
  CHECK(snapshot_dir(dir) == first);

  // parallel and serial execution produce identical outputs
  setenv("FAITHEVAL_WORKERS", "4", 1);
  run_evaluation(config);
  unsetenv("FAITHEVAL_WORKERS");
  CHECK(snapshot_dir(dir) == first);
}

TEST_CASE("curve emission has the documented cardinality and re-emits identically") {
  const auto dir = fresh_dir("run_curves");
  RunConfig config = small_config(dir);
  run_evaluation(config);

  emit_curves(dir.string());
  const std::string faith = read_file(dir / run_files::kCurveFaithfulness);
  // 5 ratios x 6 FAs x 2 hard metrics + 6 FAs x 2 soft reference rows
  CHECK(count_lines(faith) == 1 + 5 * 6 * 2 + 6 * 2);
  const std::string diag = read_file(dir / run_files::kCurveDiagnosticity);
  CHECK(count_lines(diag) == 1 + 5 * 6 * 2 + 6 * 2);

  emit_curves(dir.string());
  CHECK(read_file(dir / run_files::kCurveFaithfulness) == faith);
  CHECK(read_file(dir / run_files::kCurveDiagnosticity) == diag);

  CHECK_THROWS_AS(emit_curves((dir / "nope").string()), ConsistencyError);
  fs::remove(dir / run_files::kPerInstance);
  CHECK_THROWS_AS(emit_curves(dir.string()), ConsistencyError);
}

TEST_CASE("evaluation through the self-hosted adapter matches in-process") {
  const auto builtin_dir = fresh_dir("run_builtin");
  RunConfig config = small_config(builtin_dir);
  config.synthetic.test_size = 10;
  config.fas = {FaKind::attention, FaKind::input_x_grad, FaKind::random};
  run_evaluation(config);

  RunConfig adapter_config = config;
  const auto adapter_dir = fresh_dir("run_adapter");
  adapter_config.output_dir = adapter_dir.string();
  adapter_config.adapter_cmd =
      std::string(MODEL_ADAPTER_BIN) + " --model " +
      (builtin_dir / run_files::kModel).string();
  adapter_config.model_path = (builtin_dir / run_files::kModel).string();
  run_evaluation(adapter_config);

  CHECK(read_file(builtin_dir / run_files::kPerInstance) ==
        read_file(adapter_dir / run_files::kPerInstance));
  CHECK(read_file(builtin_dir / run_files::kCounterpart) ==
        read_file(adapter_dir / run_files::kCounterpart));
  CHECK(read_file(builtin_dir / run_files::kDiagnosticity) ==
        read_file(adapter_dir / run_files::kDiagnosticity));
}

TEST_CASE("imported attributions drive the external FA") {
  const auto dir = fresh_dir("run_external");
  RunConfig config = small_config(dir);
  config.synthetic.test_size = 6;

  // First generate the corpus alone to learn the instance shapes.
  const auto corpora =
      generate_synthetic(config.synthetic, RngStream(config.seed, {0xC0}));
  const auto import_path = (dir / "scores.jsonl").string();
  {
    std::ofstream out(import_path);
    for (const auto& seq : corpora.test) {
      out << R"({"id":")" << seq.id << R"(","fa":"my_method","scores":[)";
      for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
        out << (i ? "," : "") << format_double(0.1 * static_cast<double>(i));
      }
      out << "]}\n";
    }
  }

  config.fas = {FaKind::external, FaKind::random};
  config.attribution_import = import_path;
  config.external_fa_label = "my_method";
  const auto summary = run_evaluation(config);
  CHECK(summary.instance_count == 6);
  const std::string per_instance = read_file(dir / run_files::kPerInstance);
  CHECK(per_instance.find("external") != std::string::npos);

  // a label with no records fails loudly, naming the instance
  config.external_fa_label = "other_method";
  CHECK_THROWS_AS(run_evaluation(config), DataError);
}

TEST_CASE("the CLI maps error classes to exit codes") {
  const std::string bin = FAITHEVAL_BIN;
  const auto dir = fresh_dir("cli");
  const auto run = [](const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  CHECK(run(bin) == 1);  // missing subcommand
  CHECK(run(bin + " evaluate --ratios 0.5,0.1 --output_dir " +
            (dir / "x").string()) == 1);
  CHECK(run(bin + " train --corpus " + (dir / "missing.jsonl").string() +
            " --out " + (dir / "m.json").string()) == 2);
  CHECK(run(bin + " curves --run " + (dir / "nope").string()) == 3);
  CHECK(run(bin + " selfcheck") == 0);

  // end-to-end: generate, train, evaluate, curves
  const auto data = dir / "data";
  CHECK(run(bin + " generate --out-dir " + data.string() +
            " --train_size 64 --dev_size 4 --test_size 6") == 0);
  CHECK(run(bin + " train --corpus " + (data / "train.jsonl").string() +
            " --out " + (dir / "model.json").string() + " --epochs 30") == 0);
  const auto run_dir = dir / "run";
  CHECK(run(bin + " evaluate --train_path " + (data / "train.jsonl").string() +
            " --test_path " + (data / "test.jsonl").string() +
            " --model_path " + (dir / "model.json").string() +
            " --fas attention,random --soft_samples 4 --ig_steps 5" +
            " --output_dir " + run_dir.string()) == 0);
  CHECK(run(bin + " curves --run " + run_dir.string()) == 0);
  CHECK(fs::exists(run_dir / run_files::kCurveFaithfulness));
}
