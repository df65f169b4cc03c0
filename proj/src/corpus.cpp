#include "faitheval/corpus.hpp"

#include <fstream>

#include "json.hpp"

namespace faitheval {

std::vector<TokenSequence> load_corpus(const std::string& path,
                                       const CorpusLimits& limits) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("load_corpus: cannot open " + path);
  }
  std::vector<TokenSequence> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_corpus: parse error at line " +
                      std::to_string(line_no) + " of " + path + ": " +
                      e.what());
    }
    TokenSequence seq;
    try {
      seq.id = j.at("id").get<std::string>();
      seq.tokens = j.at("tokens").get<std::vector<int>>();
      seq.label = j.at("label").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_corpus: malformed record at line " +
                      std::to_string(line_no) + " of " + path + ": " +
                      e.what());
    }
    if (seq.tokens.empty() ||
        static_cast<int>(seq.tokens.size()) > limits.max_len) {
      throw DataError("load_corpus: record '" + seq.id +
                      "' violates length bounds");
    }
    for (int tok : seq.tokens) {
      if (tok < 0 || tok >= limits.vocab_size) {
        throw DataError("load_corpus: record '" + seq.id +
                        "' has token index outside vocabulary");
      }
    }
    if (seq.label < 0 || seq.label >= limits.class_count) {
      throw DataError("load_corpus: record '" + seq.id +
                      "' has label outside class range");
    }
    corpus.push_back(std::move(seq));
  }
  if (corpus.empty()) {
    throw DataError("load_corpus: empty corpus in " + path);
  }
  return corpus;
}

void save_corpus(const std::string& path,
                 std::span<const TokenSequence> corpus) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("save_corpus: cannot open " + path);
  }
  for (const auto& seq : corpus) {
    nlohmann::json j;
    j["id"] = seq.id;
    j["tokens"] = seq.tokens;
    j["label"] = seq.label;
    out << j.dump() << "\n";
  }
}

void SyntheticSpec::validate() const {
  if (class_count < 2) {
    throw ParameterError("SyntheticSpec: need at least two classes");
  }
  if (keywords_per_class < 1) {
    throw ParameterError("SyntheticSpec: need at least one keyword per class");
  }
  if (vocab_size <= keyword_count()) {
    throw ParameterError(
        "SyntheticSpec: vocabulary too small for keywords plus fillers");
  }
  if (!(injection_prob >= 0.0 && injection_prob <= 1.0)) {
    throw ParameterError("SyntheticSpec: injection_prob must lie in [0,1]");
  }
  if (min_len < 2 || max_len < min_len) {
    throw ParameterError("SyntheticSpec: lengths must satisfy 2 <= min <= max");
  }
  if (train_size < 1 || dev_size < 0 || test_size < 1) {
    throw ParameterError("SyntheticSpec: corpus sizes invalid");
  }
}

namespace {

constexpr std::uint64_t kTrainSplit = 1;
constexpr std::uint64_t kDevSplit = 2;
constexpr std::uint64_t kTestSplit = 3;

std::size_t uniform_index(RngStream& rng, std::size_t n) {
  return std::min(static_cast<std::size_t>(rng.next_double() *
                                           static_cast<double>(n)),
                  n - 1);
}

std::vector<TokenSequence> generate_split(const SyntheticSpec& spec,
                                          const std::string& prefix,
                                          int count, RngStream split_rng) {
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(count));
  const int filler_base = spec.keyword_count();
  const int filler_count = spec.vocab_size - filler_base;
  for (int idx = 0; idx < count; ++idx) {
    RngStream rng = split_rng.child(static_cast<std::uint64_t>(idx));
    TokenSequence seq;
    seq.id = prefix + "-" + std::to_string(idx);
    const auto len = static_cast<std::size_t>(
        spec.min_len +
        static_cast<int>(uniform_index(rng, static_cast<std::size_t>(
                                                spec.max_len - spec.min_len +
                                                1))));
    seq.label = static_cast<int>(
        uniform_index(rng, static_cast<std::size_t>(spec.class_count)));
    seq.tokens.resize(len);
    for (auto& tok : seq.tokens) {
      tok = filler_base +
            static_cast<int>(
                uniform_index(rng, static_cast<std::size_t>(filler_count)));
    }
    if (rng.next_double() < spec.injection_prob) {
      const auto pos = uniform_index(rng, len);
      const auto keyword = static_cast<int>(
          uniform_index(rng, static_cast<std::size_t>(spec.keywords_per_class)));
      seq.tokens[pos] = seq.label * spec.keywords_per_class + keyword;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

SyntheticCorpora generate_synthetic(const SyntheticSpec& spec, RngStream rng) {
  spec.validate();
  SyntheticCorpora corpora;
  corpora.train =
      generate_split(spec, "train", spec.train_size, rng.child(kTrainSplit));
  corpora.dev =
      generate_split(spec, "dev", spec.dev_size, rng.child(kDevSplit));
  corpora.test =
      generate_split(spec, "test", spec.test_size, rng.child(kTestSplit));
  return corpora;
}

}  // namespace faitheval
