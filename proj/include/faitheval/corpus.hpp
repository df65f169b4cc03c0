#pragma once

#include <span>
#include <string>
#include <vector>

#include "faitheval/model.hpp"
#include "faitheval/numerics.hpp"

namespace faitheval {

struct CorpusLimits {
  int vocab_size = 0;
  int class_count = 0;
  int max_len = 0;
};

// JSONL records {"id": str, "tokens": [int...], "label": int}, one per
// line, stable order by file position. Validation failures name the
// offending line or record id.
std::vector<TokenSequence> load_corpus(const std::string& path,
                                       const CorpusLimits& limits);
void save_corpus(const std::string& path,
                 std::span<const TokenSequence> corpus);

// Desk-scale classification corpus: each class owns a disjoint keyword
// set; an instance's label is carried by a planted keyword, surrounded
// by filler tokens drawn from the non-keyword vocabulary.
struct SyntheticSpec {
  int vocab_size = 64;
  int class_count = 2;
  int keywords_per_class = 2;
  double injection_prob = 1.0;
  int min_len = 4;
  int max_len = 12;
  int train_size = 256;
  int dev_size = 64;
  int test_size = 128;

  void validate() const;
  // Keywords for class c are tokens [c*K, (c+1)*K); fillers start at
  // class_count*K.
  int keyword_count() const { return class_count * keywords_per_class; }
};

struct SyntheticCorpora {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> dev;
  std::vector<TokenSequence> test;
};

SyntheticCorpora generate_synthetic(const SyntheticSpec& spec, RngStream rng);

}  // namespace faitheval
