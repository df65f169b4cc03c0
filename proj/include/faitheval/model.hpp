#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "faitheval/numerics.hpp"

namespace faitheval {

// A tokenized instance with its gold label.
struct TokenSequence {
  std::string id;
  std::vector<int> tokens;
  int label = 0;
};

struct ModelParams {
  int vocab_size = 0;   // V
  int embed_dim = 0;    // d
  int class_count = 0;  // C
  int max_len = 0;

  Matrix embedding;             // V x d
  Matrix w_query, w_key, w_value;  // d x d each
  Matrix w_out;                 // d x C
  std::vector<double> b_out;    // C

  // Uniform init in [-0.1, 0.1] for all weights, zero bias.
  static ModelParams init(int vocab_size, int embed_dim, int class_count,
                          int max_len, RngStream rng);

  void validate() const;
  // Hash over shapes and raw weight bytes; traces carry it so a backward
  // pass against mutated params is caught.
  std::uint64_t fingerprint() const;
};

void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

// Everything forward() computes, kept for the backward pass:
//   Q = X Wq, K = X Wk, V = X Wv
//   S = Q K^T / sqrt(d),  A = row-softmax(S)
//   H = A V,  pooled = column mean of H
//   logits = pooled Wo + b,  probs = softmax(logits)
struct ForwardTrace {
  Matrix input;        // X, T x d
  Matrix queries;      // T x d
  Matrix keys;         // T x d
  Matrix values;       // T x d
  Matrix attn_logits;  // S, T x T
  Matrix attention;    // A, T x T, rows sum to 1
  Matrix hidden;       // H, T x d
  std::vector<double> pooled;  // d
  std::vector<double> logits;  // C
  std::vector<double> probs;   // C
  int predicted = 0;           // argmax of probs, lowest index on ties
  std::uint64_t params_fingerprint = 0;
};

// Row i is the embedding of token i. No position embeddings.
Matrix embed(const TokenSequence& seq, const ModelParams& params);

ForwardTrace forward(const Matrix& x, const ModelParams& params);

// forward() with attention logits of token j offset by column_bias[j] in
// every row (soft masking in attention space).
ForwardTrace forward_with_attention_bias(const Matrix& x,
                                         const ModelParams& params,
                                         std::span<const double> column_bias);

// Probability of `cls` on input x. Callers evaluating perturbed inputs
// pass the class predicted on the original input.
double predict_prob(const Matrix& x, const ModelParams& params, int cls);

struct InputGradients {
  Matrix wrt_input;      // d logit_cls / dX, T x d
  Matrix wrt_attention;  // d logit_cls / dA, T x T
};

// Exact reverse-mode gradients of the class logit. Throws
// ConsistencyError if the trace was produced with different params.
InputGradients backward_input_grad(const ForwardTrace& trace,
                                   const ModelParams& params, int cls);

struct TrainingConfig {
  int vocab_size = 64;
  int embed_dim = 16;
  int class_count = 2;
  int max_len = 32;
  int epochs = 30;
  double learning_rate = 1.0;
  int batch_size = 16;

  void validate() const;
};

struct TrainResult {
  ModelParams params;
  // epoch_loss[0] is the pre-training loss; one more entry per epoch.
  std::vector<double> epoch_loss;
};

// Plain minibatch gradient descent with a fixed learning rate.
// Deterministic given (corpus, config, rng). Throws TrainingError with
// the epoch index if the loss becomes non-finite.
TrainResult train(const std::vector<TokenSequence>& corpus,
                  const TrainingConfig& config, RngStream rng);

double mean_cross_entropy(const std::vector<TokenSequence>& corpus,
                          const ModelParams& params);
double accuracy(const std::vector<TokenSequence>& corpus,
                const ModelParams& params);

}  // namespace faitheval
