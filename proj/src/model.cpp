#include "faitheval/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "faitheval/version.hpp"
#include "json.hpp"

namespace faitheval {

namespace {

constexpr std::uint64_t kInitStream = 0x6d6f64656c5f6930ULL;
constexpr std::uint64_t kShuffleStream = 0x6d6f64656c5f7368ULL;

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double half_range,
                      RngStream& rng) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      m(i, j) = (2.0 * rng.next_double() - 1.0) * half_range;
    }
  }
  return m;
}

void check_class(const ModelParams& params, int cls) {
  if (cls < 0 || cls >= params.class_count) {
    throw ParameterError("class index out of range");
  }
}

}  // namespace

ModelParams ModelParams::init(int vocab_size, int embed_dim, int class_count,
                              int max_len, RngStream rng) {
  if (vocab_size < 1 || embed_dim < 1 || class_count < 2 || max_len < 1) {
    throw ParameterError("ModelParams::init: invalid dimensions");
  }
  ModelParams p;
  p.vocab_size = vocab_size;
  p.embed_dim = embed_dim;
  p.class_count = class_count;
  p.max_len = max_len;
  const double r = 0.1;
  p.embedding = uniform_matrix(vocab_size, embed_dim, r, rng);
  p.w_query = uniform_matrix(embed_dim, embed_dim, r, rng);
  p.w_key = uniform_matrix(embed_dim, embed_dim, r, rng);
  p.w_value = uniform_matrix(embed_dim, embed_dim, r, rng);
  p.w_out = uniform_matrix(embed_dim, class_count, r, rng);
  p.b_out.assign(class_count, 0.0);
  return p;
}

void ModelParams::validate() const {
  const auto su = [](int v) { return static_cast<std::size_t>(v); };
  if (vocab_size < 1 || embed_dim < 1 || class_count < 2 || max_len < 1) {
    throw ShapeError("ModelParams: invalid dimensions");
  }
  if (embedding.rows() != su(vocab_size) || embedding.cols() != su(embed_dim) ||
      w_query.rows() != su(embed_dim) || w_query.cols() != su(embed_dim) ||
      w_key.rows() != su(embed_dim) || w_key.cols() != su(embed_dim) ||
      w_value.rows() != su(embed_dim) || w_value.cols() != su(embed_dim) ||
      w_out.rows() != su(embed_dim) || w_out.cols() != su(class_count) ||
      b_out.size() != su(class_count)) {
    throw ShapeError("ModelParams: weight shapes inconsistent with (V,d,C)");
  }
  if (!embedding.all_finite() || !w_query.all_finite() ||
      !w_key.all_finite() || !w_value.all_finite() || !w_out.all_finite() ||
      !std::all_of(b_out.begin(), b_out.end(),
                   [](double v) { return std::isfinite(v); })) {
    throw NumericError("ModelParams: non-finite weight");
  }
}

std::uint64_t ModelParams::fingerprint() const {
  // FNV-1a over dims and raw weight bytes.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  const auto absorb_bytes = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ULL;
    }
  };
  const int dims[4] = {vocab_size, embed_dim, class_count, max_len};
  absorb_bytes(dims, sizeof(dims));
  for (const Matrix* m :
       {&embedding, &w_query, &w_key, &w_value, &w_out}) {
    absorb_bytes(m->data().data(), m->data().size() * sizeof(double));
  }
  absorb_bytes(b_out.data(), b_out.size() * sizeof(double));
  return h;
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  return nlohmann::json{
      {"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix(j.at("rows").get<std::size_t>(),
                j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_model(const ModelParams& params, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = kModelFileFormatVersion;
  j["vocab_size"] = params.vocab_size;
  j["embed_dim"] = params.embed_dim;
  j["class_count"] = params.class_count;
  j["max_len"] = params.max_len;
  j["embedding"] = matrix_to_json(params.embedding);
  j["w_query"] = matrix_to_json(params.w_query);
  j["w_key"] = matrix_to_json(params.w_key);
  j["w_value"] = matrix_to_json(params.w_value);
  j["w_out"] = matrix_to_json(params.w_out);
  j["b_out"] = params.b_out;
  std::ofstream out(path);
  if (!out) {
    throw DataError("save_model: cannot open " + path);
  }
  out << j.dump(2) << "\n";
}

ModelParams load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("load_model: cannot open " + path);
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_model: parse error in " + path + ": " + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kModelFileFormatVersion) {
      throw DataError("load_model: unsupported format_version in " + path);
    }
    ModelParams p;
    p.vocab_size = j.at("vocab_size").get<int>();
    p.embed_dim = j.at("embed_dim").get<int>();
    p.class_count = j.at("class_count").get<int>();
    p.max_len = j.at("max_len").get<int>();
    p.embedding = matrix_from_json(j.at("embedding"));
    p.w_query = matrix_from_json(j.at("w_query"));
    p.w_key = matrix_from_json(j.at("w_key"));
    p.w_value = matrix_from_json(j.at("w_value"));
    p.w_out = matrix_from_json(j.at("w_out"));
    p.b_out = j.at("b_out").get<std::vector<double>>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("load_model: malformed model file " + path + ": " +
                    e.what());
  }
}

Matrix embed(const TokenSequence& seq, const ModelParams& params) {
  if (seq.tokens.empty()) {
    throw DataError("embed: empty token sequence '" + seq.id + "'");
  }
  if (static_cast<int>(seq.tokens.size()) > params.max_len) {
    throw DataError("embed: sequence '" + seq.id + "' longer than max_len");
  }
  Matrix x(seq.tokens.size(), params.embed_dim);
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    const int tok = seq.tokens[i];
    if (tok < 0 || tok >= params.vocab_size) {
      throw DataError("embed: token index out of vocabulary in '" + seq.id +
                      "'");
    }
    for (int d = 0; d < params.embed_dim; ++d) {
      x(i, d) = params.embedding(tok, d);
    }
  }
  return x;
}

ForwardTrace forward(const Matrix& x, const ModelParams& params) {
  return forward_with_attention_bias(x, params, {});
}

ForwardTrace forward_with_attention_bias(const Matrix& x,
                                         const ModelParams& params,
                                         std::span<const double> column_bias) {
  const std::size_t t = x.rows();
  const std::size_t d = static_cast<std::size_t>(params.embed_dim);
  if (t == 0 || x.cols() != d) {
    throw ShapeError("forward: input must be T x d with T >= 1");
  }
  if (t > static_cast<std::size_t>(params.max_len)) {
    throw ShapeError("forward: sequence longer than max_len");
  }
  if (!column_bias.empty() && column_bias.size() != t) {
    throw ShapeError("forward: attention bias length != T");
  }

  ForwardTrace trace;
  trace.input = x;
  trace.queries = matmul(x, params.w_query);
  trace.keys = matmul(x, params.w_key);
  trace.values = matmul(x, params.w_value);

  const double scale = 1.0 / std::sqrt(static_cast<double>(params.embed_dim));
  trace.attn_logits = Matrix(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      double s = 0.0;
      for (std::size_t m = 0; m < d; ++m) {
        s += trace.queries(i, m) * trace.keys(j, m);
      }
      s *= scale;
      if (!column_bias.empty()) {
        s += column_bias[j];
      }
      trace.attn_logits(i, j) = s;
    }
  }

  trace.attention = Matrix(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    const auto row = softmax(trace.attn_logits.row(i));
    for (std::size_t j = 0; j < t; ++j) {
      trace.attention(i, j) = row[j];
    }
  }

  trace.hidden = matmul(trace.attention, trace.values);

  trace.pooled.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
      sum += trace.hidden(i, k);
    }
    trace.pooled[k] = sum / static_cast<double>(t);
  }

  trace.logits.assign(params.class_count, 0.0);
  for (int c = 0; c < params.class_count; ++c) {
    double v = params.b_out[c];
    for (std::size_t k = 0; k < d; ++k) {
      v += trace.pooled[k] * params.w_out(k, c);
    }
    trace.logits[c] = v;
  }
  trace.probs = softmax(trace.logits);

  trace.predicted = 0;
  for (int c = 1; c < params.class_count; ++c) {
    if (trace.probs[c] > trace.probs[trace.predicted]) {
      trace.predicted = c;
    }
  }
  trace.params_fingerprint = params.fingerprint();
  return trace;
}

double predict_prob(const Matrix& x, const ModelParams& params, int cls) {
  check_class(params, cls);
  return forward(x, params).probs[cls];
}

namespace detail {

// Shared reverse-mode chain from d(target)/d(logits). Fills parameter
// gradients only when requested (training); input/attention gradients
// always.
struct FullGradients {
  Matrix x;          // T x d
  Matrix attention;  // T x T
  Matrix w_query, w_key, w_value, w_out;
  std::vector<double> b_out;
};

FullGradients backward_from_logits(const ForwardTrace& trace,
                                   const ModelParams& params,
                                   std::span<const double> g_logits,
                                   bool with_param_grads) {
  const std::size_t t = trace.input.rows();
  const std::size_t d = static_cast<std::size_t>(params.embed_dim);

  FullGradients g;

  std::vector<double> g_pooled(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double v = 0.0;
    for (int c = 0; c < params.class_count; ++c) {
      v += params.w_out(k, c) * g_logits[c];
    }
    g_pooled[k] = v;
  }

  Matrix g_hidden(t, d);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      g_hidden(i, k) = g_pooled[k] / static_cast<double>(t);
    }
  }

  g.attention = matmul(g_hidden, transpose(trace.values));
  Matrix g_values = matmul(transpose(trace.attention), g_hidden);

  // Row-softmax Jacobian: gS_ij = A_ij (gA_ij - sum_k gA_ik A_ik).
  Matrix g_attn_logits(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    double dot = 0.0;
    for (std::size_t k = 0; k < t; ++k) {
      dot += g.attention(i, k) * trace.attention(i, k);
    }
    for (std::size_t j = 0; j < t; ++j) {
      g_attn_logits(i, j) = trace.attention(i, j) * (g.attention(i, j) - dot);
    }
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(params.embed_dim));
  Matrix g_queries = matmul(g_attn_logits, trace.keys);
  Matrix g_keys = matmul(transpose(g_attn_logits), trace.queries);
  for (double& v : g_queries.data()) v *= scale;
  for (double& v : g_keys.data()) v *= scale;

  g.x = matmul(g_queries, transpose(params.w_query));
  const Matrix g_x_keys = matmul(g_keys, transpose(params.w_key));
  const Matrix g_x_values = matmul(g_values, transpose(params.w_value));
  for (std::size_t i = 0; i < g.x.size(); ++i) {
    g.x.data()[i] += g_x_keys.data()[i] + g_x_values.data()[i];
  }

  if (with_param_grads) {
    const Matrix xt = transpose(trace.input);
    g.w_query = matmul(xt, g_queries);
    g.w_key = matmul(xt, g_keys);
    g.w_value = matmul(xt, g_values);
    g.w_out = Matrix(d, params.class_count);
    for (std::size_t k = 0; k < d; ++k) {
      for (int c = 0; c < params.class_count; ++c) {
        g.w_out(k, c) = trace.pooled[k] * g_logits[c];
      }
    }
    g.b_out.assign(g_logits.begin(), g_logits.end());
  }
  return g;
}

}  // namespace detail

InputGradients backward_input_grad(const ForwardTrace& trace,
                                   const ModelParams& params, int cls) {
  check_class(params, cls);
  if (trace.params_fingerprint != params.fingerprint()) {
    throw ConsistencyError(
        "backward_input_grad: trace was produced with different params");
  }
  std::vector<double> g_logits(params.class_count, 0.0);
  g_logits[cls] = 1.0;
  auto full = detail::backward_from_logits(trace, params, g_logits, false);
  return InputGradients{std::move(full.x), std::move(full.attention)};
}

void TrainingConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || class_count < 2 || max_len < 1) {
    throw ParameterError("TrainingConfig: invalid model dimensions");
  }
  if (epochs < 1) {
    throw ParameterError("TrainingConfig: epochs must be >= 1");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ParameterError("TrainingConfig: learning rate must be > 0");
  }
  if (batch_size < 1) {
    throw ParameterError("TrainingConfig: batch size must be >= 1");
  }
}

double mean_cross_entropy(const std::vector<TokenSequence>& corpus,
                          const ModelParams& params) {
  double total = 0.0;
  for (const auto& seq : corpus) {
    const auto trace = forward(embed(seq, params), params);
    total += -std::log(std::max(trace.probs[seq.label], 1e-300));
  }
  return total / static_cast<double>(corpus.size());
}

double accuracy(const std::vector<TokenSequence>& corpus,
                const ModelParams& params) {
  std::size_t correct = 0;
  for (const auto& seq : corpus) {
    const auto trace = forward(embed(seq, params), params);
    if (trace.predicted == seq.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

TrainResult train(const std::vector<TokenSequence>& corpus,
                  const TrainingConfig& config, RngStream rng) {
  config.validate();
  if (corpus.empty()) {
    throw ParameterError("train: empty corpus");
  }
  for (const auto& seq : corpus) {
    if (seq.label < 0 || seq.label >= config.class_count) {
      throw DataError("train: label out of range in '" + seq.id + "'");
    }
  }

  TrainResult result;
  result.params =
      ModelParams::init(config.vocab_size, config.embed_dim,
                        config.class_count, config.max_len,
                        rng.child(kInitStream));
  ModelParams& params = result.params;

  result.epoch_loss.push_back(mean_cross_entropy(corpus, params));

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  const std::size_t n_weights = params.w_query.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    RngStream shuffle_rng =
        rng.child(kShuffleStream).child(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j =
          static_cast<std::size_t>(shuffle_rng.next_double() * i);
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }

    const auto run_batch = [&](std::size_t start, std::size_t end) {
      Matrix g_emb(params.embedding.rows(), params.embedding.cols());
      Matrix g_wq(params.embed_dim, params.embed_dim);
      Matrix g_wk(params.embed_dim, params.embed_dim);
      Matrix g_wv(params.embed_dim, params.embed_dim);
      Matrix g_wo(params.embed_dim, params.class_count);
      std::vector<double> g_b(params.class_count, 0.0);

      for (std::size_t idx = start; idx < end; ++idx) {
        const auto& seq = corpus[order[idx]];
        const Matrix x = embed(seq, params);
        const auto trace = forward(x, params);

        std::vector<double> g_logits = trace.probs;
        g_logits[seq.label] -= 1.0;

        auto g = detail::backward_from_logits(trace, params, g_logits, true);
        for (std::size_t i = 0; i < n_weights; ++i) {
          g_wq.data()[i] += g.w_query.data()[i];
          g_wk.data()[i] += g.w_key.data()[i];
          g_wv.data()[i] += g.w_value.data()[i];
        }
        for (std::size_t i = 0; i < g_wo.size(); ++i) {
          g_wo.data()[i] += g.w_out.data()[i];
        }
        for (int c = 0; c < params.class_count; ++c) {
          g_b[c] += g.b_out[c];
        }
        for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
          for (int dd = 0; dd < params.embed_dim; ++dd) {
            g_emb(seq.tokens[i], dd) += g.x(i, dd);
          }
        }
      }

      const double step =
          config.learning_rate / static_cast<double>(end - start);
      for (std::size_t i = 0; i < params.embedding.size(); ++i) {
        params.embedding.data()[i] -= step * g_emb.data()[i];
      }
      for (std::size_t i = 0; i < n_weights; ++i) {
        params.w_query.data()[i] -= step * g_wq.data()[i];
        params.w_key.data()[i] -= step * g_wk.data()[i];
        params.w_value.data()[i] -= step * g_wv.data()[i];
      }
      for (std::size_t i = 0; i < g_wo.size(); ++i) {
        params.w_out.data()[i] -= step * g_wo.data()[i];
      }
      for (int c = 0; c < params.class_count; ++c) {
        params.b_out[c] -= step * g_b[c];
      }
    };

    try {
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config.batch_size)) {
        run_batch(start, std::min(order.size(),
                                  start + static_cast<std::size_t>(
                                              config.batch_size)));
      }
      const double loss = mean_cross_entropy(corpus, params);
      if (!std::isfinite(loss)) {
        throw TrainingError("train: loss became non-finite", epoch);
      }
      result.epoch_loss.push_back(loss);
    } catch (const NumericError& e) {
      // Exploding weights surface as non-finite activations mid-epoch.
      throw TrainingError(std::string("train: diverged: ") + e.what(), epoch);
    }
  }

  if (!(result.epoch_loss.back() < result.epoch_loss.front())) {
    throw TrainingError("train: loss did not decrease over training",
                        config.epochs);
  }
  return result;
}

}  // namespace faitheval
