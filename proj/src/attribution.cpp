#include "faitheval/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace faitheval {

const char* fa_name(FaKind kind) {
  switch (kind) {
    case FaKind::attention: return "attention";
    case FaKind::scaled_attention: return "scaled_attention";
    case FaKind::input_x_grad: return "input_x_grad";
    case FaKind::integrated_gradients: return "integrated_gradients";
    case FaKind::deeplift: return "deeplift";
    case FaKind::random: return "random";
    case FaKind::external: return "external";
  }
  return "unknown";
}

std::optional<FaKind> fa_from_name(const std::string& name) {
  for (FaKind kind :
       {FaKind::attention, FaKind::scaled_attention, FaKind::input_x_grad,
        FaKind::integrated_gradients, FaKind::deeplift, FaKind::random,
        FaKind::external}) {
    if (name == fa_name(kind)) return kind;
  }
  return std::nullopt;
}

std::vector<double> normalize_scores(std::span<const double> raw) {
  if (raw.empty()) {
    throw NumericError("normalize_scores: empty input");
  }
  double lo = raw[0];
  double hi = raw[0];
  for (double v : raw) {
    if (!std::isfinite(v)) {
      throw NumericError("normalize_scores: non-finite score");
    }
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> out(raw.size());
  const double range = hi - lo;
  if (range < 1e-12) {
    std::fill(out.begin(), out.end(), 0.5);
    return out;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = (raw[i] - lo) / range;
  }
  return out;
}

namespace {

AttributionScores make_scores(FaKind kind, std::vector<double> raw) {
  AttributionScores s;
  s.fa = kind;
  s.normalized = normalize_scores(raw);
  s.raw = std::move(raw);
  return s;
}

std::vector<double> collapse_per_dim(const Matrix& per_dim,
                                     TokenScoreRule rule) {
  std::vector<double> out(per_dim.rows());
  for (std::size_t i = 0; i < per_dim.rows(); ++i) {
    if (rule == TokenScoreRule::abs_sum) {
      double sum = 0.0;
      for (std::size_t d = 0; d < per_dim.cols(); ++d) {
        sum += per_dim(i, d);
      }
      out[i] = std::abs(sum);
    } else {
      double sq = 0.0;
      for (std::size_t d = 0; d < per_dim.cols(); ++d) {
        sq += per_dim(i, d) * per_dim(i, d);
      }
      out[i] = std::sqrt(sq);
    }
  }
  return out;
}

}  // namespace

AttributionScores attention_fa(const ForwardTrace& trace) {
  const std::size_t t = trace.attention.rows();
  std::vector<double> raw(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    double sum = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
      sum += trace.attention(r, i);
    }
    raw[i] = sum / static_cast<double>(t);
  }
  return make_scores(FaKind::attention, std::move(raw));
}

AttributionScores scaled_attention_fa(const ForwardTrace& trace,
                                      const Matrix& attention_grad) {
  if (!trace.attention.same_shape(attention_grad)) {
    throw ShapeError("scaled_attention_fa: gradient shape != attention shape");
  }
  const std::size_t t = trace.attention.rows();
  std::vector<double> raw(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    double sum = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
      sum += trace.attention(r, i) * attention_grad(r, i);
    }
    raw[i] = sum / static_cast<double>(t);
  }
  return make_scores(FaKind::scaled_attention, std::move(raw));
}

AttributionScores input_x_grad(const Matrix& x, const Matrix& input_grad,
                               TokenScoreRule rule) {
  if (!x.same_shape(input_grad)) {
    throw ShapeError("input_x_grad: gradient shape != input shape");
  }
  Matrix per_dim(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    per_dim.data()[i] = x.data()[i] * input_grad.data()[i];
  }
  return make_scores(FaKind::input_x_grad, collapse_per_dim(per_dim, rule));
}

PerDimAttribution integrated_gradients(const Matrix& x,
                                       const ModelParams& params, int cls,
                                       int steps, TokenScoreRule rule) {
  if (steps < 1) {
    throw ParameterError("integrated_gradients: steps must be >= 1");
  }

  // grad at the right endpoint of the first interval anchors the mean so
  // a path-constant gradient survives the averaging bit-exactly.
  Matrix anchor;
  Matrix residual_sum(x.rows(), x.cols());
  for (int k = 1; k <= steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(steps);
    Matrix scaled(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
      scaled.data()[i] = alpha * x.data()[i];
    }
    const auto trace = forward(scaled, params);
    Matrix grad = backward_input_grad(trace, params, cls).wrt_input;
    if (k == 1) {
      anchor = std::move(grad);
    } else {
      for (std::size_t i = 0; i < x.size(); ++i) {
        residual_sum.data()[i] += grad.data()[i] - anchor.data()[i];
      }
    }
  }

  PerDimAttribution out;
  out.per_dim = Matrix(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mean_grad =
        anchor.data()[i] + residual_sum.data()[i] / static_cast<double>(steps);
    out.per_dim.data()[i] = x.data()[i] * mean_grad;
    out.attribution_sum += out.per_dim.data()[i];
  }
  out.scores = make_scores(FaKind::integrated_gradients,
                           collapse_per_dim(out.per_dim, rule));
  return out;
}

PerDimAttribution deeplift(const Matrix& x, const ModelParams& params, int cls,
                           TokenScoreRule rule) {
  if (cls < 0 || cls >= params.class_count) {
    throw ParameterError("deeplift: class index out of range");
  }
  const std::size_t t = x.rows();
  const std::size_t d = static_cast<std::size_t>(params.embed_dim);
  if (x.cols() != d) {
    throw ShapeError("deeplift: input must be T x d");
  }

  const auto trace = forward(x, params);
  const auto ref = forward(Matrix(t, d), params);

  // Multiplier into the logits: one-hot on the target class.
  std::vector<double> g_logits(params.class_count, 0.0);
  g_logits[cls] = 1.0;

  std::vector<double> m_pooled(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double v = 0.0;
    for (int c = 0; c < params.class_count; ++c) {
      v += params.w_out(k, c) * g_logits[c];
    }
    m_pooled[k] = v;
  }

  Matrix m_hidden(t, d);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      m_hidden(i, k) = m_pooled[k] / static_cast<double>(t);
    }
  }

  // H = A V: cross terms split evenly between the two factors.
  Matrix a_bar(t, t);
  for (std::size_t i = 0; i < t * t; ++i) {
    a_bar.data()[i] =
        0.5 * (ref.attention.data()[i] + trace.attention.data()[i]);
  }
  Matrix v_bar(t, d);
  for (std::size_t i = 0; i < t * d; ++i) {
    v_bar.data()[i] = 0.5 * (ref.values.data()[i] + trace.values.data()[i]);
  }
  Matrix m_attention = matmul(m_hidden, transpose(v_bar));
  Matrix m_values = matmul(transpose(a_bar), m_hidden);

  // Rescale through the attention softmax.
  Matrix m_attn_logits(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      const double delta_s = trace.attn_logits(i, j) - ref.attn_logits(i, j);
      const double delta_a = trace.attention(i, j) - ref.attention(i, j);
      double multiplier;
      if (std::abs(delta_s) < 1e-8) {
        multiplier = trace.attention(i, j) * (1.0 - trace.attention(i, j));
      } else {
        multiplier = delta_a / delta_s;
      }
      m_attn_logits(i, j) = m_attention(i, j) * multiplier;
    }
  }

  // S = Q K^T / sqrt(d): even cross-term split again.
  const double scale = 1.0 / std::sqrt(static_cast<double>(params.embed_dim));
  Matrix q_bar(t, d);
  Matrix k_bar(t, d);
  for (std::size_t i = 0; i < t * d; ++i) {
    q_bar.data()[i] = 0.5 * (ref.queries.data()[i] + trace.queries.data()[i]);
    k_bar.data()[i] = 0.5 * (ref.keys.data()[i] + trace.keys.data()[i]);
  }
  Matrix m_queries = matmul(m_attn_logits, k_bar);
  Matrix m_keys = matmul(transpose(m_attn_logits), q_bar);
  for (double& v : m_queries.data()) v *= scale;
  for (double& v : m_keys.data()) v *= scale;

  Matrix m_x = matmul(m_queries, transpose(params.w_query));
  const Matrix m_x_keys = matmul(m_keys, transpose(params.w_key));
  const Matrix m_x_values = matmul(m_values, transpose(params.w_value));
  for (std::size_t i = 0; i < m_x.size(); ++i) {
    m_x.data()[i] += m_x_keys.data()[i] + m_x_values.data()[i];
  }

  PerDimAttribution out;
  out.per_dim = Matrix(t, d);
  for (std::size_t i = 0; i < t * d; ++i) {
    out.per_dim.data()[i] = x.data()[i] * m_x.data()[i];
    out.attribution_sum += out.per_dim.data()[i];
  }
  out.scores =
      make_scores(FaKind::deeplift, collapse_per_dim(out.per_dim, rule));
  return out;
}

AttributionScores random_fa(RngStream rng, std::size_t token_count) {
  if (token_count == 0) {
    throw ParameterError("random_fa: token count must be >= 1");
  }
  std::vector<double> raw(token_count);
  for (auto& v : raw) {
    v = rng.next_double();
  }
  return make_scores(FaKind::random, std::move(raw));
}

std::size_t RationaleMask::member_count() const {
  return static_cast<std::size_t>(
      std::count(member.begin(), member.end(), std::uint8_t{1}));
}

RationaleMask top_k_rationale(const AttributionScores& scores, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ParameterError("top_k_rationale: ratio must lie in (0,1]");
  }
  const std::size_t t = scores.raw.size();
  // The 1e-9 slack keeps ceil() from rounding up on FP noise like
  // 0.2 * 5 -> 1.0000000000000002.
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(ratio * static_cast<double>(t) - 1e-9)));

  std::vector<std::size_t> order(t);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) {
                     return scores.raw[a] > scores.raw[b];
                   });

  RationaleMask mask;
  mask.instance_id = scores.instance_id;
  mask.ratio = ratio;
  mask.member.assign(t, 0);
  for (std::size_t i = 0; i < std::min(k, t); ++i) {
    mask.member[order[i]] = 1;
  }
  return mask;
}

std::vector<ImportedAttribution> load_attribution_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("load_attribution_file: cannot open " + path);
  }
  std::vector<ImportedAttribution> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_attribution_file: parse error at line " +
                      std::to_string(line_no) + ": " + e.what());
    }
    try {
      ImportedAttribution rec;
      rec.id = j.at("id").get<std::string>();
      rec.fa_label = j.at("fa").get<std::string>();
      rec.raw = j.at("scores").get<std::vector<double>>();
      if (rec.raw.empty()) {
        throw DataError("load_attribution_file: empty scores for record '" +
                        rec.id + "'");
      }
      for (double v : rec.raw) {
        if (!std::isfinite(v)) {
          throw DataError(
              "load_attribution_file: non-finite score for record '" + rec.id +
              "'");
        }
      }
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("load_attribution_file: malformed record at line " +
                      std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace faitheval
