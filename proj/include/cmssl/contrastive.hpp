#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cmssl/errors.hpp"
#include "cmssl/graph.hpp"
#include "cmssl/linalg.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl {

// One view in a batch: an augmented or raw observation of a sample through one
// modality. The embedding is the unit-norm vector the loss saw; it is kept for
// diagnostics and plain-math consumers.
struct ViewRecord {
  int view_id = 0;
  int sample_id = 0;
  int modality_id = 0;
  bool augmented = false;
  bool is_negative_class = false;
  std::vector<double> embedding;
};

// For each view (by batch position): the positive set (other views of the same
// sample), the denominator set omega (every other view in the batch), and
// whether the view generates a loss term of its own.
struct PositiveIndex {
  struct Entry {
    std::vector<int> positives;
    std::vector<int> omega;
    bool contributes_loss = false;
  };
  std::vector<Entry> entries;

  std::size_t contributing_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.contributes_loss ? 1 : 0;
    return n;
  }
};

struct ContrastiveConfig {
  enum class Aggregation { Mean, Sum };

  double temperature = 0.5;
  bool use_log = true;                                     // standard InfoNCE; see literal_eq1
  Aggregation positive_aggregation = Aggregation::Mean;
  // Verbatim printed form of the single-view loss: the softmax fraction summed
  // over positives without a logarithm. Kept for fidelity experiments; always
  // sums over positives.
  bool literal_eq1 = false;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("contrastive: temperature must be positive");
  }
};

// Plain cosine similarity; inputs need not be normalized.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw ShapeError("cosine_similarity: size mismatch " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  double uu = 0, vv = 0, uv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u[i] * u[i];
    vv += v[i] * v[i];
    uv += u[i] * v[i];
  }
  if (uu <= 1e-24 || vv <= 1e-24) throw NumericError("cosine_similarity: degenerate zero vector");
  return std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
}

// Positives are all other views sharing the sample; omega is everything except
// the view itself. Negative-class views appear in every other view's omega but
// never contribute a loss term of their own.
inline PositiveIndex build_positive_index(std::span<const ViewRecord> batch) {
  if (batch.size() < 2) throw ContractError("build_positive_index: batch needs at least 2 views");
  std::set<int> samples, ids;
  for (const ViewRecord& v : batch) {
    samples.insert(v.sample_id);
    if (!ids.insert(v.view_id).second)
      throw ContractError("build_positive_index: duplicate view_id " + std::to_string(v.view_id));
  }
  if (samples.size() < 2)
    throw ContractError(
        "build_positive_index: batch contains a single sample; the denominator would hold only "
        "positives");
  PositiveIndex index;
  index.entries.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto& e = index.entries[i];
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (i == j) continue;
      e.omega.push_back(static_cast<int>(j));
      if (batch[j].sample_id == batch[i].sample_id) e.positives.push_back(static_cast<int>(j));
    }
    e.contributes_loss = !batch[i].is_negative_class && !e.positives.empty();
  }
  return index;
}

namespace detail {

// Per-view InfoNCE term as a fused graph op over the similarity matrix row.
// Log-sum-exp uses max-subtraction; with use_log the per-positive terms are
// lse - s_p/tau, with literal_eq1 the term is -sum_p exp(s_p/tau - lse).
inline ad::Value info_nce_term(ad::Graph& g, ad::Value similarities, int view,
                               const PositiveIndex::Entry& entry, const ContrastiveConfig& cfg) {
  cfg.validate();
  if (!entry.contributes_loss)
    throw ContractError("info_nce: view " + std::to_string(view) + " does not contribute loss");
  const Tensor& s = g.value(similarities);
  const std::size_t n = s.shape[0];
  const double tau = cfg.temperature;
  const std::vector<int> omega = entry.omega;
  const std::vector<int> positives = entry.positives;

  double m = -std::numeric_limits<double>::infinity();
  for (int j : omega) m = std::max(m, s.at(view, static_cast<std::size_t>(j)) / tau);
  double z = 0;
  for (int j : omega) z += std::exp(s.at(view, static_cast<std::size_t>(j)) / tau - m);
  double lse = m + std::log(z);

  double loss;
  if (cfg.literal_eq1) {
    double e = 0;
    for (int p : positives) e += std::exp(s.at(view, static_cast<std::size_t>(p)) / tau - lse);
    loss = -e;
  } else {
    double acc = 0;
    for (int p : positives) acc += lse - s.at(view, static_cast<std::size_t>(p)) / tau;
    loss = cfg.positive_aggregation == ContrastiveConfig::Aggregation::Mean
               ? acc / static_cast<double>(positives.size())
               : acc;
  }

  const bool literal = cfg.literal_eq1;
  const bool mean_agg = cfg.positive_aggregation == ContrastiveConfig::Aggregation::Mean;
  std::array<ad::Value, 1> ins{similarities};
  return g.custom(
      "info_nce_term", ins, Tensor::scalar(loss),
      [view, n, tau, omega, positives, lse, literal, mean_agg](
          const Tensor& out, const std::vector<double>& gout, std::span<const Tensor* const> inputs,
          std::span<std::vector<double>* const> ginputs) {
        if (!ginputs[0]) return;
        const Tensor& s = *inputs[0];
        std::vector<double>& gs = *ginputs[0];
        const double g0 = gout[0];
        auto sim = [&](int j) { return s.values[static_cast<std::size_t>(view) * n + j] / tau; };
        auto grad_at = [&](int j) -> double& {
          return gs[static_cast<std::size_t>(view) * n + static_cast<std::size_t>(j)];
        };
        if (literal) {
          // L = -sum_p exp(a_p - lse); dL/da_j = E * w_j - [j in P] e_j,
          // with e_p = exp(a_p - lse), E = sum_p e_p, w_j = softmax over omega.
          double e_sum = -out.values[0];
          for (int j : omega) grad_at(j) += g0 * e_sum * std::exp(sim(j) - lse) / tau;
          for (int p : positives) grad_at(p) -= g0 * std::exp(sim(p) - lse) / tau;
        } else {
          double pos_w = mean_agg ? 1.0 / static_cast<double>(positives.size()) : 1.0;
          double lse_w = mean_agg ? 1.0 : static_cast<double>(positives.size());
          for (int j : omega) grad_at(j) += g0 * lse_w * std::exp(sim(j) - lse) / tau;
          for (int p : positives) grad_at(p) -= g0 * pos_w / tau;
        }
      });
}

}  // namespace detail

// Similarity matrix of the batch embeddings: stack the (unit-norm) embedding
// values and take the Gram matrix, one graph node each.
inline ad::Value similarity_matrix(ad::Graph& g, std::span<const ad::Value> embeddings) {
  ad::Value stacked = g.stack_rows(embeddings);
  return g.matmul_nt(stacked, stacked);
}

// Loss for a single view given the batch similarity matrix.
inline ad::Value info_nce_single(ad::Graph& g, ad::Value similarities, int view,
                                 const PositiveIndex& index, const ContrastiveConfig& cfg) {
  if (view < 0 || static_cast<std::size_t>(view) >= index.entries.size())
    throw ContractError("info_nce_single: view index out of range");
  return detail::info_nce_term(g, similarities, view, index.entries[static_cast<std::size_t>(view)], cfg);
}

// Convenience overload building the similarity matrix itself.
inline ad::Value info_nce_single(ad::Graph& g, std::span<const ad::Value> embeddings, int view,
                                 const PositiveIndex& index, const ContrastiveConfig& cfg) {
  return info_nce_single(g, similarity_matrix(g, embeddings), view, index, cfg);
}

// Batch objective: mean of the per-view losses over contributing views. The
// divisor is the contributing-view count, so negative-class views strengthen
// denominators without diluting the mean.
inline ad::Value batch_loss(ad::Graph& g, std::span<const ad::Value> embeddings,
                            const PositiveIndex& index, const ContrastiveConfig& cfg) {
  cfg.validate();
  if (embeddings.size() != index.entries.size())
    throw ContractError("batch_loss: embeddings and index disagree on batch size");
  if (index.contributing_count() == 0)
    throw ContractError("batch_loss: no contributing views in batch");
  ad::Value sims = similarity_matrix(g, embeddings);
  std::vector<ad::Value> terms;
  terms.reserve(index.contributing_count());
  for (std::size_t i = 0; i < index.entries.size(); ++i)
    if (index.entries[i].contributes_loss)
      terms.push_back(detail::info_nce_term(g, sims, static_cast<int>(i), index.entries[i], cfg));
  return g.mean(g.concat(terms));
}

// Collapse diagnostics over a set of embeddings (rows).
struct CollapseMetrics {
  double mean_pairwise_similarity = 0;
  std::vector<double> per_dim_std;
  double effective_rank = 0;

  double mean_per_dim_std() const {
    double s = 0;
    for (double v : per_dim_std) s += v;
    return per_dim_std.empty() ? 0 : s / static_cast<double>(per_dim_std.size());
  }
};

inline CollapseMetrics collapse_metrics(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.size() < 2) throw ContractError("collapse_metrics: need at least 2 embeddings");
  const std::size_t n = embeddings.size();
  const std::size_t d = embeddings[0].size();
  for (const auto& e : embeddings)
    if (e.size() != d) throw ShapeError("collapse_metrics: ragged embedding sizes");

  CollapseMetrics m;
  double sim_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) sim_sum += cosine_similarity(embeddings[i], embeddings[j]);
  m.mean_pairwise_similarity = sim_sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));

  m.per_dim_std.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += embeddings[i][k];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (embeddings[i][k] - mean) * (embeddings[i][k] - mean);
    m.per_dim_std[k] = std::sqrt(var / static_cast<double>(n));
  }

  // effective rank = exp(entropy of normalized singular values)
  std::vector<double> flat(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) flat[i * d + k] = embeddings[i][k];
  std::vector<double> sv = linalg::singular_values(flat, n, d);
  double total = 0;
  for (double s : sv) total += s;
  if (total <= 0) {
    m.effective_rank = 0;
  } else {
    double entropy = 0;
    for (double s : sv) {
      double p = s / total;
      if (p > 0) entropy -= p * std::log(p);
    }
    m.effective_rank = std::exp(entropy);
  }
  return m;
}

}  // namespace cmssl
