#pragma once

// Key-query expert selection: query extraction through the router adapter,
// cosine matching against learnable keys, top-n selection with a softmax over
// the selected scores, and convex aggregation of candidate memories.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include <spdlog/spdlog.h>

#include "autograd.hpp"
#include "lora.hpp"
#include "reasoner.hpp"

namespace molem {

inline constexpr double kCosineEps = 1e-12;

struct RoutingWeights {
  std::vector<std::size_t> selected;  // descending score, ties to the lower index
  std::vector<double> alpha;          // one per expert; exactly 0 when unselected
  std::vector<double> scores;
};

namespace detail {
inline std::atomic<bool> cosine_clamp_logged{false};
}

inline void note_cosine_clamp() {
  if (!detail::cosine_clamp_logged.exchange(true)) {
    spdlog::warn("cosine matching clamped a vector norm below {} (logged once per run)", kCosineEps);
  }
}

/// Cosine score of the query against every key row.
inline std::vector<double> match(std::span<const double> q, const Tensor& keys) {
  bool clamped = false;
  std::vector<double> s = cosine_similarities(q, keys, kCosineEps, &clamped);
  if (clamped) note_cosine_clamp();
  return s;
}

/// Indices of the n largest scores, ordered by score, ties to the lower index.
inline std::vector<std::size_t> top_n(std::span<const double> s, std::size_t n) {
  require(n <= s.size(), "cannot select more experts than exist");
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  idx.resize(n);
  return idx;
}

inline RoutingWeights select_and_weight(std::span<const double> scores, std::size_t n_select) {
  require(n_select >= 1, "n_select must be positive");
  RoutingWeights w;
  w.scores.assign(scores.begin(), scores.end());
  w.selected = top_n(scores, n_select);
  std::vector<double> chosen;
  for (std::size_t k : w.selected) chosen.push_back(scores[k]);
  const std::vector<double> p = softmax(chosen);
  w.alpha.assign(scores.size(), 0.0);
  for (std::size_t i = 0; i < w.selected.size(); ++i) w.alpha[w.selected[i]] = p[i];
  return w;
}

/// M = sum over selected k of alpha_k * M_k. `candidates` holds one segment
/// per selected expert, in `weights.selected` order.
inline Tensor aggregate(const std::vector<Tensor>& candidates, const RoutingWeights& weights) {
  require(!candidates.empty() && candidates.size() == weights.selected.size(),
          "one candidate per selected expert is required");
  Tensor out(candidates.front().shape, 0.0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    require(candidates[i].shape == out.shape, "candidate segment shapes differ");
    const double a = weights.alpha[weights.selected[i]];
    for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] += a * candidates[i].data[j];
  }
  return out;
}

/// Router query for a context: projection of the last hidden state of a
/// forward with the router adapter active.
inline std::vector<double> extract_query(Reasoner& model, LoraAdapter& router, const Parameter& projection,
                                         std::span<const int> context) {
  require(!context.empty(), "extract_query of an empty context");
  Tape tape(false);
  Stream s(model, tape, &router);
  s.extend(s.embed(context));
  Tensor q = Tensor::matrix(1, projection.value.cols());
  detail::gemm_acc(s.last_hidden().value().data.data(), projection.value.data.data(), q.data.data(), 1,
                   projection.value.rows(), projection.value.cols());
  return q.data;
}

}  // namespace molem
