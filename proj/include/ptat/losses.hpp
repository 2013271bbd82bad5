#pragma once

#include <optional>

#include "ptat/graph.hpp"

namespace ptat::losses {

using diffmath::Graph;
using diffmath::NodeId;

struct LossWeights {
  double lambda = 0.5;  // contrastive weight
  double alpha = 0.1;   // similarity-distillation weight
  double tau = 0.07;    // similarity temperature

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Ablation switches for the distillation terms.
struct LossToggles {
  bool feature_distillation = true;
  bool similarity_distillation = true;

  friend bool operator==(const LossToggles&, const LossToggles&) = default;
};

struct BatchEmbeddings {
  NodeId audio = 0;  // N x d_s, unit rows
  NodeId text = 0;   // N x d_s, unit rows; row i pairs with audio row i
};

struct SimilarityPair {
  NodeId a2t = 0;  // rows: audio queries, cols: text candidates, entries <a_i, t_j> / tau
  NodeId t2a = 0;  // transpose of a2t
  double tau = 0.07;
};

SimilarityPair similarity_matrices(Graph& g, NodeId audio, NodeId text, double tau);

// Mean over rows of KL(softmax(p_logits[i]) || softmax(q_logits[i])).
NodeId row_kl(Graph& g, NodeId p_logits, NodeId q_logits);

struct ContrastiveParts {
  NodeId t2a = 0;
  NodeId a2t = 0;
  NodeId total = 0;
};

// -(1/N) sum_i log softmax(C)[i][i] per direction, summed over both.
ContrastiveParts contrastive_parts(Graph& g, const SimilarityPair& pair);
NodeId contrastive_loss(Graph& g, const SimilarityPair& pair);

// Mean over rows of KL(p||q) + KL(q||p), p = softmax(E_a[i]), q = softmax(E_t[i]).
NodeId kl_alignment_loss(Graph& g, const BatchEmbeddings& batch);

// KL(student || teacher) on feature softmaxes, audio + text. Teacher nodes must be
// constants. Without a teacher (first step) the loss is the constant 0.
NodeId feature_distillation_loss(Graph& g, const BatchEmbeddings& student,
                                 const std::optional<BatchEmbeddings>& teacher);

// KL(student || teacher) on row-softmaxed similarity matrices, t2a + a2t.
NodeId similarity_distillation_loss(Graph& g, const SimilarityPair& student,
                                    const std::optional<SimilarityPair>& teacher);

struct LossTerms {
  NodeId kl = 0;
  NodeId contrast = 0;
  NodeId fd = 0;
  NodeId sd = 0;
  NodeId total = 0;
};

// L = L_kl + lambda * L_contrast + L_FD + alpha * L_SD. Disabled or
// teacher-less distillation terms are constant zeros. A component that fails
// numerically is reported by name.
LossTerms total_loss(Graph& g, const BatchEmbeddings& student, const SimilarityPair& pair,
                     const std::optional<BatchEmbeddings>& teacher, const LossWeights& weights,
                     const LossToggles& toggles = {});

}  // namespace ptat::losses
