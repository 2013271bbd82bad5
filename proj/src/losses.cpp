#include "ptat/losses.hpp"

#include <functional>
#include <string>

#include "ptat/errors.hpp"

namespace ptat::losses {

namespace {

void expect_same_shape(const Graph& g, NodeId a, NodeId b, const char* what) {
  if (!g.value(a).same_shape(g.value(b))) {
    throw ShapeError(std::string(what) + ": shapes " + g.value(a).shape() + " and " +
                     g.value(b).shape() + " differ");
  }
}

NodeId zero(Graph& g) { return g.constant(Matrix::scalar(0.0)); }

NodeId named(const char* component, const std::function<NodeId()>& build) {
  try {
    return build();
  } catch (const NumericError& e) {
    throw NumericError(std::string("loss component ") + component + " is non-finite: " + e.what());
  }
}

}  // namespace

SimilarityPair similarity_matrices(Graph& g, NodeId audio, NodeId text, double tau) {
  if (!(tau > 0.0)) throw ValidationError("temperature tau must be > 0");
  if (g.value(audio).rows() != g.value(text).rows()) {
    throw ShapeError("similarity_matrices: " + g.value(audio).shape() + " vs " +
                     g.value(text).shape());
  }
  SimilarityPair s;
  s.tau = tau;
  s.a2t = g.scale(g.matmul(audio, text, true), 1.0 / tau);
  s.t2a = g.transpose(s.a2t);
  return s;
}

NodeId row_kl(Graph& g, NodeId p_logits, NodeId q_logits) {
  expect_same_shape(g, p_logits, q_logits, "row_kl");
  const NodeId log_p = g.log_softmax_rows(p_logits);
  const NodeId p = g.exp(log_p);
  const NodeId log_ratio = g.sub(log_p, g.log_softmax_rows(q_logits));
  // mean_all averages over rows*cols entries; mean over rows needs * cols.
  const double cols = static_cast<double>(g.value(p_logits).cols());
  return g.scale(g.mean_all(g.mul(p, log_ratio)), cols);
}

ContrastiveParts contrastive_parts(Graph& g, const SimilarityPair& pair) {
  const Matrix& c = g.value(pair.a2t);
  if (c.rows() != c.cols()) throw ShapeError("contrastive_loss: non-square similarity " + c.shape());
  const double n = static_cast<double>(c.rows());
  const NodeId eye = g.constant(Matrix::identity(c.rows()));
  auto direction = [&](NodeId logits) {
    const NodeId logp = g.log_softmax_rows(logits);
    return g.scale(g.mean_all(g.mul(logp, eye)), -n);
  };
  ContrastiveParts parts;
  parts.t2a = direction(pair.t2a);
  parts.a2t = direction(pair.a2t);
  parts.total = g.add(parts.t2a, parts.a2t);
  return parts;
}

NodeId contrastive_loss(Graph& g, const SimilarityPair& pair) {
  return contrastive_parts(g, pair).total;
}

NodeId kl_alignment_loss(Graph& g, const BatchEmbeddings& batch) {
  expect_same_shape(g, batch.audio, batch.text, "kl_alignment_loss");
  return g.add(row_kl(g, batch.audio, batch.text), row_kl(g, batch.text, batch.audio));
}

NodeId feature_distillation_loss(Graph& g, const BatchEmbeddings& student,
                                 const std::optional<BatchEmbeddings>& teacher) {
  if (!teacher) return zero(g);
  expect_same_shape(g, student.audio, teacher->audio, "feature_distillation_loss");
  expect_same_shape(g, student.text, teacher->text, "feature_distillation_loss");
  return g.add(row_kl(g, student.text, teacher->text), row_kl(g, student.audio, teacher->audio));
}

NodeId similarity_distillation_loss(Graph& g, const SimilarityPair& student,
                                    const std::optional<SimilarityPair>& teacher) {
  if (!teacher) return zero(g);
  expect_same_shape(g, student.a2t, teacher->a2t, "similarity_distillation_loss");
  return g.add(row_kl(g, student.t2a, teacher->t2a), row_kl(g, student.a2t, teacher->a2t));
}

LossTerms total_loss(Graph& g, const BatchEmbeddings& student, const SimilarityPair& pair,
                     const std::optional<BatchEmbeddings>& teacher, const LossWeights& weights,
                     const LossToggles& toggles) {
  LossTerms t;
  t.kl = named("L_kl", [&] { return kl_alignment_loss(g, student); });
  t.contrast = named("L_contrast", [&] { return contrastive_loss(g, pair); });
  t.fd = named("L_FD", [&] {
    return toggles.feature_distillation ? feature_distillation_loss(g, student, teacher) : zero(g);
  });
  t.sd = named("L_SD", [&] {
    if (!toggles.similarity_distillation || !teacher) return zero(g);
    const SimilarityPair teacher_pair =
        similarity_matrices(g, teacher->audio, teacher->text, pair.tau);
    return similarity_distillation_loss(g, pair, teacher_pair);
  });
  t.total = named("total", [&] {
    const NodeId weighted = g.add(t.kl, g.scale(t.contrast, weights.lambda));
    return g.add(g.add(weighted, t.fd), g.scale(t.sd, weights.alpha));
  });
  return t;
}

}  // namespace ptat::losses
