#pragma once

#include <string>
#include <vector>

#include "gnnb/graph.hpp"
#include "gnnb/tape.hpp"

namespace gnnb {

/// Attack objectives over logits, all written so that larger means a stronger
/// attack. CE is the(inconsistent) cross-entropy kept for comparison; LM the
/// logit margin, TLM its tanh-saturated variant, PM the post-softmax margin.
enum class LossKind { CE, LM, TLM, PM };

LossKind loss_kind_from_string(const std::string& s);
std::string to_string(LossKind k);

/// Class prediction with ties broken toward the smallest index.
int predict_class(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

/// A node counts as misclassified whenever some wrong class reaches the true
/// class's logit; exact ties count as misclassification.
bool misclassified(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int label);

/// Fraction of mask nodes classified correctly.
double accuracy(const Matrix& logits, const std::vector<int>& labels,
                const std::vector<int>& mask);

double attack_loss(LossKind kind, const Matrix& logits, const std::vector<int>& labels,
                   const std::vector<int>& mask);

/// Tape version; differentiable w.r.t. the logits. The margin's competing
/// class is chosen from the forward values and enters as a constant, which is
/// the exact derivative almost everywhere.
ad::Var attack_loss(ad::Tape& t, LossKind kind, ad::Var logits, const std::vector<int>& labels,
                    const std::vector<int>& mask);

/// Mean cross-entropy over mask plus optional L2 on the given parameters;
/// the standard training objective.
ad::Var cross_entropy(ad::Tape& t, ad::Var logits, const std::vector<int>& labels,
                      const std::vector<int>& mask);

}  // namespace gnnb
