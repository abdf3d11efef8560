#include "gnnb/losses.hpp"

#include <cmath>

namespace gnnb {

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "ce") return LossKind::CE;
    if (s == "lm") return LossKind::LM;
    if (s == "tlm") return LossKind::TLM;
    if (s == "pm") return LossKind::PM;
    throw ArgumentError("unknown loss kind: " + s);
}

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::CE: return "ce";
        case LossKind::LM: return "lm";
        case LossKind::TLM: return "tlm";
        case LossKind::PM: return "pm";
    }
    return "?";
}

int predict_class(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
    int best = 0;
    for (int c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
    return best;
}

bool misclassified(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int label) {
    for (int c = 0; c < logits.size(); ++c)
        if (c != label && logits[c] >= logits[label]) return true;
    return false;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels,
                const std::vector<int>& mask) {
    if (mask.empty()) throw ArgumentError("accuracy: empty mask");
    int correct = 0;
    for (int i : mask)
        if (!misclassified(logits.row(i), labels[static_cast<size_t>(i)])) ++correct;
    return static_cast<double>(correct) / static_cast<double>(mask.size());
}

namespace {

// Strongest wrong class per node, ties toward the smallest index.
int best_other(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int label) {
    int best = label == 0 ? 1 : 0;
    for (int c = 0; c < logits.size(); ++c)
        if (c != label && logits[c] > logits[best]) best = c;
    return best;
}

Eigen::RowVectorXd softmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
    Eigen::ArrayXd e = (z.transpose().array() - z.maxCoeff()).exp();
    return (e / e.sum()).transpose();
}

}  // namespace

double attack_loss(LossKind kind, const Matrix& logits, const std::vector<int>& labels,
                   const std::vector<int>& mask) {
    if (mask.empty()) throw ArgumentError("attack_loss: empty mask");
    double total = 0.0;
    for (int i : mask) {
        const int y = labels[static_cast<size_t>(i)];
        const auto z = logits.row(i);
        switch (kind) {
            case LossKind::CE: {
                double mx = z.maxCoeff();
                double lse = mx + std::log((z.array() - mx).exp().sum());
                total += lse - z[y];
                break;
            }
            case LossKind::LM:
                total += z[best_other(z, y)] - z[y];
                break;
            case LossKind::TLM:
                total += std::tanh(z[best_other(z, y)] - z[y]);
                break;
            case LossKind::PM: {
                Eigen::RowVectorXd p = softmax_row(z);
                total += p[best_other(z, y)] - p[y];
                break;
            }
        }
    }
    return total / static_cast<double>(mask.size());
}

namespace {

// onehot(best_other) - onehot(label) per mask row, captured as a constant.
Matrix margin_selector(const Matrix& logits, const std::vector<int>& labels,
                       const std::vector<int>& mask) {
    Matrix sel = Matrix::Zero(static_cast<Eigen::Index>(mask.size()), logits.cols());
    for (size_t r = 0; r < mask.size(); ++r) {
        const int i = mask[r];
        const int y = labels[static_cast<size_t>(i)];
        sel(static_cast<Eigen::Index>(r), best_other(logits.row(i), y)) = 1.0;
        sel(static_cast<Eigen::Index>(r), y) -= 1.0;
    }
    return sel;
}

}  // namespace

ad::Var attack_loss(ad::Tape& t, LossKind kind, ad::Var logits, const std::vector<int>& labels,
                    const std::vector<int>& mask) {
    if (mask.empty()) throw ArgumentError("attack_loss: empty mask");
    const double inv = 1.0 / static_cast<double>(mask.size());
    ad::Var z = t.gather_rows(logits, mask);
    switch (kind) {
        case LossKind::CE:
            return cross_entropy(t, logits, labels, mask);
        case LossKind::LM: {
            ad::Var lm = t.row_sum(t.mul(z, t.constant(margin_selector(t.val(logits), labels, mask),
                                                       "margin_sel")));
            return t.mul_scalar(t.sum(lm), inv);
        }
        case LossKind::TLM: {
            ad::Var lm = t.row_sum(t.mul(z, t.constant(margin_selector(t.val(logits), labels, mask),
                                                       "margin_sel")));
            return t.mul_scalar(t.sum(t.tanh(lm)), inv);
        }
        case LossKind::PM: {
            ad::Var p = t.row_softmax(z);
            ad::Var pm = t.row_sum(t.mul(p, t.constant(margin_selector(t.val(logits), labels, mask),
                                                       "margin_sel")));
            return t.mul_scalar(t.sum(pm), inv);
        }
    }
    throw ArgumentError("attack_loss: unknown kind");
}

ad::Var cross_entropy(ad::Tape& t, ad::Var logits, const std::vector<int>& labels,
                      const std::vector<int>& mask) {
    if (mask.empty()) throw ArgumentError("cross_entropy: empty mask");
    ad::Var z = t.gather_rows(logits, mask);
    Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(mask.size()), t.cols(logits));
    for (size_t r = 0; r < mask.size(); ++r)
        onehot(static_cast<Eigen::Index>(r), labels[static_cast<size_t>(mask[r])]) = 1.0;
    ad::Var zy = t.row_sum(t.mul(z, t.constant(std::move(onehot), "onehot")));
    ad::Var ce = t.sub(t.row_logsumexp(z), zy);
    return t.mul_scalar(t.sum(ce), 1.0 / static_cast<double>(mask.size()));
}

}  // namespace gnnb
