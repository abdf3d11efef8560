#include "gnnb/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace gnnb::ad {

namespace {

std::string shape_str(int r, int c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

[[noreturn]] void shape_error(const char* what, int r0, int c0, int r1, int c1) {
    throw ArgumentError(std::string("tape: shape mismatch in ") + what + ": " +
                        shape_str(r0, c0) + " vs " + shape_str(r1, c1));
}

}  // namespace

Var Tape::push(Node n, bool eval_now) {
    if (eval_now && !lazy_mode_) {
        eval_node(n);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(const Node& n) const {
    if (!n.value.allFinite()) {
        throw NumericError(std::string("tape: non-finite value produced by op '") + n.tag + "'");
    }
}

Var Tape::leaf(Matrix value, const char* tag) {
    Node n;
    n.op = Op::Leaf;
    n.rows = static_cast<int>(value.rows());
    n.cols = static_cast<int>(value.cols());
    n.value = std::move(value);
    n.evaluated = true;
    n.tag = tag;
    check_finite(n);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value, const char* tag) {
    Node n;
    n.op = Op::Const;
    n.rows = static_cast<int>(value.rows());
    n.cols = static_cast<int>(value.cols());
    n.value = std::move(value);
    n.evaluated = true;
    n.tag = tag;
    check_finite(n);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m), "scalar");
}

int Tape::sparse_constant(SparseMatrix s) {
    sparse_t_.push_back(SparseMatrix(s.transpose()));
    sparse_.push_back(std::move(s));
    return static_cast<int>(sparse_.size()) - 1;
}

Var Tape::emit(Op op, Var a, Var b, double s0, double s1, int rows, int cols,
               const char* tag) {
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.id;
    n.s0 = s0;
    n.s1 = s1;
    n.rows = rows;
    n.cols = cols;
    n.tag = tag;
    return push(std::move(n));
}

// --- shape-checked op constructors -------------------------------------------

Var Tape::matmul(Var a, Var b) {
    const Node& na = node(a.id);
    const Node& nb = node(b.id);
    if (na.cols != nb.rows) shape_error("matmul", na.rows, na.cols, nb.rows, nb.cols);
    return emit(Op::MatMul, a, b, 0, 0, na.rows, nb.cols, "matmul");
}

Var Tape::spmm(int sparse_id, Var b, bool transposed) {
    const Node& nb = node(b.id);
    const SparseMatrix& s = transposed ? sparse_t_[static_cast<size_t>(sparse_id)]
                                       : sparse_[static_cast<size_t>(sparse_id)];
    if (s.cols() != nb.rows)
        shape_error("spmm", static_cast<int>(s.rows()), static_cast<int>(s.cols()), nb.rows,
                    nb.cols);
    Node n;
    n.op = Op::SpMM;
    n.b = b.id;
    n.sparse_id = sparse_id;
    n.s0 = transposed ? 1.0 : 0.0;
    n.rows = static_cast<int>(s.rows());
    n.cols = nb.cols;
    n.tag = "spmm";
    return push(std::move(n));
}

#define GNNB_BINOP(NAME, OP)                                                   \
    Var Tape::NAME(Var a, Var b) {                                            \
        const Node& na = node(a.id);                                          \
        const Node& nb = node(b.id);                                          \
        if (na.rows != nb.rows || na.cols != nb.cols)                         \
            shape_error(#NAME, na.rows, na.cols, nb.rows, nb.cols);           \
        return emit(Op::OP, a, b, 0, 0, na.rows, na.cols, #NAME);             \
    }

GNNB_BINOP(add, Add)
GNNB_BINOP(sub, Sub)
GNNB_BINOP(mul, Mul)
GNNB_BINOP(div, Div)
#undef GNNB_BINOP

#define GNNB_UNOP(NAME, OP)                                                    \
    Var Tape::NAME(Var a) {                                                    \
        const Node& na = node(a.id);                                           \
        return emit(Op::OP, a, Var{}, 0, 0, na.rows, na.cols, #NAME);          \
    }

GNNB_UNOP(neg, Neg)
GNNB_UNOP(exp, Exp)
GNNB_UNOP(log, Log)
GNNB_UNOP(tanh, Tanh)
GNNB_UNOP(sqrt, Sqrt)
GNNB_UNOP(relu, Relu)
GNNB_UNOP(elu, Elu)
GNNB_UNOP(step, Step)
GNNB_UNOP(stop_grad, StopGrad)
GNNB_UNOP(row_softmax, RowSoftmax)
#undef GNNB_UNOP

Var Tape::add_scalar(Var a, double s) {
    const Node& na = node(a.id);
    return emit(Op::AddScalar, a, Var{}, s, 0, na.rows, na.cols, "add_scalar");
}

Var Tape::mul_scalar(Var a, double s) {
    const Node& na = node(a.id);
    return emit(Op::MulScalar, a, Var{}, s, 0, na.rows, na.cols, "mul_scalar");
}

Var Tape::pow_scalar(Var a, double p) {
    const Node& na = node(a.id);
    return emit(Op::PowScalar, a, Var{}, p, 0, na.rows, na.cols, "pow_scalar");
}

Var Tape::interior_mask(Var a, double lo, double hi) {
    const Node& na = node(a.id);
    return emit(Op::InteriorMask, a, Var{}, lo, hi, na.rows, na.cols, "interior_mask");
}

Var Tape::clamp(Var a, double lo, double hi) {
    const Node& na = node(a.id);
    return emit(Op::Clamp, a, Var{}, lo, hi, na.rows, na.cols, "clamp");
}

Var Tape::clamp_min(Var a, double lo) {
    return clamp(a, lo, std::numeric_limits<double>::infinity());
}

Var Tape::transpose(Var a) {
    const Node& na = node(a.id);
    return emit(Op::Transpose, a, Var{}, 0, 0, na.cols, na.rows, "transpose");
}

Var Tape::row_sum(Var a) {
    const Node& na = node(a.id);
    return emit(Op::RowSum, a, Var{}, 0, 0, na.rows, 1, "row_sum");
}

Var Tape::col_sum(Var a) { return transpose(row_sum(transpose(a))); }

Var Tape::sum(Var a) { return emit(Op::Sum, a, Var{}, 0, 0, 1, 1, "sum"); }

Var Tape::row_logsumexp(Var a) {
    const Node& na = node(a.id);
    return emit(Op::RowLogSumExp, a, Var{}, 0, 0, na.rows, 1, "row_logsumexp");
}

Var Tape::scale_rows(Var a, Var v) {
    const Node& na = node(a.id);
    const Node& nv = node(v.id);
    if (nv.rows != na.rows || nv.cols != 1)
        shape_error("scale_rows", na.rows, na.cols, nv.rows, nv.cols);
    return emit(Op::ScaleRows, a, v, 0, 0, na.rows, na.cols, "scale_rows");
}

Var Tape::scale_cols(Var a, Var v) {
    const Node& na = node(a.id);
    const Node& nv = node(v.id);
    if (nv.rows != na.cols || nv.cols != 1)
        shape_error("scale_cols", na.rows, na.cols, nv.rows, nv.cols);
    return emit(Op::ScaleCols, a, v, 0, 0, na.rows, na.cols, "scale_cols");
}

Var Tape::broadcast_col(Var v, int cols) {
    const Node& nv = node(v.id);
    if (nv.cols != 1) shape_error("broadcast_col", nv.rows, nv.cols, nv.rows, 1);
    return emit(Op::BroadcastCol, v, Var{}, 0, 0, nv.rows, cols, "broadcast_col");
}

Var Tape::broadcast_scalar(Var s, int rows, int cols) {
    const Node& ns = node(s.id);
    if (ns.rows != 1 || ns.cols != 1) shape_error("broadcast_scalar", ns.rows, ns.cols, 1, 1);
    return emit(Op::BroadcastScalar, s, Var{}, 0, 0, rows, cols, "broadcast_scalar");
}

Var Tape::add_row_vec(Var a, Var v) {
    const Node& na = node(a.id);
    const Node& nv = node(v.id);
    if (nv.rows != 1 || nv.cols != na.cols)
        shape_error("add_row_vec", na.rows, na.cols, nv.rows, nv.cols);
    return emit(Op::AddRowVec, a, v, 0, 0, na.rows, na.cols, "add_row_vec");
}

Var Tape::gather_rows(Var a, std::vector<int> rows) {
    const Node& na = node(a.id);
    for (int r : rows)
        if (r < 0 || r >= na.rows) throw ArgumentError("gather_rows: row index out of range");
    Node n;
    n.op = Op::GatherRows;
    n.a = a.id;
    n.rows = static_cast<int>(rows.size());
    n.cols = na.cols;
    n.idx = std::move(rows);
    n.tag = "gather_rows";
    return push(std::move(n));
}

Var Tape::scatter_rows(Var a, std::vector<int> rows, int out_rows) {
    const Node& na = node(a.id);
    if (static_cast<int>(rows.size()) != na.rows)
        throw ArgumentError("scatter_rows: index count does not match rows");
    for (int r : rows)
        if (r < 0 || r >= out_rows) throw ArgumentError("scatter_rows: row index out of range");
    Node n;
    n.op = Op::ScatterRows;
    n.a = a.id;
    n.rows = out_rows;
    n.cols = na.cols;
    n.idx = std::move(rows);
    n.tag = "scatter_rows";
    return push(std::move(n));
}

Var Tape::inverse(Var a) {
    const Node& na = node(a.id);
    if (na.rows != na.cols) shape_error("inverse", na.rows, na.cols, na.cols, na.rows);
    return emit(Op::Inverse, a, Var{}, 0, 0, na.rows, na.cols, "inverse");
}

Var Tape::weighted_median(Var p, Var h) {
    const Node& np = node(p.id);
    const Node& nh = node(h.id);
    if (np.cols != nh.rows) shape_error("weighted_median", np.rows, np.cols, nh.rows, nh.cols);
    return emit(Op::WeightedMedian, p, h, 0, 0, np.rows, nh.cols, "weighted_median");
}

// --- forward evaluation -------------------------------------------------------

void Tape::eval_node(Node& n) {
    auto A = [&]() -> const Matrix& { return node(n.a).value; };
    auto B = [&]() -> const Matrix& { return node(n.b).value; };
    switch (n.op) {
        case Op::Leaf:
        case Op::Const:
            break;
        case Op::MatMul:
            n.value.noalias() = A() * B();
            break;
        case Op::SpMM: {
            const SparseMatrix& s = n.s0 != 0.0 ? sparse_t_[static_cast<size_t>(n.sparse_id)]
                                                : sparse_[static_cast<size_t>(n.sparse_id)];
            n.value = s * B();
            break;
        }
        case Op::Add:
            n.value = A() + B();
            break;
        case Op::Sub:
            n.value = A() - B();
            break;
        case Op::Mul:
            n.value = A().cwiseProduct(B());
            break;
        case Op::Div:
            n.value = A().cwiseQuotient(B());
            break;
        case Op::Neg:
            n.value = -A();
            break;
        case Op::AddScalar:
            n.value = A().array() + n.s0;
            break;
        case Op::MulScalar:
            n.value = A() * n.s0;
            break;
        case Op::PowScalar:
            n.value = A().array().pow(n.s0);
            break;
        case Op::Exp:
            n.value = A().array().exp();
            break;
        case Op::Log:
            n.value = A().array().log();
            break;
        case Op::Tanh:
            n.value = A().array().tanh();
            break;
        case Op::Sqrt:
            n.value = A().array().sqrt();
            break;
        case Op::Relu:
            n.value = A().cwiseMax(0.0);
            break;
        case Op::Elu:
            n.value = A().unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
            break;
        case Op::Step:
            n.value = A().unaryExpr([](double x) { return x > 0 ? 1.0 : 0.0; });
            break;
        case Op::InteriorMask: {
            double lo = n.s0, hi = n.s1;
            n.value = A().unaryExpr([lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
            break;
        }
        case Op::Clamp: {
            double lo = n.s0, hi = n.s1;
            n.value = A().unaryExpr([lo, hi](double x) { return std::min(std::max(x, lo), hi); });
            break;
        }
        case Op::Transpose:
            n.value = A().transpose();
            break;
        case Op::RowSum:
            n.value = A().rowwise().sum();
            break;
        case Op::Sum: {
            Matrix m(1, 1);
            m(0, 0) = A().sum();
            n.value = std::move(m);
            break;
        }
        case Op::RowSoftmax: {
            const Matrix& a = A();
            n.value.resize(a.rows(), a.cols());
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                double mx = a.row(i).maxCoeff();
                Eigen::ArrayXd e = (a.row(i).array() - mx).exp();
                n.value.row(i) = (e / e.sum()).matrix();
            }
            break;
        }
        case Op::RowLogSumExp: {
            const Matrix& a = A();
            n.value.resize(a.rows(), 1);
            for (Eigen::Index i = 0; i < a.rows(); ++i) {
                double mx = a.row(i).maxCoeff();
                n.value(i, 0) = mx + std::log((a.row(i).array() - mx).exp().sum());
            }
            break;
        }
        case Op::ScaleRows:
            n.value = B().col(0).asDiagonal() * A();
            break;
        case Op::ScaleCols:
            n.value = A() * B().col(0).asDiagonal();
            break;
        case Op::BroadcastCol:
            n.value = A().col(0).replicate(1, n.cols);
            break;
        case Op::BroadcastScalar:
            n.value = Matrix::Constant(n.rows, n.cols, A()(0, 0));
            break;
        case Op::AddRowVec:
            n.value = A().rowwise() + B().row(0);
            break;
        case Op::GatherRows: {
            const Matrix& a = A();
            n.value.resize(n.rows, n.cols);
            for (size_t i = 0; i < n.idx.size(); ++i)
                n.value.row(static_cast<Eigen::Index>(i)) = a.row(n.idx[i]);
            break;
        }
        case Op::ScatterRows: {
            const Matrix& a = A();
            n.value = Matrix::Zero(n.rows, n.cols);
            for (size_t i = 0; i < n.idx.size(); ++i)
                n.value.row(n.idx[i]) += a.row(static_cast<Eigen::Index>(i));
            break;
        }
        case Op::Inverse: {
            Eigen::PartialPivLU<Matrix> lu(A());
            n.value = lu.inverse();
            break;
        }
        case Op::WeightedMedian: {
            const Matrix& p = A();
            const Matrix& h = B();
            const Eigen::Index no = p.rows(), nn = h.rows(), d = h.cols();
            n.value = Matrix::Zero(no, d);
            n.idx.assign(static_cast<size_t>(no * d), -1);
            std::vector<int> order(static_cast<size_t>(nn));
            std::vector<double> w(static_cast<size_t>(nn));
            for (Eigen::Index i = 0; i < no; ++i) {
                double total = 0;
                for (Eigen::Index k = 0; k < nn; ++k) {
                    w[static_cast<size_t>(k)] = std::max(p(i, k), 0.0);
                    total += w[static_cast<size_t>(k)];
                }
                if (total <= 0) continue;  // all-zero weight row -> zero output row
                const double half = total / 2.0;
                for (Eigen::Index j = 0; j < d; ++j) {
                    std::iota(order.begin(), order.end(), 0);
                    std::sort(order.begin(), order.end(), [&](int x, int y) {
                        double hx = h(x, j), hy = h(y, j);
                        if (hx != hy) return hx < hy;
                        return x < y;
                    });
                    double cum = 0;
                    for (int k : order) {
                        cum += w[static_cast<size_t>(k)];
                        if (cum >= half) {
                            n.value(i, j) = h(k, j);
                            n.idx[static_cast<size_t>(i * d + j)] = k;
                            break;
                        }
                    }
                }
            }
            break;
        }
        case Op::MedianScatter: {
            const Matrix& x = A();
            const Node& med = node(n.b);
            n.value = Matrix::Zero(n.rows, n.cols);
            const Eigen::Index d = x.cols();
            for (Eigen::Index i = 0; i < x.rows(); ++i)
                for (Eigen::Index j = 0; j < d; ++j) {
                    int k = med.idx[static_cast<size_t>(i * d + j)];
                    if (k >= 0) n.value(k, j) += x(i, j);
                }
            break;
        }
        case Op::MedianGather: {
            const Matrix& x = A();
            const Node& med = node(n.b);
            n.value = Matrix::Zero(n.rows, n.cols);
            const Eigen::Index d = n.cols;
            for (Eigen::Index i = 0; i < n.rows; ++i)
                for (Eigen::Index j = 0; j < d; ++j) {
                    int k = med.idx[static_cast<size_t>(i * d + j)];
                    if (k >= 0) n.value(i, j) = x(k, j);
                }
            break;
        }
        case Op::StopGrad:
            n.value = A();
            break;
    }
    n.evaluated = true;
    check_finite(n);
}

const Matrix& Tape::val(Var v) const {
    const Node& n = node(v.id);
    if (!n.evaluated) throw ArgumentError("tape: value of unevaluated node requested");
    return n.value;
}

double Tape::scalar_val(Var v) const {
    const Matrix& m = val(v);
    if (m.rows() != 1 || m.cols() != 1) throw ArgumentError("tape: scalar_val on non-scalar");
    return m(0, 0);
}

void Tape::bind(Var leaf, Matrix value) {
    Node& n = node(leaf.id);
    if (n.op != Op::Leaf) throw ArgumentError("tape: bind target is not a leaf");
    if (n.rows != static_cast<int>(value.rows()) || n.cols != static_cast<int>(value.cols()))
        shape_error("bind", n.rows, n.cols, static_cast<int>(value.rows()),
                    static_cast<int>(value.cols()));
    n.value = std::move(value);
}

void Tape::forward() {
    for (Node& n : nodes_) {
        if (n.op == Op::Leaf || n.op == Op::Const) continue;
        eval_node(n);
    }
}

size_t Tape::value_bytes() const {
    size_t total = 0;
    for (const Node& n : nodes_) total += sizeof(double) * static_cast<size_t>(n.value.size());
    return total;
}

// --- backward -----------------------------------------------------------------

namespace {

// Whether gradient flows from a node to its operand slot (0 = a, 1 = b).
bool passes_grad(Op op, int slot) {
    switch (op) {
        case Op::Leaf:
        case Op::Const:
        case Op::Step:
        case Op::InteriorMask:
        case Op::StopGrad:
            return false;
        case Op::WeightedMedian:
            return slot == 1;  // the median's value comes from h; weights only select
        case Op::MedianScatter:
        case Op::MedianGather:
            return slot == 0;
        case Op::SpMM:
            return slot == 1;
        default:
            return true;
    }
}

}  // namespace

Tape::BackwardPlan Tape::plan_backward(Var output, std::span<const Var> wrt) const {
    BackwardPlan plan;
    plan.needs.assign(nodes_.size(), 0);
    plan.reachable.assign(nodes_.size(), 0);
    for (Var v : wrt) {
        if (!v.valid()) throw ArgumentError("tape: invalid wrt var");
        plan.needs[static_cast<size_t>(v.id)] = 1;
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (plan.needs[i]) continue;
        const Node& n = nodes_[i];
        bool need = false;
        if (n.a >= 0 && passes_grad(n.op, 0) && plan.needs[static_cast<size_t>(n.a)]) need = true;
        if (!need && n.b >= 0 && passes_grad(n.op, 1) && plan.needs[static_cast<size_t>(n.b)])
            need = true;
        plan.needs[i] = need ? 1 : 0;
    }
    std::vector<int> stack{output.id};
    plan.reachable[static_cast<size_t>(output.id)] = 1;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        const Node& n = nodes_[static_cast<size_t>(id)];
        for (int slot = 0; slot < 2; ++slot) {
            int o = slot == 0 ? n.a : n.b;
            if (o >= 0 && passes_grad(n.op, slot) && plan.needs[static_cast<size_t>(o)] &&
                !plan.reachable[static_cast<size_t>(o)]) {
                plan.reachable[static_cast<size_t>(o)] = 1;
                stack.push_back(o);
            }
        }
    }
    return plan;
}

std::vector<Var> Tape::backward(Var output, std::span<const Var> wrt, bool lazy) {
    {
        const Node& out = node(output.id);
        if (out.rows != 1 || out.cols != 1)
            throw ArgumentError("tape: gradient requires a scalar (1x1) output");
    }
    BackwardPlan plan = plan_backward(output, wrt);
    std::vector<Var> adjoint(nodes_.size(), Var{});

    const bool prev_lazy = lazy_mode_;
    lazy_mode_ = lazy;

    auto accumulate = [&](int id, Var contrib) {
        Var& slot = adjoint[static_cast<size_t>(id)];
        slot = slot.valid() ? add(slot, contrib) : contrib;
    };

    adjoint[static_cast<size_t>(output.id)] = constant(Matrix::Ones(1, 1), "seed");

    for (int id = output.id; id >= 0; --id) {
        if (!plan.reachable[static_cast<size_t>(id)]) continue;
        Var g = adjoint[static_cast<size_t>(id)];
        if (!g.valid()) continue;
        // Copy fields up front: emitting adjoint ops reallocates nodes_.
        const Op op = node(id).op;
        const int ia = node(id).a, ib = node(id).b;
        const double s0 = node(id).s0, s1 = node(id).s1;
        const int nrows = node(id).rows, ncols = node(id).cols;
        const int sparse_id = node(id).sparse_id;
        Var self{id}, a{ia}, b{ib};
        const bool need_a = ia >= 0 && passes_grad(op, 0) && plan.needs[static_cast<size_t>(ia)];
        const bool need_b = ib >= 0 && passes_grad(op, 1) && plan.needs[static_cast<size_t>(ib)];
        if (!need_a && !need_b) continue;
        switch (op) {
            case Op::Leaf:
            case Op::Const:
            case Op::Step:
            case Op::InteriorMask:
            case Op::StopGrad:
                break;
            case Op::MatMul:
                if (need_a) accumulate(ia, matmul(g, transpose(b)));
                if (need_b) accumulate(ib, matmul(transpose(a), g));
                break;
            case Op::SpMM:
                if (need_b) accumulate(ib, spmm(sparse_id, g, s0 == 0.0));
                break;
            case Op::Add:
                if (need_a) accumulate(ia, g);
                if (need_b) accumulate(ib, g);
                break;
            case Op::Sub:
                if (need_a) accumulate(ia, g);
                if (need_b) accumulate(ib, neg(g));
                break;
            case Op::Mul:
                if (need_a) accumulate(ia, mul(g, b));
                if (need_b) accumulate(ib, mul(g, a));
                break;
            case Op::Div:
                if (need_a) accumulate(ia, div(g, b));
                if (need_b) accumulate(ib, neg(div(mul(g, self), b)));
                break;
            case Op::Neg:
                if (need_a) accumulate(ia, neg(g));
                break;
            case Op::AddScalar:
                if (need_a) accumulate(ia, g);
                break;
            case Op::MulScalar:
                if (need_a) accumulate(ia, mul_scalar(g, s0));
                break;
            case Op::PowScalar:
                if (need_a) accumulate(ia, mul_scalar(mul(g, pow_scalar(a, s0 - 1.0)), s0));
                break;
            case Op::Exp:
                if (need_a) accumulate(ia, mul(g, self));
                break;
            case Op::Log:
                if (need_a) accumulate(ia, div(g, a));
                break;
            case Op::Tanh:
                if (need_a) accumulate(ia, mul(g, add_scalar(neg(mul(self, self)), 1.0)));
                break;
            case Op::Sqrt:
                if (need_a) accumulate(ia, mul_scalar(div(g, self), 0.5));
                break;
            case Op::Relu:
                if (need_a) accumulate(ia, mul(g, step(a)));
                break;
            case Op::Elu: {
                // d/dx = 1 for x > 0, e^x = elu(x)+1 otherwise
                if (need_a) {
                    Var s = step(a);
                    Var below = mul(add_scalar(neg(s), 1.0), add_scalar(self, 1.0));
                    accumulate(ia, mul(g, add(s, below)));
                }
                break;
            }
            case Op::Clamp:
                if (need_a) accumulate(ia, mul(g, interior_mask(a, s0, s1)));
                break;
            case Op::Transpose:
                if (need_a) accumulate(ia, transpose(g));
                break;
            case Op::RowSum:
                if (need_a) accumulate(ia, broadcast_col(g, node(ia).cols));
                break;
            case Op::Sum:
                if (need_a) accumulate(ia, broadcast_scalar(g, node(ia).rows, node(ia).cols));
                break;
            case Op::RowSoftmax:
                if (need_a) {
                    Var rowdot = row_sum(mul(g, self));
                    accumulate(ia, mul(self, sub(g, broadcast_col(rowdot, ncols))));
                }
                break;
            case Op::RowLogSumExp:
                if (need_a) accumulate(ia, scale_rows(row_softmax(a), g));
                break;
            case Op::ScaleRows:
                if (need_a) accumulate(ia, scale_rows(g, b));
                if (need_b) accumulate(ib, row_sum(mul(g, a)));
                break;
            case Op::ScaleCols:
                if (need_a) accumulate(ia, scale_cols(g, b));
                if (need_b) accumulate(ib, row_sum(transpose(mul(g, a))));
                break;
            case Op::BroadcastCol:
                if (need_a) accumulate(ia, row_sum(g));
                break;
            case Op::BroadcastScalar:
                if (need_a) accumulate(ia, sum(g));
                break;
            case Op::AddRowVec:
                if (need_a) accumulate(ia, g);
                if (need_b) accumulate(ib, transpose(row_sum(transpose(g))));
                break;
            case Op::GatherRows:
                if (need_a) accumulate(ia, scatter_rows(g, node(id).idx, node(ia).rows));
                break;
            case Op::ScatterRows:
                if (need_a) accumulate(ia, gather_rows(g, node(id).idx));
                break;
            case Op::Inverse:
                if (need_a) {
                    Var bt = transpose(self);
                    accumulate(ia, neg(matmul(matmul(bt, g), bt)));
                }
                break;
            case Op::WeightedMedian:
                if (need_b) {
                    Node sc;
                    sc.op = Op::MedianScatter;
                    sc.a = g.id;
                    sc.b = id;
                    sc.rows = node(ib).rows;
                    sc.cols = node(ib).cols;
                    sc.tag = "median_scatter";
                    accumulate(ib, push(std::move(sc)));
                }
                break;
            case Op::MedianScatter:
                if (need_a) {
                    Node ga;
                    ga.op = Op::MedianGather;
                    ga.a = g.id;
                    ga.b = ib;  // the median node
                    ga.rows = node(ia).rows;
                    ga.cols = node(ia).cols;
                    ga.tag = "median_gather";
                    accumulate(ia, push(std::move(ga)));
                }
                break;
            case Op::MedianGather:
                if (need_a) {
                    Node sc;
                    sc.op = Op::MedianScatter;
                    sc.a = g.id;
                    sc.b = ib;
                    sc.rows = node(ia).rows;
                    sc.cols = node(ia).cols;
                    sc.tag = "median_scatter";
                    accumulate(ia, push(std::move(sc)));
                }
                break;
        }
        (void)nrows;
        (void)s1;
    }
    lazy_mode_ = prev_lazy;

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (Var v : wrt) {
        Var g = adjoint[static_cast<size_t>(v.id)];
        if (!g.valid()) {
            // The leaf does not participate in the output: gradient is zero.
            g = lazy ? Var{-2 - v.id} : constant(Matrix::Zero(node(v.id).rows, node(v.id).cols),
                                                 "zero_grad");
        }
        result.push_back(g);
    }
    return result;
}

std::vector<Var> Tape::grad_vars(Var output, std::span<const Var> wrt) {
    std::vector<Var> out = backward(output, wrt, /*lazy=*/false);
    // In eager mode the zero-grad placeholder is already a real constant.
    return out;
}

std::vector<Matrix> Tape::gradients(Var output, std::span<const Var> wrt) {
    const size_t base = nodes_.size();
    std::vector<Var> grads = backward(output, wrt, /*lazy=*/true);

    // Evaluate the appended adjoint nodes in order, freeing each one's value
    // once every appended consumer has run.
    std::vector<int> refcount(nodes_.size() - base, 0);
    auto local = [&](int id) { return id >= static_cast<int>(base); };
    for (size_t i = base; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.a >= 0 && local(n.a)) ++refcount[static_cast<size_t>(n.a) - base];
        if (n.b >= 0 && local(n.b) && n.op != Op::MedianScatter && n.op != Op::MedianGather)
            ++refcount[static_cast<size_t>(n.b) - base];
    }
    std::vector<char> keep(nodes_.size() - base, 0);
    for (Var g : grads)
        if (g.id >= static_cast<int>(base)) keep[static_cast<size_t>(g.id) - base] = 1;

    for (size_t i = base; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (!n.evaluated) eval_node(n);
        auto release = [&](int id) {
            if (id < 0 || !local(id)) return;
            size_t k = static_cast<size_t>(id) - base;
            if (--refcount[k] == 0 && !keep[k]) nodes_[static_cast<size_t>(id)].value = Matrix();
        };
        release(n.a);
        if (n.op != Op::MedianScatter && n.op != Op::MedianGather) release(n.b);
    }

    std::vector<Matrix> out;
    out.reserve(wrt.size());
    for (size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].id <= -2) {
            Var leaf{-grads[i].id - 2};
            out.push_back(Matrix::Zero(node(leaf.id).rows, node(leaf.id).cols));
        } else {
            out.push_back(std::move(node(grads[i].id).value));
        }
    }
    nodes_.resize(base);
    return out;
}

Matrix Tape::gradient(Var output, Var wrt) {
    std::array<Var, 1> w{wrt};
    return gradients(output, w)[0];
}

// --- finite differences --------------------------------------------------------

double finite_difference_check(const std::function<double(const Matrix&)>& f,
                               const Matrix& analytic_grad, const Matrix& point, double step,
                               const std::vector<std::pair<int, int>>* coords) {
    {
        const double v1 = f(point);
        const double v2 = f(point);
        if (std::isnan(v1) || v1 != v2)
            throw ArgumentError("finite_difference_check: function is not deterministic");
    }
    std::vector<std::pair<int, int>> all;
    if (!coords) {
        all.reserve(static_cast<size_t>(point.size()));
        for (int i = 0; i < point.rows(); ++i)
            for (int j = 0; j < point.cols(); ++j) all.emplace_back(i, j);
        coords = &all;
    }
    double worst = 0.0;
    Matrix x = point;
    for (auto [i, j] : *coords) {
        const double orig = x(i, j);
        x(i, j) = orig + step;
        const double fp = f(x);
        x(i, j) = orig - step;
        const double fm = f(x);
        x(i, j) = orig;
        const double fd = (fp - fm) / (2.0 * step);
        const double an = analytic_grad(i, j);
        const double dev = std::abs(an - fd) / std::max(1.0, std::abs(an));
        worst = std::max(worst, dev);
    }
    return worst;
}

}  // namespace gnnb::ad
