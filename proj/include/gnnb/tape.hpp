#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gnnb/util.hpp"

namespace gnnb::ad {

using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// Handle to a node on a Tape. Invalid by default.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
    Leaf,
    Const,
    MatMul,
    SpMM,        // sparse-constant * dense
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar,
    PowScalar,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Relu,
    Elu,
    Step,          // 1 where a > 0; derivative defined as 0 everywhere
    InteriorMask,  // 1 where lo < a < hi; derivative 0
    Clamp,
    Transpose,
    RowSum,
    Sum,
    RowSoftmax,
    RowLogSumExp,
    ScaleRows,  // a(i,j) * v(i)
    ScaleCols,  // a(i,j) * v(j)
    BroadcastCol,     // tile an n x 1 vector to n x m
    BroadcastScalar,  // tile a 1 x 1 scalar to r x c
    AddRowVec,        // a(i,j) + v(0,j)
    GatherRows,
    ScatterRows,
    Inverse,
    WeightedMedian,  // per-row weighted dimension-wise median of h with weights p
    MedianScatter,   // scatter rows of x into the median's selected slots
    MedianGather,    // adjoint of MedianScatter
    StopGrad,
};

/// Recorded dense-matrix program with cached forward values.
///
/// Recording is eager: every op computes its value as it is appended, and any
/// NaN/Inf aborts with a NumericError naming the op's tag. Gradients are a
/// tape-to-tape transformation (grad_vars), so recorded programs may contain
/// gradient computations of earlier parts of themselves; backprop through an
/// unrolled training loop falls out of that.
class Tape {
public:
    struct Node {
        Op op;
        int a = -1, b = -1;
        double s0 = 0.0, s1 = 0.0;
        int rows = 0, cols = 0;
        Matrix value;
        bool evaluated = false;
        int sparse_id = -1;
        std::vector<int> idx;  // GatherRows/ScatterRows rows; WeightedMedian picks
        const char* tag = "";
    };

    // --- leaves and constants ---
    Var leaf(Matrix value, const char* tag = "leaf");
    Var constant(Matrix value, const char* tag = "const");
    Var scalar(double v);
    /// Registers a sparse constant; returns an id usable with spmm().
    int sparse_constant(SparseMatrix s);

    // --- primitive ops ---
    Var matmul(Var a, Var b);
    Var spmm(int sparse_id, Var b, bool transposed = false);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var neg(Var a);
    Var add_scalar(Var a, double s);
    Var mul_scalar(Var a, double s);
    Var pow_scalar(Var a, double p);
    Var exp(Var a);
    Var log(Var a);
    Var tanh(Var a);
    Var sqrt(Var a);
    Var relu(Var a);
    Var elu(Var a);
    Var step(Var a);
    Var interior_mask(Var a, double lo, double hi);
    Var clamp(Var a, double lo, double hi);
    Var clamp_min(Var a, double lo);
    Var transpose(Var a);
    Var row_sum(Var a);
    Var col_sum(Var a);  // composed: transpose/row_sum/transpose
    Var sum(Var a);
    Var row_softmax(Var a);
    Var row_logsumexp(Var a);
    Var scale_rows(Var a, Var v);
    Var scale_cols(Var a, Var v);
    Var broadcast_col(Var v, int cols);
    Var broadcast_scalar(Var s, int rows, int cols);
    Var add_row_vec(Var a, Var v);
    Var gather_rows(Var a, std::vector<int> rows);
    Var scatter_rows(Var a, std::vector<int> rows, int out_rows);
    Var inverse(Var a);
    Var weighted_median(Var p, Var h);
    Var stop_grad(Var a);

    // --- access ---
    const Matrix& val(Var v) const;
    double scalar_val(Var v) const;
    int rows(Var v) const { return node(v.id).rows; }
    int cols(Var v) const { return node(v.id).cols; }
    size_t size() const { return nodes_.size(); }

    /// Rebinds a leaf and recomputes every node in recorded order.
    void bind(Var leaf, Matrix value);
    void forward();

    /// In-graph gradients of a scalar output w.r.t. the given vars. The
    /// returned vars live on this tape and are themselves differentiable.
    std::vector<Var> grad_vars(Var output, std::span<const Var> wrt);

    /// Gradient values of a scalar output w.r.t. the given vars. Adjoint nodes
    /// are evaluated with liveness-based freeing and removed from the tape
    /// afterwards, so peak memory stays near the forward tape's footprint.
    std::vector<Matrix> gradients(Var output, std::span<const Var> wrt);
    Matrix gradient(Var output, Var wrt);

    /// Estimated bytes held by cached forward values.
    size_t value_bytes() const;

private:
    std::vector<Node> nodes_;
    std::vector<SparseMatrix> sparse_;
    std::vector<SparseMatrix> sparse_t_;
    bool lazy_mode_ = false;

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    Var push(Node n, bool eval_now = true);
    void eval_node(Node& n);
    void check_finite(const Node& n) const;
    Var emit(Op op, Var a, Var b, double s0, double s1, int rows, int cols,
             const char* tag = "");

    struct BackwardPlan {
        std::vector<char> needs;      // depends on a requested leaf
        std::vector<char> reachable;  // is an ancestor of the output
    };
    BackwardPlan plan_backward(Var output, std::span<const Var> wrt) const;
    std::vector<Var> backward(Var output, std::span<const Var> wrt, bool lazy);
};

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `f` must be pure; it is evaluated twice at `point` and an ArgumentError is
/// raised if the two results disagree.
double finite_difference_check(const std::function<double(const Matrix&)>& f,
                               const Matrix& analytic_grad, const Matrix& point,
                               double step,
                               const std::vector<std::pair<int, int>>* coords = nullptr);

}  // namespace gnnb::ad
