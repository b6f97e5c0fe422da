#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "peftforge/errors.hpp"
#include "peftforge/numerics/parameter.hpp"

namespace peftforge {

template <typename Scalar>
class Graph;

/// Handle to a node on a Graph's tape. Cheap to copy; valid until the graph
/// is cleared.
template <typename Scalar>
struct Var {
    Graph<Scalar>* graph = nullptr;
    int id = -1;

    const Matrix<Scalar>& value() const { return graph->value_of(id); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape. A forward pass records nodes in evaluation order;
/// backward() walks the tape once in reverse, accumulating gradients into the
/// participating Parameters. The tape is single use: clear() before the next
/// forward pass.
template <typename Scalar>
class Graph {
public:
    using Mat = Matrix<Scalar>;
    using V = Var<Scalar>;

    V input(Mat value) {
        return make(std::move(value), nullptr);
    }

    V scalar(Scalar s) {
        Mat m(1, 1);
        m(0, 0) = s;
        return input(std::move(m));
    }

    /// Leaf over a full parameter tensor.
    V param(Parameter<Scalar>& p) {
        Parameter<Scalar>* pp = &p;
        return make(p.value, [pp](Graph& g, int id) { pp->accumulate(g.grad_of(id)); });
    }

    /// Leaf over selected rows of a parameter (embedding lookup). Gradients
    /// scatter back into the corresponding rows only.
    V param_rows(Parameter<Scalar>& p, std::vector<int> row_ids) {
        Mat sel(static_cast<Eigen::Index>(row_ids.size()), p.value.cols());
        for (std::size_t i = 0; i < row_ids.size(); ++i) {
            if (row_ids[i] < 0 || row_ids[i] >= p.value.rows())
                throw InputError("row " + std::to_string(row_ids[i]) + " out of range for parameter " +
                                 p.path + " with " + std::to_string(p.value.rows()) + " rows");
            sel.row(static_cast<Eigen::Index>(i)) = p.value.row(row_ids[i]);
        }
        Parameter<Scalar>* pp = &p;
        return make(std::move(sel), [pp, ids = std::move(row_ids)](Graph& g, int id) {
            const Mat& gr = g.grad_of(id);
            for (std::size_t i = 0; i < ids.size(); ++i)
                pp->grad.row(ids[i]) += gr.row(static_cast<Eigen::Index>(i));
            pp->grad_live = true;
        });
    }

    /// Record a node with an arbitrary backward rule. The rule receives the
    /// graph and the node's own id and must add into the parents' grad_of()
    /// buffers (or into Parameters directly).
    template <typename F>
    V make(Mat value, F&& pull) {
        nodes_.push_back(Node{std::move(value), Mat(), std::function<void(Graph&, int)>(std::forward<F>(pull))});
        return V{this, static_cast<int>(nodes_.size()) - 1};
    }

    V make(Mat value, std::nullptr_t) {
        nodes_.push_back(Node{std::move(value), Mat(), {}});
        return V{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Mat& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Gradient buffer of a node, allocated (zero) on first touch.
    Mat& grad_of(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    bool grad_touched(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    /// Accumulate d(loss)/d(parameter) into every Parameter reachable from
    /// `loss`. Gradients of unreachable nodes and parameters are untouched.
    void backward(V loss) {
        if (loss.graph != this) throw ContractError("backward: node belongs to a different graph");
        if (consumed_) throw StateError("backward: tape already consumed; record a new forward pass");
        const Mat& lv = value_of(loss.id);
        if (lv.rows() != 1 || lv.cols() != 1)
            throw ContractError("backward requires a scalar loss node, got " +
                                std::to_string(lv.rows()) + "x" + std::to_string(lv.cols()));
        grad_of(loss.id)(0, 0) += Scalar(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() != 0 && n.pull) n.pull(*this, i);
        }
        consumed_ = true;
    }

    void clear() {
        nodes_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad; // empty until touched during backward
        std::function<void(Graph&, int)> pull;
    };

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename Scalar>
std::string shape_str(const Matrix<Scalar>& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename Scalar>
void check_same_graph(Var<Scalar> a, Var<Scalar> b, const char* op) {
    if (a.graph == nullptr || a.graph != b.graph)
        throw ContractError(std::string(op) + ": operands recorded on different graphs");
}

} // namespace detail

/// C = A * B with gradients to both operands.
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
    detail::check_same_graph(a, b, "matmul");
    Graph<Scalar>& g = *a.graph;
    const auto& av = g.value_of(a.id);
    const auto& bv = g.value_of(b.id);
    if (av.cols() != bv.rows())
        throw DimensionError("matmul: inner dimensions disagree, " + detail::shape_str(av) +
                             " * " + detail::shape_str(bv));
    Matrix<Scalar> c = av * bv;
    return g.make(std::move(c), [ai = a.id, bi = b.id](Graph<Scalar>& gr, int id) {
        const auto& go = gr.grad_of(id);
        gr.grad_of(ai).noalias() += go * gr.value_of(bi).transpose();
        gr.grad_of(bi).noalias() += gr.value_of(ai).transpose() * go;
    });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
    detail::check_same_graph(a, b, "add");
    Graph<Scalar>& g = *a.graph;
    const auto& av = g.value_of(a.id);
    const auto& bv = g.value_of(b.id);
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
        throw DimensionError("add: shape mismatch, " + detail::shape_str(av) + " + " +
                             detail::shape_str(bv));
    return g.make(av + bv, [ai = a.id, bi = b.id](Graph<Scalar>& gr, int id) {
        const auto& go = gr.grad_of(id);
        gr.grad_of(ai) += go;
        gr.grad_of(bi) += go;
    });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
    return add(a, b);
}

/// x (n x d) plus a 1 x d row vector broadcast to every row.
template <typename Scalar>
Var<Scalar> add_rowvec(Var<Scalar> x, Var<Scalar> row) {
    detail::check_same_graph(x, row, "add_rowvec");
    Graph<Scalar>& g = *x.graph;
    const auto& xv = g.value_of(x.id);
    const auto& rv = g.value_of(row.id);
    if (rv.rows() != 1 || rv.cols() != xv.cols())
        throw DimensionError("add_rowvec: expected 1x" + std::to_string(xv.cols()) + " row, got " +
                             detail::shape_str(rv));
    Matrix<Scalar> out = xv;
    out.rowwise() += rv.row(0);
    return g.make(std::move(out), [xi = x.id, ri = row.id](Graph<Scalar>& gr, int id) {
        const auto& go = gr.grad_of(id);
        gr.grad_of(xi) += go;
        gr.grad_of(ri).row(0) += go.colwise().sum();
    });
}

/// x plus a constant row vector broadcast to every row (no gradient to the
/// constant); used for additive attention masks.
template <typename Scalar>
Var<Scalar> add_const_rowvec(Var<Scalar> x, const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>& row) {
    Graph<Scalar>& g = *x.graph;
    const auto& xv = g.value_of(x.id);
    if (row.cols() != xv.cols())
        throw DimensionError("add_const_rowvec: width mismatch");
    Matrix<Scalar> out = xv;
    out.rowwise() += row;
    return g.make(std::move(out), [xi = x.id](Graph<Scalar>& gr, int id) {
        gr.grad_of(xi) += gr.grad_of(id);
    });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
    Graph<Scalar>& g = *a.graph;
    return g.make(g.value_of(a.id) * s, [ai = a.id, s](Graph<Scalar>& gr, int id) {
        gr.grad_of(ai) += s * gr.grad_of(id);
    });
}

/// Elementwise max(0, x); subgradient at exactly 0 is 0.
template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
    Graph<Scalar>& g = *a.graph;
    const auto& av = g.value_of(a.id);
    Matrix<Scalar> out = av.cwiseMax(Scalar(0));
    return g.make(std::move(out), [ai = a.id](Graph<Scalar>& gr, int id) {
        const auto& av2 = gr.value_of(ai);
        gr.grad_of(ai).array() +=
            gr.grad_of(id).array() * (av2.array() > Scalar(0)).template cast<Scalar>();
    });
}

/// Row-wise softmax with per-row max subtraction.
template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
    Graph<Scalar>& g = *a.graph;
    const auto& av = g.value_of(a.id);
    Matrix<Scalar> out(av.rows(), av.cols());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
        const Scalar m = av.row(r).maxCoeff();
        out.row(r) = (av.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return g.make(std::move(out), [ai = a.id](Graph<Scalar>& gr, int id) {
        const auto& y = gr.value_of(id);
        const auto& go = gr.grad_of(id);
        auto& ga = gr.grad_of(ai);
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const Scalar dot = go.row(r).cwiseProduct(y.row(r)).sum();
            ga.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
        }
    });
}

/// Row-wise layer normalization: standardize each row (population variance,
/// eps inside the square root), then scale by gamma and shift by beta
/// (both 1 x d).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
    detail::check_same_graph(x, gamma, "layer_norm");
    detail::check_same_graph(x, beta, "layer_norm");
    Graph<Scalar>& g = *x.graph;
    const auto& xv = g.value_of(x.id);
    const auto& gv = g.value_of(gamma.id);
    const auto& bv = g.value_of(beta.id);
    const Eigen::Index d = xv.cols();
    if (gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d)
        throw DimensionError("layer_norm: gamma/beta must be 1x" + std::to_string(d));

    Matrix<Scalar> xhat(xv.rows(), d);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_sd(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const Scalar mu = xv.row(r).mean();
        const Scalar var = (xv.row(r).array() - mu).square().mean();
        const Scalar inv = Scalar(1) / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu) * inv;
        inv_sd(r) = inv;
    }
    Matrix<Scalar> out(xv.rows(), d);
    for (Eigen::Index r = 0; r < xv.rows(); ++r)
        out.row(r) = xhat.row(r).cwiseProduct(gv.row(0)) + bv.row(0);

    return g.make(std::move(out),
                  [xi = x.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat),
                   inv_sd = std::move(inv_sd)](Graph<Scalar>& gr, int id) {
                      const auto& go = gr.grad_of(id);
                      const auto& gv2 = gr.value_of(gi);
                      auto& gx = gr.grad_of(xi);
                      auto& gg = gr.grad_of(gi);
                      auto& gb = gr.grad_of(bi);
                      const Eigen::Index d2 = go.cols();
                      for (Eigen::Index r = 0; r < go.rows(); ++r) {
                          gb.row(0) += go.row(r);
                          gg.row(0) += go.row(r).cwiseProduct(xhat.row(r));
                          // dx = inv_sd * (dy' - mean(dy') - xhat * mean(dy' .* xhat)),
                          // dy' = dy .* gamma
                          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dyp =
                              go.row(r).cwiseProduct(gv2.row(0));
                          const Scalar m1 = dyp.sum() / Scalar(d2);
                          const Scalar m2 = dyp.cwiseProduct(xhat.row(r)).sum() / Scalar(d2);
                          gx.row(r).array() +=
                              inv_sd(r) * (dyp.array() - m1 - xhat.row(r).array() * m2);
                      }
                  });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> a) {
    Graph<Scalar>& g = *a.graph;
    return g.make(g.value_of(a.id).transpose(), [ai = a.id](Graph<Scalar>& gr, int id) {
        gr.grad_of(ai) += gr.grad_of(id).transpose();
    });
}

/// Rectangular sub-block [r0, r0+nr) x [c0, c0+nc).
template <typename Scalar>
Var<Scalar> slice(Var<Scalar> a, Eigen::Index r0, Eigen::Index nr, Eigen::Index c0, Eigen::Index nc) {
    Graph<Scalar>& g = *a.graph;
    const auto& av = g.value_of(a.id);
    if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > av.rows() || c0 + nc > av.cols())
        throw DimensionError("slice: block [" + std::to_string(r0) + "+" + std::to_string(nr) +
                             ", " + std::to_string(c0) + "+" + std::to_string(nc) +
                             ") out of range for " + detail::shape_str(av));
    return g.make(av.block(r0, c0, nr, nc),
                  [ai = a.id, r0, nr, c0, nc](Graph<Scalar>& gr, int id) {
                      gr.grad_of(ai).block(r0, c0, nr, nc) += gr.grad_of(id);
                  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index r0, Eigen::Index nr) {
    return slice(a, r0, nr, 0, a.cols());
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index c0, Eigen::Index nc) {
    return slice(a, 0, a.rows(), c0, nc);
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Graph<Scalar>& g = *parts[0].graph;
    Eigen::Index rows = 0;
    const Eigen::Index cols = g.value_of(parts[0].id).cols();
    for (auto p : parts) {
        detail::check_same_graph(parts[0], p, "concat_rows");
        if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
        rows += p.rows();
    }
    Matrix<Scalar> out(rows, cols);
    std::vector<int> ids;
    std::vector<Eigen::Index> offs;
    Eigen::Index at = 0;
    for (auto p : parts) {
        out.middleRows(at, p.rows()) = g.value_of(p.id);
        ids.push_back(p.id);
        offs.push_back(at);
        at += p.rows();
    }
    return g.make(std::move(out), [ids, offs](Graph<Scalar>& gr, int id) {
        const auto& go = gr.grad_of(id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto& gp = gr.grad_of(ids[i]);
            gp += go.middleRows(offs[i], gp.rows());
        }
    });
}

template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
    return concat_rows(std::vector<Var<Scalar>>{a, b});
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Graph<Scalar>& g = *parts[0].graph;
    Eigen::Index cols = 0;
    const Eigen::Index rows = g.value_of(parts[0].id).rows();
    for (auto p : parts) {
        detail::check_same_graph(parts[0], p, "concat_cols");
        if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
        cols += p.cols();
    }
    Matrix<Scalar> out(rows, cols);
    std::vector<int> ids;
    std::vector<Eigen::Index> offs;
    Eigen::Index at = 0;
    for (auto p : parts) {
        out.middleCols(at, p.cols()) = g.value_of(p.id);
        ids.push_back(p.id);
        offs.push_back(at);
        at += p.cols();
    }
    return g.make(std::move(out), [ids, offs](Graph<Scalar>& gr, int id) {
        const auto& go = gr.grad_of(id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto& gp = gr.grad_of(ids[i]);
            gp += go.middleCols(offs[i], gp.cols());
        }
    });
}

/// Sum of all entries, as a 1x1 node.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
    Graph<Scalar>& g = *a.graph;
    Matrix<Scalar> s(1, 1);
    s(0, 0) = g.value_of(a.id).sum();
    return g.make(std::move(s), [ai = a.id](Graph<Scalar>& gr, int id) {
        gr.grad_of(ai).array() += gr.grad_of(id)(0, 0);
    });
}

/// Dot product of two 1 x d rows, as a 1x1 node.
template <typename Scalar>
Var<Scalar> dot(Var<Scalar> a, Var<Scalar> b) {
    return matmul(a, transpose(b));
}

} // namespace peftforge
