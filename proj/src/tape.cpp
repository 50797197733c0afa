// SPDX-License-Identifier: Apache-2.0
#include "debias/tape.hpp"

#include <cassert>
#include <cmath>
#include <utility>

#include "debias/errors.hpp"

namespace debias {

namespace {
constexpr double kTinyProb = 1e-300;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void softmax_row_inplace(const double* x, double* p, int n) {
    double m = x[0];
    for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(x[i] - m);
        z += p[i];
    }
    for (int i = 0; i < n; ++i) p[i] /= z;
}
}  // namespace

Tape::NodeId Tape::push(Mat val, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(val), Mat(), std::move(back)});
    return static_cast<NodeId>(nodes_.size()) - 1;
}

Tape::NodeId Tape::leaf(Mat value) { return push(std::move(value), nullptr); }

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    assert(val(a).same_shape(val(b)));
    Mat out = val(a);
    axpy(out, 1.0, val(b));
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, b, id](Tape& t) {
        axpy(t.grad_mut(a), 1.0, t.grad(id));
        axpy(t.grad_mut(b), 1.0, t.grad(id));
    };
    return id;
}

Tape::NodeId Tape::add_rowvec(NodeId a, NodeId b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    assert(B.rows == 1 && B.cols == A.cols);
    Mat out = A;
    for (int i = 0; i < A.rows; ++i) {
        double* oi = out.row_ptr(i);
        for (int j = 0; j < A.cols; ++j) oi[j] += B.at(0, j);
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, b, id](Tape& t) {
        const Mat& g = t.grad(id);
        axpy(t.grad_mut(a), 1.0, g);
        Mat& gb = t.grad_mut(b);
        for (int i = 0; i < g.rows; ++i) {
            const double* gi = g.row_ptr(i);
            for (int j = 0; j < g.cols; ++j) gb.at(0, j) += gi[j];
        }
    };
    return id;
}

Tape::NodeId Tape::scale(NodeId a, double s) {
    Mat out = val(a);
    for (double& v : out.a) v *= s;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, s, id](Tape& t) { axpy(t.grad_mut(a), s, t.grad(id)); };
    return id;
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    const NodeId id = push(mm(val(a), val(b)), nullptr);
    nodes_[id].back = [a, b, id](Tape& t) {
        const Mat& g = t.grad(id);
        axpy(t.grad_mut(a), 1.0, mm_nt(g, t.val(b)));
        axpy(t.grad_mut(b), 1.0, mm_tn(t.val(a), g));
    };
    return id;
}

Tape::NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    const NodeId id = push(mm_nt(val(a), val(b)), nullptr);
    nodes_[id].back = [a, b, id](Tape& t) {
        const Mat& g = t.grad(id);
        axpy(t.grad_mut(a), 1.0, mm(g, t.val(b)));
        axpy(t.grad_mut(b), 1.0, mm_tn(g, t.val(a)));
    };
    return id;
}

Tape::NodeId Tape::rows(NodeId table, std::vector<int> ids) {
    const Mat& T = val(table);
    Mat out(static_cast<int>(ids.size()), T.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        assert(ids[i] >= 0 && ids[i] < T.rows);
        std::copy(T.row_ptr(ids[i]), T.row_ptr(ids[i]) + T.cols, out.row_ptr(static_cast<int>(i)));
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [table, ids = std::move(ids), id](Tape& t) {
        const Mat& g = t.grad(id);
        Mat& gt = t.grad_mut(table);
        for (size_t i = 0; i < ids.size(); ++i) {
            const double* gi = g.row_ptr(static_cast<int>(i));
            double* ti = gt.row_ptr(ids[i]);
            for (int j = 0; j < g.cols; ++j) ti[j] += gi[j];
        }
    };
    return id;
}

Tape::NodeId Tape::slice_cols(NodeId a, int c0, int c1) {
    const Mat& A = val(a);
    assert(0 <= c0 && c0 < c1 && c1 <= A.cols);
    Mat out(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i) {
        std::copy(A.row_ptr(i) + c0, A.row_ptr(i) + c1, out.row_ptr(i));
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, c0, id](Tape& t) {
        const Mat& g = t.grad(id);
        Mat& ga = t.grad_mut(a);
        for (int i = 0; i < g.rows; ++i) {
            const double* gi = g.row_ptr(i);
            double* ai = ga.row_ptr(i) + c0;
            for (int j = 0; j < g.cols; ++j) ai[j] += gi[j];
        }
    };
    return id;
}

Tape::NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    assert(!parts.empty());
    const int rows = val(parts[0]).rows;
    int cols = 0;
    for (const NodeId p : parts) {
        assert(val(p).rows == rows);
        cols += val(p).cols;
    }
    Mat out(rows, cols);
    int offset = 0;
    for (const NodeId p : parts) {
        const Mat& P = val(p);
        for (int i = 0; i < rows; ++i) {
            std::copy(P.row_ptr(i), P.row_ptr(i) + P.cols, out.row_ptr(i) + offset);
        }
        offset += P.cols;
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [parts, id](Tape& t) {
        const Mat& g = t.grad(id);
        int off = 0;
        for (const NodeId p : parts) {
            Mat& gp = t.grad_mut(p);
            for (int i = 0; i < gp.rows; ++i) {
                const double* gi = g.row_ptr(i) + off;
                double* pi = gp.row_ptr(i);
                for (int j = 0; j < gp.cols; ++j) pi[j] += gi[j];
            }
            off += gp.cols;
        }
    };
    return id;
}

Tape::NodeId Tape::mean_rows(NodeId a) {
    const Mat& A = val(a);
    assert(A.rows >= 1);
    Mat out(1, A.cols);
    for (int i = 0; i < A.rows; ++i) {
        const double* ai = A.row_ptr(i);
        for (int j = 0; j < A.cols; ++j) out.at(0, j) += ai[j];
    }
    const double inv = 1.0 / A.rows;
    for (double& v : out.a) v *= inv;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, inv, id](Tape& t) {
        const Mat& g = t.grad(id);
        Mat& ga = t.grad_mut(a);
        for (int i = 0; i < ga.rows; ++i) {
            double* ai = ga.row_ptr(i);
            for (int j = 0; j < ga.cols; ++j) ai[j] += inv * g.at(0, j);
        }
    };
    return id;
}

Tape::NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    const Mat& X = val(x);
    const Mat& G = val(gamma);
    const Mat& B = val(beta);
    assert(G.rows == 1 && G.cols == X.cols && B.rows == 1 && B.cols == X.cols);
    const int n = X.cols;
    Mat xhat(X.rows, n);
    Mat inv_std(X.rows, 1);
    Mat out(X.rows, n);
    for (int i = 0; i < X.rows; ++i) {
        const double* xi = X.row_ptr(i);
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xi[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std.at(i, 0) = inv;
        for (int j = 0; j < n; ++j) {
            const double h = (xi[j] - mean) * inv;
            xhat.at(i, j) = h;
            out.at(i, j) = G.at(0, j) * h + B.at(0, j);
        }
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std),
                       id](Tape& t) {
        const Mat& g = t.grad(id);
        const Mat& G = t.val(gamma);
        Mat& gx = t.grad_mut(x);
        Mat& gg = t.grad_mut(gamma);
        Mat& gb = t.grad_mut(beta);
        const int n = g.cols;
        for (int i = 0; i < g.rows; ++i) {
            const double* gi = g.row_ptr(i);
            const double* hi = xhat.row_ptr(i);
            double sum_dh = 0.0;
            double sum_dh_h = 0.0;
            for (int j = 0; j < n; ++j) {
                const double dh = gi[j] * G.at(0, j);
                sum_dh += dh;
                sum_dh_h += dh * hi[j];
                gg.at(0, j) += gi[j] * hi[j];
                gb.at(0, j) += gi[j];
            }
            const double inv = inv_std.at(i, 0);
            double* xi = gx.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                const double dh = gi[j] * G.at(0, j);
                xi[j] += inv * (dh - sum_dh / n - hi[j] * sum_dh_h / n);
            }
        }
    };
    return id;
}

Tape::NodeId Tape::softmax_rows(NodeId x) {
    const Mat& X = val(x);
    Mat out(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) softmax_row_inplace(X.row_ptr(i), out.row_ptr(i), X.cols);
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [x, id](Tape& t) {
        const Mat& g = t.grad(id);
        const Mat& p = t.val(id);
        Mat& gx = t.grad_mut(x);
        for (int i = 0; i < g.rows; ++i) {
            const double* gi = g.row_ptr(i);
            const double* pi = p.row_ptr(i);
            double gp = 0.0;
            for (int j = 0; j < g.cols; ++j) gp += gi[j] * pi[j];
            double* xi = gx.row_ptr(i);
            for (int j = 0; j < g.cols; ++j) xi[j] += pi[j] * (gi[j] - gp);
        }
    };
    return id;
}

Tape::NodeId Tape::gelu(NodeId x) {
    const Mat& X = val(x);
    Mat out(X.rows, X.cols);
    for (size_t i = 0; i < X.size(); ++i) {
        const double v = X.a[i];
        out.a[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [x, id](Tape& t) {
        const Mat& g = t.grad(id);
        const Mat& X = t.val(x);
        Mat& gx = t.grad_mut(x);
        for (size_t i = 0; i < X.size(); ++i) {
            const double v = X.a[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx.a[i] += g.a[i] * (cdf + v * pdf);
        }
    };
    return id;
}

Tape::NodeId Tape::cosine(NodeId a, NodeId b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    assert(A.rows == 1 && B.rows == 1 && A.cols == B.cols);
    const int n = A.cols;
    const double na = norm2(A.row_ptr(0), n);
    const double nb = norm2(B.row_ptr(0), n);
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine of zero-norm vector");
    const double d = dot(A.row_ptr(0), B.row_ptr(0), n);
    const double c = d / (na * nb);
    Mat out(1, 1);
    out.at(0, 0) = c;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, b, na, nb, c, id](Tape& t) {
        const double g = t.grad(id).at(0, 0);
        const Mat& A = t.val(a);
        const Mat& B = t.val(b);
        Mat& ga = t.grad_mut(a);
        Mat& gb = t.grad_mut(b);
        const int n = A.cols;
        for (int j = 0; j < n; ++j) {
            ga.at(0, j) += g * (B.at(0, j) / (na * nb) - c * A.at(0, j) / (na * na));
            gb.at(0, j) += g * (A.at(0, j) / (na * nb) - c * B.at(0, j) / (nb * nb));
        }
    };
    return id;
}

Tape::NodeId Tape::jsd(NodeId p, NodeId q) {
    const Mat& P = val(p);
    const Mat& Q = val(q);
    if (P.rows != 1 || Q.rows != 1 || P.cols != Q.cols) {
        throw NumericError("jsd: operands must be equal-length rows");
    }
    const int n = P.cols;
    double v = 0.0;
    for (int j = 0; j < n; ++j) {
        const double pj = P.at(0, j);
        const double qj = Q.at(0, j);
        const double mj = 0.5 * (pj + qj);
        if (pj > 0.0) v += 0.5 * pj * std::log(pj / mj);
        if (qj > 0.0) v += 0.5 * qj * std::log(qj / mj);
    }
    Mat out(1, 1);
    out.at(0, 0) = v;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [p, q, id](Tape& t) {
        const double g = t.grad(id).at(0, 0);
        const Mat& P = t.val(p);
        const Mat& Q = t.val(q);
        Mat& gp = t.grad_mut(p);
        Mat& gq = t.grad_mut(q);
        for (int j = 0; j < P.cols; ++j) {
            const double pj = std::max(P.at(0, j), kTinyProb);
            const double qj = std::max(Q.at(0, j), kTinyProb);
            const double mj = 0.5 * (pj + qj);
            gp.at(0, j) += g * 0.5 * std::log(pj / mj);
            gq.at(0, j) += g * 0.5 * std::log(qj / mj);
        }
    };
    return id;
}

Tape::NodeId Tape::sum_sq_diff(NodeId a, Mat target) {
    const Mat& A = val(a);
    assert(A.same_shape(target));
    double v = 0.0;
    for (size_t i = 0; i < A.size(); ++i) {
        const double d = A.a[i] - target.a[i];
        v += d * d;
    }
    Mat out(1, 1);
    out.at(0, 0) = v;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [a, target = std::move(target), id](Tape& t) {
        const double g = t.grad(id).at(0, 0);
        const Mat& A = t.val(a);
        Mat& ga = t.grad_mut(a);
        for (size_t i = 0; i < A.size(); ++i) ga.a[i] += g * 2.0 * (A.a[i] - target.a[i]);
    };
    return id;
}

Tape::NodeId Tape::cross_entropy_masked(NodeId logits, std::vector<int> targets,
                                        std::vector<int> positions) {
    const Mat& L = val(logits);
    assert(static_cast<int>(targets.size()) == L.rows);
    Mat probs(static_cast<int>(positions.size()), L.cols);
    double v = 0.0;
    for (size_t i = 0; i < positions.size(); ++i) {
        const int pos = positions[i];
        assert(pos >= 0 && pos < L.rows);
        softmax_row_inplace(L.row_ptr(pos), probs.row_ptr(static_cast<int>(i)), L.cols);
        const double py = std::max(probs.at(static_cast<int>(i), targets[pos]), kTinyProb);
        v -= std::log(py);
    }
    Mat out(1, 1);
    out.at(0, 0) = v;
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [logits, targets = std::move(targets), positions = std::move(positions),
                       probs = std::move(probs), id](Tape& t) {
        const double g = t.grad(id).at(0, 0);
        Mat& gl = t.grad_mut(logits);
        for (size_t i = 0; i < positions.size(); ++i) {
            const int pos = positions[i];
            const double* pi = probs.row_ptr(static_cast<int>(i));
            double* li = gl.row_ptr(pos);
            for (int j = 0; j < gl.cols; ++j) li[j] += g * pi[j];
            li[targets[pos]] -= g;
        }
    };
    return id;
}

Tape::NodeId Tape::add_many(const std::vector<NodeId>& terms) {
    assert(!terms.empty());
    Mat out = val(terms[0]);
    for (size_t i = 1; i < terms.size(); ++i) axpy(out, 1.0, val(terms[i]));
    const NodeId id = push(std::move(out), nullptr);
    nodes_[id].back = [terms, id](Tape& t) {
        for (const NodeId n : terms) axpy(t.grad_mut(n), 1.0, t.grad(id));
    };
    return id;
}

void Tape::backward(NodeId loss) {
    assert(!backward_done_);
    assert(val(loss).rows == 1 && val(loss).cols == 1);
    backward_done_ = true;
    for (Node& n : nodes_) {
        n.grad = Mat(n.val.rows, n.val.cols);
    }
    nodes_[loss].grad.at(0, 0) = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
        if (nodes_[id].back) nodes_[id].back(*this);
    }
}

}  // namespace debias
