// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "debias/mat.hpp"

namespace debias {

// Reverse-mode autodiff over matrix-valued nodes. Nodes are created in
// topological order; backward() walks them in reverse creation order, so a
// node may only consume earlier nodes. Gradients are allocated lazily when
// backward() runs, which keeps pure-inference tapes cheap.
//
// Scalars are 1x1 matrices. All arithmetic is 64-bit.
class Tape {
  public:
    using NodeId = int;

    NodeId leaf(Mat value);

    const Mat& val(NodeId id) const { return nodes_[id].val; }
    const Mat& grad(NodeId id) const { return nodes_[id].grad; }

    // Elementwise over equal shapes.
    NodeId add(NodeId a, NodeId b);
    // (r x c) + broadcast (1 x c).
    NodeId add_rowvec(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId matmul(NodeId a, NodeId b);     // A * B
    NodeId matmul_nt(NodeId a, NodeId b);  // A * B^T

    // Row gather; duplicate ids accumulate gradient.
    NodeId rows(NodeId table, std::vector<int> ids);
    NodeId slice_cols(NodeId a, int c0, int c1);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId mean_rows(NodeId a);  // 1 x c column means

    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
    NodeId softmax_rows(NodeId x);
    NodeId gelu(NodeId x);

    // cos(a, b) for 1 x d row vectors; throws NumericError on a zero norm.
    NodeId cosine(NodeId a, NodeId b);

    // Jensen-Shannon divergence between two 1 x m probability rows,
    // natural log, 0*log(0/.) treated as 0.
    NodeId jsd(NodeId p, NodeId q);

    // Sum of squared differences against a constant target.
    NodeId sum_sq_diff(NodeId a, Mat target);

    // Sum over `positions` of -log softmax(logits[pos])[targets[pos]].
    NodeId cross_entropy_masked(NodeId logits, std::vector<int> targets,
                                std::vector<int> positions);

    NodeId add_many(const std::vector<NodeId>& terms);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node.
    // `loss` must be 1x1. One backward pass per tape.
    void backward(NodeId loss);

    size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Mat val;
        Mat grad;
        std::function<void(Tape&)> back;
    };

    NodeId push(Mat val, std::function<void(Tape&)> back);
    Mat& grad_mut(NodeId id) { return nodes_[id].grad; }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace debias
