#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "canlab/errors.hpp"

namespace canlab {

// Dense row-major tensor of 64-bit reals. Rank is 1 or 2 in practice; ops
// below state their expected rank.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::size_t rows, std::size_t cols) {
        Tensor t;
        t.shape = {rows, cols};
        t.data.assign(rows * cols, 0.0);
        return t;
    }
    static Tensor zeros(std::size_t n) {
        Tensor t;
        t.shape = {n};
        t.data.assign(n, 0.0);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

enum class OpKind {
    Input,
    Affine,       // x[m,k] @ W[k,n] + b[n]
    Matmul,       // x[m,k] @ W[k,n]
    Add,
    AddBias,
    Mul,
    Scale,
    Silu,
    SoftmaxRows,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Transpose,
    ConcatRows,
    MeanRows,
    NormalizeRows,
    ZeroChannels,
};

const char* op_name(OpKind k);

using NodeId = int;

// Append-only reverse-mode tape. Ops evaluate eagerly; every node's inputs
// precede it, so backward is one reverse sweep. Single-threaded per instance.
class Graph {
public:
    NodeId input(Tensor t);

    NodeId affine(NodeId x, NodeId w, NodeId b);
    NodeId matmul(NodeId x, NodeId w);
    NodeId add(NodeId a, NodeId b);
    NodeId add_bias(NodeId x, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double c);
    NodeId silu(NodeId x);
    NodeId softmax_rows(NodeId x);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
    NodeId embedding(NodeId table, std::vector<int> ids);
    // Mean NLL over rows with weight > 0; fused log-softmax.
    NodeId cross_entropy(NodeId logits, std::vector<int> targets,
                         std::vector<double> weights);
    NodeId transpose(NodeId x);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId mean_rows(NodeId x);
    NodeId normalize_rows(NodeId x);
    // Copies x with the given columns forced to zero. An empty channel list
    // makes this an identity tap whose gradient can be read independently.
    NodeId zero_channels(NodeId x, std::vector<std::size_t> channels);

    // Accumulates d(loss)/d(node) for every node; loss must be scalar.
    void backward(NodeId loss);

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Tensor& grad(NodeId id) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor value;
        // op-specific payload
        std::vector<int> ids;               // Embedding / CrossEntropy targets
        std::vector<double> weights;        // CrossEntropy position weights
        std::vector<std::size_t> channels;  // ZeroChannels
        double scalar = 0.0;                // Scale
    };

    NodeId push(Node n);
    std::size_t check(NodeId id) const;
    void check_finite(const Tensor& t, OpKind kind) const;
    const Tensor& in(const Node& n, std::size_t i) const {
        return nodes_[static_cast<std::size_t>(n.inputs[i])].value;
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool backward_done_ = false;
};

} // namespace canlab
