#include "canlab/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace canlab {

namespace {

std::string dims(const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kLnEps = 1e-5;

} // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Affine: return "affine";
        case OpKind::Matmul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::AddBias: return "add_bias";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Silu: return "silu";
        case OpKind::SoftmaxRows: return "softmax_rows";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::Embedding: return "embedding";
        case OpKind::CrossEntropy: return "cross_entropy";
        case OpKind::Transpose: return "transpose";
        case OpKind::ConcatRows: return "concat_rows";
        case OpKind::MeanRows: return "mean_rows";
        case OpKind::NormalizeRows: return "normalize_rows";
        case OpKind::ZeroChannels: return "zero_channels";
    }
    return "?";
}

std::size_t Graph::check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw ProtocolError("graph: invalid node id " + std::to_string(id));
    return static_cast<std::size_t>(id);
}

void Graph::check_finite(const Tensor& t, OpKind kind) const {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by op ") +
                               op_name(kind));
}

NodeId Graph::push(Node n) {
    check_finite(n.value, n.kind);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Tensor t) {
    check_finite(t, OpKind::Input);
    Node n;
    n.kind = OpKind::Input;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::matmul(NodeId x, NodeId w) {
    const Tensor& a = nodes_[check(x)].value;
    const Tensor& b = nodes_[check(w)].value;
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims differ, " + dims(a) + " @ " + dims(b));
    Node n;
    n.kind = OpKind::Matmul;
    n.inputs = {x, w};
    n.value = Tensor::zeros(a.rows(), b.cols());
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a.data[i * k + t] * b.data[t * p + j];
            n.value.data[i * p + j] = acc;
        }
    return push(std::move(n));
}

NodeId Graph::affine(NodeId x, NodeId w, NodeId b) {
    const Tensor& xa = nodes_[check(x)].value;
    const Tensor& wa = nodes_[check(w)].value;
    const Tensor& ba = nodes_[check(b)].value;
    if (xa.cols() != wa.rows())
        throw ShapeError("affine: inner dims differ, " + dims(xa) + " @ " + dims(wa));
    if (ba.size() != wa.cols())
        throw ShapeError("affine: bias size " + dims(ba) + " vs output cols " +
                         std::to_string(wa.cols()));
    Node n;
    n.kind = OpKind::Affine;
    n.inputs = {x, w, b};
    n.value = Tensor::zeros(xa.rows(), wa.cols());
    const std::size_t m = xa.rows(), k = xa.cols(), p = wa.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = ba.data[j];
            for (std::size_t t = 0; t < k; ++t) acc += xa.data[i * k + t] * wa.data[t * p + j];
            n.value.data[i * p + j] = acc;
        }
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (x.shape != y.shape)
        throw ShapeError("add: shape mismatch " + dims(x) + " vs " + dims(y));
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    n.value = x;
    for (std::size_t i = 0; i < y.size(); ++i) n.value.data[i] += y.data[i];
    return push(std::move(n));
}

NodeId Graph::add_bias(NodeId x, NodeId b) {
    const Tensor& xa = nodes_[check(x)].value;
    const Tensor& ba = nodes_[check(b)].value;
    if (ba.size() != xa.cols())
        throw ShapeError("add_bias: bias " + dims(ba) + " vs cols " +
                         std::to_string(xa.cols()));
    Node n;
    n.kind = OpKind::AddBias;
    n.inputs = {x, b};
    n.value = xa;
    const std::size_t c = xa.cols();
    for (std::size_t i = 0; i < xa.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) n.value.data[i * c + j] += ba.data[j];
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (x.shape != y.shape)
        throw ShapeError("mul: shape mismatch " + dims(x) + " vs " + dims(y));
    Node n;
    n.kind = OpKind::Mul;
    n.inputs = {a, b};
    n.value = x;
    for (std::size_t i = 0; i < y.size(); ++i) n.value.data[i] *= y.data[i];
    return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double c) {
    Node n;
    n.kind = OpKind::Scale;
    n.inputs = {x};
    n.scalar = c;
    n.value = nodes_[check(x)].value;
    for (double& v : n.value.data) v *= c;
    return push(std::move(n));
}

NodeId Graph::silu(NodeId x) {
    Node n;
    n.kind = OpKind::Silu;
    n.inputs = {x};
    n.value = nodes_[check(x)].value;
    for (double& v : n.value.data) v = v * sigmoid(v);
    return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId x) {
    const Tensor& xa = nodes_[check(x)].value;
    Node n;
    n.kind = OpKind::SoftmaxRows;
    n.inputs = {x};
    n.value = xa;
    const std::size_t c = xa.cols();
    for (std::size_t i = 0; i < xa.rows(); ++i) {
        double* row = &n.value.data[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
    }
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const Tensor& xa = nodes_[check(x)].value;
    const Tensor& g = nodes_[check(gain)].value;
    const Tensor& b = nodes_[check(bias)].value;
    if (g.size() != xa.cols() || b.size() != xa.cols())
        throw ShapeError("layer_norm: gain/bias size vs cols " +
                         std::to_string(xa.cols()));
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {x, gain, bias};
    n.value = xa;
    const std::size_t c = xa.cols();
    for (std::size_t i = 0; i < xa.rows(); ++i) {
        const double* xin = &xa.data[i * c];
        double* row = &n.value.data[i * c];
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xin[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xin[j] - mean) * (xin[j] - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t j = 0; j < c; ++j)
            row[j] = g.data[j] * ((xin[j] - mean) * inv) + b.data[j];
    }
    return push(std::move(n));
}

NodeId Graph::embedding(NodeId table, std::vector<int> ids) {
    const Tensor& t = nodes_[check(table)].value;
    Node n;
    n.kind = OpKind::Embedding;
    n.inputs = {table};
    n.ids = std::move(ids);
    n.value = Tensor::zeros(n.ids.size(), t.cols());
    const std::size_t c = t.cols();
    for (std::size_t i = 0; i < n.ids.size(); ++i) {
        const int id = n.ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= t.rows())
            throw ShapeError("embedding: id " + std::to_string(id) +
                             " out of table rows " + std::to_string(t.rows()));
        for (std::size_t j = 0; j < c; ++j)
            n.value.data[i * c + j] = t.data[static_cast<std::size_t>(id) * c + j];
    }
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, std::vector<int> targets,
                            std::vector<double> weights) {
    const Tensor& x = nodes_[check(logits)].value;
    if (targets.size() != x.rows() || weights.size() != x.rows())
        throw ShapeError("cross_entropy: targets/weights length " +
                         std::to_string(targets.size()) + " vs rows " +
                         std::to_string(x.rows()));
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.inputs = {logits};
    n.ids = std::move(targets);
    n.weights = std::move(weights);
    const std::size_t c = x.cols();
    double wsum = 0.0;
    for (double w : n.weights) wsum += w;
    if (wsum <= 0.0) throw ShapeError("cross_entropy: all-zero weights");
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (n.weights[i] == 0.0) continue;
        const int y = n.ids[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw ShapeError("cross_entropy: target " + std::to_string(y) +
                             " out of vocab " + std::to_string(c));
        const double* row = &x.data[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        const double logp = row[static_cast<std::size_t>(y)] - mx - std::log(sum);
        loss -= n.weights[i] * logp;
    }
    n.value = Tensor::zeros(1);
    n.value.data[0] = loss / wsum;
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId x) {
    const Tensor& xa = nodes_[check(x)].value;
    Node n;
    n.kind = OpKind::Transpose;
    n.inputs = {x};
    n.value = Tensor::zeros(xa.cols(), xa.rows());
    for (std::size_t i = 0; i < xa.rows(); ++i)
        for (std::size_t j = 0; j < xa.cols(); ++j)
            n.value.data[j * xa.rows() + i] = xa.data[i * xa.cols() + j];
    return push(std::move(n));
}

NodeId Graph::concat_rows(NodeId a, NodeId b) {
    const Tensor& x = nodes_[check(a)].value;
    const Tensor& y = nodes_[check(b)].value;
    if (x.cols() != y.cols())
        throw ShapeError("concat_rows: col mismatch " + dims(x) + " vs " + dims(y));
    Node n;
    n.kind = OpKind::ConcatRows;
    n.inputs = {a, b};
    n.value = Tensor::zeros(x.rows() + y.rows(), x.cols());
    std::copy(x.data.begin(), x.data.end(), n.value.data.begin());
    std::copy(y.data.begin(), y.data.end(), n.value.data.begin() + static_cast<long>(x.size()));
    return push(std::move(n));
}

NodeId Graph::mean_rows(NodeId x) {
    const Tensor& xa = nodes_[check(x)].value;
    if (xa.rows() == 0) throw ShapeError("mean_rows: empty input");
    Node n;
    n.kind = OpKind::MeanRows;
    n.inputs = {x};
    n.value = Tensor::zeros(1, xa.cols());
    const std::size_t c = xa.cols();
    for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < xa.rows(); ++i) acc += xa.data[i * c + j];
        n.value.data[j] = acc / static_cast<double>(xa.rows());
    }
    return push(std::move(n));
}

NodeId Graph::normalize_rows(NodeId x) {
    const Tensor& xa = nodes_[check(x)].value;
    Node n;
    n.kind = OpKind::NormalizeRows;
    n.inputs = {x};
    n.value = xa;
    const std::size_t c = xa.cols();
    for (std::size_t i = 0; i < xa.rows(); ++i) {
        double* row = &n.value.data[i * c];
        double sq = 1e-24;
        for (std::size_t j = 0; j < c; ++j) sq += row[j] * row[j];
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < c; ++j) row[j] *= inv;
    }
    return push(std::move(n));
}

NodeId Graph::zero_channels(NodeId x, std::vector<std::size_t> channels) {
    const Tensor& xa = nodes_[check(x)].value;
    Node n;
    n.kind = OpKind::ZeroChannels;
    n.inputs = {x};
    n.channels = std::move(channels);
    n.value = xa;
    const std::size_t c = xa.cols();
    for (std::size_t ch : n.channels) {
        if (ch >= c)
            throw ShapeError("zero_channels: channel " + std::to_string(ch) +
                             " out of width " + std::to_string(c));
        for (std::size_t i = 0; i < xa.rows(); ++i) n.value.data[i * c + ch] = 0.0;
    }
    return push(std::move(n));
}

const Tensor& Graph::grad(NodeId id) const {
    if (!backward_done_) throw ProtocolError("grad queried before backward");
    return grads_[check(id)];
}

void Graph::backward(NodeId loss) {
    const std::size_t li = check(loss);
    if (nodes_[li].value.size() != 1)
        throw ProtocolError("backward: loss node is not scalar");
    grads_.clear();
    grads_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        grads_[i].shape = nodes_[i].value.shape;
        grads_[i].data.assign(nodes_[i].value.size(), 0.0);
    }
    grads_[li].data[0] = 1.0;

    for (std::size_t idx = li + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        const Tensor& dy = grads_[idx];
        switch (n.kind) {
            case OpKind::Input:
                break;
            case OpKind::Matmul:
            case OpKind::Affine: {
                const Tensor& x = in(n, 0);
                const Tensor& w = in(n, 1);
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& dw = grads_[static_cast<std::size_t>(n.inputs[1])];
                const std::size_t m = x.rows(), k = x.cols(), p = w.cols();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < p; ++j)
                            acc += dy.data[i * p + j] * w.data[t * p + j];
                        dx.data[i * k + t] += acc;
                    }
                for (std::size_t t = 0; t < k; ++t)
                    for (std::size_t j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            acc += x.data[i * k + t] * dy.data[i * p + j];
                        dw.data[t * p + j] += acc;
                    }
                if (n.kind == OpKind::Affine) {
                    Tensor& db = grads_[static_cast<std::size_t>(n.inputs[2])];
                    for (std::size_t j = 0; j < p; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < m; ++i) acc += dy.data[i * p + j];
                        db.data[j] += acc;
                    }
                }
                break;
            }
            case OpKind::Add: {
                Tensor& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da.data[i] += dy.data[i];
                    db.data[i] += dy.data[i];
                }
                break;
            }
            case OpKind::AddBias: {
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                const std::size_t c = n.value.cols();
                for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
                for (std::size_t j = 0; j < c; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n.value.rows(); ++i)
                        acc += dy.data[i * c + j];
                    db.data[j] += acc;
                }
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = in(n, 0);
                const Tensor& b = in(n, 1);
                Tensor& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    da.data[i] += dy.data[i] * b.data[i];
                    db.data[i] += dy.data[i] * a.data[i];
                }
                break;
            }
            case OpKind::Scale: {
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                for (std::size_t i = 0; i < dy.size(); ++i)
                    dx.data[i] += dy.data[i] * n.scalar;
                break;
            }
            case OpKind::Silu: {
                const Tensor& x = in(n, 0);
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    const double s = sigmoid(x.data[i]);
                    dx.data[i] += dy.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
                }
                break;
            }
            case OpKind::SoftmaxRows: {
                const Tensor& y = n.value;
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = y.cols();
                for (std::size_t i = 0; i < y.rows(); ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j)
                        dot += dy.data[i * c + j] * y.data[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        dx.data[i * c + j] +=
                            y.data[i * c + j] * (dy.data[i * c + j] - dot);
                }
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& x = in(n, 0);
                const Tensor& g = in(n, 1);
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& dg = grads_[static_cast<std::size_t>(n.inputs[1])];
                Tensor& db = grads_[static_cast<std::size_t>(n.inputs[2])];
                const std::size_t c = x.cols();
                const double cn = static_cast<double>(c);
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    const double* xr = &x.data[i * c];
                    const double* dyr = &dy.data[i * c];
                    double mean = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mean += xr[j];
                    mean /= cn;
                    double var = 0.0;
                    for (std::size_t j = 0; j < c; ++j)
                        var += (xr[j] - mean) * (xr[j] - mean);
                    var /= cn;
                    const double inv = 1.0 / std::sqrt(var + kLnEps);
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double xh = (xr[j] - mean) * inv;
                        const double dxh = dyr[j] * g.data[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dg.data[j] += dyr[j] * xh;
                        db.data[j] += dyr[j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const double xh = (xr[j] - mean) * inv;
                        const double dxh = dyr[j] * g.data[j];
                        dx.data[i * c + j] +=
                            inv * (dxh - sum_dxh / cn - xh * sum_dxh_xh / cn);
                    }
                }
                break;
            }
            case OpKind::Embedding: {
                Tensor& dt = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = n.value.cols();
                for (std::size_t i = 0; i < n.ids.size(); ++i) {
                    const auto row = static_cast<std::size_t>(n.ids[i]);
                    for (std::size_t j = 0; j < c; ++j)
                        dt.data[row * c + j] += dy.data[i * c + j];
                }
                break;
            }
            case OpKind::CrossEntropy: {
                const Tensor& x = in(n, 0);
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = x.cols();
                double wsum = 0.0;
                for (double w : n.weights) wsum += w;
                const double scale = dy.data[0] / wsum;
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    if (n.weights[i] == 0.0) continue;
                    const double* row = &x.data[i * c];
                    double mx = row[0];
                    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                    double sum = 0.0;
                    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double p = std::exp(row[j] - mx) / sum;
                        const double onehot =
                            (static_cast<std::size_t>(n.ids[i]) == j) ? 1.0 : 0.0;
                        dx.data[i * c + j] += scale * n.weights[i] * (p - onehot);
                    }
                }
                break;
            }
            case OpKind::Transpose: {
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t r = n.value.rows(), c = n.value.cols();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        dx.data[j * r + i] += dy.data[i * c + j];
                break;
            }
            case OpKind::ConcatRows: {
                Tensor& da = grads_[static_cast<std::size_t>(n.inputs[0])];
                Tensor& db = grads_[static_cast<std::size_t>(n.inputs[1])];
                for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += dy.data[i];
                for (std::size_t i = 0; i < db.size(); ++i)
                    db.data[i] += dy.data[da.size() + i];
                break;
            }
            case OpKind::MeanRows: {
                const Tensor& x = in(n, 0);
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = x.cols();
                const double inv = 1.0 / static_cast<double>(x.rows());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        dx.data[i * c + j] += dy.data[j] * inv;
                break;
            }
            case OpKind::NormalizeRows: {
                const Tensor& x = in(n, 0);
                const Tensor& y = n.value;
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = x.cols();
                for (std::size_t i = 0; i < x.rows(); ++i) {
                    double sq = 1e-24;
                    for (std::size_t j = 0; j < c; ++j)
                        sq += x.data[i * c + j] * x.data[i * c + j];
                    const double inv = 1.0 / std::sqrt(sq);
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j)
                        dot += dy.data[i * c + j] * y.data[i * c + j];
                    for (std::size_t j = 0; j < c; ++j)
                        dx.data[i * c + j] +=
                            (dy.data[i * c + j] - y.data[i * c + j] * dot) * inv;
                }
                break;
            }
            case OpKind::ZeroChannels: {
                Tensor& dx = grads_[static_cast<std::size_t>(n.inputs[0])];
                const std::size_t c = n.value.cols();
                std::vector<bool> dead(c, false);
                for (std::size_t ch : n.channels) dead[ch] = true;
                for (std::size_t i = 0; i < n.value.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        if (!dead[j]) dx.data[i * c + j] += dy.data[i * c + j];
                break;
            }
        }
    }
    backward_done_ = true;
}

} // namespace canlab
