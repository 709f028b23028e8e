#include "mads/ad.hpp"

#include <cmath>

namespace mads::ad {

namespace {

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

}  // namespace

void Tape::check(Var v) const {
    if (v.tape != this || v.idx < 0 || static_cast<size_t>(v.idx) >= nodes_.size())
        throw ShapeError("tape: variable does not belong to this tape");
}

Var Tape::push(Mat value, bool needs, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    n.back = needs ? std::move(back) : std::function<void(Tape&)>();
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Mat& Tape::grad_buf(int idx) {
    Node& n = nodes_[static_cast<size_t>(idx)];
    if (!n.grad_alloc) {
        n.grad = Mat::Zero(n.value.rows(), n.value.cols());
        n.grad_alloc = true;
    }
    return n.grad;
}

const Mat& Tape::grad(Var v) const {
    check(v);
    const Node& n = node(v);
    if (!n.grad_alloc)
        throw ShapeError("tape: gradient not computed for this variable");
    return n.grad;
}

Var Tape::input(Mat value, bool needs_grad) {
    return push(std::move(value), needs_grad, {});
}

Var Tape::add(Var a, Var b) {
    check(a); check(b);
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
        throw ShapeError("add: shape mismatch");
    int ia = a.idx, ib = b.idx;
    bool req = node(a).requires_grad || node(b).requires_grad;
    Var out = push(val(a) + val(b), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ib, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad) t.grad_buf(ia) += g;
            if (t.nodes_[ib].requires_grad) t.grad_buf(ib) += g;
        };
    }
    return out;
}

Var Tape::sub(Var a, Var b) {
    check(a); check(b);
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
        throw ShapeError("sub: shape mismatch");
    int ia = a.idx, ib = b.idx;
    bool req = node(a).requires_grad || node(b).requires_grad;
    Var out = push(val(a) - val(b), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ib, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad) t.grad_buf(ia) += g;
            if (t.nodes_[ib].requires_grad) t.grad_buf(ib) -= g;
        };
    }
    return out;
}

Var Tape::cmul(Var a, Var b) {
    check(a); check(b);
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
        throw ShapeError("cmul: shape mismatch");
    int ia = a.idx, ib = b.idx;
    bool req = node(a).requires_grad || node(b).requires_grad;
    Var out = push(val(a).cwiseProduct(val(b)), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ib, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad)
                t.grad_buf(ia) += g.cwiseProduct(t.nodes_[ib].value);
            if (t.nodes_[ib].requires_grad)
                t.grad_buf(ib) += g.cwiseProduct(t.nodes_[ia].value);
        };
    }
    return out;
}

Var Tape::matmul(Var a, Var b) {
    check(a); check(b);
    if (val(a).cols() != val(b).rows())
        throw ShapeError("matmul: inner dimensions differ");
    int ia = a.idx, ib = b.idx;
    bool req = node(a).requires_grad || node(b).requires_grad;
    Var out = push(val(a) * val(b), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ib, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad)
                t.grad_buf(ia) += g * t.nodes_[ib].value.transpose();
            if (t.nodes_[ib].requires_grad)
                t.grad_buf(ib) += t.nodes_[ia].value.transpose() * g;
        };
    }
    return out;
}

Var Tape::scale(Var a, double s) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a) * s, req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, s](Tape& t) { t.grad_buf(ia) += s * t.grad_buf(io); };
    }
    return out;
}

Var Tape::rsub_scalar(double s, Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push((s - val(a).array()).matrix(), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) { t.grad_buf(ia) -= t.grad_buf(io); };
    }
    return out;
}

Var Tape::add_row_broadcast(Var a, Var row) {
    check(a); check(row);
    if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
        throw ShapeError("add_row_broadcast: row shape mismatch");
    int ia = a.idx, ir = row.idx;
    bool req = node(a).requires_grad || node(row).requires_grad;
    Mat out_val = val(a);
    out_val.rowwise() += val(row).row(0);
    Var out = push(std::move(out_val), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ir, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad) t.grad_buf(ia) += g;
            if (t.nodes_[ir].requires_grad) t.grad_buf(ir) += g.colwise().sum();
        };
    }
    return out;
}

Var Tape::cmul_row_broadcast(Var a, Var row) {
    check(a); check(row);
    if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
        throw ShapeError("cmul_row_broadcast: row shape mismatch");
    int ia = a.idx, ir = row.idx;
    bool req = node(a).requires_grad || node(row).requires_grad;
    Mat out_val = val(a).array().rowwise() * val(row).row(0).array();
    Var out = push(std::move(out_val), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ir, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            if (t.nodes_[ia].requires_grad)
                t.grad_buf(ia) +=
                    (g.array().rowwise() * t.nodes_[ir].value.row(0).array()).matrix();
            if (t.nodes_[ir].requires_grad)
                t.grad_buf(ir) += g.cwiseProduct(t.nodes_[ia].value).colwise().sum();
        };
    }
    return out;
}

Var Tape::relu(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).cwiseMax(0.0), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            const Mat& x = t.nodes_[ia].value;
            t.grad_buf(ia) +=
                t.grad_buf(io).cwiseProduct((x.array() > 0.0).cast<double>().matrix());
        };
    }
    return out;
}

Var Tape::gelu(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).unaryExpr(&gelu_scalar), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            const Mat& x = t.nodes_[ia].value;
            t.grad_buf(ia) += t.grad_buf(io).cwiseProduct(x.unaryExpr(&gelu_grad_scalar));
        };
    }
    return out;
}

Var Tape::log(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).array().log().matrix(), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            t.grad_buf(ia) += t.grad_buf(io).cwiseQuotient(t.nodes_[ia].value);
        };
    }
    return out;
}

Var Tape::clamp(Var a, double lo, double hi) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).cwiseMax(lo).cwiseMin(hi), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, lo, hi](Tape& t) {
            const Mat& x = t.nodes_[ia].value;
            Mat inside = ((x.array() > lo) && (x.array() < hi)).cast<double>().matrix();
            t.grad_buf(ia) += t.grad_buf(io).cwiseProduct(inside);
        };
    }
    return out;
}

Var Tape::softmax_rows(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Mat y = val(a);
    for (int r = 0; r < y.rows(); ++r) {
        double mx = y.row(r).maxCoeff();
        y.row(r) = (y.row(r).array() - mx).exp();
        y.row(r) /= y.row(r).sum();
    }
    Var out = push(std::move(y), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            const Mat& yv = t.nodes_[io].value;
            const Mat& g = t.grad_buf(io);
            Mat& ga = t.grad_buf(ia);
            for (int r = 0; r < yv.rows(); ++r) {
                double dot = g.row(r).dot(yv.row(r));
                ga.row(r) += yv.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
            }
        };
    }
    return out;
}

Var Tape::log_softmax_row(Var a) {
    check(a);
    if (val(a).rows() != 1) throw ShapeError("log_softmax_row: expects a 1xC row");
    int ia = a.idx;
    bool req = node(a).requires_grad;
    const Mat& x = val(a);
    double mx = x.maxCoeff();
    double lse = mx + std::log((x.array() - mx).exp().sum());
    Var out = push((x.array() - lse).matrix(), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            const Mat& y = t.nodes_[io].value;
            const Mat& g = t.grad_buf(io);
            double total = g.sum();
            t.grad_buf(ia) += (g.array() - y.array().exp() * total).matrix();
        };
    }
    return out;
}

Var Tape::layer_norm_rows(Var a, Var gain, Var bias, double eps) {
    check(a); check(gain); check(bias);
    const int cols = static_cast<int>(val(a).cols());
    if (val(gain).rows() != 1 || val(gain).cols() != cols || val(bias).rows() != 1 ||
        val(bias).cols() != cols)
        throw ShapeError("layer_norm_rows: gain/bias shape mismatch");
    int ia = a.idx, ig = gain.idx, ib = bias.idx;
    bool req = node(a).requires_grad || node(gain).requires_grad || node(bias).requires_grad;
    const Mat& x = val(a);
    Mat norm(x.rows(), x.cols());
    Vec inv_sigma(x.rows());
    for (int r = 0; r < x.rows(); ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(r) = is;
        norm.row(r) = (x.row(r).array() - mu) * is;
    }
    Mat out_val = (norm.array().rowwise() * val(gain).row(0).array()).matrix();
    out_val.rowwise() += val(bias).row(0);
    Var out = push(std::move(out_val), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, ig, ib, io, norm, inv_sigma](Tape& t) {
            const Mat& g = t.grad_buf(io);
            const Mat& gain_v = t.nodes_[ig].value;
            if (t.nodes_[ib].requires_grad) t.grad_buf(ib) += g.colwise().sum();
            if (t.nodes_[ig].requires_grad)
                t.grad_buf(ig) += g.cwiseProduct(norm).colwise().sum();
            if (t.nodes_[ia].requires_grad) {
                Mat& ga = t.grad_buf(ia);
                const int c = static_cast<int>(g.cols());
                for (int r = 0; r < g.rows(); ++r) {
                    Eigen::RowVectorXd dyh = g.row(r).cwiseProduct(gain_v.row(0));
                    double m1 = dyh.mean();
                    double m2 = dyh.cwiseProduct(norm.row(r)).mean();
                    ga.row(r) += inv_sigma(r) *
                                 (dyh.array() - m1 - norm.row(r).array() * m2).matrix();
                    (void)c;
                }
            }
        };
    }
    return out;
}

Var Tape::transpose(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).transpose(), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            t.grad_buf(ia) += t.grad_buf(io).transpose();
        };
    }
    return out;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    int cols = -1;
    int rows = 0;
    bool req = false;
    for (Var p : parts) {
        check(p);
        if (cols < 0) cols = static_cast<int>(val(p).cols());
        if (val(p).cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += static_cast<int>(val(p).rows());
        req = req || node(p).requires_grad;
    }
    Mat out_val(rows, cols);
    int at = 0;
    std::vector<std::pair<int, int>> spans;  // (node idx, row offset)
    spans.reserve(parts.size());
    for (Var p : parts) {
        out_val.middleRows(at, val(p).rows()) = val(p);
        spans.emplace_back(p.idx, at);
        at += static_cast<int>(val(p).rows());
    }
    Var out = push(std::move(out_val), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [spans, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            for (auto [idx, offset] : spans) {
                if (!t.nodes_[idx].requires_grad) continue;
                int n = static_cast<int>(t.nodes_[idx].value.rows());
                t.grad_buf(idx) += g.middleRows(offset, n);
            }
        };
    }
    return out;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    int rows = -1;
    int cols = 0;
    bool req = false;
    for (Var p : parts) {
        check(p);
        if (rows < 0) rows = static_cast<int>(val(p).rows());
        if (val(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
        cols += static_cast<int>(val(p).cols());
        req = req || node(p).requires_grad;
    }
    Mat out_val(rows, cols);
    int at = 0;
    std::vector<std::pair<int, int>> spans;
    spans.reserve(parts.size());
    for (Var p : parts) {
        out_val.middleCols(at, val(p).cols()) = val(p);
        spans.emplace_back(p.idx, at);
        at += static_cast<int>(val(p).cols());
    }
    Var out = push(std::move(out_val), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [spans, io](Tape& t) {
            const Mat& g = t.grad_buf(io);
            for (auto [idx, offset] : spans) {
                if (!t.nodes_[idx].requires_grad) continue;
                int n = static_cast<int>(t.nodes_[idx].value.cols());
                t.grad_buf(idx) += g.middleCols(offset, n);
            }
        };
    }
    return out;
}

Var Tape::slice_rows(Var a, int start, int count) {
    check(a);
    if (start < 0 || count < 0 || start + count > val(a).rows())
        throw ShapeError("slice_rows: range out of bounds");
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).middleRows(start, count), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, start, count](Tape& t) {
            t.grad_buf(ia).middleRows(start, count) += t.grad_buf(io);
        };
    }
    return out;
}

Var Tape::slice_cols(Var a, int start, int count) {
    check(a);
    if (start < 0 || count < 0 || start + count > val(a).cols())
        throw ShapeError("slice_cols: range out of bounds");
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Var out = push(val(a).middleCols(start, count), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, start, count](Tape& t) {
            t.grad_buf(ia).middleCols(start, count) += t.grad_buf(io);
        };
    }
    return out;
}

Var Tape::mean_rows(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    const double inv = 1.0 / static_cast<double>(val(a).rows());
    Var out = push(val(a).colwise().mean(), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, inv](Tape& t) {
            const Mat& g = t.grad_buf(io);
            Mat& ga = t.grad_buf(ia);
            ga += (inv * g).replicate(ga.rows(), 1);
        };
    }
    return out;
}

Var Tape::sum_all(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Mat s(1, 1);
    s(0, 0) = val(a).sum();
    Var out = push(std::move(s), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io](Tape& t) {
            t.grad_buf(ia).array() += t.grad_buf(io)(0, 0);
        };
    }
    return out;
}

Var Tape::colwise_max(Var a) {
    check(a);
    int ia = a.idx;
    bool req = node(a).requires_grad;
    const Mat& x = val(a);
    Mat m(1, x.cols());
    std::vector<int> arg(static_cast<size_t>(x.cols()));
    for (int c = 0; c < x.cols(); ++c) {
        int best = 0;
        for (int r = 1; r < x.rows(); ++r)
            if (x(r, c) > x(best, c)) best = r;
        arg[static_cast<size_t>(c)] = best;
        m(0, c) = x(best, c);
    }
    Var out = push(std::move(m), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, arg](Tape& t) {
            const Mat& g = t.grad_buf(io);
            Mat& ga = t.grad_buf(ia);
            for (int c = 0; c < g.cols(); ++c) ga(arg[static_cast<size_t>(c)], c) += g(0, c);
        };
    }
    return out;
}

Var Tape::pick(Var a, int r, int c) {
    check(a);
    if (r < 0 || c < 0 || r >= val(a).rows() || c >= val(a).cols())
        throw ShapeError("pick: index out of bounds");
    int ia = a.idx;
    bool req = node(a).requires_grad;
    Mat s(1, 1);
    s(0, 0) = val(a)(r, c);
    Var out = push(std::move(s), req, {});
    if (req) {
        int io = out.idx;
        node(out).back = [ia, io, r, c](Tape& t) {
            t.grad_buf(ia)(r, c) += t.grad_buf(io)(0, 0);
        };
    }
    return out;
}

void Tape::seed(Var v, const Mat& g) {
    check(v);
    if (g.rows() != val(v).rows() || g.cols() != val(v).cols())
        throw ShapeError("seed: gradient shape mismatch");
    grad_buf(v.idx) += g;
}

void Tape::backward(Var scalar_out) {
    check(scalar_out);
    if (val(scalar_out).rows() != 1 || val(scalar_out).cols() != 1)
        throw ShapeError("backward: output must be scalar");
    grad_buf(scalar_out.idx)(0, 0) += 1.0;
    backward();
}

void Tape::backward() {
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && n.grad_alloc) n.back(*this);
    }
}

}  // namespace mads::ad
