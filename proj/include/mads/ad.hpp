#pragma once

#include <functional>
#include <vector>

#include "mads/common.hpp"

namespace mads::ad {

class Tape;

// Handle into a tape. Cheap to copy; owns nothing.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;
    bool valid() const { return tape != nullptr && idx >= 0; }
};

// Reverse-mode tape over dense double matrices. Values are computed eagerly;
// backward() replays the recorded nodes in reverse. Gradients accumulate only
// into nodes transitively built from inputs created with needs_grad = true.
class Tape {
public:
    Var input(Mat value, bool needs_grad = false);

    const Mat& val(Var v) const { return node(v).value; }
    const Mat& grad(Var v) const;
    bool needs_grad(Var v) const { return node(v).requires_grad; }

    // Arithmetic
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var cmul(Var a, Var b);
    Var matmul(Var a, Var b);
    Var scale(Var a, double s);
    Var rsub_scalar(double s, Var a);  // s - a, elementwise
    Var add_row_broadcast(Var a, Var row);
    Var cmul_row_broadcast(Var a, Var row);

    // Nonlinearities
    Var relu(Var a);
    Var gelu(Var a);
    Var log(Var a);
    Var clamp(Var a, double lo, double hi);
    Var softmax_rows(Var a);
    Var log_softmax_row(Var a);  // a must be 1 x C
    Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);

    // Shape
    Var transpose(Var a);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);
    Var slice_rows(Var a, int start, int count);
    Var slice_cols(Var a, int start, int count);

    // Reductions
    Var mean_rows(Var a);     // 1 x C
    Var sum_all(Var a);       // 1 x 1
    Var colwise_max(Var a);   // 1 x C; gradient routes to the first argmax row
    Var pick(Var a, int r, int c);  // 1 x 1

    // Backward pass. backward(v) seeds d(v)=1 (v must be 1x1); seed() lets the
    // caller inject external gradients (used to chain tapes) before backward().
    void seed(Var v, const Mat& g);
    void backward(Var scalar_out);
    void backward();

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;

    Node& node(Var v) { return nodes_[static_cast<size_t>(v.idx)]; }
    const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.idx)]; }
    Var push(Mat value, bool needs, std::function<void(Tape&)> back);
    Mat& grad_buf(int idx);
    void check(Var v) const;
};

}  // namespace mads::ad
