#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mads/ad.hpp"
#include "testutil.hpp"

using namespace mads;
using testutil::FdSpec;
using testutil::random_mat;

TEST_CASE("matmul forward and backward") {
    Rng rng(1);
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2);
    auto result = testutil::fd_check(
        {{"a", &a}, {"b", &b}},
        [&](std::map<std::string, Mat>* grads) {
            ad::Tape t;
            ad::Var va = t.input(a, true), vb = t.input(b, true);
            ad::Var out = t.sum_all(t.matmul(va, vb));
            if (grads) {
                t.backward(out);
                (*grads)["a"] = t.grad(va);
                (*grads)["b"] = t.grad(vb);
            }
            return t.val(out)(0, 0);
        });
    CHECK(result.ok());
}

TEST_CASE("softmax rows sum to one and differentiate") {
    Rng rng(2);
    Mat x = random_mat(rng, 4, 5);
    Mat coeff = random_mat(rng, 4, 5);
    auto eval = [&](std::map<std::string, Mat>* grads) {
        ad::Tape t;
        ad::Var vx = t.input(x, true);
        ad::Var sm = t.softmax_rows(vx);
        ad::Var out = t.sum_all(t.cmul(sm, t.input(coeff, false)));
        if (grads) {
            t.backward(out);
            (*grads)["x"] = t.grad(vx);
        }
        return t.val(out)(0, 0);
    };
    auto result = testutil::fd_check({{"x", &x}}, eval);
    CHECK(result.ok());

    ad::Tape t;
    Mat sm = t.val(t.softmax_rows(t.input(x, false)));
    for (int r = 0; r < sm.rows(); ++r) CHECK(sm.row(r).sum() == doctest::Approx(1.0));
}

TEST_CASE("layer norm, gelu, log, clamp gradients") {
    Rng rng(3);
    Mat x = random_mat(rng, 3, 6);
    Mat gain = random_mat(rng, 1, 6, 0.5);
    Mat bias = random_mat(rng, 1, 6, 0.5);
    Mat coeff = random_mat(rng, 3, 6);
    auto eval = [&](std::map<std::string, Mat>* grads) {
        ad::Tape t;
        ad::Var vx = t.input(x, true);
        ad::Var vg = t.input(gain, true);
        ad::Var vb = t.input(bias, true);
        ad::Var y = t.layer_norm_rows(vx, vg, vb);
        y = t.gelu(y);
        ad::Var out = t.sum_all(t.cmul(y, t.input(coeff, false)));
        if (grads) {
            t.backward(out);
            (*grads)["x"] = t.grad(vx);
            (*grads)["gain"] = t.grad(vg);
            (*grads)["bias"] = t.grad(vb);
        }
        return t.val(out)(0, 0);
    };
    auto result = testutil::fd_check({{"x", &x}, {"gain", &gain}, {"bias", &bias}}, eval);
    CHECK(result.ok());
}

TEST_CASE("colwise max routes gradient to the argmax row") {
    ad::Tape t;
    Mat x(3, 2);
    x << 1.0, 5.0, 4.0, 2.0, 3.0, 3.0;
    ad::Var vx = t.input(x, true);
    ad::Var mx = t.colwise_max(vx);
    CHECK(t.val(mx)(0, 0) == 4.0);
    CHECK(t.val(mx)(0, 1) == 5.0);
    t.backward(t.sum_all(mx));
    Mat g = t.grad(vx);
    CHECK(g(1, 0) == 1.0);
    CHECK(g(0, 1) == 1.0);
    CHECK(g.sum() == 2.0);
}

TEST_CASE("slicing and concatenation round trip gradients") {
    Rng rng(4);
    Mat x = random_mat(rng, 5, 4);
    Mat coeff = random_mat(rng, 5, 4);
    auto eval = [&](std::map<std::string, Mat>* grads) {
        ad::Tape t;
        ad::Var vx = t.input(x, true);
        ad::Var top = t.slice_rows(vx, 0, 2);
        ad::Var bottom = t.slice_rows(vx, 2, 3);
        ad::Var left = t.slice_cols(vx, 0, 2);
        ad::Var right = t.slice_cols(vx, 2, 2);
        ad::Var glued = t.add(t.concat_rows({top, bottom}), t.concat_cols({left, right}));
        ad::Var out = t.sum_all(t.cmul(glued, t.input(coeff, false)));
        if (grads) {
            t.backward(out);
            (*grads)["x"] = t.grad(vx);
        }
        return t.val(out)(0, 0);
    };
    CHECK(testutil::fd_check({{"x", &x}}, eval).ok());
}

TEST_CASE("log softmax row equals log of softmax") {
    Rng rng(5);
    Mat x = random_mat(rng, 1, 7);
    ad::Tape t;
    Mat ls = t.val(t.log_softmax_row(t.input(x, false)));
    Mat sm = t.val(t.softmax_rows(t.input(x, false)));
    for (int j = 0; j < 7; ++j) CHECK(ls(0, j) == doctest::Approx(std::log(sm(0, j))));
}

TEST_CASE("seeded backward accumulates external gradients") {
    Mat x(2, 2);
    x << 1, 2, 3, 4;
    ad::Tape t;
    ad::Var vx = t.input(x, true);
    ad::Var doubled = t.scale(vx, 2.0);
    Mat seed(2, 2);
    seed << 1, 0, 0, 1;
    t.seed(doubled, seed);
    t.backward();
    CHECK(t.grad(vx)(0, 0) == 2.0);
    CHECK(t.grad(vx)(0, 1) == 0.0);
    CHECK(t.grad(vx)(1, 1) == 2.0);
}
