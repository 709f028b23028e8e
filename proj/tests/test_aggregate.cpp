#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mads/aggregate.hpp"
#include "testutil.hpp"

using namespace mads;
using namespace mads::aggregate;
using testutil::random_mat;

namespace {

// Raw view features fed straight into the aggregation stage.
std::vector<textenc::ViewFeatures> make_views(ad::Tape& tape, Rng& rng, int v, int k, int r,
                                              bool needs_grad = false,
                                              std::vector<ad::Var>* g_out = nullptr,
                                              std::vector<ad::Var>* e_out = nullptr) {
    std::vector<textenc::ViewFeatures> views;
    for (int i = 0; i < v; ++i) {
        textenc::ViewFeatures vf;
        vf.g = tape.input(random_mat(rng, 1, r), needs_grad);
        vf.e = tape.input(random_mat(rng, k, r), needs_grad);
        vf.h = tape.input(random_mat(rng, k, 3), false);
        vf.view_index = i;
        if (g_out) g_out->push_back(vf.g);
        if (e_out) e_out->push_back(vf.e);
        views.push_back(vf);
    }
    return views;
}

}  // namespace

TEST_CASE("zero weights collapse the aggregate output to zero") {
    Rng rng(3);
    auto inst = testutil::tiny_instance(rng, 1, 2, 4, 2);
    auto& layer = inst.model.agg.layers[0];
    layer.wk.setZero();
    layer.wq.setZero();
    layer.wv.setZero();
    layer.wo.setZero();
    layer.mlp_w1.setZero();
    layer.mlp_b1.setZero();
    layer.mlp_w2.setZero();
    layer.mlp_b2.setZero();
    inst.model.agg.z.setZero();

    ad::Tape tape;
    auto params = bind_params(tape, inst.model, false);
    auto views = make_views(tape, rng, 1, 2, 4);
    auto out = aggregate_attend(tape, views, params, inst.cfg);
    CHECK(tape.val(out.a_g).cwiseAbs().maxCoeff() == 0.0);
    CHECK(tape.val(out.a_l).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("aggregate output shapes follow V, K, r") {
    Rng rng(5);
    auto inst = testutil::tiny_instance(rng, 3, 4, 8, 2);
    ad::Tape tape;
    auto params = bind_params(tape, inst.model, false);
    auto views = make_views(tape, rng, 3, 4, 8);
    auto out = aggregate_attend(tape, views, params, inst.cfg);
    CHECK(tape.val(out.a_g).rows() == 1);
    CHECK(tape.val(out.a_g).cols() == 8);
    CHECK(tape.val(out.a_l).rows() == 12);
    CHECK(tape.val(out.a_l).cols() == 8);
}

TEST_CASE("aggregator gradients match finite differences") {
    Rng rng(7);
    auto inst = testutil::tiny_instance(rng, 2, 2, 4, 2);
    Mat cg = random_mat(rng, 1, 4);
    Mat cl = random_mat(rng, 4, 4);
    Mat g0 = random_mat(rng, 1, 4), g1 = random_mat(rng, 1, 4);
    Mat e0 = random_mat(rng, 2, 4), e1 = random_mat(rng, 2, 4);
    auto eval = [&](std::map<std::string, Mat>* grads) {
        ad::Tape tape;
        auto params = bind_params(tape, inst.model, grads != nullptr);
        std::vector<textenc::ViewFeatures> views(2);
        views[0].g = tape.input(g0, grads != nullptr);
        views[0].e = tape.input(e0, grads != nullptr);
        views[1].g = tape.input(g1, grads != nullptr);
        views[1].e = tape.input(e1, grads != nullptr);
        auto out = aggregate_attend(tape, views, params, inst.cfg);
        ad::Var obj = tape.add(tape.sum_all(tape.cmul(out.a_g, tape.input(cg, false))),
                               tape.sum_all(tape.cmul(out.a_l, tape.input(cl, false))));
        if (grads) {
            tape.backward(obj);
            (*grads)["e0"] = tape.grad(views[0].e);
            (*grads)["e1"] = tape.grad(views[1].e);
            for (auto& [name, var] : params.vars) {
                if (!tape.needs_grad(var)) continue;
                try {
                    (*grads)[name] = tape.grad(var);
                } catch (const ShapeError&) {
                }
            }
        }
        return tape.val(obj)(0, 0);
    };
    auto specs = testutil::param_specs(inst.model, {"agg."});
    specs.push_back({"e0", &e0});
    specs.push_back({"e1", &e1});
    auto result = testutil::fd_check(specs, eval);
    INFO("worst rel " << result.worst_rel);
    CHECK(result.ok());
}

TEST_CASE("fuse obeys the weighted-sum and residual identities") {
    Rng rng(11);
    const int v = 3, k = 2, r = 4;

    ad::Tape tape;
    std::vector<ad::Var> g_vars, e_vars;
    auto views = make_views(tape, rng, v, k, r, false, &g_vars, &e_vars);
    ad::Var a_g = tape.input(random_mat(rng, 1, r), false);
    ad::Var a_l = tape.input(random_mat(rng, v * k, r), false);

    SUBCASE("beta = 1 reproduces the mean of the view cores exactly") {
        auto sem = fuse(tape, views, a_g, a_l, 1.0);
        Mat mean = tape.val(g_vars[0]);
        for (size_t i = 1; i < g_vars.size(); ++i) mean += tape.val(g_vars[i]);
        mean *= 1.0 / v;
        CHECK(tape.val(sem.t_g) == mean);  // bit-for-bit
    }

    SUBCASE("beta = 0 reproduces the aggregated feature") {
        auto sem = fuse(tape, views, a_g, a_l, 0.0);
        CHECK(tape.val(sem.t_g) == tape.val(a_g));
    }

    SUBCASE("T_g is affine in beta at machine precision") {
        Mat mean = tape.val(g_vars[0]);
        for (size_t i = 1; i < g_vars.size(); ++i) mean += tape.val(g_vars[i]);
        mean *= 1.0 / v;
        for (double beta : {0.0, 0.25, 0.5, 1.0}) {
            auto sem = fuse(tape, views, a_g, a_l, beta);
            Mat expect = mean * beta + tape.val(a_g) * (1.0 - beta);
            CHECK(tape.val(sem.t_g) == expect);
        }
    }

    SUBCASE("the residual identity T_l = E_l + A_l holds bit-for-bit") {
        auto sem = fuse(tape, views, a_g, a_l, 0.5);
        Mat stacked(v * k, r);
        for (int i = 0; i < v; ++i)
            stacked.middleRows(i * k, k) = tape.val(e_vars[static_cast<size_t>(i)]);
        Mat expected = stacked + tape.val(a_l);
        CHECK(tape.val(sem.t_l) == expected);
    }

    SUBCASE("beta outside [0,1] is rejected") {
        CHECK_THROWS_AS(fuse(tape, views, a_g, a_l, 1.5), ConfigError);
        CHECK_THROWS_AS(fuse(tape, views, a_g, a_l, -0.1), ConfigError);
    }
}

TEST_CASE("fixed beta mixes the two terms arithmetically") {
    ad::Tape tape;
    std::vector<textenc::ViewFeatures> views(1);
    Mat g(1, 2);
    g << 2.0, 0.0;
    Mat e = Mat::Zero(1, 2);
    views[0].g = tape.input(g, false);
    views[0].e = tape.input(e, false);
    Mat ag(1, 2);
    ag << 0.0, 2.0;
    ad::Var a_g = tape.input(ag, false);
    ad::Var a_l = tape.input(Mat::Zero(1, 2), false);
    auto sem = fuse(tape, views, a_g, a_l, 0.5);
    CHECK(tape.val(sem.t_g)(0, 0) == 1.0);
    CHECK(tape.val(sem.t_g)(0, 1) == 1.0);
}

TEST_CASE("the prenorm variant changes the output and keeps gradients exact") {
    Rng rng(17);
    auto inst = testutil::tiny_instance(rng, 2, 2, 4, 2);
    Mat g0 = random_mat(rng, 1, 4), g1 = random_mat(rng, 1, 4);
    Mat e0 = random_mat(rng, 2, 4), e1 = random_mat(rng, 2, 4);
    Mat cg = random_mat(rng, 1, 4), cl = random_mat(rng, 4, 4);

    auto forward = [&](const ModelConfig& cfg, std::map<std::string, Mat>* grads,
                       const TapeBindings** out_params, ad::Tape& tape) {
        static thread_local TapeBindings params;
        params = bind_params(tape, inst.model, grads != nullptr);
        if (out_params) *out_params = &params;
        std::vector<textenc::ViewFeatures> views(2);
        views[0].g = tape.input(g0, false);
        views[0].e = tape.input(e0, false);
        views[1].g = tape.input(g1, false);
        views[1].e = tape.input(e1, false);
        auto out = aggregate_attend(tape, views, params, cfg);
        return tape.add(tape.sum_all(tape.cmul(out.a_g, tape.input(cg, false))),
                        tape.sum_all(tape.cmul(out.a_l, tape.input(cl, false))));
    };

    ModelConfig plain = inst.cfg;
    ModelConfig prenorm = inst.cfg;
    prenorm.agg_prenorm = true;
    double plain_value, prenorm_value;
    {
        ad::Tape tape;
        plain_value = tape.val(forward(plain, nullptr, nullptr, tape))(0, 0);
    }
    {
        ad::Tape tape;
        prenorm_value = tape.val(forward(prenorm, nullptr, nullptr, tape))(0, 0);
    }
    CHECK(plain_value != prenorm_value);

    auto eval = [&](std::map<std::string, Mat>* grads) {
        ad::Tape tape;
        const TapeBindings* params = nullptr;
        ad::Var obj = forward(prenorm, grads, &params, tape);
        if (grads) {
            tape.backward(obj);
            for (auto& [name, var] : params->vars) {
                if (!tape.needs_grad(var)) continue;
                try {
                    (*grads)[name] = tape.grad(var);
                } catch (const ShapeError&) {
                }
            }
        }
        return tape.val(obj)(0, 0);
    };
    CHECK(testutil::fd_check(testutil::param_specs(inst.model, {"agg."}), eval).ok());
}

TEST_CASE("permuting views permutes T_l blocks and leaves the core mean unchanged") {
    Rng rng(13);
    auto inst = testutil::tiny_instance(rng, 3, 2, 4, 2);
    const int v = 3, k = 2, r = 4;

    std::vector<Mat> g_mats, e_mats;
    for (int i = 0; i < v; ++i) {
        g_mats.push_back(random_mat(rng, 1, r));
        e_mats.push_back(random_mat(rng, k, r));
    }
    auto run = [&](const std::vector<int>& order) {
        ad::Tape tape;
        auto params = bind_params(tape, inst.model, false);
        std::vector<textenc::ViewFeatures> views(static_cast<size_t>(v));
        for (int i = 0; i < v; ++i) {
            views[static_cast<size_t>(i)].g =
                tape.input(g_mats[static_cast<size_t>(order[static_cast<size_t>(i)])], false);
            views[static_cast<size_t>(i)].e =
                tape.input(e_mats[static_cast<size_t>(order[static_cast<size_t>(i)])], false);
        }
        auto agg = aggregate_attend(tape, views, params, inst.cfg);
        auto sem = fuse(tape, views, agg.a_g, agg.a_l, 0.5);
        Mat mean = Mat::Zero(1, r);
        for (auto& vf : views) mean += tape.val(vf.g);
        mean /= v;
        return std::make_pair(tape.val(sem.t_l), mean);
    };

    auto [tl_identity, mean_identity] = run({0, 1, 2});
    auto [tl_permuted, mean_permuted] = run({2, 0, 1});
    CHECK((mean_identity - mean_permuted).cwiseAbs().maxCoeff() < 1e-12);
    for (int i = 0; i < v; ++i) {
        int src = std::vector<int>{2, 0, 1}[static_cast<size_t>(i)];
        // block i of the permuted run corresponds to block src of the identity run
        Mat a = tl_permuted.middleRows(i * k, k);
        Mat b = tl_identity.middleRows(src * k, k);
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
    }
}
