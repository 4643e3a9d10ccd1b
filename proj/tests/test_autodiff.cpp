#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "moflow/autodiff.hpp"
#include "moflow/rng.hpp"

using namespace moflow;
using ad::Mode;
using ad::Tape;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("matmul identity and its gradient") {
    Tape t;
    Tensor eye({3, 3}, 0.0);
    for (std::size_t i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
    Rng rng(1);
    Tensor xv = random_tensor({3, 3}, rng);
    Var x = t.leaf(xv, true);
    Var y = ad::matmul(t.leaf(eye), x);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.value()[i] == doctest::Approx(xv[i]));
    t.backward(ad::sum(y));
    const Tensor& g = t.grad(x);
    for (std::size_t i = 0; i < 9; ++i) CHECK(g[i] == doctest::Approx(1.0));
}

TEST_CASE("sigmoid value and derivative at zero") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(0.0), true);
    Var y = ad::sigmoid(x);
    CHECK(y.value().item() == doctest::Approx(0.5));
    t.backward(y);
    CHECK(t.grad(x).item() == doctest::Approx(0.25));
}

TEST_CASE("one-hot-center 3x3 convolution is the identity") {
    Tape t;
    Rng rng(2);
    Tensor xv = random_tensor({1, 2, 4, 4}, rng);
    Tensor k({2, 2, 3, 3}, 0.0);
    k.at4(0, 0, 1, 1) = 1.0;
    k.at4(1, 1, 1, 1) = 1.0;
    Var y = ad::conv3x3(t.leaf(xv), t.leaf(k), t.leaf(Tensor({2}, 0.0)));
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(y.value()[i] == doctest::Approx(xv[i]));
}

TEST_CASE("finite_diff_check on sum of squares") {
    // analytic gradient of sum(x^2) at [1,2] is [2,4]
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    const double err = ad::finite_diff_check(
        [](Tape& t, Var v) { return ad::sum(ad::mul(v, v)); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("smooth primitives pass gradient checks to 1e-6") {
    Rng rng(5);
    auto check = [&](const std::function<Var(Tape&, Var)>& f, Tensor x) {
        CHECK(ad::finite_diff_check(f, x, 1e-5) < 1e-6);
    };
    check([](Tape& t, Var v) { return ad::sum(ad::sigmoid(v)); }, random_tensor({7}, rng));
    check([](Tape& t, Var v) { return ad::sum(ad::logsigmoid(v)); }, random_tensor({7}, rng));
    check([](Tape& t, Var v) { return ad::sum(ad::vexp(v)); }, random_tensor({5}, rng));
    check([](Tape& t, Var v) { return ad::sum(ad::vlog(v)); },
          random_tensor({5}, rng, 0.5, 2.0));
    check([](Tape& t, Var v) { return ad::mean(ad::mul(v, v)); }, random_tensor({6}, rng));
    check([](Tape& t, Var v) { return ad::variance(v); }, random_tensor({6}, rng));
    check([](Tape& t, Var v) {
        Tensor w({3, 2});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * (1.0 + i);
        return ad::sum(ad::matmul(v, t.leaf(w)));
    },
          random_tensor({2, 3}, rng));
    check([](Tape& t, Var v) {
        Tensor k({1, 1, 3, 3});
        for (std::size_t i = 0; i < 9; ++i) k[i] = 0.05 * (i + 1.0);
        return ad::sum(ad::conv3x3(v, t.leaf(k), t.leaf(Tensor({1}, 0.1))));
    },
          random_tensor({1, 1, 3, 3}, rng));
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(6);
    Tensor x = random_tensor({9}, rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (std::fabs(x[i]) < 1e-3) x[i] = 0.5;  // keep clear of the kink
    }
    CHECK(ad::finite_diff_check([](Tape& t, Var v) { return ad::sum(ad::relu(v)); }, x, 1e-5) <
          1e-6);
}

TEST_CASE("composition gradient equals chain rule numerically") {
    Rng rng(7);
    Tensor x = random_tensor({2, 4}, rng);
    const double err = ad::finite_diff_check(
        [](Tape& t, Var v) {
            Var a = ad::sigmoid(v);
            Var b = ad::mul(a, ad::vexp(ad::mul_scalar(v, 0.3)));
            return ad::sum(ad::vlog(ad::add_scalar(b, 2.0)));
        },
        x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("batchnorm training mode normalizes and updates running stats") {
    Tape t;
    Tensor x({2, 2, 3});  // [b,n,d]: stats per feature over (b,n)
    Rng rng(8);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-3.0, 3.0);
    ad::BatchNormState st;
    st.running_mean = Tensor({3}, 0.0);
    st.running_var = Tensor({3}, 1.0);
    Var y = ad::batchnorm(t.leaf(x), t.leaf(Tensor({3}, 1.0)), t.leaf(Tensor({3}, 0.0)), st,
                          Mode::Training);
    for (std::size_t d = 0; d < 3; ++d) {
        double m = 0.0, v = 0.0;
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t n = 0; n < 2; ++n) m += y.value().at3(b, n, d);
        }
        m /= 4.0;
        for (std::size_t b = 0; b < 2; ++b) {
            for (std::size_t n = 0; n < 2; ++n) {
                v += (y.value().at3(b, n, d) - m) * (y.value().at3(b, n, d) - m);
            }
        }
        CHECK(std::fabs(m) < 1e-10);
        CHECK(v / 4.0 == doctest::Approx(1.0).epsilon(1e-3));
        CHECK(st.running_mean[d] != 0.0);  // stats were touched
    }
}

TEST_CASE("batchnorm training-mode gradient") {
    Rng rng(9);
    Tensor x = random_tensor({2, 3, 2}, rng);
    ad::BatchNormState st;
    st.running_mean = Tensor({2}, 0.0);
    st.running_var = Tensor({2}, 1.0);
    const double err = ad::finite_diff_check(
        [&](Tape& t, Var v) {
            ad::BatchNormState local = st;  // keep the check side-effect free
            Var y = ad::batchnorm(v, t.leaf(Tensor({2}, 1.3)), t.leaf(Tensor({2}, 0.2)),
                                  local, Mode::Training);
            return ad::sum(ad::mul(y, y));
        },
        x, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("batchnorm frozen mode is deterministic and stat-free") {
    ad::BatchNormState st;
    st.running_mean = Tensor::from({2}, {1.0, -1.0});
    st.running_var = Tensor::from({2}, {4.0, 0.25});
    Tape t;
    Tensor x = Tensor::from({1, 1, 2}, {3.0, 0.0});
    Var y = ad::batchnorm(t.leaf(x), t.leaf(Tensor({2}, 1.0)), t.leaf(Tensor({2}, 0.0)), st,
                          Mode::Frozen);
    CHECK(y.value()[0] == doctest::Approx((3.0 - 1.0) / std::sqrt(4.0 + 1e-5)));
    CHECK(y.value()[1] == doctest::Approx((0.0 + 1.0) / std::sqrt(0.25 + 1e-5)));
    CHECK(st.running_mean[0] == 1.0);  // untouched
}

TEST_CASE("squeeze2/unsqueeze2 are exact inverses") {
    Rng rng(10);
    Tensor x = random_tensor({2, 4, 6, 6}, rng);
    Tensor y = ad::squeeze2(x, 3);
    CHECK(y.shape() == std::vector<std::size_t>{2, 36, 2, 2});
    Tensor back = ad::unsqueeze2(y, 3);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("non-finite diagnostics name the scope") {
    Tape t;
    t.set_scope("layerX");
    Var x = t.leaf(Tensor::from({1}, {-1.0}), true);
    Var y = ad::vlog(x);  // nan
    CHECK_FALSE(y.value().all_finite());
    CHECK(t.first_nonfinite().find("layerX") != std::string::npos);
}

TEST_CASE("param gradients retrievable by storage pointer") {
    Tensor w = Tensor::from({2}, {0.5, -0.5});
    Tape t;
    Var wv = t.leaf_param(&w);
    Var loss = ad::sum(ad::mul(wv, wv));
    t.backward(loss);
    const Tensor* g = t.param_grad(&w);
    REQUIRE(g != nullptr);
    CHECK((*g)[0] == doctest::Approx(1.0));
    CHECK((*g)[1] == doctest::Approx(-1.0));
    Tensor other({1});
    CHECK(t.param_grad(&other) == nullptr);
}
