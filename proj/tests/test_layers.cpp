#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "octcvd/layers.hpp"

using namespace octcvd;

namespace {

Tensor make4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, Rng& rng) {
    Tensor t({n, c, h, w});
    for (double& v : t.data) v = rng.normal();
    return t;
}

double dot(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input") {
    Conv2d conv(LayerSpec::conv2d(1, 1, 3, 1, 1));
    conv.weight.value.fill(0.0);
    conv.weight.value.data[4] = 1.0;  // center tap
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = conv.forward(x, false);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]));
}

TEST_CASE("conv2d ones kernel on ones input, stride 2 pad 1") {
    Conv2d conv(LayerSpec::conv2d(1, 1, 3, 2, 1));
    conv.weight.value.fill(1.0);
    Tensor x = Tensor::full({1, 1, 4, 4}, 1.0);
    Tensor y = conv.forward(x, false);
    REQUIRE(y.shape == std::vector<std::int64_t>({1, 1, 2, 2}));
    // hand convolution over the four windows
    CHECK(y.data[0] == doctest::Approx(4.0));
    CHECK(y.data[1] == doctest::Approx(6.0));
    CHECK(y.data[2] == doctest::Approx(6.0));
    CHECK(y.data[3] == doctest::Approx(9.0));
}

TEST_CASE("conv2d rejects channel mismatch with a named dimension") {
    Conv2d conv(LayerSpec::conv2d(1, 2, 3, 1, 1));
    Tensor x({1, 3, 4, 4});
    CHECK_THROWS_WITH_AS(conv.forward(x, false),
                         doctest::Contains("input channels (3)"), std::invalid_argument);
}

TEST_CASE("conv against conv_transpose satisfies the adjoint identity") {
    Rng rng(77);
    for (int trial = 0; trial < 8; ++trial) {
        const std::int64_t ci = 1 + trial % 3, co = 1 + (trial / 2) % 3;
        Conv2d conv(LayerSpec::conv2d(ci, co, 3, 2, 1), rng);
        Tensor u = make4(2, ci, 4, 4, rng);
        Tensor y = conv.forward(u, false);
        const std::int64_t ho = y.dim(2), wo = y.dim(3);
        Tensor v = make4(2, co, ho, wo, rng);

        const std::int64_t op = 4 - ((ho - 1) * 2 - 2 + 3);
        ConvTranspose2d deconv(LayerSpec::conv_transpose2d(co, ci, 3, 2, 1, op));
        deconv.weight.value = conv.weight.value;  // shared weights
        conv.bias.value.fill(0.0);
        Tensor y0 = conv.forward(u, false);
        Tensor ut = deconv.forward(v, false);

        const double lhs = dot(y0, v);
        const double rhs = dot(u, ut);
        const double denom = std::max({std::fabs(lhs), std::fabs(rhs), 1e-8});
        CHECK(std::fabs(lhs - rhs) / denom <= 1e-10);
    }
}

TEST_CASE("conv_transpose2d identity kernel stride 2 places inputs at even grid positions") {
    ConvTranspose2d deconv(LayerSpec::conv_transpose2d(1, 1, 3, 2, 1, 1));
    deconv.weight.value.fill(0.0);
    deconv.weight.value.data[4] = 1.0;
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = deconv.forward(x, false);
    REQUIRE(y.shape == std::vector<std::int64_t>({1, 1, 4, 4}));
    for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j) {
            const double expect = (i % 2 == 0 && j % 2 == 0) ? x.at4(0, 0, i / 2, j / 2) : 0.0;
            CHECK(y.at4(0, 0, i, j) == doctest::Approx(expect));
        }
}

TEST_CASE("conv_transpose2d identity kernel stride 1 pad 1 reproduces input") {
    ConvTranspose2d deconv(LayerSpec::conv_transpose2d(1, 1, 3, 1, 1, 0));
    deconv.weight.value.fill(0.0);
    deconv.weight.value.data[4] = 1.0;
    Rng rng(3);
    Tensor x = make4(1, 1, 5, 5, rng);
    Tensor y = deconv.forward(x, false);
    REQUIRE(y.shape == x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]));
}

TEST_CASE("batchnorm2d constant channel in train mode returns the affine shift") {
    BatchNorm2d bn(LayerSpec::batchnorm2d(1));
    bn.beta.value.fill(0.7);
    Tensor x = Tensor::full({2, 1, 2, 2}, 5.0);
    Tensor y = bn.forward(x, true);
    for (double v : y.data) CHECK(v == doctest::Approx(0.7));
}

TEST_CASE("batchnorm2d normalizes per channel in train mode") {
    BatchNorm2d bn(LayerSpec::batchnorm2d(3));
    Rng rng(11);
    Tensor x = make4(4, 3, 5, 5, rng);
    for (double& v : x.data) v = 2.0 * v + 1.5;
    Tensor y = bn.forward(x, true);
    const std::int64_t plane = 5 * 5;
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < plane; ++i) mean += y.at4(n, c, i / 5, i % 5);
        mean /= 4.0 * plane;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < plane; ++i) {
                const double d = y.at4(n, c, i / 5, i % 5) - mean;
                var += d * d;
            }
        var /= 4.0 * plane;
        CHECK(std::fabs(mean) <= 1e-6);
        CHECK(std::fabs(var - 1.0) <= 1e-5);
    }
}

TEST_CASE("batchnorm2d eval mode applies frozen running statistics") {
    BatchNorm2d bn(LayerSpec::batchnorm2d(2));
    bn.running_mean.data = {0.5, -1.0};
    bn.running_var.data = {4.0, 0.25};
    bn.gamma.value.data = {2.0, 3.0};
    bn.beta.value.data = {1.0, -2.0};
    Rng rng(5);
    Tensor x = make4(1, 2, 3, 3, rng);
    Tensor y = bn.forward(x, false);
    for (std::int64_t c = 0; c < 2; ++c) {
        const double m = bn.running_mean.data[c], v = bn.running_var.data[c];
        const double g = bn.gamma.value.data[c], b = bn.beta.value.data[c];
        for (std::int64_t i = 0; i < 9; ++i) {
            const double expect = (x.at4(0, c, i / 3, i % 3) - m) / std::sqrt(v + 1e-5) * g + b;
            CHECK(y.at4(0, c, i / 3, i % 3) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("batchnorm2d rejects a train-mode batch of one") {
    BatchNorm2d bn(LayerSpec::batchnorm2d(1));
    Tensor x({1, 1, 4, 4});
    CHECK_THROWS_AS(bn.forward(x, true), std::runtime_error);
}

TEST_CASE("activations follow their piecewise definitions") {
    Activation relu(LayerSpec::relu());
    Tensor x({1, 4}, {-1.0, 2.0, 0.0, -3.0});
    x.shape = {1, 1, 1, 4};
    Tensor y = relu.forward(x, false);
    CHECK(y.data[0] == 0.0);
    CHECK(y.data[1] == 2.0);

    Activation leaky(LayerSpec::leaky_relu(0.01));
    Tensor z = leaky.forward(x, false);
    CHECK(z.data[0] == doctest::Approx(-0.01));
    CHECK(z.data[3] == doctest::Approx(-0.03));

    Tensor lx({1, 1, 1, 1}, {-2.0});
    Tensor ly = leaky.forward(lx, false);
    CHECK(ly.data[0] == doctest::Approx(-0.02));
    Tensor g({1, 1, 1, 1}, {1.0});
    Tensor gi = leaky.backward(g);
    CHECK(gi.data[0] == doctest::Approx(0.01));  // slope passes through x = -1 region
}

TEST_CASE("linear layer matches hand products") {
    Linear ident(LayerSpec::linear(3, 3));
    ident.weight.value.data = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = ident.forward(x, false);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(x.data[i]));

    Linear ones(LayerSpec::linear(2, 3));
    ones.weight.value.fill(1.0);
    Tensor x2({1, 2}, {1.0, 2.0});
    Tensor y2 = ones.forward(x2, false);
    for (int i = 0; i < 3; ++i) CHECK(y2.data[i] == doctest::Approx(3.0));

    Tensor bad({1, 4});
    CHECK_THROWS_AS(ones.forward(bad, false), std::invalid_argument);
}

TEST_CASE("mse loss basics") {
    Tensor a({2}, {0.0, 0.0});
    Tensor b({2}, {1.0, 1.0});
    CHECK(mse_loss(a, a) == 0.0);
    CHECK(mse_loss(a, b) == doctest::Approx(1.0));
    Tensor c({3});
    CHECK_THROWS_AS(mse_loss(a, c), std::invalid_argument);
}

TEST_CASE("mse gradient matches finite differences") {
    Rng rng(19);
    Tensor x({2, 5});
    Tensor xhat({2, 5});
    for (double& v : x.data) v = rng.normal();
    for (double& v : xhat.data) v = rng.normal();
    Tensor grad;
    mse_loss(x, xhat, &grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < xhat.data.size(); ++i) {
        const double keep = xhat.data[i];
        xhat.data[i] = keep + h;
        const double lp = mse_loss(x, xhat);
        xhat.data[i] = keep - h;
        const double lm = mse_loss(x, xhat);
        xhat.data[i] = keep;
        const double num = (lp - lm) / (2 * h);
        const double denom = std::max({std::fabs(num), std::fabs(grad.data[i]), 1e-8});
        CHECK(std::fabs(num - grad.data[i]) / denom <= 1e-6);
    }
}

TEST_CASE("kl loss closed-form values and nonnegativity") {
    Tensor mu0({1, 3});
    Tensor lv0({1, 3});
    CHECK(kl_loss(mu0, lv0) == 0.0);

    Tensor mu1({1}, {1.0});
    Tensor lv1({1}, {0.0});
    CHECK(kl_loss(mu1, lv1) == doctest::Approx(0.5));

    Rng rng(23);
    for (int i = 0; i < 1000; ++i) {
        Tensor mu({1, 4});
        Tensor lv({1, 4});
        for (double& v : mu.data) v = rng.normal(0, 2);
        for (double& v : lv.data) v = rng.normal(0, 1.5);
        CHECK(kl_loss(mu, lv) >= 0.0);
    }

    Tensor bad({1}, {std::nan("")});
    Tensor z({1}, {0.0});
    CHECK_THROWS_AS(kl_loss(z, bad), std::runtime_error);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Parameter p("p", Tensor({3}, {1.0, -2.0, 0.5}));
    AdamOptimizer opt;
    std::vector<Parameter*> ps{&p};
    AdamOptimizer::zero_grad(ps);
    opt.step(ps);
    CHECK(p.value.data[0] == 1.0);
    CHECK(p.value.data[1] == -2.0);
    CHECK(p.value.data[2] == 0.5);
}

TEST_CASE("adam first step on unit gradient moves by about lr (bias corrected)") {
    Parameter p("p", Tensor({1}, {3.0}));
    AdamConfig cfg;
    cfg.lr = 0.1;
    AdamOptimizer opt(cfg);
    p.grad.data[0] = 1.0;
    opt.step({&p});
    CHECK(p.value.data[0] == doctest::Approx(2.9).epsilon(1e-6));
}

TEST_CASE("adam flags non-finite gradients by parameter name") {
    Parameter p("conv.weight", Tensor({1}, {0.0}));
    p.grad.data[0] = std::numeric_limits<double>::infinity();
    AdamOptimizer opt;
    CHECK_THROWS_WITH_AS(opt.step({&p}), doctest::Contains("conv.weight"), std::runtime_error);
}

TEST_CASE("training steps are bit-deterministic for a fixed seed") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Conv2d conv(LayerSpec::conv2d(1, 2, 3, 2, 1), rng);
        Linear lin(LayerSpec::linear(2 * 2 * 2, 3), rng);
        Sequential net;
        net.add(std::make_unique<Conv2d>(conv));
        net.add(std::make_unique<Linear>(lin));
        AdamOptimizer opt;
        Tensor x = make4(2, 1, 4, 4, rng);
        for (int it = 0; it < 5; ++it) {
            auto ps = net.parameters();
            AdamOptimizer::zero_grad(ps);
            Tensor out = net.forward(x, true);
            Tensor target = Tensor::full(out.shape, 0.25);
            Tensor g;
            mse_loss(target, out, &g);
            net.backward(g);
            opt.step(ps);
        }
        std::vector<double> flat;
        for (Parameter* p : net.parameters())
            flat.insert(flat.end(), p->value.data.begin(), p->value.data.end());
        return flat;
    };
    auto a = run(123), b = run(123);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("worker count does not change results") {
    Rng rng(31);
    Tensor x = make4(3, 4, 16, 16, rng);
    Conv2d conv(LayerSpec::conv2d(4, 6, 3, 2, 1), rng);
    set_num_workers(1);
    Tensor y1 = conv.forward(x, false);
    set_num_workers(3);
    Tensor y3 = conv.forward(x, false);
    set_num_workers(1);
    REQUIRE(y1.data.size() == y3.data.size());
    for (std::size_t i = 0; i < y1.data.size(); ++i) CHECK(y1.data[i] == y3.data[i]);
}

TEST_CASE("grad_check: conv -> batchnorm -> leaky_relu -> linear under mse") {
    Rng rng(41);
    Sequential net;
    net.add(std::make_unique<Conv2d>(LayerSpec::conv2d(1, 4, 3, 2, 1), rng));
    net.add(std::make_unique<BatchNorm2d>(LayerSpec::batchnorm2d(4)));
    net.add(std::make_unique<Activation>(LayerSpec::leaky_relu(0.01)));
    net.add(std::make_unique<Linear>(LayerSpec::linear(4 * 4 * 4, 3), rng));
    Tensor x = make4(2, 1, 8, 8, rng);
    CHECK(grad_check(net, x, GradCheckLoss::mse_to_target) <= 1e-4);
}

TEST_CASE("grad_check: conv_transpose and relu under mse") {
    Rng rng(43);
    Sequential net;
    net.add(std::make_unique<ConvTranspose2d>(LayerSpec::conv_transpose2d(2, 3, 3, 2, 1, 1), rng));
    net.add(std::make_unique<Activation>(LayerSpec::relu()));
    Tensor x = make4(2, 2, 3, 3, rng);
    CHECK(grad_check(net, x, GradCheckLoss::mse_to_target) <= 1e-4);
}

TEST_CASE("grad_check: kl loss directly on (mu, logvar)") {
    Rng rng(47);
    Sequential empty;
    Tensor x({3, 8});
    for (double& v : x.data) v = rng.normal(0, 0.8);
    CHECK(grad_check(empty, x, GradCheckLoss::kl_split) <= 1e-6);
}

namespace {
// Deliberately wrong backward: scales the input gradient. grad_check must flag it.
class CorruptConv : public Conv2d {
public:
    using Conv2d::Conv2d;
    Tensor backward(const Tensor& gy) override {
        Tensor g = Conv2d::backward(gy);
        for (double& v : g.data) v *= 1.05;
        return g;
    }
};
}  // namespace

TEST_CASE("grad_check detects a corrupted backward pass") {
    Rng rng(53);
    Sequential net;
    net.add(std::make_unique<CorruptConv>(LayerSpec::conv2d(1, 2, 3, 1, 1), rng));
    Tensor x = make4(1, 1, 5, 5, rng);
    CHECK(grad_check(net, x, GradCheckLoss::mse_to_target) > 1e-2);
}
