#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sepnorm/norm.hpp"
#include "test_util.hpp"

using namespace sepnorm;
using sepnorm::test::random_normal;
using sepnorm::test::random_param;

namespace {

NormLayer plain_ln(std::size_t d, double epsilon = 0.0) {
    NormLayer p = NormLayer::make(NormKind::LN, d);
    p.epsilon = epsilon;
    return p;
}

}  // namespace

TEST_CASE("layer_norm hand evaluation on [1,2,3]") {
    Graph g;
    NormLayer p = plain_ln(3);
    Tensor h = Tensor::from({1, 3}, {1, 2, 3});
    Tensor y = layer_norm(g, h, p);
    const double r = std::sqrt(1.5);  // 1 / sqrt(2/3)
    CHECK(y.at(0) == doctest::Approx(-r).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(y.at(2) == doctest::Approx(r).epsilon(1e-12));
    CHECK(y.at(2) == doctest::Approx(1.224744871391589).epsilon(1e-12));
}

TEST_CASE("layer_norm constant input returns beta") {
    Graph g;
    NormLayer p = NormLayer::make(NormKind::LN, 4);  // epsilon 1e-5
    for (std::size_t i = 0; i < 4; ++i) {
        p.gamma.at(i) = 2.5;
        p.beta.at(i) = static_cast<double>(i) - 1.5;
    }
    Tensor h = Tensor::full({2, 4}, 7.0);
    Tensor y = layer_norm(g, h, p);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(r * 4 + i) == p.beta.at(i));
}

TEST_CASE("layer_norm pre-affine statistics") {
    Rng rng(1);
    Graph g;
    NormLayer p = NormLayer::make(NormKind::LN, 16);
    Tensor h = random_normal(rng, {8, 16});
    LayerNormResult res = layer_norm_full(g, h, p);
    for (std::size_t r = 0; r < 8; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < 16; ++i) mean += res.normalized.at(r * 16 + i);
        mean /= 16.0;
        for (std::size_t i = 0; i < 16; ++i) {
            const double d = res.normalized.at(r * 16 + i) - mean;
            var += d * d;
        }
        var /= 16.0;
        CHECK(std::abs(mean) < 1e-10);
        // epsilon shrinks the normalized variance to roughly v / (v + eps)
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("LN parameter gradients equal the closed-form position sums") {
    Rng rng(2);
    NormLayer p = NormLayer::make(NormKind::LN, 5);
    Tensor h = random_normal(rng, {7, 5});
    Tensor upstream = random_normal(rng, {7, 5});

    Graph g;
    LayerNormResult res = layer_norm_full(g, h, p);
    Tensor loss = sum_all(g, mul(g, res.out, upstream));
    g.backward(loss);

    auto [dgamma, dbeta] = norm_param_grads_closed_form(res.normalized, upstream);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs((*p.gamma.grad)[i] - dgamma[i]) < 1e-10);
        CHECK(std::abs((*p.beta.grad)[i] - dbeta[i]) < 1e-10);
    }
}

TEST_CASE("closed-form oracle edge cases") {
    Tensor normalized = Tensor::from({1, 3}, {0.5, -0.5, 2.0});
    Tensor zero_up = Tensor::zeros({1, 3});
    auto [dg0, db0] = norm_param_grads_closed_form(normalized, zero_up);
    CHECK(dg0 == std::vector<double>{0, 0, 0});
    CHECK(db0 == std::vector<double>{0, 0, 0});

    Tensor up = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
    auto [dg, db] = norm_param_grads_closed_form(normalized, up);
    CHECK(dg == std::vector<double>{0.5, -1.0, 6.0});  // single-position product
    CHECK(db == std::vector<double>{1.0, 2.0, 3.0});

    CHECK_THROWS_AS(norm_param_grads_closed_form(normalized, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("batch_norm hand evaluation, eval identity, EMA step") {
    NormLayer p = NormLayer::make(NormKind::BN, 1);
    p.epsilon = 0.0;
    Graph g;
    Tensor h = Tensor::from({2, 1}, {0, 2});
    Tensor y = batch_norm(g, h, p, NormMode::Train);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-12));
    // EMA with momentum 0.1 from init (0, 1) on batch stats (1, 1)
    CHECK(p.running_mean[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(p.running_var[0] == doctest::Approx(1.0).epsilon(1e-15));

    NormLayer fresh = NormLayer::make(NormKind::BN, 3);
    fresh.epsilon = 0.0;
    Graph g2;
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor e = batch_norm(g2, x, fresh, NormMode::Eval);
    CHECK(*e.data == *x.data);  // running mean 0 / var 1 is the identity
}

TEST_CASE("batch_norm train-mode batch statistics are normalized") {
    Rng rng(3);
    NormLayer p = NormLayer::make(NormKind::BN, 6);
    Graph g;
    Tensor h = random_normal(rng, {32, 6});
    // pre-affine view: gamma=1, beta=0 by init, so the output is the
    // normalized tensor itself
    Tensor y = batch_norm(g, h, p, NormMode::Train);
    for (std::size_t c = 0; c < 6; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t r = 0; r < 32; ++r) mean += y.at(r * 6 + c);
        mean /= 32.0;
        for (std::size_t r = 0; r < 32; ++r) {
            const double d = y.at(r * 6 + c) - mean;
            var += d * d;
        }
        var /= 32.0;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("batch_norm contract: train needs batch >= 2") {
    NormLayer p = NormLayer::make(NormKind::BN, 2);
    Graph g;
    Tensor h = Tensor::zeros({1, 2});
    CHECK_THROWS_AS(batch_norm(g, h, p, NormMode::Train), ContractError);
}

TEST_CASE("EMA recurrence is exact: running = s + (1-m)^k (init - s)") {
    NormLayer p = NormLayer::make(NormKind::BN, 1);
    const double m = p.momentum;
    // constant batch statistics: mean 3, biased var 4 (values 1 and 5)
    for (int k = 1; k <= 12; ++k) {
        Graph g;
        Tensor h = Tensor::from({2, 1}, {1, 5});
        batch_norm(g, h, p, NormMode::Train);
        const double expect_mean = 3.0 + std::pow(1.0 - m, k) * (0.0 - 3.0);
        const double expect_var = 4.0 + std::pow(1.0 - m, k) * (1.0 - 4.0);
        CHECK(p.running_mean[0] == doctest::Approx(expect_mean).epsilon(1e-14));
        CHECK(p.running_var[0] == doctest::Approx(expect_var).epsilon(1e-14));
    }
}

TEST_CASE("apply_norm ShareNorm(LN) equals independent per-position layer_norm") {
    Rng rng(5);
    NormScheme scheme = NormScheme::make(NormSchemeConfig::share(NormKind::LN), 4);
    for (std::size_t i = 0; i < 4; ++i) {
        scheme.g1.gamma.at(i) = rng.normal();
        scheme.g1.beta.at(i) = rng.normal();
    }
    Tensor H = random_normal(rng, {3, 5, 4});
    Graph g;
    Tensor out = apply_norm(g, H, scheme, NormMode::Train);
    // oracle: map layer_norm over every position independently
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t s = 0; s < 5; ++s) {
            Graph go;
            Tensor row = Tensor::from({1, 4}, std::vector<double>(H.data->begin() + (b * 5 + s) * 4,
                                                                  H.data->begin() + (b * 5 + s + 1) * 4));
            Tensor yo = layer_norm(go, row, scheme.g1);
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(out.at((b * 5 + s) * 4 + i) == doctest::Approx(yo.at(i)).epsilon(1e-14));
        }
}

TEST_CASE("SepNorm(LN,LN) with tied parameters collapses to ShareNorm(LN)") {
    Rng rng(6);
    NormScheme sep = NormScheme::make(NormSchemeConfig::sep(NormKind::LN, NormKind::LN), 4);
    NormScheme share = NormScheme::make(NormSchemeConfig::share(NormKind::LN), 4);
    for (std::size_t i = 0; i < 4; ++i) {
        const double gv = rng.normal(), bv = rng.normal();
        sep.g1.gamma.at(i) = sep.g2->gamma.at(i) = share.g1.gamma.at(i) = gv;
        sep.g1.beta.at(i) = sep.g2->beta.at(i) = share.g1.beta.at(i) = bv;
    }
    Tensor H = random_normal(rng, {2, 4, 4});
    Graph g1, g2;
    Tensor a = apply_norm(g1, H, sep, NormMode::Train);
    Tensor b = apply_norm(g2, H, share, NormMode::Train);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-14));
}

TEST_CASE("SepNorm(BN,LN): [CLS] and token outputs are isolated") {
    Rng rng(7);
    NormScheme scheme = NormScheme::make(NormSchemeConfig::sep(NormKind::BN, NormKind::LN), 3);
    Tensor H = random_normal(rng, {4, 5, 3});
    Graph g;
    Tensor base = apply_norm(g, H, scheme, NormMode::Train);

    // perturb a token feature: [CLS] outputs unchanged
    Tensor H2 = Tensor::from(H.shape, *H.data);
    H2.at((0 * 5 + 2) * 3 + 1) += 0.7;
    NormScheme scheme2 = NormScheme::make(NormSchemeConfig::sep(NormKind::BN, NormKind::LN), 3);
    Graph g2;
    Tensor out2 = apply_norm(g2, H2, scheme2, NormMode::Train);
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(out2.at((b * 5) * 3 + i) == base.at((b * 5) * 3 + i));

    // perturb a [CLS] feature: token outputs unchanged
    Tensor H3 = Tensor::from(H.shape, *H.data);
    H3.at((1 * 5 + 0) * 3 + 2) += 0.7;
    NormScheme scheme3 = NormScheme::make(NormSchemeConfig::sep(NormKind::BN, NormKind::LN), 3);
    Graph g3;
    Tensor out3 = apply_norm(g3, H3, scheme3, NormMode::Train);
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t s = 1; s < 5; ++s)
            for (std::size_t i = 0; i < 3; ++i)
                CHECK(out3.at((b * 5 + s) * 3 + i) == base.at((b * 5 + s) * 3 + i));
}

TEST_CASE("SepNorm(BN,BN): identical [CLS] vectors map to beta1") {
    Rng rng(8);
    NormScheme scheme = NormScheme::make(NormSchemeConfig::sep(NormKind::BN, NormKind::BN), 3);
    for (std::size_t i = 0; i < 3; ++i) scheme.g1.beta.at(i) = 0.5 + static_cast<double>(i);
    Tensor H = random_normal(rng, {4, 4, 3});
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 3; ++i) H.at((b * 4) * 3 + i) = 2.0 - static_cast<double>(i);
    Graph g;
    Tensor out = apply_norm(g, H, scheme, NormMode::Train);
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 3; ++i)
            CHECK(out.at((b * 4) * 3 + i) == doctest::Approx(scheme.g1.beta.at(i)).epsilon(1e-12));
}

TEST_CASE("apply_norm rejects sequences with no token positions") {
    NormScheme scheme = NormScheme::make(NormSchemeConfig::sep(NormKind::LN, NormKind::LN), 3);
    Graph g;
    CHECK_THROWS_AS(apply_norm(g, Tensor::zeros({2, 1, 3}), scheme, NormMode::Train),
                    ContractError);
}

TEST_CASE("SepNorm gradient isolation at the norm layer") {
    Rng rng(9);
    NormScheme scheme = NormScheme::make(NormSchemeConfig::sep(NormKind::LN, NormKind::LN), 4);
    Tensor H = random_normal(rng, {3, 5, 4});

    // loss reads token positions only: g1 gets no gradient
    Graph g;
    Tensor out = apply_norm(g, H, scheme, NormMode::Train);
    Tensor token_loss = sum_all(g, mul(g, slice(g, out, 1, 1, 4), slice(g, out, 1, 1, 4)));
    g.backward(token_loss);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK((*scheme.g1.gamma.grad)[i] == 0.0);
        CHECK((*scheme.g1.beta.grad)[i] == 0.0);
        CHECK((*scheme.g2->gamma.grad)[i] != 0.0);
    }

    // loss reads [CLS] only: g2 gets no gradient
    NormScheme scheme2 = NormScheme::make(NormSchemeConfig::sep(NormKind::LN, NormKind::LN), 4);
    Graph g2;
    Tensor out2 = apply_norm(g2, H, scheme2, NormMode::Train);
    Tensor cls_loss = sum_all(g2, mul(g2, slice(g2, out2, 1, 0, 1), slice(g2, out2, 1, 0, 1)));
    g2.backward(cls_loss);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK((*scheme2.g2->gamma.grad)[i] == 0.0);
        CHECK((*scheme2.g2->beta.grad)[i] == 0.0);
        CHECK((*scheme2.g1.gamma.grad)[i] != 0.0);
    }
}

TEST_CASE("scheme parsing and structure") {
    CHECK(NormSchemeConfig::parse("LN").name() == "LN");
    CHECK(NormSchemeConfig::parse("BN+LN").name() == "BN+LN");
    CHECK(NormSchemeConfig::parse("BN+LN").separate);
    CHECK_FALSE(NormSchemeConfig::parse("BN").separate);
    CHECK_THROWS_AS(parse_norm_kind("RMS"), ConfigError);

    NormScheme share = NormScheme::make(NormSchemeConfig::share(NormKind::BN), 8);
    CHECK_FALSE(share.g2.has_value());
    NormScheme sep = NormScheme::make(NormSchemeConfig::sep(NormKind::BN, NormKind::BN), 8);
    CHECK(sep.g2.has_value());
}
