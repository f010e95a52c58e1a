#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sepnorm/objectives.hpp"
#include "test_util.hpp"

using namespace sepnorm;
using sepnorm::test::grad_check;
using sepnorm::test::random_normal;

namespace {

EncoderConfig tiny_encoder_config(const NormSchemeConfig& scheme) {
    EncoderConfig cfg;
    cfg.image_side = 4;
    cfg.patch_side = 2;
    cfg.dim = 6;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2.0;
    cfg.norm_scheme = scheme;
    cfg.seed = 31;
    return cfg;
}

ObjectiveConfig tiny_objective(double lambda, UniformityTarget target) {
    ObjectiveConfig oc;
    oc.mask_ratio = 0.5;
    oc.lambda = lambda;
    oc.uniformity_target = target;
    oc.decoder_depth = 1;
    oc.decoder_dim = 4;
    return oc;
}

}  // namespace

TEST_CASE("sample_mask sizes, partition, and frequency") {
    Rng rng(41);
    SUBCASE("ratio 0 keeps everything") {
        MaskPlan plan = sample_mask(3, 8, 0.0, rng);
        for (std::size_t b = 0; b < 3; ++b) {
            CHECK(plan.kept[b].size() == 8);
            CHECK(plan.masked[b].empty());
        }
    }
    SUBCASE("ratio 0.75 over 16 patches masks 12") {
        MaskPlan plan = sample_mask(4, 16, 0.75, rng);
        for (std::size_t b = 0; b < 4; ++b) {
            CHECK(plan.masked[b].size() == 12);
            CHECK(plan.kept[b].size() == 4);
            std::set<std::size_t> all(plan.kept[b].begin(), plan.kept[b].end());
            all.insert(plan.masked[b].begin(), plan.masked[b].end());
            CHECK(all.size() == 16);
            CHECK(*all.rbegin() == 15);
        }
    }
    SUBCASE("masking everything is rejected") {
        CHECK_THROWS_AS(sample_mask(1, 4, 1.0, rng), ContractError);
    }
    SUBCASE("per-patch mask frequency approaches the ratio") {
        std::vector<std::size_t> hits(16, 0);
        const std::size_t trials = 10000;
        for (std::size_t t = 0; t < trials; ++t) {
            MaskPlan plan = sample_mask(1, 16, 0.75, rng);
            for (std::size_t m : plan.masked[0]) ++hits[m];
        }
        for (std::size_t i = 0; i < 16; ++i) {
            const double freq = static_cast<double>(hits[i]) / trials;
            CHECK(std::abs(freq - 0.75) < 0.02);
        }
    }
}

TEST_CASE("objective config validation") {
    ObjectiveConfig oc = tiny_objective(0.1, UniformityTarget::Cls);
    CHECK_NOTHROW(oc.validate(4));
    oc.mask_ratio = 1.0;
    CHECK_THROWS_AS(oc.validate(4), ConfigError);
    oc = tiny_objective(-0.5, UniformityTarget::Cls);
    CHECK_THROWS_AS(oc.validate(4), ConfigError);

    CHECK(parse_uniformity_target("cls") == UniformityTarget::Cls);
    CHECK(parse_uniformity_target("both") == UniformityTarget::Both);
    CHECK(uniformity_target_name(UniformityTarget::Token) == "token");
    CHECK_THROWS_AS(parse_uniformity_target("patches"), ConfigError);
}

TEST_CASE("mae_loss on zero images with a zeroed decoder head is exactly zero") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::share(NormKind::LN));
    Encoder enc(ec);
    ObjectiveConfig oc = tiny_objective(0.0, UniformityTarget::None);
    Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 5);
    std::fill(dec.head_w.data->begin(), dec.head_w.data->end(), 0.0);
    std::fill(dec.head_b.data->begin(), dec.head_b.data->end(), 0.0);

    Rng rng(42);
    MaskPlan plan = sample_mask(2, ec.num_patches(), oc.mask_ratio, rng);
    Graph g;
    Tensor loss = mae_loss(g, Tensor::zeros({2, 4, 4}), enc, dec, plan, NormMode::Train);
    CHECK(loss.item() == 0.0);
}

TEST_CASE("zero predictor on unit-variance pixels scores about 1") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::share(NormKind::LN));
    ec.image_side = 8;  // 16 patches of 4 pixels: enough masked entries to average
    Encoder enc(ec);
    ObjectiveConfig oc = tiny_objective(0.0, UniformityTarget::None);
    oc.mask_ratio = 0.75;
    Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 6);
    std::fill(dec.head_w.data->begin(), dec.head_w.data->end(), 0.0);
    std::fill(dec.head_b.data->begin(), dec.head_b.data->end(), 0.0);

    Rng rng(43);
    Tensor images = random_normal(rng, {16, 8, 8});
    MaskPlan plan = sample_mask(16, ec.num_patches(), oc.mask_ratio, rng);
    Graph g;
    Tensor loss = mae_loss(g, images, enc, dec, plan, NormMode::Train);
    // predicting zero for ~N(0,1) pixels gives expected squared error 1
    CHECK(loss.item() == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("masked patch pixels never reach the predictions") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::share(NormKind::LN));
    Encoder enc(ec);
    ObjectiveConfig oc = tiny_objective(0.0, UniformityTarget::None);
    Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 7);

    Rng rng(44);
    Tensor images = random_normal(rng, {2, 4, 4});
    MaskPlan plan;
    plan.kept = {{0, 3}, {0, 3}};
    plan.masked = {{1, 2}, {1, 2}};

    Graph g1;
    EncodeResult r1 = enc.encode(g1, images, plan.kept, NormMode::Eval);
    Tensor p1 = dec.predict(g1, r1.tokens, plan);

    // scribble over the masked patches (image coords: patch 1 is top-right,
    // patch 2 is bottom-left under the 2x2 grid)
    Tensor images2 = Tensor::from(images.shape, *images.data);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t py = 0; py < 2; ++py)
            for (std::size_t px = 0; px < 2; ++px) {
                images2.at(b * 16 + py * 4 + (2 + px)) = 99.0;
                images2.at(b * 16 + (2 + py) * 4 + px) = -99.0;
            }
    Graph g2;
    EncodeResult r2 = enc.encode(g2, images2, plan.kept, NormMode::Eval);
    Tensor p2 = dec.predict(g2, r2.tokens, plan);
    CHECK(*p1.data == *p2.data);
}

TEST_CASE("mae_loss gradients match finite differences") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::sep(NormKind::BN, NormKind::LN));
    Encoder enc(ec);
    ObjectiveConfig oc = tiny_objective(0.0, UniformityTarget::None);
    Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 8);

    Rng rng(45);
    Tensor images = random_normal(rng, {2, 4, 4});
    MaskPlan plan;
    plan.kept = {{0, 2}, {1, 3}};
    plan.masked = {{1, 3}, {0, 2}};

    auto loss_fn = [&](Graph& g) { return mae_loss(g, images, enc, dec, plan, NormMode::Train); };
    std::vector<Tensor*> params{&enc.patch_proj_b, &enc.cls_embed,  &dec.mask_embed,
                                &dec.head_b,       &dec.embed_b,    &enc.blocks[0].bv};
    auto res = grad_check(loss_fn, params);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("uniformity anchors: identical rows, antipodal pair, sphere") {
    SUBCASE("two identical rows give exactly zero") {
        Graph g;
        Tensor e = Tensor::from({2, 3}, {1, 2, 3, 1, 2, 3});
        CHECK(uniformity_loss(g, e).item() == 0.0);
    }
    SUBCASE("antipodal unit vectors give exactly -8") {
        Graph g;
        Tensor e = Tensor::from({2, 4}, {1, 0, 0, 0, -1, 0, 0, 0});
        CHECK(uniformity_loss(g, e).item() == -8.0);
    }
    SUBCASE("scale of each row is irrelevant") {
        Graph g1, g2;
        Rng rng(46);
        Tensor e = random_normal(rng, {6, 5});
        Tensor scaled = Tensor::from(e.shape, *e.data);
        for (std::size_t r = 0; r < 6; ++r)
            for (std::size_t i = 0; i < 5; ++i) scaled.at(r * 5 + i) *= 0.5 + 2.0 * r;
        CHECK(uniformity_loss(g1, e).item() ==
              doctest::Approx(uniformity_loss(g2, scaled).item()).epsilon(1e-12));
    }
    SUBCASE("values stay inside [-8, 0]") {
        Rng rng(47);
        for (int t = 0; t < 20; ++t) {
            Graph g;
            const double v = uniformity_loss(g, random_normal(rng, {5, 3})).item();
            CHECK(v <= 0.0);
            CHECK(v >= -8.0);
        }
    }
    SUBCASE("uniform points on a high-dimensional sphere sit near -4") {
        Rng rng(48);
        Tensor e = random_normal(rng, {1024, 128});
        Graph g;
        const double v = uniformity_loss(g, e).item();
        CHECK(v > -4.0);
        CHECK(v < -3.8);
    }
    SUBCASE("zero rows are rejected") {
        Graph g;
        Tensor e = Tensor::from({2, 2}, {1, 0, 0, 0});
        CHECK_THROWS_AS(uniformity_loss(g, e), ContractError);
    }
}

TEST_CASE("uniformity gradient matches finite differences") {
    Rng rng(49);
    Tensor e = random_normal(rng, {5, 4});
    e.requires_grad = true;
    e.ensure_grad();
    auto loss_fn = [&](Graph& g) { return uniformity_loss(g, e); };
    auto res = grad_check(loss_fn, {&e});
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("gradient descent on the uniformity loss is monotone at the start") {
    Rng rng(50);
    Tensor e = Tensor::param({8, 3}, std::vector<double>(24));
    for (std::size_t i = 0; i < 24; ++i) e.at(i) = rng.normal() * 0.1 + (i % 3 == 0 ? 1.0 : 0.0);
    double prev = 1e9;
    bool monotone = true;
    for (int step = 0; step < 50; ++step) {
        e.zero_grad();
        Graph g;
        Tensor loss = uniformity_loss(g, e);
        const double v = loss.item();
        if (v > prev + 1e-12) monotone = false;
        prev = v;
        g.backward(loss);
        for (std::size_t i = 0; i < 24; ++i) e.at(i) -= 0.1 * (*e.grad)[i];
    }
    CHECK(monotone);
    CHECK(prev < -2.5);  // well spread after descent
}

TEST_CASE("u_mae_loss composition") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::sep(NormKind::BN, NormKind::LN));
    Encoder enc(ec);
    Rng rng(51);
    Tensor images = random_normal(rng, {4, 4, 4});
    MaskPlan plan = sample_mask(4, ec.num_patches(), 0.5, rng);

    SUBCASE("lambda 0 returns the reconstruction loss bit-exactly") {
        ObjectiveConfig oc = tiny_objective(0.0, UniformityTarget::None);
        Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 9);
        Graph g;
        UMaeResult r = u_mae_loss(g, images, enc, dec, plan, oc, NormMode::Eval);
        CHECK(r.total.item() == r.l_mae.item());
        CHECK(r.l_u.item() == 0.0);

        Graph g2;
        Tensor plain = mae_loss(g2, images, enc, dec, plan, NormMode::Eval);
        CHECK(r.l_mae.item() == plain.item());
    }

    SUBCASE("total equals l_mae + lambda * l_u for every target") {
        for (UniformityTarget tgt :
             {UniformityTarget::Cls, UniformityTarget::Token, UniformityTarget::Both}) {
            ObjectiveConfig oc = tiny_objective(0.1, tgt);
            Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 10);
            Graph g;
            UMaeResult r = u_mae_loss(g, images, enc, dec, plan, oc, NormMode::Eval);
            CHECK(r.total.item() ==
                  doctest::Approx(r.l_mae.item() + 0.1 * r.l_u.item()).epsilon(1e-12));
            CHECK(r.l_u.item() < 0.0);
        }
    }

    SUBCASE("single sequence with a uniformity target is rejected") {
        ObjectiveConfig oc = tiny_objective(0.1, UniformityTarget::Cls);
        Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 11);
        Rng r2(52);
        Tensor one = random_normal(r2, {1, 4, 4});
        MaskPlan p1 = sample_mask(1, ec.num_patches(), 0.5, r2);
        Graph g;
        CHECK_THROWS_AS(u_mae_loss(g, one, enc, dec, p1, oc, NormMode::Eval), ContractError);
    }

    SUBCASE("combined gradient matches finite differences") {
        ObjectiveConfig oc = tiny_objective(0.1, UniformityTarget::Both);
        Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 12);
        auto loss_fn = [&](Graph& g) {
            return u_mae_loss(g, images, enc, dec, plan, oc, NormMode::Train).total;
        };
        std::vector<Tensor*> params{&enc.cls_embed, &enc.patch_proj_b, &dec.head_b,
                                    &enc.final_norm.g1.beta};
        auto res = grad_check(loss_fn, params);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("BN running statistics advance once per training forward") {
    EncoderConfig ec = tiny_encoder_config(NormSchemeConfig::sep(NormKind::BN, NormKind::LN));
    Encoder enc(ec);
    ObjectiveConfig oc = tiny_objective(0.1, UniformityTarget::Cls);
    Decoder dec(ec.dim, ec.num_patches(), ec.patch_pixels(), oc, 13);
    Rng rng(53);
    Tensor images = random_normal(rng, {4, 4, 4});
    MaskPlan plan = sample_mask(4, ec.num_patches(), 0.5, rng);

    // mirror encoder: one plain mae_loss forward advances the EMA by exactly
    // the same amount as one combined u_mae_loss forward
    EncoderConfig ec2 = ec;
    Encoder enc2(ec2);
    Decoder dec2(ec2.dim, ec2.num_patches(), ec2.patch_pixels(), oc, 13);
    {
        Graph g;
        u_mae_loss(g, images, enc, dec, plan, oc, NormMode::Train);
    }
    {
        Graph g;
        mae_loss(g, images, enc2, dec2, plan, NormMode::Train);
    }
    auto bufs1 = enc.buffers();
    auto bufs2 = enc2.buffers();
    REQUIRE(bufs1.size() == bufs2.size());
    for (std::size_t i = 0; i < bufs1.size(); ++i) CHECK(*bufs1[i].second == *bufs2[i].second);
}
