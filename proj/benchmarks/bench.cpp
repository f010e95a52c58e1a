// Microbenchmarks for the hot paths: dense matmul, a full encoder forward,
// and one training step at the default desk scale.

#include <benchmark/benchmark.h>

#include "sepnorm/objectives.hpp"
#include "sepnorm/train.hpp"

using namespace sepnorm;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
}

void bm_matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    Tensor a = random_tensor(rng, {n, n});
    Tensor b = random_tensor(rng, {n, n});
    for (auto _ : state) {
        Graph g;
        Tensor c = matmul(g, a, b);
        benchmark::DoNotOptimize(c.data->data());
    }
    state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * n * n * n);
}

void bm_encoder_forward(benchmark::State& state) {
    EncoderConfig cfg;  // desk defaults
    Encoder enc(cfg);
    Rng rng(2);
    Tensor batch = random_tensor(rng, {16, cfg.image_side, cfg.image_side});
    for (auto _ : state) {
        Graph g;
        EncodeResult r = enc.encode(g, batch, {}, NormMode::Eval);
        benchmark::DoNotOptimize(r.cls.data->data());
    }
}

void bm_train_step(benchmark::State& state) {
    EncoderConfig cfg;
    Encoder enc(cfg);
    ObjectiveConfig oc;
    oc.lambda = 0.1;
    oc.uniformity_target = UniformityTarget::Cls;
    Decoder dec(cfg.dim, cfg.num_patches(), cfg.patch_pixels(), oc, 3);
    Rng rng(4);
    Tensor batch = random_tensor(rng, {16, cfg.image_side, cfg.image_side});
    for (auto _ : state) {
        MaskPlan plan = sample_mask(16, cfg.num_patches(), oc.mask_ratio, rng);
        Graph g;
        UMaeResult losses = u_mae_loss(g, batch, enc, dec, plan, oc, NormMode::Train);
        g.backward(losses.total);
        benchmark::DoNotOptimize(losses.total.item());
    }
}

}  // namespace

BENCHMARK(bm_matmul)->Arg(64)->Arg(128);
BENCHMARK(bm_encoder_forward);
BENCHMARK(bm_train_step);

BENCHMARK_MAIN();
