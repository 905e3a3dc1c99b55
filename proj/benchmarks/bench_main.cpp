#include <benchmark/benchmark.h>

#include <random>

#include "ctrlstruct/clustering.hpp"
#include "ctrlstruct/contrastive.hpp"
#include "ctrlstruct/encoder.hpp"
#include "ctrlstruct/generation.hpp"

using namespace ctrlstruct;

namespace {

nn::Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    nn::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

std::vector<int> tokens(int len, int vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(6, vocab - 1);
    std::vector<int> out(static_cast<std::size_t>(len));
    for (auto& t : out) t = d(rng);
    return out;
}

void BM_EncodeForward(benchmark::State& state) {
    encoder::EncoderConfig cfg;
    cfg.dim = static_cast<int>(state.range(0));
    encoder::EncoderModel model(cfg, 2000);
    const auto toks = tokens(static_cast<int>(state.range(1)), 2000, 1);
    for (auto _ : state) benchmark::DoNotOptimize(encoder::encode(toks, model));
}
BENCHMARK(BM_EncodeForward)->Args({64, 16})->Args({64, 32})->Args({128, 32});

void BM_EncodeBackward(benchmark::State& state) {
    encoder::EncoderConfig cfg;
    cfg.dim = 64;
    encoder::EncoderModel model(cfg, 2000);
    const auto batch = static_cast<int>(state.range(0));
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < batch; ++i) seqs.push_back(tokens(16, 2000, static_cast<std::uint64_t>(i)));
    std::vector<encoder::EncodeOptions> opts(seqs.size(), {encoder::Mode::Train, 7});
    const nn::Matrix upstream = gaussian(batch, 64, 3);
    for (auto _ : state) benchmark::DoNotOptimize(encoder::encode_gradients(seqs, opts, model, upstream));
}
BENCHMARK(BM_EncodeBackward)->Arg(8)->Arg(32);

void BM_TotalLoss(benchmark::State& state) {
    const auto n = state.range(0);
    const nn::Matrix first = gaussian(n, 64, 1), second = gaussian(n, 64, 2), seq = gaussian(n, 64, 3);
    std::vector<bool> boundary(static_cast<std::size_t>(n - 1), false);
    contrastive::ContrastiveConfig cfg;
    for (auto _ : state) benchmark::DoNotOptimize(contrastive::total_loss(first, second, seq, boundary, cfg));
}
BENCHMARK(BM_TotalLoss)->Arg(32)->Arg(128)->Arg(256);

void BM_SphericalKMeans(benchmark::State& state) {
    const nn::Matrix x = gaussian(state.range(0), 64, 5);
    clustering::KMeansConfig cfg;
    cfg.k = static_cast<int>(state.range(1));
    cfg.restarts = 1;
    for (auto _ : state) benchmark::DoNotOptimize(clustering::spherical_kmeans(x, cfg));
}
BENCHMARK(BM_SphericalKMeans)->Args({2000, 20})->Args({5000, 60})->Unit(benchmark::kMillisecond);

void BM_DecoderStep(benchmark::State& state) {
    generation::GenerationConfig cfg;
    cfg.dim = 64;
    generation::GeneratorModel model(cfg, 2000);
    const nn::Matrix ctx = generation::encode_context(tokens(64, 2000, 2), model);
    std::vector<int> prefix{corpus::Vocab::kBos};
    const auto extra = tokens(static_cast<int>(state.range(0)), 2000, 4);
    prefix.insert(prefix.end(), extra.begin(), extra.end());
    for (auto _ : state) benchmark::DoNotOptimize(generation::decoder_step(ctx, prefix, model));
}
BENCHMARK(BM_DecoderStep)->Arg(4)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
