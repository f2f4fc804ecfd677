#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "exotst/fusion.hpp"
#include "exotst/rng.hpp"
#include "helpers.hpp"

using namespace exotst;

namespace {

FusionDirection random_direction(std::size_t D, Rng& rng,
                                 bool requires_grad = true) {
    FusionDirection d;
    d.W_q = testutil::random_tensor({D, D}, rng, requires_grad);
    d.W_k = testutil::random_tensor({D, D}, rng, requires_grad);
    d.W_v = testutil::random_tensor({D, D}, rng, requires_grad);
    d.ln.gamma = Tensor::full({D}, 1.0, requires_grad);
    d.ln.beta = Tensor::zeros({D}, requires_grad);
    return d;
}

FusionLayerParams random_layer(std::size_t D, std::size_t H, Rng& rng,
                               bool requires_grad = true) {
    FusionLayerParams p;
    p.past = random_direction(D, rng, requires_grad);
    p.future = random_direction(D, rng, requires_grad);
    p.heads = H;
    return p;
}

// plain-loop oracle for one fusion direction, any head count
std::vector<double> naive_direction(const Tensor& own, const Tensor& other,
                                    const FusionDirection& dir, std::size_t H) {
    const std::size_t D = own.dim(1);
    const std::size_t Dh = D / H;
    const std::size_t nk = 1 + (other.dim(0) - 1);
    // context rows: own agg then other's patches
    std::vector<std::vector<double>> ctx;
    ctx.emplace_back();
    for (std::size_t d = 0; d < D; ++d) ctx[0].push_back(own(0, d));
    for (std::size_t r = 1; r < other.dim(0); ++r) {
        ctx.emplace_back();
        for (std::size_t d = 0; d < D; ++d) ctx.back().push_back(other(r, d));
    }
    // layer norm each row
    for (auto& row : ctx) {
        double m = 0.0;
        for (double v : row) m += v;
        m /= static_cast<double>(D);
        double var = 0.0;
        for (double v : row) var += (v - m) * (v - m);
        var /= static_cast<double>(D);
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t d = 0; d < D; ++d)
            row[d] = (row[d] - m) * inv * dir.ln.gamma(d) + dir.ln.beta(d);
    }
    std::vector<double> out(D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> q(Dh, 0.0);
        for (std::size_t a = 0; a < Dh; ++a)
            for (std::size_t d = 0; d < D; ++d)
                q[a] += own(0, d) * dir.W_q(d, h * Dh + a);
        std::vector<double> scores(nk, 0.0);
        for (std::size_t j = 0; j < nk; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < Dh; ++a) {
                double k = 0.0;
                for (std::size_t d = 0; d < D; ++d)
                    k += ctx[j][d] * dir.W_k(d, h * Dh + a);
                s += q[a] * k;
            }
            scores[j] = s / std::sqrt(static_cast<double>(Dh));
        }
        double mx = scores[0];
        for (double v : scores) mx = std::max(mx, v);
        double z = 0.0;
        for (double& v : scores) {
            v = std::exp(v - mx);
            z += v;
        }
        for (double& v : scores) v /= z;
        for (std::size_t b = 0; b < Dh; ++b) {
            double acc = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
                double val = 0.0;
                for (std::size_t d = 0; d < D; ++d)
                    val += ctx[j][d] * dir.W_v(d, h * Dh + b);
                acc += scores[j] * val;
            }
            out[h * Dh + b] = acc;
        }
    }
    for (std::size_t d = 0; d < D; ++d) out[d] += own(0, d);
    return out;  // the refreshed agg row
}

}  // namespace

TEST_CASE("zero value projections leave both streams unchanged") {
    Rng rng(3);
    const std::size_t D = 4;
    FusionLayerParams p = random_layer(D, 2, rng, false);
    for (auto& v : p.past.W_v.value()) v = 0.0;
    for (auto& v : p.future.W_v.value()) v = 0.0;
    Tensor e_p = testutil::random_tensor({5, D}, rng, false);
    Tensor e_f = testutil::random_tensor({3, D}, rng, false);
    auto [h_p, h_f] = fuse_once(e_p, e_f, p);
    CHECK(h_p.value() == e_p.value());
    CHECK(h_f.value() == e_f.value());
}

TEST_CASE("fuse_once preserves shapes for arbitrary token counts") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t D = 6;
        const std::size_t np = 2 + rng.below(8), nf = 2 + rng.below(8);
        FusionLayerParams p = random_layer(D, 3, rng, false);
        Tensor e_p = testutil::random_tensor({np, D}, rng, false);
        Tensor e_f = testutil::random_tensor({nf, D}, rng, false);
        auto [h_p, h_f] = fuse_once(e_p, e_f, p);
        CHECK(h_p.shape() == Shape{np, D});
        CHECK(h_f.shape() == Shape{nf, D});
        // patch tokens pass through untouched
        for (std::size_t r = 1; r < np; ++r)
            for (std::size_t d = 0; d < D; ++d)
                CHECK(h_p(r, d) == e_p(r, d));
        for (std::size_t r = 1; r < nf; ++r)
            for (std::size_t d = 0; d < D; ++d)
                CHECK(h_f(r, d) == e_f(r, d));
    }
}

TEST_CASE("fuse_once matches a fully hand-unrolled oracle") {
    // single head, D=2, one patch token per stream
    Rng rng(12);
    FusionLayerParams p;
    p.heads = 1;
    p.past.W_q = Tensor::from_vector({2, 2}, {0.3, -0.7, 1.1, 0.2});
    p.past.W_k = Tensor::from_vector({2, 2}, {-0.5, 0.9, 0.4, -0.1});
    p.past.W_v = Tensor::from_vector({2, 2}, {0.8, 0.6, -0.3, 1.2});
    p.past.ln.gamma = Tensor::from_vector({2}, {1.3, 0.7});
    p.past.ln.beta = Tensor::from_vector({2}, {0.1, -0.2});
    p.future.W_q = Tensor::from_vector({2, 2}, {-0.2, 0.5, 0.7, -0.9});
    p.future.W_k = Tensor::from_vector({2, 2}, {1.0, 0.3, -0.6, 0.2});
    p.future.W_v = Tensor::from_vector({2, 2}, {0.4, -0.8, 0.9, 0.5});
    p.future.ln.gamma = Tensor::from_vector({2}, {0.9, 1.1});
    p.future.ln.beta = Tensor::from_vector({2}, {-0.3, 0.4});
    Tensor e_p = Tensor::from_vector({2, 2}, {0.6, -1.2, 0.8, 0.3});
    Tensor e_f = Tensor::from_vector({2, 2}, {-0.4, 0.9, 1.5, -0.7});

    auto [h_p, h_f] = fuse_once(e_p, e_f, p);
    auto agg_p = naive_direction(e_p, e_f, p.past, 1);
    auto agg_f = naive_direction(e_f, e_p, p.future, 1);
    for (std::size_t d = 0; d < 2; ++d) {
        CHECK(h_p(0, d) == Catch::Approx(agg_p[d]).margin(1e-12));
        CHECK(h_f(0, d) == Catch::Approx(agg_f[d]).margin(1e-12));
    }

    // multi-head split against the same oracle
    Rng rng2(13);
    const std::size_t D = 4;
    FusionLayerParams p2 = random_layer(D, 2, rng2, false);
    Tensor ep2 = testutil::random_tensor({4, D}, rng2, false);
    Tensor ef2 = testutil::random_tensor({6, D}, rng2, false);
    auto [hp2, hf2] = fuse_once(ep2, ef2, p2);
    auto oracle_p = naive_direction(ep2, ef2, p2.past, 2);
    auto oracle_f = naive_direction(ef2, ep2, p2.future, 2);
    for (std::size_t d = 0; d < D; ++d) {
        CHECK(hp2(0, d) == Catch::Approx(oracle_p[d]).margin(1e-12));
        CHECK(hf2(0, d) == Catch::Approx(oracle_f[d]).margin(1e-12));
    }
}

TEST_CASE("fusion attention maps have single-row query shape") {
    Rng rng(19);
    const std::size_t D = 4, np = 5, nf = 7;
    FusionLayerParams p = random_layer(D, 2, rng, false);
    Tensor e_p = testutil::random_tensor({np, D}, rng, false);
    Tensor e_f = testutil::random_tensor({nf, D}, rng, false);
    AttentionTrace past, future;
    fuse_once(e_p, e_f, p, &past, &future);
    CHECK(past.n_q == 1);
    CHECK(past.n_k == 1 + (nf - 1));
    CHECK(future.n_q == 1);
    CHECK(future.n_k == 1 + (np - 1));
    for (const auto& m : past.head_maps) {
        REQUIRE(m.size() == past.n_k);
        double s = 0.0;
        for (double v : m) s += v;
        CHECK(s == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("fuse_stack composes layers sequentially") {
    Rng rng(23);
    const std::size_t D = 4;
    std::vector<FusionLayerParams> layers = {random_layer(D, 2, rng, false),
                                             random_layer(D, 2, rng, false)};
    Tensor e_p = testutil::random_tensor({4, D}, rng, false);
    Tensor e_f = testutil::random_tensor({3, D}, rng, false);

    // one layer == fuse_once
    auto single = fuse_stack(e_p, e_f, {layers[0]});
    auto direct = fuse_once(e_p, e_f, layers[0]);
    CHECK(single.first.value() == direct.first.value());
    CHECK(single.second.value() == direct.second.value());

    // two layers == manual composition, and differs from one layer
    auto two = fuse_stack(e_p, e_f, layers);
    auto manual = fuse_once(direct.first, direct.second, layers[1]);
    CHECK(two.first.value() == manual.first.value());
    double diff = 0.0;
    for (std::size_t i = 0; i < two.first.value().size(); ++i)
        diff = std::max(diff, std::abs(two.first.value()[i] -
                                       single.first.value()[i]));
    CHECK(diff > 1e-9);

    CHECK_THROWS_AS(fuse_stack(e_p, e_f, {}), ConfigError);

    // all-zero value paths across the stack leave every token unchanged
    std::vector<FusionLayerParams> zeroed = layers;
    for (auto& l : zeroed) {
        for (auto& v : l.past.W_v.value()) v = 0.0;
        for (auto& v : l.future.W_v.value()) v = 0.0;
    }
    auto frozen = fuse_stack(e_p, e_f, zeroed);
    CHECK(frozen.first.value() == e_p.value());
    CHECK(frozen.second.value() == e_f.value());
}

TEST_CASE("fuse_stack records per-layer traces") {
    Rng rng(29);
    const std::size_t D = 4;
    std::vector<FusionLayerParams> layers = {random_layer(D, 2, rng, false),
                                             random_layer(D, 2, rng, false),
                                             random_layer(D, 2, rng, false)};
    Tensor e_p = testutil::random_tensor({4, D}, rng, false);
    Tensor e_f = testutil::random_tensor({5, D}, rng, false);
    std::vector<FusionTracePair> traces;
    fuse_stack(e_p, e_f, layers, &traces);
    REQUIRE(traces.size() == 3);
    for (const auto& t : traces) {
        CHECK(t.past.n_q == 1);
        CHECK(t.future.n_q == 1);
        CHECK(t.past.head_maps.size() == 2);
    }
}

TEST_CASE("fusion validates inputs") {
    Rng rng(31);
    FusionLayerParams p = random_layer(4, 2, rng, false);
    Tensor ok = testutil::random_tensor({3, 4}, rng, false);
    Tensor no_agg = testutil::random_tensor({1, 4}, rng, false);
    CHECK_THROWS_AS(fuse_once(no_agg, ok, p), ContractError);
    CHECK_THROWS_AS(fuse_once(ok, no_agg, p), ContractError);
    Tensor wrong_width = testutil::random_tensor({3, 6}, rng, false);
    CHECK_THROWS_AS(fuse_once(ok, wrong_width, p), ShapeError);
    FusionLayerParams bad_heads = p;
    bad_heads.heads = 3;  // does not divide 4
    CHECK_THROWS_AS(fuse_once(ok, ok, bad_heads), ConfigError);
}

TEST_CASE("decoder memory assembly counts and layout") {
    Rng rng(37);
    const std::size_t D = 3;
    {
        // the published configuration at horizon 30: C=4, N'=32, N''=3
        std::vector<Tensor> h_p, h_f;
        for (int c = 0; c < 4; ++c) {
            h_p.push_back(testutil::random_tensor({33, D}, rng, false));
            h_f.push_back(testutil::random_tensor({4, D}, rng, false));
        }
        FusedMemory m = assemble_decoder_memory(h_p, h_f);
        CHECK(m.O.shape() == Shape{4, 37, D});
        CHECK(m.O_flat.shape() == Shape{148, D});
        // channel-major flatten: O(c,t,d) == O_flat(c*T+t, d)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t t = 0; t < 37; ++t)
                for (std::size_t d = 0; d < D; ++d)
                    CHECK(m.O(c, t, d) == m.O_flat(c * 37 + t, d));
        // past tokens first within a channel
        CHECK(m.O(2, 0, 1) == h_p[2](0, 1));
        CHECK(m.O(2, 33, 1) == h_f[2](0, 1));
    }
    {
        std::vector<Tensor> h_p = {testutil::random_tensor({3, D}, rng, false)};
        std::vector<Tensor> h_f = {testutil::random_tensor({2, D}, rng, false)};
        FusedMemory m = assemble_decoder_memory(h_p, h_f);
        CHECK(m.O_flat.dim(0) == 5);
    }
    {
        std::vector<Tensor> h_p = {testutil::random_tensor({3, D}, rng, false),
                                   testutil::random_tensor({4, D}, rng, false)};
        std::vector<Tensor> h_f = {testutil::random_tensor({2, D}, rng, false),
                                   testutil::random_tensor({2, D}, rng, false)};
        CHECK_THROWS_AS(assemble_decoder_memory(h_p, h_f), ShapeError);
        CHECK_THROWS_AS(assemble_decoder_memory({}, {}), ContractError);
    }
}

TEST_CASE("gradients reach both fusion inputs and parameters") {
    Rng rng(41);
    const std::size_t D = 4;
    std::vector<FusionLayerParams> layers = {random_layer(D, 2, rng, true),
                                             random_layer(D, 2, rng, true)};
    Tensor e_p = testutil::random_tensor({3, D}, rng, true);
    Tensor e_f = testutil::random_tensor({4, D}, rng, true);

    auto fused = fuse_stack(e_p, e_f, layers);
    FusedMemory m = assemble_decoder_memory({fused.first}, {fused.second});
    Rng wrng(600);
    Tensor loss = testutil::weighted_sum(m.O_flat, wrng);
    backward(loss);
    auto has_nonzero = [](const Tensor& t) {
        for (double g : t.grad())
            if (g != 0.0) return true;
        return false;
    };
    CHECK(has_nonzero(e_p));
    CHECK(has_nonzero(e_f));
    CHECK(has_nonzero(layers[0].past.W_v));
    CHECK(has_nonzero(layers[1].future.W_k));
    for (auto& l : layers) {
        l.past.W_q.zero_grad();
        l.past.W_k.zero_grad();
        l.past.W_v.zero_grad();
        l.past.ln.gamma.zero_grad();
        l.past.ln.beta.zero_grad();
        l.future.W_q.zero_grad();
        l.future.W_k.zero_grad();
        l.future.W_v.zero_grad();
        l.future.ln.gamma.zero_grad();
        l.future.ln.beta.zero_grad();
    }
    e_p.zero_grad();
    e_f.zero_grad();

    // full finite-difference pass over the stack
    std::vector<Tensor> params = {e_p,
                                  e_f,
                                  layers[0].past.W_q,
                                  layers[0].past.W_k,
                                  layers[0].past.W_v,
                                  layers[0].past.ln.gamma,
                                  layers[0].past.ln.beta,
                                  layers[1].future.W_q,
                                  layers[1].future.W_v,
                                  layers[1].future.ln.beta};
    auto loss_fn = [&]() {
        auto f = fuse_stack(e_p, e_f, layers);
        FusedMemory mem = assemble_decoder_memory({f.first}, {f.second});
        Rng w(601);
        return testutil::weighted_sum(mem.O_flat, w);
    };
    auto rep = testutil::fd_gradient_check(loss_fn, params);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("single-token fusion query keeps cost linear in the other stream") {
    Rng rng(47);
    const std::size_t D = 8;
    FusionLayerParams p = random_layer(D, 2, rng, false);
    Tensor e_p = testutil::random_tensor({4, D}, rng, false);
    std::vector<long long> counts;
    for (std::size_t nf : {9, 17, 33, 65}) {  // 8, 16, 32, 64 patches
        Tensor e_f = testutil::random_tensor({nf, D}, rng, false);
        reset_multiply_count();
        detail::fuse_direction(e_p, e_f, p.past, p.heads, nullptr);
        counts.push_back(static_cast<long long>(multiply_count()));
    }
    const long long d1 = counts[1] - counts[0];
    const long long d2 = counts[2] - counts[1];
    const long long d3 = counts[3] - counts[2];
    CHECK(d2 == 2 * d1);
    CHECK(d3 == 2 * d2);
    CHECK(d1 > 0);
}
