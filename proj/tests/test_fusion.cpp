#include "doctest.h"

#include <set>

#include "gradcheck.hpp"
#include "metairnet/fusion.hpp"
#include "testutil.hpp"

using namespace metairnet;
using metairnet::testing::check_gradients;

namespace {

FusionWeights<double> random_weights(Rng& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    RowMatrix<double> m(3, 3);
    for (Index i = 0; i < 9; ++i) m.data()[i] = u(rng);
    return FusionWeights<double>(m);
}

Image<double> random_image(Index h, Index w, Rng& rng) {
    Image<double> im(h, w, 3);
    im.data = rand_uniform<double>({h * w * 3}, rng, -1, 1).data;
    return im;
}

// Independent partition: block i covers [i*floor(L/3), (i+1)*floor(L/3)) and
// the last block absorbs the remainder.
Index oracle_block(Index pos, Index length) {
    const Index base = length / 3;
    return std::min<Index>(pos / base, 2);
}

}  // namespace

TEST_CASE("weights stay in [0, 1] and are deterministic") {
    Rng rng(1);
    FusionNet<float> net({{3, 8, 2}, 3}, rng);
    const auto a = metairnet::testing::noise_image(12, 12, 1), b = metairnet::testing::noise_image(12, 12, 2);
    const auto w = net.predict_weights(a, b);
    CHECK(w.grid.rows() == 3);
    CHECK(w.grid.cols() == 3);
    CHECK(w.grid.minCoeff() >= 0.f);
    CHECK(w.grid.maxCoeff() <= 1.f);
    CHECK(net.predict_weights(a, b).grid == w.grid);
    CHECK_NOTHROW(net.predict_weights(b, a));
    CHECK_THROWS_AS(net.predict_weights(a, metairnet::testing::noise_image(8, 8, 3)), ShapeError);
    CHECK(net.head().weight.value().dim(0) == 9);
}

TEST_CASE("invalid weight grids") {
    CHECK_THROWS_AS(FusionWeights<double>(RowMatrix<double>::Constant(3, 3, 1.5)), PreconditionError);
    CHECK_THROWS_AS(FusionWeights<double>(RowMatrix<double>::Constant(3, 2, 0.5)), ShapeError);
    CHECK_THROWS_AS(upsample_grid(FusionWeights<double>::constant(1.0), 2, 6), PreconditionError);
}

TEST_CASE("upsample_grid block structure") {
    SUBCASE("all ones") {
        const auto map = upsample_grid(FusionWeights<double>::constant(1.0), 6, 6);
        CHECK(map.shape() == Shape{6, 6, 1});
        CHECK((map.data == 1.0).all());
    }
    SUBCASE("single corner cell") {
        RowMatrix<double> g = RowMatrix<double>::Zero(3, 3);
        g(0, 0) = 1;
        const auto map = upsample_grid(FusionWeights<double>(g), 9, 9);
        for (Index y = 0; y < 9; ++y)
            for (Index x = 0; x < 9; ++x) CHECK(map.at(y, x, 0) == ((y < 3 && x < 3) ? 1.0 : 0.0));
    }
    SUBCASE("64 x 64 gives nine constant blocks") {
        RowMatrix<double> g(3, 3);
        for (Index i = 0; i < 9; ++i) g.data()[i] = 0.05 + 0.1 * double(i);
        const auto map = upsample_grid(FusionWeights<double>(g), 64, 64);
        std::set<double> distinct;
        for (Index y = 0; y < 64; ++y)
            for (Index x = 0; x < 64; ++x) {
                REQUIRE(map.at(y, x, 0) == g(oracle_block(y, 64), oracle_block(x, 64)));
                distinct.insert(map.at(y, x, 0));
            }
        CHECK(distinct.size() == 9);
        CHECK(map.at(20, 20, 0) == g(0, 0));
        CHECK(map.at(21, 41, 0) == g(1, 1));
        CHECK(map.at(42, 63, 0) == g(2, 2));
    }
    SUBCASE("non-square maps") {
        Rng rng(2);
        const auto w = random_weights(rng);
        const auto map = upsample_grid(w, 7, 11);
        std::set<double> distinct(map.data.data(), map.data.data() + map.data.size());
        CHECK(distinct.size() <= 9);
        CHECK(map.at(6, 10, 0) == w.grid(2, 2));
    }
}

TEST_CASE("fuse algebra over 100 random cases") {
    Rng rng(3);
    const double tol = 1e-6;
    for (int trial = 0; trial < 100; ++trial) {
        const Index h = 3 + trial % 9, w = 3 + (trial * 7) % 11;
        const auto I = random_image(h, w, rng), G = random_image(h, w, rng);
        const auto w1 = random_weights(rng), w2 = random_weights(rng);

        CHECK((fuse(I, G, FusionWeights<double>::constant(1.0)).data == I.data).all());
        CHECK((fuse(I, G, FusionWeights<double>::constant(0.0)).data == G.data).all());
        CHECK((fuse(I, I, w1).data - I.data).abs().maxCoeff() < tol);

        const auto F = fuse(I, G, w1);
        CHECK((F.data >= I.data.min(G.data) - tol).all());
        CHECK((F.data <= I.data.max(G.data) + tol).all());

        const double alpha = std::uniform_real_distribution<double>(0, 1)(rng);
        const FusionWeights<double> mix(alpha * w1.grid + (1 - alpha) * w2.grid);
        const auto lhs = fuse(I, G, mix);
        const Eigen::ArrayXd rhs = alpha * fuse(I, G, w1).data + (1 - alpha) * fuse(I, G, w2).data;
        CHECK((lhs.data - rhs).abs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("gradient through fuse w.r.t. the nine cells") {
    Rng rng(4);
    Var<double> cells(rand_uniform<double>({1, 9}, rng, 0.1, 0.9), true);
    Var<double> a(randn<double>({1, 3, 10, 7}, rng)), b(randn<double>({1, 3, 10, 7}, rng));
    Var<double> probe(randn<double>({1, 3, 10, 7}, rng));
    const auto gc = check_gradients([&] { return sum(blend(a, b, grid_upsample(cells, 10, 7)) * probe); }, {cells});
    CHECK(gc.rel_error < 1e-4);
}

TEST_CASE("pilot binary grids") {
    Rng rng(5);
    const auto w = random_binary_grid<double>(rng);
    CHECK(((w.grid.array() == 0.0) || (w.grid.array() == 1.0)).all());
}
