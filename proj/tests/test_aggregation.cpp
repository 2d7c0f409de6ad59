#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "protodet/aggregation.hpp"

using namespace protodet;

namespace {

std::vector<ImagePrototype> random_protos(int k, int c, uint64_t seed, int class_id = 4) {
    Rng rng(seed);
    std::vector<ImagePrototype> out;
    for (int i = 0; i < k; ++i)
        out.push_back({Tensor::uniform({c}, -1, 1, rng), Tensor::full({1, 1}, 1.0), class_id});
    return out;
}

}  // namespace

TEST_CASE("intra_dam alpha zero is exactly gap") {
    Rng rng(3);
    Tensor feat = Tensor::uniform({3, 2, 4}, -2, 2, rng);
    ImagePrototype p = intra_dam(feat, 0.0);
    Tensor g = gap(feat);
    CHECK(p.v.data() == g.data());
}

TEST_CASE("intra_dam constant positive map doubles the value") {
    // power-of-two constant keeps every step exact
    Tensor feat = Tensor::full({4, 2, 2}, 2.0);
    ImagePrototype p = intra_dam(feat, 1.0);
    for (double w : p.weights.data()) CHECK(w == 1.0);
    for (double v : p.v.data()) CHECK(v == 4.0);
}

TEST_CASE("intra_dam one-dimensional hand oracle") {
    Tensor feat = Tensor::from_data({1, 1, 2}, {2, 4});
    ImagePrototype p = intra_dam(feat, 1.0);
    CHECK(p.weights.data()[0] == 1.0);
    CHECK(p.weights.data()[1] == 1.0);
    CHECK(p.v.item() == 6.0);
}

TEST_CASE("intra_dam matches a long-double oracle on random maps") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        const int c = 3, h = 2, w = 3, n = h * w;
        Tensor feat = Tensor::uniform({c, h, w}, -1, 1, rng);
        const double alpha = 0.75;
        ImagePrototype p = intra_dam(feat, alpha);

        std::vector<long double> pooled(c, 0.0L);
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < n; ++i) pooled[ch] += feat.data()[ch * n + i];
        for (auto& v : pooled) v /= n;
        for (int i = 0; i < n; ++i) {
            std::vector<long double> pos(c);
            for (int ch = 0; ch < c; ++ch) pos[ch] = feat.data()[ch * n + i];
            const long double wexp = oracle::cosine_ld(pooled, pos);
            CHECK(std::abs(p.weights.data()[i] - static_cast<double>(wexp)) <= 1e-10);
        }
        for (int ch = 0; ch < c; ++ch) {
            long double acc = 0;
            for (int i = 0; i < n; ++i)
                acc += static_cast<long double>(p.weights.data()[i]) * feat.data()[ch * n + i];
            const long double expect = pooled[ch] + alpha / n * acc;
            CHECK(std::abs(p.v.data()[ch] - static_cast<double>(expect)) <= 1e-10);
        }
        for (double wv : p.weights.data()) CHECK(std::abs(wv) <= 1.0 + 1e-9);
    }
}

TEST_CASE("gap+gmp image prototype") {
    Tensor feat = Tensor::from_data({2, 1, 2}, {1, 3, -2, -6});
    ImagePrototype p = image_prototype(feat, ImgProtoMode::gap_gmp);
    CHECK(p.v.data() == std::vector<double>{2 + 3, -4 + -2});
}

TEST_CASE("inter_dam zero fc halves the sum") {
    InterDamParams params;
    params.fc_weight = Tensor::zeros({1, 1});
    params.fc_bias = Tensor::zeros({1});
    std::vector<ImagePrototype> protos = {
        {Tensor::from_data({1}, {2}), Tensor::full({1, 1}, 1.0), 0},
        {Tensor::from_data({1}, {4}), Tensor::full({1, 1}, 1.0), 0}};
    ClassPrototype cp = inter_dam(protos, params);
    CHECK(cp.v.item() == 3.0);
    REQUIRE(cp.contributions.size() == 2);
    CHECK(cp.contributions[0].item() == 0.5);
    CHECK(cp.contributions[1].item() == 0.5);
}

TEST_CASE("inter_dam single prototype scales by its probability") {
    Rng rng(11);
    InterDamParams params = InterDamParams::init(3, rng);
    std::vector<ImagePrototype> protos = random_protos(1, 3, 13);
    ClassPrototype cp = inter_dam(protos, params);
    const double p = cp.contributions[0].item();
    for (int i = 0; i < 3; ++i)
        CHECK(cp.v.data()[i] == doctest::Approx(p * protos[0].v.data()[i]).epsilon(1e-15));
}

TEST_CASE("inter_dam identical prototypes grow with k") {
    Rng rng(17);
    InterDamParams params = InterDamParams::init(2, rng);
    Tensor v = Tensor::from_data({2}, {0.5, -1.25});
    std::vector<ImagePrototype> protos;
    for (int i = 0; i < 4; ++i) protos.push_back({v, Tensor::full({1, 1}, 1.0), 1});
    ClassPrototype cp = inter_dam(protos, params);
    const double p = cp.contributions[0].item();
    for (int i = 0; i < 2; ++i)
        CHECK(cp.v.data()[i] == doctest::Approx(4 * p * v.data()[i]).epsilon(1e-12));
}

TEST_CASE("inter_dam errors") {
    Rng rng(19);
    InterDamParams params = InterDamParams::init(2, rng);
    CHECK_THROWS_AS(inter_dam({}, params), std::invalid_argument);
    auto protos = random_protos(2, 2, 23, 1);
    protos[1].class_id = 2;
    CHECK_THROWS_AS(inter_dam(protos, params), std::invalid_argument);
}

TEST_CASE("support order permutation leaves the class prototype bit-identical") {
    Rng rng(29);
    InterDamParams params = InterDamParams::init(4, rng);
    auto protos = random_protos(5, 4, 31);
    ClassPrototype a = inter_dam(protos, params);
    std::vector<ImagePrototype> shuffled = {protos[3], protos[0], protos[4], protos[2], protos[1]};
    ClassPrototype b = inter_dam(shuffled, params);
    CHECK(a.v.data() == b.v.data());
    ClassPrototype ma = mean_prototype(protos);
    ClassPrototype mb = mean_prototype(shuffled);
    CHECK(ma.v.data() == mb.v.data());
}

TEST_CASE("inter_dam is linear in each prototype under frozen probabilities") {
    Rng rng(37);
    InterDamParams params = InterDamParams::init(3, rng);
    auto protos = random_protos(3, 3, 41);
    ClassPrototype cp = inter_dam(protos, params);
    std::vector<double> frozen;
    for (const auto& c : cp.contributions) frozen.push_back(c.item());
    // doubling one input doubles its summand in the frozen-probability sum
    for (int ch = 0; ch < 3; ++ch) {
        double base = 0, doubled = 0;
        for (size_t i = 0; i < protos.size(); ++i) {
            base += frozen[i] * protos[i].v.data()[ch];
            doubled += frozen[i] * (i == 0 ? 2.0 : 1.0) * protos[i].v.data()[ch];
        }
        CHECK(doubled - base == doctest::Approx(frozen[0] * protos[0].v.data()[ch]).epsilon(1e-12));
    }
}

TEST_CASE("normalized contributions sum the prototypes with weights p/sum(p)") {
    Rng rng(43);
    InterDamParams params = InterDamParams::init(2, rng);
    auto protos = random_protos(3, 2, 47);
    ClassPrototype cp = inter_dam(protos, params, true);
    std::vector<double> p;
    double total = 0;
    for (const auto& c : cp.contributions) {
        p.push_back(c.item());
        total += c.item();
    }
    for (int ch = 0; ch < 2; ++ch) {
        double expect = 0;
        for (size_t i = 0; i < protos.size(); ++i) expect += p[i] / total * protos[i].v.data()[ch];
        CHECK(cp.v.data()[ch] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("aggregate_prototypes trivial composition") {
    Rng rng(53);
    Tensor feat = Tensor::uniform({3, 2, 2}, -1, 1, rng);
    std::map<int, std::vector<CoupledFeature>> coupled;
    CoupledFeature cf;
    cf.feature = feat;
    cf.condition = Tensor::full({2, 2}, 1.0);
    cf.attention = Tensor::full({4, 1}, 1.0);
    cf.class_id = 2;
    coupled[2].push_back(cf);

    AggregationOptions opt;
    opt.use_intra = false;
    opt.use_inter = true;
    opt.alpha = 0.0;
    InterDamParams zero;
    zero.fc_weight = Tensor::zeros({1, 3});
    zero.fc_bias = Tensor::zeros({1});
    auto protos = aggregate_prototypes(coupled, opt, zero);
    Tensor expect = scale(gap(feat), 0.5);
    CHECK(protos.at(2).v.data() == expect.data());

    coupled[5] = {};
    CHECK_THROWS_AS(aggregate_prototypes(coupled, opt, zero), std::invalid_argument);
}

TEST_CASE("baseline arm equals the unweighted mean of gap vectors") {
    Rng rng(59);
    std::map<int, std::vector<CoupledFeature>> coupled;
    std::vector<Tensor> feats;
    for (int i = 0; i < 3; ++i) {
        CoupledFeature cf;
        cf.feature = Tensor::uniform({4, 2, 2}, -1, 1, rng);
        cf.condition = Tensor::full({2, 2}, 1.0);
        cf.attention = Tensor::full({4, 1}, 1.0);
        cf.class_id = 0;
        feats.push_back(cf.feature);
        coupled[0].push_back(cf);
    }
    AggregationOptions opt;
    opt.use_intra = false;
    opt.use_inter = false;
    InterDamParams unused;
    unused.fc_weight = Tensor::zeros({1, 4});
    unused.fc_bias = Tensor::zeros({1});
    auto protos = aggregate_prototypes(coupled, opt, unused);
    for (int ch = 0; ch < 4; ++ch) {
        double mean = 0;
        for (const auto& f : feats) {
            double acc = 0;
            for (int i = 0; i < 4; ++i) acc += f.data()[ch * 4 + i];
            mean += acc / 4;
        }
        mean /= 3;
        CHECK(protos.at(0).v.data()[ch] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("outputs stay finite across magnitudes") {
    Rng rng(61);
    for (double mag : {1e-6, 1.0, 1e6}) {
        InterDamParams params = InterDamParams::init(3, rng);
        Tensor feat = Tensor::uniform({3, 2, 2}, -mag, mag, rng);
        ImagePrototype p = intra_dam(feat, 1.0);
        ClassPrototype cp = inter_dam({p, p}, params);
        for (double v : cp.v.data()) CHECK(std::isfinite(v));
        for (double w : p.weights.data()) CHECK(std::abs(w) <= 1.0 + 1e-9);
    }
}
