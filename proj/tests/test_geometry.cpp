#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "bdet/errors.hpp"
#include "bdet/geometry.hpp"
#include "bdet/rng.hpp"

using namespace bdet;

TEST_CASE("iou of identical, disjoint, and corner boxes") {
    BBox a{1.0, 1.0, 2.0, 2.0};
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));

    BBox far{100.0, 100.0, 2.0, 2.0};
    CHECK(iou(a, far) == 0.0);

    BBox b{2.0, 2.0, 2.0, 2.0};  // corners (1,1)-(3,3); intersection 1, union 7
    CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("iou is symmetric and bounded") {
    Rng rng(101);
    for (int i = 0; i < 200; ++i) {
        BBox a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 20), rng.uniform(0.5, 20)};
        BBox b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0.5, 20), rng.uniform(0.5, 20)};
        double ab = iou(a, b), ba = iou(b, a);
        CHECK(ab == ba);
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
    }
}

TEST_CASE("decode at zero raw output sits at cell center with prior size") {
    PriorBox p{20.0, 55.0, 0, 0, 0};
    BBox b = decode_box({0, 0, 0, 0}, 0, 0, p, 8);
    CHECK(b.cx == doctest::Approx(4.0));
    CHECK(b.cy == doctest::Approx(4.0));
    CHECK(b.w == doctest::Approx(20.0));
    CHECK(b.h == doctest::Approx(55.0));

    BBox wide = decode_box({0, 0, std::log(2.0), 0}, 0, 0, p, 8);
    CHECK(wide.w == doctest::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("encode inverts decode at the fixed point") {
    PriorBox p{10.0, 24.0, 0, 0, 0};
    // center of cell (3, 2) at stride 8 is (3.5*8, 2.5*8)... x uses cell_x=3
    BBox box{(3 + 0.5) * 8.0, (2 + 0.5) * 8.0, 10.0, 24.0};
    auto raw = encode_ground_truth(box, 3, 2, p, 8);
    for (double v : raw) CHECK(std::abs(v) < 1e-12);

    BBox two{box.cx, box.cy, 20.0, 24.0};
    auto raw2 = encode_ground_truth(two, 3, 2, p, 8);
    CHECK(raw2[2] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("encode rejects centers outside the cell") {
    PriorBox p{10.0, 10.0, 0, 0, 0};
    BBox box{100.0, 100.0, 5.0, 5.0};
    CHECK_THROWS_AS(encode_ground_truth(box, 0, 0, p, 8), DataError);
}

TEST_CASE("decode/encode roundtrip on random raw vectors") {
    Rng rng(102);
    PriorBox p{12.0, 30.0, 0, 1, 1};
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::array<double, 4> raw{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-1.5, 1.5),
                                  rng.uniform(-1.5, 1.5)};
        int cx = static_cast<int>(rng.uniform_index(8)), cy = static_cast<int>(rng.uniform_index(8));
        BBox dec = decode_box(raw, cx, cy, p, 8);
        auto enc = encode_ground_truth(dec, cx, cy, p, 8);
        BBox dec2 = decode_box(enc, cx, cy, p, 8);
        worst = std::max({worst, std::abs(dec.cx - dec2.cx), std::abs(dec.cy - dec2.cy), std::abs(dec.w - dec2.w),
                          std::abs(dec.h - dec2.h)});
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("encode/decode roundtrip on random boxes away from cell borders") {
    Rng rng(103);
    PriorBox p{16.0, 16.0, 0, 0, 0};
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        int cx = static_cast<int>(rng.uniform_index(8)), cy = static_cast<int>(rng.uniform_index(8));
        double fx = rng.uniform(1e-3, 1.0 - 1e-3), fy = rng.uniform(1e-3, 1.0 - 1e-3);
        BBox box{(cx + fx) * 8.0, (cy + fy) * 8.0, rng.uniform(4.0, 50.0), rng.uniform(4.0, 50.0)};
        auto enc = encode_ground_truth(box, cx, cy, p, 8);
        BBox dec = decode_box(enc, cx, cy, p, 8);
        worst = std::max({worst, std::abs(dec.cx - box.cx), std::abs(dec.cy - box.cy), std::abs(dec.w - box.w),
                          std::abs(dec.h - box.h)});
    }
    CHECK(worst < 1e-9);
}

namespace {

std::vector<PriorBox> test_priors() {
    // two scales (strides 4, 8), sizes ascending by area
    return priors_from_sizes({{6, 10}, {8, 16}, {10, 22}, {14, 28}, {18, 36}, {26, 48}}, 2);
}

}  // namespace

TEST_CASE("ground truth whose size equals a prior is assigned to it") {
    GridGeometry geom = make_grid_geometry(64, 64, {4, 8});
    auto priors = test_priors();
    GroundTruth gt;
    gt.bbox = {33.0, 29.0, 14.0, 28.0};  // exactly prior 3
    auto a = assign_ground_truth({gt}, geom, priors);
    REQUIRE(a.assigned.size() == 1);
    CHECK(a.dropped.empty());
    CHECK(a.assigned[0].global_prior_id == 3);
    const auto& slot = a.assigned[0].slot;
    CHECK(slot.scale_index == 1);
    CHECK(slot.cell_x == 4);  // 33 / 8
    CHECK(slot.cell_y == 3);  // 29 / 8
}

TEST_CASE("two identical ground truths fall through to the second-best prior") {
    GridGeometry geom = make_grid_geometry(64, 64, {4, 8});
    auto priors = test_priors();
    GroundTruth gt;
    gt.bbox = {33.0, 29.0, 14.0, 28.0};
    auto a = assign_ground_truth({gt, gt}, geom, priors);
    REQUIRE(a.assigned.size() == 2);
    CHECK(a.assigned[0].global_prior_id == 3);

    // independent oracle: rank candidates by (iou desc, id asc), skip slot 0
    std::vector<std::pair<double, int>> ranked;
    for (const auto& p : priors) {
        ranked.emplace_back(iou(gt.bbox, BBox{gt.bbox.cx, gt.bbox.cy, p.pw, p.ph}), p.global_id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first > y.first;
        return x.second < y.second;
    });
    CHECK(a.assigned[1].global_prior_id == ranked[1].second);
}

TEST_CASE("equal-iou ties go to the lower global prior id") {
    GridGeometry geom = make_grid_geometry(64, 64, {4, 8});
    // priors 0 and 1 are transposes: same IoU against a square ground truth
    auto priors = priors_from_sizes({{14, 16}, {16, 14}, {26, 30}, {30, 34}, {36, 40}, {44, 52}}, 2);
    GroundTruth gt;
    gt.bbox = {32.0, 32.0, 15.0, 15.0};
    auto a = assign_ground_truth({gt}, geom, priors);
    REQUIRE(a.assigned.size() == 1);
    double i0 = iou(gt.bbox, BBox{gt.bbox.cx, gt.bbox.cy, priors[0].pw, priors[0].ph});
    double i1 = iou(gt.bbox, BBox{gt.bbox.cx, gt.bbox.cy, priors[1].pw, priors[1].ph});
    REQUIRE(i0 == i1);
    REQUIRE(i0 > iou(gt.bbox, BBox{gt.bbox.cx, gt.bbox.cy, priors[2].pw, priors[2].ph}));
    CHECK(a.assigned[0].global_prior_id == 0);
}

TEST_CASE("assignment never double-books a slot and accounts for every ground truth") {
    GridGeometry geom = make_grid_geometry(64, 64, {4, 8});
    auto priors = test_priors();
    Rng rng(104);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<GroundTruth> gts;
        int n = 1 + static_cast<int>(rng.uniform_index(20));
        for (int i = 0; i < n; ++i) {
            GroundTruth g;
            g.bbox = {rng.uniform(4, 60), rng.uniform(4, 60), rng.uniform(4, 30), rng.uniform(4, 30)};
            gts.push_back(g);
        }
        auto a = assign_ground_truth(gts, geom, priors);
        CHECK(a.assigned.size() + a.dropped.size() == gts.size());
        std::set<std::tuple<int, int, int, int>> slots;
        std::set<int> seen;
        for (const auto& e : a.assigned) {
            auto key = std::make_tuple(e.slot.scale_index, e.slot.cell_y, e.slot.cell_x, e.slot.prior_index);
            CHECK(slots.count(key) == 0);
            slots.insert(key);
            seen.insert(e.gt_index);
        }
        for (int d : a.dropped) seen.insert(d);
        CHECK(seen.size() == gts.size());
    }
}

TEST_CASE("kmeans fixed points") {
    std::vector<std::pair<double, double>> boxes{{10, 10}, {30, 30}, {80, 80}};
    auto c = kmeans_priors(boxes, 3, 50, 1);
    REQUIRE(c.size() == 3);
    CHECK(c[0] == std::pair<double, double>{10, 10});
    CHECK(c[1] == std::pair<double, double>{30, 30});
    CHECK(c[2] == std::pair<double, double>{80, 80});

    std::vector<std::pair<double, double>> same(17, {12.5, 7.0});
    auto one = kmeans_priors(same, 1, 50, 9);
    CHECK(one[0].first == doctest::Approx(12.5).epsilon(1e-12));
    CHECK(one[0].second == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("kmeans rejects more clusters than distinct sizes") {
    std::vector<std::pair<double, double>> boxes{{10, 10}, {10, 10}, {30, 30}};
    CHECK_THROWS_AS(kmeans_priors(boxes, 3, 50, 1), DataError);
}

TEST_CASE("kmeans recovers three planted clusters within 5 percent") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(7000 + seed);
        std::vector<std::pair<double, double>> boxes;
        std::vector<double> means{10.0, 30.0, 80.0};
        std::vector<double> jitter{1.0, 1.0, 2.0};
        std::vector<std::pair<double, double>> cluster_mean(3, {0, 0});
        std::vector<int> counts(3, 0);
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < 60; ++i) {
                double w = means[static_cast<std::size_t>(c)] + rng.uniform(-jitter[static_cast<std::size_t>(c)],
                                                                            jitter[static_cast<std::size_t>(c)]);
                double h = means[static_cast<std::size_t>(c)] + rng.uniform(-jitter[static_cast<std::size_t>(c)],
                                                                            jitter[static_cast<std::size_t>(c)]);
                boxes.emplace_back(w, h);
                cluster_mean[static_cast<std::size_t>(c)].first += w;
                cluster_mean[static_cast<std::size_t>(c)].second += h;
                counts[static_cast<std::size_t>(c)]++;
            }
        }
        for (int c = 0; c < 3; ++c) {
            cluster_mean[static_cast<std::size_t>(c)].first /= counts[static_cast<std::size_t>(c)];
            cluster_mean[static_cast<std::size_t>(c)].second /= counts[static_cast<std::size_t>(c)];
        }
        auto got = kmeans_priors(boxes, 3, 100, seed);
        REQUIRE(got.size() == 3);
        for (int c = 0; c < 3; ++c) {
            CHECK(std::abs(got[static_cast<std::size_t>(c)].first - cluster_mean[static_cast<std::size_t>(c)].first) /
                      cluster_mean[static_cast<std::size_t>(c)].first <
                  0.05);
            CHECK(std::abs(got[static_cast<std::size_t>(c)].second - cluster_mean[static_cast<std::size_t>(c)].second) /
                      cluster_mean[static_cast<std::size_t>(c)].second <
                  0.05);
        }
    }
}

TEST_CASE("kmeans objective never increases across accepted iterations") {
    Rng rng(105);
    std::vector<std::pair<double, double>> boxes;
    for (int i = 0; i < 300; ++i) boxes.emplace_back(rng.uniform(4, 60), rng.uniform(4, 60));
    std::vector<double> history;
    kmeans_priors(boxes, 6, 100, 3, &history);
    REQUIRE(history.size() >= 1);
    for (std::size_t i = 1; i < history.size(); ++i) CHECK(history[i] <= history[i - 1]);
}

TEST_CASE("priors are partitioned ascending by area, smallest to the finest scale") {
    auto priors = test_priors();
    REQUIRE(priors.size() == 6);
    for (int i = 0; i < 6; ++i) {
        CHECK(priors[static_cast<std::size_t>(i)].global_id == i);
        CHECK(priors[static_cast<std::size_t>(i)].scale_index == i / 3);
        CHECK(priors[static_cast<std::size_t>(i)].prior_index == i % 3);
        if (i > 0) {
            CHECK(priors[static_cast<std::size_t>(i)].pw * priors[static_cast<std::size_t>(i)].ph >=
                  priors[static_cast<std::size_t>(i - 1)].pw * priors[static_cast<std::size_t>(i - 1)].ph);
        }
    }
}

TEST_CASE("grid geometry validates divisibility and orders scales") {
    GridGeometry g = make_grid_geometry(64, 64, {8, 4});
    REQUIRE(g.num_scales() == 2);
    CHECK(g.scales[0].stride == 4);
    CHECK(g.scales[0].h == 16);
    CHECK(g.scales[1].stride == 8);
    CHECK(g.scales[1].w == 8);
    CHECK(g.total_slots() == (16 * 16 + 8 * 8) * 3);
    CHECK_THROWS_AS(make_grid_geometry(60, 64, {8}), DataError);
}

TEST_CASE("occlusion level bins") {
    CHECK(occlusion_level_from_fraction(0.0) == OcclusionLevel::None);
    CHECK(occlusion_level_from_fraction(0.10) == OcclusionLevel::None);
    CHECK(occlusion_level_from_fraction(0.11) == OcclusionLevel::Low);
    CHECK(occlusion_level_from_fraction(0.40) == OcclusionLevel::Low);
    CHECK(occlusion_level_from_fraction(0.41) == OcclusionLevel::Mid);
    CHECK(occlusion_level_from_fraction(0.80) == OcclusionLevel::Mid);
    CHECK(occlusion_level_from_fraction(0.81) == OcclusionLevel::Heavy);
    CHECK(occlusion_level_from_fraction(1.0) == OcclusionLevel::Heavy);
}
