#include <gtest/gtest.h>

#include <cmath>

#include "imsty/grad_check.hpp"
#include "imsty/graph.hpp"
#include "imsty/mean_teacher.hpp"
#include "imsty/model.hpp"
#include "imsty/profiler.hpp"
#include "imsty/rng.hpp"

using namespace imsty;

namespace {
Tensor randn(std::vector<std::size_t> shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.raw()) v = rng.normal();
    return t;
}

long long shape_product_params(const WalkedGraph& wg) {
    // independent shape-product oracle over the resolved parameter shapes
    long long total = 0;
    for (const WalkedLayer& wl : wg.layers) {
        for (const auto& s : wl.param_shapes) {
            long long p = 1;
            for (std::size_t d : s) p *= static_cast<long long>(d);
            total += p;
        }
    }
    return total;
}
}  // namespace

TEST(LenetEncoder, TapAndFlattenShapes) {
    LayerGraph g = build_lenet5_encoder(1);
    WalkedGraph wg = shape_check(g, 32, 32);
    ASSERT_GE(wg.tap_index, 0);
    const ActShape tap = wg.layers[static_cast<std::size_t>(wg.tap_index)].out_shape;
    EXPECT_EQ(tap.c, 16u);
    EXPECT_EQ(tap.h, 5u);
    EXPECT_EQ(tap.w, 5u);
    EXPECT_FALSE(wg.output_shape.spatial);
    EXPECT_EQ(wg.output_shape.features, 400u);
}

TEST(LenetEncoder, ParameterCountIs2616) {
    LayerGraph g = build_lenet5_encoder(1);
    EXPECT_EQ(count_params(g, 32), 2616);
    EXPECT_EQ(shape_product_params(shape_check(g, 32, 32)), 2616);
}

TEST(ClassifierHead, ShapesAndParameterCount) {
    LayerGraph g = build_classifier_head(400, 10);
    WalkedGraph wg = shape_check(g, 0, 0);
    EXPECT_EQ(wg.output_shape.features, 10u);
    EXPECT_EQ(count_params(g, 0), 59134);
    EXPECT_EQ(shape_product_params(wg), 59134);
}

TEST(ClassifierHead, ZeroFinalLayerGivesHalfProbabilities) {
    LayerGraph g = build_classifier_head(8, 4);
    Model m(g, 0, 0, 5);
    // zero the final linear layer
    auto& params = m.parameters();
    const auto& names = m.parameter_names();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (names[i].rfind("l5.linear", 0) == 0) {
            std::fill(params[i].raw().begin(), params[i].raw().end(), 0.0);
        }
    }
    Tensor out = m.forward(randn({3, 8}, 6), false);
    Tensor probs = sigmoid(out);
    for (double v : probs.raw()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Models, SameSeedGivesIdenticalParameters) {
    Model a(build_lenet5_classifier(1, 10, 32), 32, 32, 77);
    Model b(build_lenet5_classifier(1, 10, 32), 32, 32, 77);
    Model c(build_lenet5_classifier(1, 10, 32), 32, 32, 78);
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    bool any_diff_seed77 = false, any_diff_seed78 = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        for (std::size_t j = 0; j < a.parameters()[i].numel(); ++j) {
            if (a.parameters()[i].raw()[j] != b.parameters()[i].raw()[j]) any_diff_seed77 = true;
            if (a.parameters()[i].raw()[j] != c.parameters()[i].raw()[j]) any_diff_seed78 = true;
        }
    }
    EXPECT_FALSE(any_diff_seed77);
    EXPECT_TRUE(any_diff_seed78);
}

TEST(PoseModel, HeatmapAndTapShapes) {
    LayerGraph g = build_pose_model(1, 4, 32);
    WalkedGraph wg = shape_check(g, 64, 64);
    EXPECT_EQ(wg.output_shape.c, 4u);
    EXPECT_EQ(wg.output_shape.h, 32u);
    EXPECT_EQ(wg.output_shape.w, 32u);
    const ActShape tap = wg.layers[static_cast<std::size_t>(wg.tap_index)].out_shape;
    EXPECT_EQ(tap.h, 4u);
    EXPECT_EQ(tap.w, 4u);
    EXPECT_EQ(tap.c, 32u);
    Model m(g, 64, 64, 9);
    Tensor heat = m.forward(randn({2, 1, 64, 64}, 10), true);
    EXPECT_EQ(heat.shape(), (std::vector<std::size_t>{2, 4, 32, 32}));
}

TEST(PoseModel, ZeroFinalConvGivesZeroHeatmaps) {
    Model m(build_pose_model(1, 4, 16), 64, 64, 11);
    auto& params = m.parameters();
    const auto& names = m.parameter_names();
    const std::string final_conv = "l" + std::to_string(m.walked().layers.size() - 1) + ".conv";
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (names[i].rfind(final_conv, 0) == 0) {
            std::fill(params[i].raw().begin(), params[i].raw().end(), 0.0);
        }
    }
    Tensor heat = m.forward(Tensor::zeros({2, 1, 64, 64}), true);
    for (double v : heat.raw()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Forward, EvalModeIsDeterministic) {
    Model m(build_lenet5_classifier(1, 10, 32), 32, 32, 12);
    Tensor x = randn({3, 1, 32, 32}, 13);
    Tensor a = m.forward(x, false);
    Tensor b = m.forward(x, false);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.raw()[i], b.raw()[i]);
}

TEST(Forward, TrainUsesBatchStatsEvalUsesRunningStats) {
    Model m(build_lenet5_classifier(1, 10, 32), 32, 32, 14);
    Tensor x = randn({4, 1, 32, 32}, 15);
    Tensor shifted = add_scalar(x, 1.0);
    Tensor train_out = m.forward(shifted, true, false);
    Tensor eval_out = m.forward(shifted, false);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < train_out.numel(); ++i) {
        max_diff = std::max(max_diff, std::abs(train_out.raw()[i] - eval_out.raw()[i]));
    }
    EXPECT_GT(max_diff, 1e-6);
}

TEST(Forward, RejectsWrongInputShape) {
    Model m(build_lenet5_classifier(1, 10, 32), 32, 32, 16);
    EXPECT_THROW(m.forward(Tensor({2, 1, 16, 16}), false), std::invalid_argument);
    EXPECT_THROW(m.forward(Tensor({2, 3, 32, 32}), false), std::invalid_argument);
}

TEST(Forward, TapSplitEqualsPlainForwardBitExactly) {
    Model m(build_lenet5_classifier(1, 10, 32), 32, 32, 17);
    Tensor x = randn({2, 1, 32, 32}, 18);
    Tensor full = m.forward(x, true, false);
    Tensor tap = m.forward_to_tap(x, true, false);
    Tensor split = m.forward_from_tap(tap, true, false);
    ASSERT_EQ(full.shape(), split.shape());
    for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_EQ(full.raw()[i], split.raw()[i]);
}

TEST(Forward, FullClassificationGradCheck) {
    Model m(build_lenet5_classifier(1, 4, 32), 32, 32, 19);
    Tensor x = randn({2, 1, 32, 32}, 20);
    Tensor target({2, 4}, 0.0);
    target(0, 1) = 1.0;
    target(1, 2) = 1.0;
    const double err = grad_check(
        [&](const Tensor& in) {
            return bce_with_logits_loss(m.forward(in, true, false), target);
        },
        x, 1e-5);
    EXPECT_LT(err, 1e-4);
}

TEST(Forward, FullPoseGradCheck) {
    Model m(build_pose_model(1, 2, 8), 16, 16, 21);
    Tensor x = randn({2, 1, 16, 16}, 22);
    Tensor target = randn({2, 2, 8, 8}, 23);
    const double err = grad_check(
        [&](const Tensor& in) { return mse_loss(m.forward(in, true, false), target); }, x, 1e-5);
    EXPECT_LT(err, 1e-4);
}

TEST(DecodeKeypoints, FindsSinglePeak) {
    Tensor maps = Tensor::zeros({1, 1, 8, 8});
    maps(0, 0, 3, 5) = 1.0;
    Tensor coords = decode_keypoints(maps);
    EXPECT_DOUBLE_EQ(coords(0, 0, 0), 3.0);
    EXPECT_DOUBLE_EQ(coords(0, 0, 1), 5.0);
}

TEST(DecodeKeypoints, UniformMapBreaksTiesToOrigin) {
    Tensor maps = Tensor::full({1, 2, 6, 6}, 0.3);
    Tensor coords = decode_keypoints(maps);
    for (std::size_t j = 0; j < 2; ++j) {
        EXPECT_DOUBLE_EQ(coords(0, j, 0), 0.0);
        EXPECT_DOUBLE_EQ(coords(0, j, 1), 0.0);
    }
}

TEST(DecodeKeypoints, GaussianBlobDecodesToCenter) {
    Tensor kp = Tensor::from_data({1, 1, 2}, {10.0, 12.0});
    Tensor maps = render_gaussian_heatmaps(kp, 24, 24, 1.0);
    Tensor coords = decode_keypoints(maps);
    EXPECT_DOUBLE_EQ(coords(0, 0, 0), 10.0);
    EXPECT_DOUBLE_EQ(coords(0, 0, 1), 12.0);
}

TEST(GraphText, RoundTripsThroughSerialization) {
    LayerGraph g = build_pose_model(1, 4, 32);
    LayerGraph parsed = parse_graph(serialize_graph(g));
    ASSERT_EQ(parsed.layers.size(), g.layers.size());
    const std::string again = serialize_graph(parsed);
    EXPECT_EQ(again, serialize_graph(g));
}

TEST(GraphText, ParseErrorsCarryLineNumbers) {
    try {
        parse_graph("input channels=1\nwarp out=4\n");
        FAIL() << "expected parse error";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("warp"), std::string::npos) << msg;
    }
    EXPECT_THROW(parse_graph("input channels=1\nconv out=abc\n"), std::invalid_argument);
    EXPECT_THROW(parse_graph("input channels=1\nconv out\n"), std::invalid_argument);
    EXPECT_THROW(parse_graph(""), std::invalid_argument);
}

TEST(ShapeCheck, CatchesBadCompositions) {
    // linear before flatten
    LayerGraph g1;
    g1.layers.push_back({LayerKind::input, 0, 0, 1, 0, 1, 0});
    g1.layers.push_back({LayerKind::linear, 10});
    EXPECT_THROW(shape_check(g1, 8, 8), std::invalid_argument);
    // kernel larger than input
    LayerGraph g2;
    g2.layers.push_back({LayerKind::input, 0, 0, 1, 0, 1, 0});
    g2.layers.push_back({LayerKind::conv, 4, 11, 1, 0, 0, 0});
    EXPECT_THROW(shape_check(g2, 8, 8), std::invalid_argument);
    // two alignment taps
    LayerGraph g3;
    g3.layers.push_back({LayerKind::input, 0, 0, 1, 0, 1, 0});
    g3.layers.push_back({LayerKind::imsty});
    g3.layers.push_back({LayerKind::imsty});
    EXPECT_THROW(shape_check(g3, 8, 8), std::invalid_argument);
}

TEST(ModelState, CheckpointRoundTrip) {
    Model a(build_lenet5_classifier(1, 10, 32), 32, 32, 30);
    Model b(build_lenet5_classifier(1, 10, 32), 32, 32, 31);
    b.load_state(a.named_tensors());
    Tensor x = randn({2, 1, 32, 32}, 32);
    Tensor ya = a.forward(x, false);
    Tensor yb = b.forward(x, false);
    for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya.raw()[i], yb.raw()[i]);
}
