#include <gtest/gtest.h>

#include "gacunet/gradcheck_suite.hpp"

using namespace gacunet;

TEST(GradCheckSuite, EveryRowPasses) {
    const auto rows = run_gradcheck_suite();
    const std::vector<std::string> expected{"conv2d",          "dilated_conv2d",   "maxpool2",          "upsample2",
                                            "gat_conv",        "cheb_conv",        "center_of_mass",    "input_transform",
                                            "output_map",      "bce_loss",         "dice_loss",         "bce_loss@saturated",
                                            "dice_loss@saturated", "reprogram_wrapper", "gac_unet_16x16"};
    ASSERT_EQ(rows.size(), expected.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].name, expected[i]);
        EXPECT_TRUE(rows[i].passed) << rows[i].name << " " << rows[i].max_rel_error;
        EXPECT_GT(rows[i].coordinates, 0u);
        EXPECT_LT(rows[i].max_rel_error, rows[i].tolerance);
    }
    EXPECT_TRUE(all_passed(rows));
}

TEST(GradCheckSuite, LayerRowsUseTheTighterTolerance) {
    for (const auto& r : run_gradcheck_suite()) {
        const bool model_level = r.name == "gac_unet_16x16" || r.name == "reprogram_wrapper";
        EXPECT_EQ(r.tolerance, model_level ? 1e-4 : 1e-5) << r.name;
    }
}

TEST(GradCheckSuite, InjectedSignBugFails) {
    GradSuiteOptions o;
    o.inject_sign_bug = true;
    const auto rows = run_gradcheck_suite(o);
    EXPECT_FALSE(all_passed(rows));
    const auto bug = std::find_if(rows.begin(), rows.end(), [](const auto& r) { return r.name == "conv2d+sign_bug"; });
    ASSERT_NE(bug, rows.end());
    EXPECT_FALSE(bug->passed);
    EXPECT_NEAR(bug->max_rel_error, 2.0, 1e-6);
}
