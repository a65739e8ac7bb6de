#include "dynfield/evalkit/metrics.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace dynfield;

namespace {

Image random_image(int w, int h, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0, 1);
    Image img(w, h, c);
    for (double& v : img.data) v = u(rng);
    return img;
}

// Direct 2-D windowed evaluation with an explicitly built Gaussian window.
double reference_ssim(const Image& a, const Image& b) {
    const int n = 11;
    double win[11][11], s = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
            s += win[i][j];
        }
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0;
    for (int c = 0; c < a.channels; ++c) {
        double acc = 0;
        int count = 0;
        for (int y = 0; y + n <= a.height; ++y)
            for (int x = 0; x + n <= a.width; ++x) {
                double mx = 0, my = 0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        mx += win[i][j] / s * a.at(x + j, y + i, c);
                        my += win[i][j] / s * b.at(x + j, y + i, c);
                    }
                double vx = 0, vy = 0, cv = 0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double dx = a.at(x + j, y + i, c) - mx, dy = b.at(x + j, y + i, c) - my;
                        vx += win[i][j] / s * dx * dx;
                        vy += win[i][j] / s * dy * dy;
                        cv += win[i][j] / s * dx * dy;
                    }
                acc += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        total += acc / count;
    }
    return total / a.channels;
}

}  // namespace

TEST(Psnr, HandValues) {
    Image a(4, 4, 3, 0.5), b(4, 4, 3, 0.6);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
    Image black(4, 4, 3, 0.0), white(4, 4, 3, 1.0);
    EXPECT_NEAR(psnr(black, white), 0.0, 1e-12);
    EXPECT_THROW(psnr(a, Image(4, 5, 3)), UsageError);
}

TEST(Psnr, SymmetricAndMonotone) {
    const Image a = random_image(8, 8, 3, 1), b = random_image(8, 8, 3, 2);
    EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
    double last = kPsnrCap + 1;
    for (double off : {0.0, 0.01, 0.05, 0.2}) {
        Image c = a;
        for (double& v : c.data) v = std::clamp(v + off, 0.0, 1.0);
        const double p = psnr(a, c);
        EXPECT_LT(p, last);
        last = p;
    }
}

TEST(Ssim, IdentityAndSymmetry) {
    const Image a = random_image(16, 16, 3, 3), b = random_image(16, 16, 3, 4);
    EXPECT_EQ(ssim(a, a), 1.0);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
    EXPECT_THROW(ssim(Image(10, 10, 3), Image(10, 10, 3)), UsageError);
}

TEST(Ssim, ConstantOffsetIsLuminanceOnly) {
    const Image a(16, 16, 3, 0.4), b(16, 16, 3, 0.5);
    const double c1 = 1e-4;
    const double lum = (2 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
    EXPECT_NEAR(ssim(a, b), lum, 1e-6);
    EXPECT_NEAR(ssim(a, b), reference_ssim(a, b), 1e-6);
}

TEST(Ssim, MatchesDirectReference) {
    const Image a = random_image(20, 17, 3, 5);
    Image b = a;
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 0.05);
    for (double& v : b.data) v = std::clamp(v + n(rng), 0.0, 1.0);
    EXPECT_NEAR(ssim(a, b), reference_ssim(a, b), 1e-10);
    const Image c = random_image(20, 17, 3, 7);
    EXPECT_NEAR(ssim(a, c), reference_ssim(a, c), 1e-10);
}

TEST(ShadowHistogram, Placement) {
    const auto z = shadow_histogram(Image(5, 4, 1, 0.0), 10);
    EXPECT_EQ(z.counts[0], 20u);
    EXPECT_DOUBLE_EQ(z.percent[0], 100.0);
    const auto h = shadow_histogram(Image(5, 4, 1, 0.5), 10);
    EXPECT_EQ(h.counts[5], 20u);
    EXPECT_DOUBLE_EQ(h.edges[5], 0.5);
    const auto one = shadow_histogram(Image(2, 2, 1, 1.0), 10);
    EXPECT_EQ(one.counts[9], 4u);
}

TEST(ShadowHistogram, CountsConserved) {
    const Image m = random_image(13, 7, 1, 9);
    for (int bins : {1, 3, 10, 64}) {
        const auto h = shadow_histogram(m, bins);
        std::size_t s = 0;
        double p = 0;
        for (std::size_t i = 0; i < h.counts.size(); ++i) {
            s += h.counts[i];
            p += h.percent[i];
        }
        EXPECT_EQ(s, 91u);
        EXPECT_NEAR(p, 100.0, 1e-9);
    }
}

TEST(ShadowHistogram, CsvAndPlotExport) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "dynfield_hist";
    fs::create_directories(dir);
    const auto h = shadow_histogram(random_image(8, 8, 1, 2), 10);
    write_histogram_csv(h, (dir / "h.csv").string());
    write_png((dir / "h.png").string(), histogram_plot(h));
    EXPECT_GT(fs::file_size(dir / "h.csv"), 20u);
    const Image back = read_png((dir / "h.png").string());
    EXPECT_EQ(back.width, 320);
    fs::remove_all(dir);
}

TEST(Holdout, EveryTenthSkippingFirst) {
    const auto h = holdout_frames(199);
    ASSERT_EQ(h.size(), 19u);
    EXPECT_EQ(h.front(), 10);
    EXPECT_EQ(h.back(), 190);
    EXPECT_EQ(holdout_frames(30), (std::vector<int>{10, 20}));
}

TEST(MaskIou, HandCases) {
    Image a(4, 1, 1), b(4, 1, 1);
    a.data = {1, 1, 0, 0};
    b.data = {0, 1, 1, 0};
    EXPECT_NEAR(mask_iou(a, b), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(mask_iou(Image(2, 2, 1), Image(2, 2, 1)), 1.0);
}
