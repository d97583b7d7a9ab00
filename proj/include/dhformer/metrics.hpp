#pragma once
#include <string>
#include <vector>

#include "dhformer/tensor.hpp"

namespace dhformer {

// Full-reference quality metrics on [0,1] images. Color inputs are reduced
// to luma (0.299/0.587/0.114) for SSIM and FSIM.

// Identical images yield +infinity; aggregates replace that with this cap.
inline constexpr double kPsnrCap = 120.0;

// [3,H,W] -> [H,W]; a 1-channel or 2-D input passes through unchanged.
Tensor to_luma(const Tensor& img);

double psnr(const Tensor& x, const Tensor& y, double max_val);

// Gaussian-windowed (11x11, sigma 1.5) mean over valid window positions of
// luminance * contrast * structure with C1=(0.01 max)^2, C2=(0.03 max)^2,
// C3=C2/2. Inputs must be at least 11x11.
double ssim(const Tensor& x, const Tensor& y, double max_val);

// Feature similarity: phase congruency (log-Gabor bank, 4 scales x 4
// orientations) combined with Scharr gradient magnitude, weighted by the
// pointwise max phase congruency. Inputs in [0,1], internally rescaled to
// [0,255]; both dimensions must be >= 32. Two images with zero phase
// congruency everywhere (e.g. constants) compare as 1.
double fsim(const Tensor& x, const Tensor& y);

struct MetricRow {
    std::string image;
    double psnr_db = 0;  // already capped
    double ssim = 0;
    double fsim = 0;
    bool psnr_was_capped = false;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    double mean_psnr = 0;
    double mean_ssim = 0;
    double mean_fsim = 0;
};

MetricRow measure(const std::string& image_id, const Tensor& dehazed, const Tensor& clear);

// Arithmetic means over rows; throws ConfigError on empty input.
MetricReport aggregate(std::vector<MetricRow> rows);

// Header `image,psnr_db,ssim,fsim`, one row per image, then a `mean,...`
// row. Values are written with 17 significant digits so a read-back is
// bit-exact; capped rows are noted in a trailing comment line.
void write_report_csv(const std::string& path, const MetricReport& report);
MetricReport read_report_csv(const std::string& path);

}  // namespace dhformer
