#include "dhformer/metrics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace dhformer {

Tensor to_luma(const Tensor& img) {
    if (img.ndim() == 2 || (img.ndim() == 3 && img.dim(0) == 1)) {
        Tensor out = Tensor::zeros(img.ndim() == 2 ? img.shape()
                                                   : Shape{img.dim(1), img.dim(2)});
        std::copy(img.values().begin(), img.values().end(), out.raw().begin());
        return out;
    }
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw DimensionError("to_luma expects [3,H,W], [1,H,W] or [H,W], got " +
                             shape_str(img.shape()));
    int H = img.dim(1), W = img.dim(2);
    int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out = Tensor::zeros({H, W});
    const auto& v = img.values();
    auto& o = out.raw();
    for (int64_t i = 0; i < plane; ++i)
        o[i] = 0.299 * v[i] + 0.587 * v[plane + i] + 0.114 * v[2 * plane + i];
    return out;
}

double psnr(const Tensor& x, const Tensor& y, double max_val) {
    if (x.shape() != y.shape())
        throw DimensionError("psnr shape mismatch: " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
    if (!(max_val > 0)) throw ContractError("psnr max_val must be > 0");
    const auto& xv = x.values();
    const auto& yv = y.values();
    double mse = 0;
    for (size_t i = 0; i < xv.size(); ++i) {
        double d = xv[i] - yv[i];
        mse += d * d;
    }
    mse /= static_cast<double>(xv.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse);
}

// ------------------------------------------------------------------- ssim

double ssim(const Tensor& x, const Tensor& y, double max_val) {
    if (x.shape() != y.shape()) throw DimensionError("ssim shape mismatch");
    Tensor lx = to_luma(x), ly = to_luma(y);
    int H = lx.dim(0), W = lx.dim(1);
    constexpr int win = 11;
    constexpr double sigma = 1.5;
    if (H < win || W < win)
        throw DimensionError("ssim needs at least 11x11 input, got " + shape_str(x.shape()));

    double w[win][win];
    double wsum = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double dy = i - (win - 1) / 2.0, dx = j - (win - 1) / 2.0;
            w[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            wsum += w[i][j];
        }
    for (auto& row : w)
        for (auto& v : row) v /= wsum;

    const double c1 = (0.01 * max_val) * (0.01 * max_val);
    const double c2 = (0.03 * max_val) * (0.03 * max_val);
    const auto& a = lx.values();
    const auto& b = ly.values();

    double total = 0;
    int64_t count = 0;
    for (int oy = 0; oy + win <= H; ++oy)
        for (int ox = 0; ox + win <= W; ++ox) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    double xv = a[static_cast<int64_t>(oy + i) * W + (ox + j)];
                    double yv = b[static_cast<int64_t>(oy + i) * W + (ox + j)];
                    double wij = w[i][j];
                    mx += wij * xv;
                    my += wij * yv;
                    sxx += wij * xv * xv;
                    syy += wij * yv * yv;
                    sxy += wij * xv * yv;
                }
            double vx = sxx - mx * mx;
            double vy = syy - my * my;
            double cov = sxy - mx * my;
            // c3 = c2/2 collapses contrast*structure to one quotient
            double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            ++count;
        }
    return total / static_cast<double>(count);
}

// ------------------------------------------------------------------- fsim

namespace {

// MATLAB-convention frequency coordinate after ifftshift: index 0 holds the
// DC term; odd sizes normalize by (n-1) so the range spans [-0.5, 0.5].
double freq_coord(int u, int n) {
    int half = (n % 2 == 0) ? n / 2 : (n + 1) / 2;
    double denom = (n % 2 == 0) ? n : n - 1;
    return (u < half ? u : u - n) / denom;
}

std::vector<double> scharr_same(const std::vector<double>& im, int H, int W, bool horizontal) {
    // [3 0 -3; 10 0 -10; 3 0 -3]/16 and its transpose, zero padded
    static const double kx[3][3] = {{3, 0, -3}, {10, 0, -10}, {3, 0, -3}};
    std::vector<double> out(im.size(), 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            for (int i = -1; i <= 1; ++i)
                for (int j = -1; j <= 1; ++j) {
                    int yy = y + i, xx = x + j;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    double k = horizontal ? kx[i + 1][j + 1] : kx[j + 1][i + 1];
                    s += k * im[static_cast<int64_t>(yy) * W + xx];
                }
            out[static_cast<int64_t>(y) * W + x] = s / 16.0;
        }
    return out;
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Phase congruency map via a log-Gabor filter bank (4 scales, 4
// orientations), with noise threshold estimated from the smallest-scale
// amplitude response.
std::vector<double> phase_congruency(const std::vector<double>& im, int H, int W) {
    constexpr int nscale = 4, norient = 4;
    constexpr double min_wavelength = 6.0, mult = 2.0, sigma_onf = 0.55;
    constexpr double d_theta_sigma = 1.2, noise_k = 2.0, cut_off = 0.5, gain = 10.0;
    constexpr double eps = 1e-4;
    const double theta_sigma = M_PI / norient / d_theta_sigma;
    const int64_t n = static_cast<int64_t>(H) * W;

    std::vector<double> radius(n), sin_theta(n), cos_theta(n), lowpass(n);
    for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
            double fy = freq_coord(v, H), fx = freq_coord(u, W);
            double r = std::sqrt(fx * fx + fy * fy);
            int64_t i = static_cast<int64_t>(v) * W + u;
            double th = std::atan2(-fy, fx);
            sin_theta[i] = std::sin(th);
            cos_theta[i] = std::cos(th);
            lowpass[i] = 1.0 / (1.0 + std::pow(r / 0.45, 30.0));
            radius[i] = (v == 0 && u == 0) ? 1.0 : r;
        }

    std::vector<std::vector<double>> log_gabor(nscale, std::vector<double>(n));
    const double denom = 2.0 * std::log(sigma_onf) * std::log(sigma_onf);
    for (int s = 0; s < nscale; ++s) {
        double fo = 1.0 / (min_wavelength * std::pow(mult, s));
        for (int64_t i = 0; i < n; ++i) {
            double lr = std::log(radius[i] / fo);
            log_gabor[s][i] = std::exp(-lr * lr / denom) * lowpass[i];
        }
        log_gabor[s][0] = 0.0;
    }

    fftw_complex* buf = fftw_alloc_complex(n);
    fftw_complex* spec = fftw_alloc_complex(n);
    fftw_complex* resp = fftw_alloc_complex(n);
    fftw_plan fwd = fftw_plan_dft_2d(H, W, buf, spec, FFTW_FORWARD, FFTW_ESTIMATE);
    fftw_plan bwd = fftw_plan_dft_2d(H, W, buf, resp, FFTW_BACKWARD, FFTW_ESTIMATE);

    for (int64_t i = 0; i < n; ++i) {
        buf[i][0] = im[i];
        buf[i][1] = 0.0;
    }
    fftw_execute(fwd);
    std::vector<double> spec_re(n), spec_im(n);
    for (int64_t i = 0; i < n; ++i) {
        spec_re[i] = spec[i][0];
        spec_im[i] = spec[i][1];
    }

    std::vector<double> pc(n, 0.0);
    std::vector<std::vector<double>> es(nscale, std::vector<double>(n));
    std::vector<std::vector<double>> os(nscale, std::vector<double>(n));
    std::vector<double> spread(n), sum_e(n), sum_o(n), sum_an(n), max_an(n), energy(n);

    for (int o = 0; o < norient; ++o) {
        double angl = o * M_PI / norient;
        double ca = std::cos(angl), sa = std::sin(angl);
        for (int64_t i = 0; i < n; ++i) {
            double ds = sin_theta[i] * ca - cos_theta[i] * sa;
            double dc = cos_theta[i] * ca + sin_theta[i] * sa;
            double dt = std::fabs(std::atan2(ds, dc));
            spread[i] = std::exp(-dt * dt / (2.0 * theta_sigma * theta_sigma));
        }
        std::fill(sum_e.begin(), sum_e.end(), 0.0);
        std::fill(sum_o.begin(), sum_o.end(), 0.0);
        std::fill(sum_an.begin(), sum_an.end(), 0.0);
        double tau = 0;
        for (int s = 0; s < nscale; ++s) {
            for (int64_t i = 0; i < n; ++i) {
                double f = log_gabor[s][i] * spread[i];
                buf[i][0] = spec_re[i] * f;
                buf[i][1] = spec_im[i] * f;
            }
            fftw_execute(bwd);
            double inv_n = 1.0 / static_cast<double>(n);
            std::vector<double> an(n);
            for (int64_t i = 0; i < n; ++i) {
                double e = resp[i][0] * inv_n;
                double od = resp[i][1] * inv_n;
                es[s][i] = e;
                os[s][i] = od;
                an[i] = std::hypot(e, od);
                sum_an[i] += an[i];
                sum_e[i] += e;
                sum_o[i] += od;
            }
            if (s == 0) {
                tau = median_of(an) / std::sqrt(std::log(4.0));
                max_an = an;
            } else {
                for (int64_t i = 0; i < n; ++i) max_an[i] = std::max(max_an[i], an[i]);
            }
        }

        std::fill(energy.begin(), energy.end(), 0.0);
        for (int64_t i = 0; i < n; ++i) {
            double xe = std::sqrt(sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]) + eps;
            double me = sum_e[i] / xe, mo = sum_o[i] / xe;
            for (int s = 0; s < nscale; ++s)
                energy[i] += es[s][i] * me + os[s][i] * mo -
                             std::fabs(es[s][i] * mo - os[s][i] * me);
        }

        // expected noise response: amplitudes fall geometrically with scale
        double total_tau =
            tau * (1.0 - std::pow(1.0 / mult, nscale)) / (1.0 - 1.0 / mult);
        double t_noise = (total_tau * std::sqrt(M_PI / 2.0) +
                          noise_k * total_tau * std::sqrt((4.0 - M_PI) / 2.0)) /
                         1.7;
        for (int64_t i = 0; i < n; ++i) {
            double e = std::max(energy[i] - t_noise, 0.0);
            double width = (sum_an[i] / (max_an[i] + eps)) / nscale;
            double weight = 1.0 / (1.0 + std::exp((cut_off - width) * gain));
            pc[i] += weight * e / (sum_an[i] + eps);
        }
    }

    fftw_destroy_plan(fwd);
    fftw_destroy_plan(bwd);
    fftw_free(buf);
    fftw_free(spec);
    fftw_free(resp);
    return pc;
}

// MATLAB-style 'same' box filter followed by stride-F subsampling.
void downsample_for_fsim(std::vector<double>& im, int& H, int& W) {
    int F = std::max(1, static_cast<int>(std::lround(std::min(H, W) / 256.0)));
    if (F == 1) return;
    int off = F / 2;  // 'same' cropping origin of the full convolution
    std::vector<double> smooth(im.size(), 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            for (int a = 0; a < F; ++a)
                for (int b = 0; b < F; ++b) {
                    int yy = y + off - a, xx = x + off - b;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    s += im[static_cast<int64_t>(yy) * W + xx];
                }
            smooth[static_cast<int64_t>(y) * W + x] = s / (F * F);
        }
    int nh = (H + F - 1) / F, nw = (W + F - 1) / F;
    std::vector<double> out(static_cast<int64_t>(nh) * nw);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x)
            out[static_cast<int64_t>(y) * nw + x] =
                smooth[static_cast<int64_t>(y) * F * W + x * F];
    im = std::move(out);
    H = nh;
    W = nw;
}

}  // namespace

double fsim(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw DimensionError("fsim shape mismatch");
    Tensor lx = to_luma(x), ly = to_luma(y);
    int H = lx.dim(0), W = lx.dim(1);
    if (H < 32 || W < 32)
        throw DimensionError("fsim needs both dimensions >= 32, got " + shape_str(x.shape()));

    std::vector<double> a = lx.values(), b = ly.values();
    for (auto& v : a) v *= 255.0;
    for (auto& v : b) v *= 255.0;
    int Ha = H, Wa = W;
    downsample_for_fsim(a, Ha, Wa);
    int Hb = H, Wb = W;
    downsample_for_fsim(b, Hb, Wb);

    std::vector<double> pc1 = phase_congruency(a, Ha, Wa);
    std::vector<double> pc2 = phase_congruency(b, Ha, Wa);
    std::vector<double> gx1 = scharr_same(a, Ha, Wa, true);
    std::vector<double> gy1 = scharr_same(a, Ha, Wa, false);
    std::vector<double> gx2 = scharr_same(b, Ha, Wa, true);
    std::vector<double> gy2 = scharr_same(b, Ha, Wa, false);

    constexpr double t1 = 0.85, t2 = 160.0;
    double num = 0, den = 0;
    for (size_t i = 0; i < pc1.size(); ++i) {
        double g1 = std::hypot(gx1[i], gy1[i]);
        double g2 = std::hypot(gx2[i], gy2[i]);
        double s_pc = (2.0 * pc1[i] * pc2[i] + t1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + t1);
        double s_g = (2.0 * g1 * g2 + t2) / (g1 * g1 + g2 * g2 + t2);
        double pcm = std::max(pc1[i], pc2[i]);
        num += s_pc * s_g * pcm;
        den += pcm;
    }
    if (den == 0.0) return 1.0;  // no phase structure anywhere: images featureless
    return num / den;
}

// ----------------------------------------------------------------- reports

MetricRow measure(const std::string& image_id, const Tensor& dehazed, const Tensor& clear) {
    MetricRow row;
    row.image = image_id;
    double p = psnr(dehazed, clear, 1.0);
    if (std::isinf(p)) {
        row.psnr_db = kPsnrCap;
        row.psnr_was_capped = true;
    } else {
        row.psnr_db = p;
    }
    row.ssim = ssim(dehazed, clear, 1.0);
    row.fsim = fsim(dehazed, clear);
    return row;
}

MetricReport aggregate(std::vector<MetricRow> rows) {
    if (rows.empty()) throw ConfigError("metric aggregation over zero rows");
    MetricReport r;
    r.rows = std::move(rows);
    for (const auto& row : r.rows) {
        r.mean_psnr += row.psnr_db;
        r.mean_ssim += row.ssim;
        r.mean_fsim += row.fsim;
    }
    double n = static_cast<double>(r.rows.size());
    r.mean_psnr /= n;
    r.mean_ssim /= n;
    r.mean_fsim /= n;
    return r;
}

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t c = line.find(',', start);
        out.push_back(line.substr(start, c == std::string::npos ? c : c - start));
        if (c == std::string::npos) break;
        start = c + 1;
    }
    return out;
}

}  // namespace

void write_report_csv(const std::string& path, const MetricReport& report) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << "image,psnr_db,ssim,fsim\n";
    std::string capped;
    for (const auto& r : report.rows) {
        out << r.image << ',' << fmt17(r.psnr_db) << ',' << fmt17(r.ssim) << ','
            << fmt17(r.fsim) << '\n';
        if (r.psnr_was_capped) capped += (capped.empty() ? "" : " ") + r.image;
    }
    out << "mean," << fmt17(report.mean_psnr) << ',' << fmt17(report.mean_ssim) << ','
        << fmt17(report.mean_fsim) << '\n';
    if (!capped.empty())
        out << "# psnr capped at " << fmt17(kPsnrCap) << " dB for: " << capped << '\n';
}

MetricReport read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read report: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "image,psnr_db,ssim,fsim")
        throw FormatError("bad report header in " + path);
    MetricReport r;
    bool saw_mean = false;
    std::string capped_names;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            size_t colon = line.find(": ");
            if (colon != std::string::npos) capped_names = line.substr(colon + 2);
            continue;
        }
        auto f = split_csv(line);
        if (f.size() != 4) throw FormatError("bad report row: " + line);
        if (f[0] == "mean") {
            r.mean_psnr = std::stod(f[1]);
            r.mean_ssim = std::stod(f[2]);
            r.mean_fsim = std::stod(f[3]);
            saw_mean = true;
        } else {
            MetricRow row;
            row.image = f[0];
            row.psnr_db = std::stod(f[1]);
            row.ssim = std::stod(f[2]);
            row.fsim = std::stod(f[3]);
            r.rows.push_back(std::move(row));
        }
    }
    if (!saw_mean) throw FormatError("report missing mean row: " + path);
    if (!capped_names.empty()) {
        std::istringstream names(capped_names);
        std::string name;
        while (names >> name)
            for (auto& row : r.rows)
                if (row.image == name) row.psnr_was_capped = true;
    }
    return r;
}

}  // namespace dhformer
