#ifndef PXBO_SIMILARITY_HPP
#define PXBO_SIMILARITY_HPP

#include <algorithm>
#include <concepts>
#include <limits>
#include <span>
#include <vector>

#include "dataset.hpp"
#include "errors.hpp"

namespace pxbo {

struct SimilarityScore {
    double value = 0;
};

namespace detail {

inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

// Uniform mean over a length-7 window along one axis, kept only where the
// window lies fully inside (positions pad..n-pad-1 of the input).
inline std::vector<double> window_mean_1d(std::span<const double> in, std::size_t n, std::size_t stride)
{
    const std::size_t out_n = n - kSsimWindow + 1;
    std::vector<double> out(out_n);
    for (std::size_t i = 0; i < out_n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < kSsimWindow; ++k)
            s += in[(i + k) * stride];
        out[i] = s / static_cast<double>(kSsimWindow);
    }
    return out;
}

// Separable box filter over a rows x cols image, cropped to the interior.
inline std::vector<double> box_2d(const std::vector<double>& img, std::size_t rows, std::size_t cols)
{
    const std::size_t orows = rows - kSsimWindow + 1;
    const std::size_t ocols = cols - kSsimWindow + 1;
    // along columns (axis 0) first, then rows, matching ndimage's axis order
    std::vector<double> tmp(orows * cols);
    for (std::size_t c = 0; c < cols; ++c) {
        auto col = window_mean_1d(std::span<const double>(img).subspan(c), rows, cols);
        for (std::size_t r = 0; r < orows; ++r)
            tmp[r * cols + c] = col[r];
    }
    std::vector<double> out(orows * ocols);
    for (std::size_t r = 0; r < orows; ++r) {
        auto row = window_mean_1d(std::span<const double>(tmp).subspan(r * cols), cols, 1);
        std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(r * ocols));
    }
    return out;
}

inline double ssim_from_stats(const std::vector<double>& ux, const std::vector<double>& uy,
    const std::vector<double>& uxx, const std::vector<double>& uyy, const std::vector<double>& uxy,
    double window_points, double data_range)
{
    const double cov_norm = window_points / (window_points - 1.0);
    const double c1 = (kSsimK1 * data_range) * (kSsimK1 * data_range);
    const double c2 = (kSsimK2 * data_range) * (kSsimK2 * data_range);
    double total = 0;
    for (std::size_t i = 0; i < ux.size(); ++i) {
        const double vx = cov_norm * (uxx[i] - ux[i] * ux[i]);
        const double vy = cov_norm * (uyy[i] - uy[i] * uy[i]);
        const double vxy = cov_norm * (uxy[i] - ux[i] * uy[i]);
        const double a1 = 2 * ux[i] * uy[i] + c1;
        const double a2 = 2 * vxy + c2;
        const double b1 = ux[i] * ux[i] + uy[i] * uy[i] + c1;
        const double b2 = vx + vy + c2;
        total += (a1 * a2) / (b1 * b2);
    }
    return total / static_cast<double>(ux.size());
}

inline double ssim_2d(const std::vector<double>& x, const std::vector<double>& y, std::size_t rows, std::size_t cols,
    double data_range)
{
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    return ssim_from_stats(box_2d(x, rows, cols), box_2d(y, rows, cols), box_2d(xx, rows, cols),
        box_2d(yy, rows, cols), box_2d(xy, rows, cols), static_cast<double>(kSsimWindow * kSsimWindow), data_range);
}

inline double ssim_1d(std::span<const double> x, std::span<const double> y, double data_range)
{
    const std::size_t n = x.size();
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    return ssim_from_stats(window_mean_1d(x, n, 1), window_mean_1d(y, n, 1), window_mean_1d(xx, n, 1),
        window_mean_1d(yy, n, 1), window_mean_1d(xy, n, 1), static_cast<double>(kSsimWindow), data_range);
}

} // namespace detail

/// Mean structural similarity with a uniform 7-point (1-D) or 7x7 (2-D)
/// window, sample covariance, K1 = 0.01, K2 = 0.03 and edge cropping,
/// following skimage.metrics.structural_similarity defaults. Spectra are
/// compared channel by channel and the channel scores averaged.
template <typename T>
SimilarityScore ssim(std::span<const T> a, std::span<const T> b, const PayloadShape& shape, double data_range)
{
    if (a.size() != b.size() || a.size() != shape.size())
        throw ArgumentError("ssim inputs must share the payload shape");
    if (!(data_range > 0))
        throw ArgumentError("ssim data_range must be positive");

    std::vector<double> x(a.begin(), a.end());
    std::vector<double> y(b.begin(), b.end());

    if (shape.kind == PayloadKind::ImagePatch) {
        if (shape.rows < detail::kSsimWindow || shape.cols < detail::kSsimWindow)
            throw ArgumentError("ssim payload smaller than the 7x7 window");
        return {detail::ssim_2d(x, y, shape.rows, shape.cols, data_range)};
    }

    if (shape.cols < detail::kSsimWindow)
        throw ArgumentError("ssim spectrum shorter than the 7-point window");
    double total = 0;
    for (std::size_t ch = 0; ch < shape.rows; ++ch) {
        auto xs = std::span<const double>(x).subspan(ch * shape.cols, shape.cols);
        auto ys = std::span<const double>(y).subspan(ch * shape.cols, shape.cols);
        total += detail::ssim_1d(xs, ys, data_range);
    }
    return {total / static_cast<double>(shape.rows)};
}

template <typename T>
SimilarityScore ssim(const std::vector<T>& a, const std::vector<T>& b, const PayloadShape& shape, double data_range)
{
    return ssim(std::span<const T>(a), std::span<const T>(b), shape, data_range);
}

/// Explored location whose payload is most similar to new_payload; ties go
/// to the lowest index.
inline LocationId find_proxy(std::span<const float> new_payload, std::span<const LocationId> explored,
    const ObservationGrid& grid)
{
    if (explored.empty())
        throw ArgumentError("find_proxy needs at least one explored location");
    if (new_payload.size() != grid.payload_size())
        throw ArgumentError("find_proxy payload shape does not match the grid");

    std::vector<LocationId> order(explored.begin(), explored.end());
    std::sort(order.begin(), order.end());

    LocationId best = order.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (LocationId id : order) {
        const double s = ssim(new_payload, grid.payload(id), grid.payload_shape(), grid.data_range()).value;
        if (s > best_score) {
            best_score = s;
            best = id;
        }
    }
    return best;
}

} // namespace pxbo

#endif // PXBO_SIMILARITY_HPP
