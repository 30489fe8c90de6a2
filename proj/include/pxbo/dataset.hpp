#ifndef PXBO_DATASET_HPP
#define PXBO_DATASET_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <compare>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace pxbo {

/// Canonical identity of a grid location; row-major over the H x W grid.
struct LocationId {
    std::size_t index = 0;

    friend constexpr auto operator<=>(const LocationId&, const LocationId&) = default;
};

enum class PayloadKind { ImagePatch, Spectrum };

inline const char* to_string(PayloadKind kind)
{
    return kind == PayloadKind::ImagePatch ? "image_patch" : "spectrum";
}

inline PayloadKind payload_kind_from_string(const std::string& s)
{
    if (s == "image_patch")
        return PayloadKind::ImagePatch;
    if (s == "spectrum")
        return PayloadKind::Spectrum;
    throw FormatError("manifest field 'kind': expected \"image_patch\" or \"spectrum\", got \"" + s + "\"");
}

/// Shape of one observation. Image patches are rows x cols pixels (square);
/// spectra are channels x length, stored channel-major.
struct PayloadShape {
    PayloadKind kind = PayloadKind::ImagePatch;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    friend bool operator==(const PayloadShape&, const PayloadShape&) = default;
};

/// The discrete exploration space: H x W locations, each carrying one
/// observation payload. Immutable after construction.
class ObservationGrid {
public:
    ObservationGrid(std::string name, std::size_t height, std::size_t width, PayloadShape shape,
        std::vector<float> payloads, std::optional<std::vector<double>> oracle_score = std::nullopt,
        std::optional<double> data_range = std::nullopt)
        : name_(std::move(name)),
          height_(height),
          width_(width),
          shape_(shape),
          payloads_(std::move(payloads)),
          oracle_score_(std::move(oracle_score))
    {
        if (height_ == 0 || width_ == 0)
            throw ArgumentError("grid must have at least one location");
        if (shape_.size() == 0)
            throw ArgumentError("payload shape must be non-empty");
        if (shape_.kind == PayloadKind::ImagePatch && shape_.rows != shape_.cols)
            throw ArgumentError("image patches must be square");
        if (payloads_.size() != size() * shape_.size())
            throw SizeError("payload array", size() * shape_.size() * sizeof(float), payloads_.size() * sizeof(float));
        for (std::size_t i = 0; i < payloads_.size(); ++i) {
            if (!std::isfinite(payloads_[i]))
                throw DataError("non-finite payload value at location " + std::to_string(i / shape_.size())
                    + ", offset " + std::to_string(i % shape_.size()) + " (flat index " + std::to_string(i) + ")");
        }
        if (oracle_score_) {
            if (oracle_score_->size() != size())
                throw SizeError("oracle_score array", size() * sizeof(float), oracle_score_->size() * sizeof(float));
            for (std::size_t i = 0; i < oracle_score_->size(); ++i)
                if (!std::isfinite((*oracle_score_)[i]))
                    throw DataError("non-finite oracle_score at index " + std::to_string(i));
        }
        if (data_range) {
            if (!(std::isfinite(*data_range) && *data_range > 0))
                throw DataError("data_range must be finite and positive");
            data_range_ = *data_range;
        }
        else {
            auto [lo, hi] = std::minmax_element(payloads_.begin(), payloads_.end());
            double range = static_cast<double>(*hi) - static_cast<double>(*lo);
            data_range_ = range > 0 ? range : 1.0;
        }
    }

    const std::string& name() const { return name_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t size() const { return height_ * width_; }
    PayloadKind kind() const { return shape_.kind; }
    const PayloadShape& payload_shape() const { return shape_; }
    std::size_t payload_size() const { return shape_.size(); }

    std::size_t patch_window() const { return shape_.kind == PayloadKind::ImagePatch ? shape_.rows : 0; }
    std::size_t spectrum_length() const { return shape_.kind == PayloadKind::Spectrum ? shape_.cols : 0; }
    std::size_t channels() const { return shape_.kind == PayloadKind::Spectrum ? shape_.rows : 1; }

    double data_range() const { return data_range_; }
    const std::optional<std::vector<double>>& oracle_score() const { return oracle_score_; }
    std::span<const float> raw_payloads() const { return payloads_; }

    std::span<const float> payload(LocationId id) const
    {
        check(id);
        return std::span<const float>(payloads_).subspan(id.index * shape_.size(), shape_.size());
    }

    std::size_t row(LocationId id) const { return id.index / width_; }
    std::size_t col(LocationId id) const { return id.index % width_; }

    LocationId at(std::size_t row, std::size_t col) const
    {
        if (row >= height_ || col >= width_)
            throw ArgumentError("grid coordinate out of range");
        return LocationId{row * width_ + col};
    }

    bool contains(LocationId id) const { return id.index < size(); }

    void check(LocationId id) const
    {
        if (!contains(id))
            throw ConsistencyError("location " + std::to_string(id.index) + " outside grid of "
                + std::to_string(size()) + " locations");
    }

    /// FNV-1a over shape, payload bytes and oracle scores. Used to tie session
    /// snapshots to the grid they were recorded on.
    std::string fingerprint() const
    {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* data, std::size_t n) {
            const auto* p = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= p[i];
                h *= 1099511628211ull;
            }
        };
        std::uint64_t dims[5] = {height_, width_, static_cast<std::uint64_t>(shape_.kind), shape_.rows, shape_.cols};
        mix(dims, sizeof(dims));
        mix(payloads_.data(), payloads_.size() * sizeof(float));
        if (oracle_score_)
            mix(oracle_score_->data(), oracle_score_->size() * sizeof(double));
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h;
        return os.str();
    }

private:
    std::string name_;
    std::size_t height_;
    std::size_t width_;
    PayloadShape shape_;
    std::vector<float> payloads_;
    std::optional<std::vector<double>> oracle_score_;
    double data_range_ = 1.0;
};

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v)
{
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v & 0xff0000u) >> 8) | (v >> 24);
}

inline std::vector<char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::vector<float> read_f32_le(const std::filesystem::path& path, std::size_t count, const std::string& what)
{
    std::vector<char> bytes = read_file(path);
    if (bytes.size() != count * sizeof(float))
        throw SizeError(what + " file " + path.filename().string(), count * sizeof(float), bytes.size());
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t word;
        std::memcpy(&word, bytes.data() + i * 4, 4);
        if constexpr (std::endian::native == std::endian::big)
            word = byteswap32(word);
        std::memcpy(&out[i], &word, 4);
    }
    return out;
}

template <typename T>
void write_f32_le(const std::filesystem::path& path, std::span<const T> values)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw FormatError("cannot write " + path.string());
    for (T v : values) {
        float f = static_cast<float>(v);
        std::uint32_t word;
        std::memcpy(&word, &f, 4);
        if constexpr (std::endian::native == std::endian::big)
            word = byteswap32(word);
        out.write(reinterpret_cast<const char*>(&word), 4);
    }
}

template <typename T>
T manifest_field(const nlohmann::json& m, const char* key)
{
    if (!m.contains(key))
        throw FormatError(std::string("manifest missing field '") + key + "'");
    try {
        return m.at(key).get<T>();
    }
    catch (const nlohmann::json::exception&) {
        throw FormatError(std::string("manifest field '") + key + "' has the wrong type");
    }
}

} // namespace detail

/// Load a dataset bundle: a directory holding manifest.json plus raw
/// little-endian float32 files (location-major, then payload-major).
inline ObservationGrid load_bundle(const std::filesystem::path& dir)
{
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
        throw FormatError("bundle " + dir.string() + " has no manifest.json");

    nlohmann::json m;
    try {
        std::ifstream in(manifest_path);
        m = nlohmann::json::parse(in);
    }
    catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json is not valid JSON: " + std::string(e.what()));
    }
    if (!m.is_object())
        throw FormatError("manifest.json must hold a JSON object");

    auto name = detail::manifest_field<std::string>(m, "name");
    auto height = detail::manifest_field<std::size_t>(m, "height");
    auto width = detail::manifest_field<std::size_t>(m, "width");
    auto kind = payload_kind_from_string(detail::manifest_field<std::string>(m, "kind"));

    PayloadShape shape{kind, 0, 0};
    if (kind == PayloadKind::ImagePatch) {
        auto w = detail::manifest_field<std::size_t>(m, "patch_window");
        shape.rows = shape.cols = w;
    }
    else {
        shape.cols = detail::manifest_field<std::size_t>(m, "spectrum_length");
        shape.rows = detail::manifest_field<std::size_t>(m, "channels");
    }
    if (height == 0 || width == 0 || shape.size() == 0)
        throw FormatError("manifest declares an empty grid or payload");

    std::optional<double> data_range;
    if (m.contains("data_range") && !m["data_range"].is_null())
        data_range = detail::manifest_field<double>(m, "data_range");

    auto files = detail::manifest_field<nlohmann::json>(m, "files");
    if (!files.is_object() || !files.contains("payloads") || !files["payloads"].is_string())
        throw FormatError("manifest missing field 'files.payloads'");

    const std::size_t count = height * width * shape.size();
    auto payloads = detail::read_f32_le(dir / files["payloads"].get<std::string>(), count, "payloads");

    std::optional<std::vector<double>> oracle;
    if (files.contains("oracle_score") && !files["oracle_score"].is_null()) {
        if (!files["oracle_score"].is_string())
            throw FormatError("manifest field 'files.oracle_score' must be a string");
        auto raw = detail::read_f32_le(dir / files["oracle_score"].get<std::string>(), height * width, "oracle_score");
        oracle = std::vector<double>(raw.begin(), raw.end());
    }

    return ObservationGrid(std::move(name), height, width, shape, std::move(payloads), std::move(oracle), data_range);
}

/// Inverse of load_bundle. Oracle scores are narrowed to float32.
inline void write_bundle(const ObservationGrid& grid, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["name"] = grid.name();
    m["height"] = grid.height();
    m["width"] = grid.width();
    m["kind"] = to_string(grid.kind());
    if (grid.kind() == PayloadKind::ImagePatch) {
        m["patch_window"] = grid.patch_window();
    }
    else {
        m["spectrum_length"] = grid.spectrum_length();
        m["channels"] = grid.channels();
    }
    m["data_range"] = grid.data_range();
    m["files"]["payloads"] = "payloads.f32";
    detail::write_f32_le(dir / "payloads.f32", grid.raw_payloads());
    if (grid.oracle_score()) {
        m["files"]["oracle_score"] = "oracle_score.f32";
        detail::write_f32_le(dir / "oracle_score.f32", std::span<const double>(*grid.oracle_score()));
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << m.dump(2) << '\n';
}

// Synthetic domain-wall dataset.
//
// Every location maps to a latent t = index / (H*W - 1). With d = |t - t*|:
//   wall offset     delta(d) = kOffsetSlope * d          (fraction of image width)
//   wall curvature  kappa(d) = kCurvatureSlope * d
//   extra walls     n(d)     = d > kExtraWallThreshold ? 1 : 0
//   score           s(d)     = exp(-a delta^2 - b kappa^2 - c n)
// s is strictly decreasing in d, so the best location is the grid latent
// nearest t*. t* is irrational, which rules out ties.
namespace synthetic {

inline constexpr double kTargetLatent = 0.6180339887498949;
inline constexpr double kOffsetSlope = 0.5;
inline constexpr double kCurvatureSlope = 0.8;
inline constexpr double kExtraWallThreshold = 0.3;
inline constexpr double kOffsetWeight = 8.0;    // a
inline constexpr double kCurvatureWeight = 4.0; // b
inline constexpr double kExtraWallWeight = 1.0; // c

struct WallGeometry {
    double offset = 0;
    double curvature = 0;
    int extra_walls = 0;
};

inline WallGeometry geometry(double latent)
{
    const double d = std::abs(latent - kTargetLatent);
    return {kOffsetSlope * d, kCurvatureSlope * d, d > kExtraWallThreshold ? 1 : 0};
}

inline double score(double latent)
{
    const auto g = geometry(latent);
    return std::exp(-kOffsetWeight * g.offset * g.offset - kCurvatureWeight * g.curvature * g.curvature
        - kExtraWallWeight * g.extra_walls);
}

inline double latent(std::size_t index, std::size_t count)
{
    return count > 1 ? static_cast<double>(index) / static_cast<double>(count - 1) : 0.0;
}

/// Index of the location whose latent is nearest t*.
inline std::size_t best_index(std::size_t count)
{
    return static_cast<std::size_t>(std::llround(kTargetLatent * static_cast<double>(count - 1)));
}

/// Noise-free two-phase image (+1 left of the main wall, -1 right of it,
/// flipping again past the extra wall).
inline std::vector<float> render(double latent, std::size_t side)
{
    const auto g = geometry(latent);
    const double d = std::abs(latent - kTargetLatent);
    const double extra_x = 0.9 - 0.5 * (d - kExtraWallThreshold);
    std::vector<float> img(side * side);
    for (std::size_t i = 0; i < side; ++i) {
        const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(side);
        const double wall_x = 0.5 + g.offset + g.curvature * (4.0 * (y - 0.5) * (y - 0.5) - 1.0 / 3.0);
        for (std::size_t j = 0; j < side; ++j) {
            const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(side);
            float phase = x < wall_x ? 1.0f : -1.0f;
            if (g.extra_walls > 0 && x > extra_x)
                phase = -phase;
            img[i * side + j] = phase;
        }
    }
    return img;
}

} // namespace synthetic

/// Parametric stand-in for a generated domain-wall image set: each location
/// holds an image_side x image_side patch whose wall offset, curvature and
/// extra-wall count vary with the location's latent. Deterministic in seed.
inline ObservationGrid generate_domain_wall_grid(std::size_t height, std::size_t width, std::size_t image_side,
    double noise_sigma, std::uint64_t seed)
{
    if (height < 2 || width < 2)
        throw ArgumentError("synthetic grid needs H, W >= 2");
    if (image_side < 8)
        throw ArgumentError("synthetic image_side must be >= 8");
    if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma))
        throw ArgumentError("noise_sigma must be finite and >= 0");

    const std::size_t count = height * width;
    const std::size_t patch = image_side * image_side;
    std::vector<float> payloads;
    payloads.reserve(count * patch);
    std::vector<double> scores(count);

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);

    for (std::size_t i = 0; i < count; ++i) {
        const double t = synthetic::latent(i, count);
        auto img = synthetic::render(t, image_side);
        if (noise_sigma > 0)
            for (auto& px : img)
                px = static_cast<float>(px + noise(rng));
        payloads.insert(payloads.end(), img.begin(), img.end());
        // stored at float32 precision so bundles round-trip exactly
        scores[i] = static_cast<double>(static_cast<float>(synthetic::score(t)));
    }

    std::ostringstream name;
    name << "domain_wall_" << height << "x" << width << "_s" << seed;
    return ObservationGrid(name.str(), height, width, PayloadShape{PayloadKind::ImagePatch, image_side, image_side},
        std::move(payloads), std::move(scores));
}

/// Absolute shoelace area of the closed (voltage, response) curve of a
/// two-channel spectrum laid out channel-major: [v_0..v_{L-1}, r_0..r_{L-1}].
/// Point order is taken as measured.
template <std::floating_point T>
double loop_area(std::span<const T> spectrum)
{
    if (spectrum.size() % 2 != 0)
        throw ArgumentError("loop_area needs a two-channel spectrum");
    const std::size_t n = spectrum.size() / 2;
    if (n < 3)
        throw ArgumentError("loop_area needs at least 3 points");
    for (std::size_t i = 0; i < spectrum.size(); ++i)
        if (!std::isfinite(spectrum[i]))
            throw DataError("non-finite spectrum value at index " + std::to_string(i));

    auto v = spectrum.first(n);
    auto r = spectrum.subspan(n);
    double twice_area = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = (i + 1) % n;
        twice_area += static_cast<double>(v[i]) * static_cast<double>(r[k])
            - static_cast<double>(v[k]) * static_cast<double>(r[i]);
    }
    return std::abs(twice_area) / 2.0;
}

template <std::floating_point T>
double loop_area(const std::vector<T>& spectrum)
{
    return loop_area(std::span<const T>(spectrum));
}

/// Loop area of a grid location; the grid must hold two-channel spectra.
inline double loop_area(const ObservationGrid& grid, LocationId id)
{
    if (grid.kind() != PayloadKind::Spectrum || grid.channels() != 2)
        throw ArgumentError("loop_area needs a spectrum grid with 2 channels");
    return loop_area(grid.payload(id));
}

} // namespace pxbo

#endif // PXBO_DATASET_HPP
