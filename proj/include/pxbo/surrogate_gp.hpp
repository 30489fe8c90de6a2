#ifndef PXBO_SURROGATE_GP_HPP
#define PXBO_SURROGATE_GP_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "dataset.hpp"
#include "errors.hpp"

namespace pxbo {

enum class SurrogateMode { Coordinate, Feature };

inline const char* to_string(SurrogateMode m)
{
    return m == SurrogateMode::Coordinate ? "coord" : "feature";
}

inline SurrogateMode surrogate_mode_from_string(const std::string& s)
{
    if (s == "coord" || s == "coordinate")
        return SurrogateMode::Coordinate;
    if (s == "feature")
        return SurrogateMode::Feature;
    throw ArgumentError("unknown surrogate mode \"" + s + "\"");
}

/// GP inputs for every grid location, one row each.
struct SurrogateInput {
    SurrogateMode mode = SurrogateMode::Coordinate;
    Eigen::MatrixXd points;
    /// Largest per-dimension range over all rows; sets the lengthscale grid.
    double input_scale = 1.0;
    /// Feature mode only: payload_size x d orthonormal projection basis.
    Eigen::MatrixXd directions;

    std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }

    Eigen::MatrixXd select(std::span<const LocationId> ids) const
    {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), points.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i].index >= static_cast<std::size_t>(points.rows()))
                throw ConsistencyError("location " + std::to_string(ids[i].index) + " has no surrogate input");
            out.row(static_cast<Eigen::Index>(i)) = points.row(static_cast<Eigen::Index>(ids[i].index));
        }
        return out;
    }
};

namespace detail {

// Principal directions of the centered rows of data, largest variance first,
// each flipped so its largest-magnitude component is positive.
inline Eigen::MatrixXd principal_directions(const Eigen::MatrixXd& centered, std::size_t wanted)
{
    const Eigen::Index n = centered.rows();
    const Eigen::Index d = centered.cols();
    Eigen::MatrixXd basis;

    if (d <= n || d <= 1024) {
        Eigen::MatrixXd cov = centered.transpose() * centered;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        const Eigen::Index k = std::min<Eigen::Index>(static_cast<Eigen::Index>(wanted), d);
        basis.resize(d, k);
        for (Eigen::Index c = 0; c < k; ++c)
            basis.col(c) = es.eigenvectors().col(d - 1 - c);
    }
    else {
        // More dimensions than samples: go through the Gram matrix and keep
        // only directions with non-negligible variance.
        Eigen::MatrixXd gram = centered * centered.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
        const double top = std::max(es.eigenvalues()(n - 1), 0.0);
        std::vector<Eigen::VectorXd> cols;
        for (Eigen::Index c = n - 1; c >= 0 && cols.size() < wanted; --c) {
            if (es.eigenvalues()(c) <= 1e-12 * top || es.eigenvalues()(c) <= 0)
                break;
            Eigen::VectorXd v = centered.transpose() * es.eigenvectors().col(c);
            cols.push_back(v / v.norm());
        }
        basis.resize(d, static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c)
            basis.col(static_cast<Eigen::Index>(c)) = cols[c];
    }

    for (Eigen::Index c = 0; c < basis.cols(); ++c) {
        Eigen::Index arg = 0;
        for (Eigen::Index r = 1; r < basis.rows(); ++r)
            if (std::abs(basis(r, c)) > std::abs(basis(arg, c)))
                arg = r;
        if (basis(arg, c) < 0)
            basis.col(c) *= -1.0;
    }
    return basis;
}

} // namespace detail

/// Coordinate mode: (row/(H-1), col/(W-1)). Feature mode: payloads centered
/// over the whole grid and projected on the top feature_dim principal
/// directions.
inline SurrogateInput make_inputs(const ObservationGrid& grid, SurrogateMode mode, std::size_t feature_dim = 8)
{
    if (grid.height() == 1 || grid.width() == 1)
        throw ArgumentError("degenerate grid axis: surrogate inputs need H >= 2 and W >= 2");

    SurrogateInput in;
    in.mode = mode;
    const auto n = static_cast<Eigen::Index>(grid.size());

    if (mode == SurrogateMode::Coordinate) {
        in.points.resize(n, 2);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const LocationId id{i};
            in.points(static_cast<Eigen::Index>(i), 0)
                = static_cast<double>(grid.row(id)) / static_cast<double>(grid.height() - 1);
            in.points(static_cast<Eigen::Index>(i), 1)
                = static_cast<double>(grid.col(id)) / static_cast<double>(grid.width() - 1);
        }
    }
    else {
        const auto d = static_cast<Eigen::Index>(grid.payload_size());
        Eigen::MatrixXd data(n, d);
        auto raw = grid.raw_payloads();
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index k = 0; k < d; ++k)
                data(i, k) = static_cast<double>(raw[static_cast<std::size_t>(i * d + k)]);
        Eigen::RowVectorXd mean = data.colwise().mean();
        data.rowwise() -= mean;
        in.directions = detail::principal_directions(data, feature_dim);
        in.points = data * in.directions;
    }

    double scale = 0;
    for (Eigen::Index c = 0; c < in.points.cols(); ++c)
        scale = std::max(scale, in.points.col(c).maxCoeff() - in.points.col(c).minCoeff());
    in.input_scale = scale > 0 ? scale : 1.0;
    return in;
}

struct GpHyperparameters {
    double lengthscale = 1.0;
    double signal_variance = 1.0;
    double noise_variance = 1e-6;
};

struct GpEvaluation {
    GpHyperparameters hyper;
    double log_marginal_likelihood = 0;
};

/// Smallest noise variance accepted by fit_fixed.
inline constexpr double kJitterFloor = 1e-10;
inline constexpr double kJitterLadder[] = {1e-6, 1e-4, 1e-2};

/// Hyperparameter grid for fit_gp. Lengthscales are multiples of the input
/// scale.
struct GpSearchSpace {
    double lengthscale_min = 0.01;
    double lengthscale_max = 3.0;
    std::size_t lengthscale_points = 16;
    std::vector<double> signal_variances{0.25, 1.0, 4.0};
    std::vector<double> noise_variances{1e-6, 1e-4, 1e-2, 1e-1};
};

inline double rbf(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b,
    const GpHyperparameters& h)
{
    return h.signal_variance * std::exp(-(a - b).squaredNorm() / (2.0 * h.lengthscale * h.lengthscale));
}

/// GP regression with an RBF kernel on standardized targets. Holds the
/// Cholesky factor of K + noise*I.
class GpModel {
public:
    /// Fits with fixed hyperparameters. Escalates the noise through the
    /// jitter ladder if the factorization fails.
    static GpModel fit_fixed(const Eigen::MatrixXd& inputs, std::span<const double> targets, const GpHyperparameters& h)
    {
        if (inputs.rows() < 1 || static_cast<std::size_t>(inputs.rows()) != targets.size())
            throw ArgumentError("GP fit: inputs and targets disagree in count");
        if (!(h.lengthscale > 0 && h.signal_variance > 0 && h.noise_variance >= kJitterFloor))
            throw ArgumentError("GP fit: invalid hyperparameters");
        for (double t : targets)
            if (!std::isfinite(t))
                throw DataError("GP fit: non-finite target");

        GpModel m;
        m.inputs_ = inputs;
        m.hyper_ = h;
        const auto n = inputs.rows();

        double mean = 0;
        for (double t : targets)
            mean += t;
        mean /= static_cast<double>(n);
        double var = 0;
        for (double t : targets)
            var += (t - mean) * (t - mean);
        var /= static_cast<double>(n);
        m.target_mean_ = mean;
        m.target_scale_ = var > 1e-24 ? std::sqrt(var) : 1.0;
        m.y_.resize(n);
        for (Eigen::Index i = 0; i < n; ++i)
            m.y_(i) = (targets[static_cast<std::size_t>(i)] - mean) / m.target_scale_;

        Eigen::MatrixXd K(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j <= i; ++j)
                K(i, j) = K(j, i) = rbf(inputs.row(i), inputs.row(j), h);

        double noise = h.noise_variance;
        std::size_t rung = 0;
        while (true) {
            Eigen::MatrixXd A = K;
            A.diagonal().array() += noise;
            m.llt_.compute(A);
            bool ok = m.llt_.info() == Eigen::Success;
            if (ok) {
                auto diag = m.llt_.matrixLLT().diagonal();
                ok = (diag.array() > 0).all() && diag.allFinite();
            }
            if (ok)
                break;
            if (rung == std::size(kJitterLadder))
                throw ConditioningError("GP kernel matrix not positive definite after jitter escalation to 1e-2");
            noise = h.noise_variance + kJitterLadder[rung++];
        }
        m.noise_used_ = noise;
        m.alpha_ = m.llt_.solve(m.y_);

        double logdet = 0;
        for (Eigen::Index i = 0; i < n; ++i)
            logdet += std::log(m.llt_.matrixLLT()(i, i));
        m.lml_ = -0.5 * m.y_.dot(m.alpha_) - logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
        return m;
    }

    const GpHyperparameters& hyperparameters() const { return hyper_; }
    /// Noise actually added to the diagonal (after any jitter escalation).
    double noise_used() const { return noise_used_; }
    double log_marginal_likelihood() const { return lml_; }
    double target_mean() const { return target_mean_; }
    double target_scale() const { return target_scale_; }
    std::size_t size() const { return static_cast<std::size_t>(inputs_.rows()); }
    const Eigen::MatrixXd& inputs() const { return inputs_; }
    /// Every grid point visited by fit_gp, in evaluation order.
    const std::vector<GpEvaluation>& search_log() const { return search_log_; }
    void set_search_log(std::vector<GpEvaluation> log) { search_log_ = std::move(log); }

    /// Posterior mean and latent variance in target units; one row per query.
    void predict(const Eigen::MatrixXd& query, Eigen::VectorXd& mean, Eigen::VectorXd& variance) const
    {
        const auto n = inputs_.rows();
        const auto q = query.rows();
        Eigen::MatrixXd Ks(n, q);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < q; ++j)
                Ks(i, j) = rbf(inputs_.row(i), query.row(j), hyper_);
        mean = (Ks.transpose() * alpha_).array() * target_scale_ + target_mean_;
        Eigen::MatrixXd V = llt_.matrixL().solve(Ks);
        variance.resize(q);
        const double s2 = target_scale_ * target_scale_;
        for (Eigen::Index j = 0; j < q; ++j)
            variance(j) = std::max(0.0, hyper_.signal_variance - V.col(j).squaredNorm()) * s2;
    }

    std::pair<double, double> predict(const Eigen::RowVectorXd& x) const
    {
        Eigen::VectorXd m, v;
        predict(Eigen::MatrixXd(x), m, v);
        return {m(0), v(0)};
    }

private:
    Eigen::MatrixXd inputs_;
    Eigen::VectorXd y_;
    Eigen::VectorXd alpha_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    GpHyperparameters hyper_;
    double noise_used_ = 0;
    double lml_ = 0;
    double target_mean_ = 0;
    double target_scale_ = 1;
    std::vector<GpEvaluation> search_log_;
};

/// Hyperparameters by exhaustive log-marginal-likelihood search over the
/// grid in `space`, then one coordinate pass (lengthscale, signal, noise) at
/// half the grid's log step. Grid points that cannot be factorized are
/// skipped.
inline GpModel fit_gp(const Eigen::MatrixXd& inputs, std::span<const double> targets, double input_scale,
    const GpSearchSpace& space = {})
{
    if (inputs.rows() < 2)
        throw ArgumentError("GP fit needs at least 2 training points");

    std::vector<GpEvaluation> log;
    std::optional<GpModel> best;
    auto consider = [&](const GpHyperparameters& h) {
        try {
            GpModel m = GpModel::fit_fixed(inputs, targets, h);
            log.push_back({h, m.log_marginal_likelihood()});
            if (!best || m.log_marginal_likelihood() > best->log_marginal_likelihood()) {
                best = std::move(m);
                return true;
            }
        }
        catch (const ConditioningError&) {
        }
        return false;
    };

    const double ls_ratio = std::pow(space.lengthscale_max / space.lengthscale_min,
        1.0 / static_cast<double>(space.lengthscale_points - 1));
    std::vector<double> lengthscales(space.lengthscale_points);
    for (std::size_t i = 0; i < space.lengthscale_points; ++i)
        lengthscales[i] = input_scale * space.lengthscale_min * std::pow(ls_ratio, static_cast<double>(i));

    for (double ls : lengthscales)
        for (double s2 : space.signal_variances)
            for (double nv : space.noise_variances)
                consider({ls, s2, nv});
    if (!best)
        throw ConditioningError("GP fit: no hyperparameter grid point could be factorized");

    // Half-log-step neighbours of v within a sorted grid; edges mirror the
    // adjacent step, and nothing goes below the grid's minimum.
    auto half_steps = [](const std::vector<double>& g, double v) {
        std::vector<double> out;
        auto it = std::min_element(g.begin(), g.end(), [v](double a, double b) {
            return std::abs(std::log(a / v)) < std::abs(std::log(b / v));
        });
        const auto i = static_cast<std::size_t>(it - g.begin());
        if (g.size() < 2)
            return out;
        const double down = i > 0 ? g[i - 1] / g[i] : g[i] / g[i + 1];
        const double up = i + 1 < g.size() ? g[i + 1] / g[i] : g[i] / g[i - 1];
        if (i > 0)
            out.push_back(v * std::sqrt(down));
        out.push_back(v * std::sqrt(up));
        return out;
    };

    GpHyperparameters current = best->hyperparameters();
    for (double ls : {current.lengthscale / std::sqrt(ls_ratio), current.lengthscale * std::sqrt(ls_ratio)})
        consider({ls, current.signal_variance, current.noise_variance});
    current = best->hyperparameters();
    std::vector<double> signals = space.signal_variances;
    std::sort(signals.begin(), signals.end());
    for (double s2 : half_steps(signals, current.signal_variance))
        consider({current.lengthscale, s2, current.noise_variance});
    current = best->hyperparameters();
    std::vector<double> noises = space.noise_variances;
    std::sort(noises.begin(), noises.end());
    for (double nv : half_steps(noises, current.noise_variance))
        consider({current.lengthscale, current.signal_variance, nv});

    best->set_search_log(std::move(log));
    return std::move(*best);
}

inline GpModel fit_gp(const SurrogateInput& inputs, std::span<const LocationId> explored,
    std::span<const double> targets, const GpSearchSpace& space = {})
{
    if (explored.size() != targets.size())
        throw ArgumentError("GP fit: one target per explored location required");
    return fit_gp(inputs.select(explored), targets, inputs.input_scale, space);
}

/// GP posterior over a set of locations.
struct Posterior {
    std::map<LocationId, double> mean;
    std::map<LocationId, double> variance;

    bool empty() const { return mean.empty(); }
    std::size_t size() const { return mean.size(); }
};

inline Posterior predict(const GpModel& model, const SurrogateInput& inputs, std::span<const LocationId> query)
{
    Posterior post;
    if (query.empty())
        return post;
    Eigen::VectorXd m, v;
    model.predict(inputs.select(query), m, v);
    for (std::size_t i = 0; i < query.size(); ++i) {
        post.mean.emplace(query[i], m(static_cast<Eigen::Index>(i)));
        post.variance.emplace(query[i], v(static_cast<Eigen::Index>(i)));
    }
    return post;
}

} // namespace pxbo

#endif // PXBO_SURROGATE_GP_HPP
