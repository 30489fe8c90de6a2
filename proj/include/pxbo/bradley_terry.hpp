#ifndef PXBO_BRADLEY_TERRY_HPP
#define PXBO_BRADLEY_TERRY_HPP

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "errors.hpp"

namespace pxbo {

enum class VoteSource { Human, Proxy, Oracle };

inline const char* to_string(VoteSource s)
{
    switch (s) {
    case VoteSource::Human: return "human";
    case VoteSource::Proxy: return "proxy";
    case VoteSource::Oracle: return "oracle";
    }
    return "?";
}

inline VoteSource vote_source_from_string(const std::string& s)
{
    if (s == "human")
        return VoteSource::Human;
    if (s == "proxy")
        return VoteSource::Proxy;
    if (s == "oracle")
        return VoteSource::Oracle;
    throw FormatError("unknown vote source \"" + s + "\"");
}

/// One pairwise vote. Human and oracle votes are born validated; proxy votes
/// wait for the next validation event.
struct ComparisonRecord {
    LocationId winner;
    LocationId loser;
    VoteSource source = VoteSource::Human;
    bool validated = true;
    std::size_t iteration = 0;

    friend bool operator==(const ComparisonRecord&, const ComparisonRecord&) = default;
};

inline void to_json(nlohmann::json& j, const ComparisonRecord& r)
{
    j = nlohmann::json{{"winner", r.winner.index}, {"loser", r.loser.index}, {"source", to_string(r.source)},
        {"validated", r.validated}, {"iteration", r.iteration}};
}

inline void from_json(const nlohmann::json& j, ComparisonRecord& r)
{
    r.winner = LocationId{j.at("winner").get<std::size_t>()};
    r.loser = LocationId{j.at("loser").get<std::size_t>()};
    r.source = vote_source_from_string(j.at("source").get<std::string>());
    r.validated = j.at("validated").get<bool>();
    r.iteration = j.at("iteration").get<std::size_t>();
}

/// Append-only vote log. The only in-place mutation is a validation, which
/// may swap winner and loser and always sets validated.
class ComparisonLog {
public:
    ComparisonLog() = default;
    explicit ComparisonLog(std::vector<ComparisonRecord> records) : records_(std::move(records))
    {
        for (std::size_t i = 0; i < records_.size(); ++i)
            check_record(records_[i], i);
    }

    void append(const ComparisonRecord& r)
    {
        check_record(r, records_.size());
        records_.push_back(r);
    }

    void append(std::span<const ComparisonRecord> rs)
    {
        for (const auto& r : rs)
            append(r);
    }

    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }
    const ComparisonRecord& operator[](std::size_t i) const { return records_.at(i); }
    const std::vector<ComparisonRecord>& records() const { return records_; }
    auto begin() const { return records_.begin(); }
    auto end() const { return records_.end(); }

    /// Marks record i validated, swapping its direction first if flip is set.
    void validate(std::size_t i, bool flip)
    {
        auto& r = records_.at(i);
        if (flip)
            std::swap(r.winner, r.loser);
        r.validated = true;
    }

    /// One JSON object per line.
    void write_jsonl(std::ostream& os) const
    {
        for (const auto& r : records_)
            os << nlohmann::json(r).dump() << '\n';
    }

    static ComparisonLog read_jsonl(std::istream& is)
    {
        ComparisonLog log;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos)
                continue;
            try {
                log.append(nlohmann::json::parse(line).get<ComparisonRecord>());
            }
            catch (const nlohmann::json::exception& e) {
                throw FormatError("comparison log line " + std::to_string(lineno) + ": " + e.what());
            }
        }
        return log;
    }

private:
    static void check_record(const ComparisonRecord& r, std::size_t at)
    {
        if (r.winner == r.loser)
            throw ArgumentError("comparison record " + std::to_string(at) + " pairs location "
                + std::to_string(r.winner.index) + " with itself");
    }

    std::vector<ComparisonRecord> records_;
};

/// Fitted log-strengths, zero-mean over the fitted locations.
struct BtModel {
    std::map<LocationId, double> utilities;
    std::size_t fitted_on = 0;
    bool converged = false;
    std::size_t iterations_used = 0;

    bool contains(LocationId id) const { return utilities.count(id) != 0; }

    double utility(LocationId id) const
    {
        auto it = utilities.find(id);
        if (it == utilities.end())
            throw ConsistencyError("location " + std::to_string(id.index) + " is not in the Bradley-Terry model");
        return it->second;
    }

    double max_utility() const
    {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& [id, u] : utilities)
            best = std::max(best, u);
        return best;
    }
};

struct BtOptions {
    /// Pseudo-wins and pseudo-losses against a virtual anchor of strength 0.
    double prior_strength = 0.5;
    double tolerance = 1e-8;
    std::size_t max_sweeps = 1000;
};

namespace detail {

/// Multiplies every strength by the common factor e^c that maximizes the
/// anchor terms, i.e. solves sum_i gamma_i e^c / (gamma_i e^c + 1) = n/2.
inline void rescale_to_anchor(std::vector<double>& gamma)
{
    const double half = 0.5 * static_cast<double>(gamma.size());
    std::vector<double> v(gamma.size());
    for (std::size_t i = 0; i < gamma.size(); ++i)
        v[i] = std::log(gamma[i]);
    double c = 0;
    for (int it = 0; it < 100; ++it) {
        double f = -half, df = 0;
        for (double x : v) {
            const double p = 1.0 / (1.0 + std::exp(-(x + c)));
            f += p;
            df += p * (1.0 - p);
        }
        if (df <= 0)
            break;
        const double step = std::clamp(f / df, -5.0, 5.0);
        c -= step;
        if (std::abs(step) < 1e-15)
            break;
    }
    for (std::size_t i = 0; i < gamma.size(); ++i)
        gamma[i] = std::exp(v[i] + c);
}

} // namespace detail

/// Regularized maximum-likelihood Bradley-Terry fit by the MM iteration.
///
/// Each location plays prior_strength wins and prior_strength losses against
/// an anchor with log-strength 0, which makes the maximizer unique and finite
/// on any comparison graph. The anchor lives in the un-centered frame, and
/// each sweep ends with the common rescaling that is optimal against it. The
/// zero-mean gauge is applied to the reported utilities after every sweep
/// and the convergence test runs on those.
inline BtModel fit(const ComparisonLog& log, std::span<const LocationId> locations, const BtOptions& opt = {})
{
    if (locations.empty())
        throw ArgumentError("Bradley-Terry fit needs a nonempty location set");

    std::vector<LocationId> ids(locations.begin(), locations.end());
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const std::size_t n = ids.size();

    std::map<LocationId, std::size_t> slot;
    for (std::size_t i = 0; i < n; ++i)
        slot.emplace(ids[i], i);
    auto lookup = [&](LocationId id, std::size_t rec) {
        auto it = slot.find(id);
        if (it == slot.end())
            throw ConsistencyError("comparison record " + std::to_string(rec) + " references location "
                + std::to_string(id.index) + " outside the fitted set");
        return it->second;
    };

    std::vector<double> wins(n, opt.prior_strength);
    std::vector<std::map<std::size_t, double>> games(n);
    for (std::size_t k = 0; k < log.size(); ++k) {
        const auto& r = log[k];
        const std::size_t w = lookup(r.winner, k);
        const std::size_t l = lookup(r.loser, k);
        wins[w] += 1.0;
        games[w][l] += 1.0;
        games[l][w] += 1.0;
    }
    std::vector<std::vector<std::pair<std::size_t, double>>> adj(n);
    for (std::size_t i = 0; i < n; ++i)
        adj[i].assign(games[i].begin(), games[i].end());

    auto centered = [n](const std::vector<double>& gamma) {
        std::vector<double> u(n);
        double mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
            u[i] = std::log(gamma[i]);
            mean += u[i];
        }
        mean /= static_cast<double>(n);
        for (auto& x : u)
            x -= mean;
        return u;
    };

    std::vector<double> gamma(n, 1.0);
    std::vector<double> u = centered(gamma);
    BtModel model;
    model.fitted_on = log.size();

    const double anchor_games = 2.0 * opt.prior_strength;
    for (std::size_t sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        for (std::size_t i = 0; i < n; ++i) {
            double denom = anchor_games / (gamma[i] + 1.0);
            for (const auto& [j, cnt] : adj[i])
                denom += cnt / (gamma[i] + gamma[j]);
            gamma[i] = wins[i] / denom;
        }
        detail::rescale_to_anchor(gamma);
        auto next = centered(gamma);
        double delta = 0;
        for (std::size_t i = 0; i < n; ++i)
            delta = std::max(delta, std::abs(next[i] - u[i]));
        u = std::move(next);
        model.iterations_used = sweep;
        if (delta < opt.tolerance) {
            model.converged = true;
            break;
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(u[i]))
            throw DataError("Bradley-Terry fit produced a non-finite utility");
        model.utilities.emplace(ids[i], u[i]);
    }
    return model;
}

inline BtModel fit(const ComparisonLog& log, const std::vector<LocationId>& locations, const BtOptions& opt = {})
{
    return fit(log, std::span<const LocationId>(locations), opt);
}

/// P(a preferred over b). Clamped to the open interval so extreme utility
/// gaps never produce exactly 0 or 1.
inline double preference_probability(const BtModel& model, LocationId a, LocationId b)
{
    const double ua = model.utility(a);
    const double ub = model.utility(b);
    const double m = std::max(ua, ub);
    const double ea = std::exp(ua - m);
    const double eb = std::exp(ub - m);
    const double p = ea / (ea + eb);
    return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

/// Location with the highest utility; lowest index wins ties.
inline LocationId current_best(const BtModel& model)
{
    if (model.utilities.empty())
        throw ArgumentError("current_best on an empty model");
    auto best = model.utilities.begin();
    for (auto it = model.utilities.begin(); it != model.utilities.end(); ++it)
        if (it->second > best->second)
            best = it;
    return best->first;
}

} // namespace pxbo

#endif // PXBO_BRADLEY_TERRY_HPP
