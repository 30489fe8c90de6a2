#ifndef PXBO_AGENTS_HPP
#define PXBO_AGENTS_HPP

#include <algorithm>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bradley_terry.hpp"
#include "dataset.hpp"
#include "errors.hpp"

namespace pxbo {

using Rng = std::mt19937_64;

enum class VoterKind { Interactive, ProxyAgent, Oracle };

inline const char* to_string(VoterKind k)
{
    switch (k) {
    case VoterKind::Interactive: return "interactive";
    case VoterKind::ProxyAgent: return "proxy";
    case VoterKind::Oracle: return "oracle";
    }
    return "?";
}

inline VoterKind voter_kind_from_string(const std::string& s)
{
    if (s == "interactive" || s == "human")
        return VoterKind::Interactive;
    if (s == "proxy" || s == "proxy_agent")
        return VoterKind::ProxyAgent;
    if (s == "oracle")
        return VoterKind::Oracle;
    throw ArgumentError("unknown voter kind \"" + s + "\"");
}

/// Who casts votes, and for the proxy agent, who validates them.
struct VoterConfig {
    VoterKind kind = VoterKind::Oracle;
    /// Human stand-in for validation and initial votes when kind is ProxyAgent.
    VoterKind validator = VoterKind::Oracle;
    /// Probability that an oracle judgement is flipped.
    double oracle_flip_prob = 0.0;
    std::size_t validation_period = 4;
    std::uint64_t rng_seed = 0;

    void validate() const
    {
        if (!(oracle_flip_prob >= 0 && oracle_flip_prob < 0.5))
            throw ArgumentError("oracle flip probability must lie in [0, 0.5)");
        if (validation_period < 1)
            throw ArgumentError("validation period m must be >= 1");
        if (kind == VoterKind::ProxyAgent && validator == VoterKind::ProxyAgent)
            throw ArgumentError("the proxy agent needs an interactive or oracle validator");
    }

    /// Source of votes that stand in for the human (initial votes, validation).
    VoterKind human_channel() const { return kind == VoterKind::ProxyAgent ? validator : kind; }
};

/// The opponents a new measurement is compared against; the first is the
/// incumbent.
struct ComparisonRequest {
    LocationId new_location;
    std::vector<LocationId> opponents;
};

/// Opponent list: current best first, then up to q-1 explored locations
/// drawn uniformly without replacement (excluding the best and the new one).
inline ComparisonRequest build_comparison_request(LocationId new_location, std::span<const LocationId> explored,
    const BtModel& model, std::size_t q, Rng& rng)
{
    if (explored.empty())
        throw StateError("comparison request needs at least one explored location");
    if (q < 1)
        throw ArgumentError("comparison subset size q must be >= 1");

    ComparisonRequest req{new_location, {}};
    const LocationId best = current_best(model);
    if (best != new_location)
        req.opponents.push_back(best);

    std::vector<LocationId> pool;
    for (LocationId id : explored)
        if (id != best && id != new_location)
            pool.push_back(id);
    std::sort(pool.begin(), pool.end());
    pool.erase(std::unique(pool.begin(), pool.end()), pool.end());

    const std::size_t extra = std::min(q - 1, pool.size());
    for (std::size_t i = 0; i < extra; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
        req.opponents.push_back(pool[i]);
    }
    return req;
}

/// AI-agent votes: the new location inherits the proxy's utility. It wins
/// against an opponent only when P(proxy beats opponent) > 0.5.
inline std::vector<ComparisonRecord> proxy_vote(const ComparisonRequest& request, LocationId proxy,
    const BtModel& model, std::size_t iteration = 0)
{
    if (!model.contains(proxy))
        throw ConsistencyError("proxy location " + std::to_string(proxy.index) + " is not in the model");
    std::vector<ComparisonRecord> out;
    for (LocationId opp : request.opponents) {
        if (opp == request.new_location)
            continue;
        const bool new_wins = preference_probability(model, proxy, opp) > 0.5;
        out.push_back({new_wins ? request.new_location : opp, new_wins ? opp : request.new_location,
            VoteSource::Proxy, false, iteration});
    }
    return out;
}

/// Scripted judge: the higher score wins, equal scores go to `second`; the
/// judgement is flipped with probability flip_prob. One uniform draw per call.
inline LocationId oracle_judge(LocationId first, LocationId second, std::span<const double> scores, double flip_prob,
    Rng& rng)
{
    if (first.index >= scores.size() || second.index >= scores.size())
        throw DataError("oracle score missing for location "
            + std::to_string(std::max(first.index, second.index)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool flip = u(rng) < flip_prob;
    const bool first_wins = scores[first.index] > scores[second.index];
    return (first_wins != flip) ? first : second;
}

inline std::vector<ComparisonRecord> oracle_vote(const ComparisonRequest& request, std::span<const double> scores,
    double flip_prob, Rng& rng, std::size_t iteration = 0)
{
    std::vector<ComparisonRecord> out;
    for (LocationId opp : request.opponents) {
        if (opp == request.new_location)
            continue;
        const LocationId w = oracle_judge(request.new_location, opp, scores, flip_prob, rng);
        out.push_back({w, w == opp ? request.new_location : opp, VoteSource::Oracle, true, iteration});
    }
    return out;
}

/// Log indices of every proxy record still awaiting validation.
inline std::vector<std::size_t> pending_proxy_records(const ComparisonLog& log)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < log.size(); ++i)
        if (log[i].source == VoteSource::Proxy && !log[i].validated)
            out.push_back(i);
    return out;
}

/// Resolves a validation round: records in `flips` swap direction, and every
/// pending proxy record becomes validated. Returns the number of corrections.
inline std::size_t apply_validation(ComparisonLog& log, const std::set<std::size_t>& flips)
{
    for (std::size_t i : flips) {
        if (i >= log.size())
            throw ArgumentError("validation index " + std::to_string(i) + " is out of range");
        if (log[i].source != VoteSource::Proxy)
            throw ArgumentError("validation index " + std::to_string(i) + " is not a proxy vote");
        if (log[i].validated)
            throw ArgumentError("validation index " + std::to_string(i) + " is already validated");
    }
    for (std::size_t i : pending_proxy_records(log))
        log.validate(i, flips.count(i) != 0);
    return flips.size();
}

} // namespace pxbo

#endif // PXBO_AGENTS_HPP
