#ifndef PXBO_ORCHESTRATOR_HPP
#define PXBO_ORCHESTRATOR_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "acquisition.hpp"
#include "agents.hpp"
#include "bradley_terry.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "similarity.hpp"
#include "surrogate_gp.hpp"

namespace pxbo {

enum class Phase { AwaitingInitVotes, Running, AwaitingVotes, AwaitingValidation, Done };

inline const char* to_string(Phase p)
{
    switch (p) {
    case Phase::AwaitingInitVotes: return "awaiting_init_votes";
    case Phase::Running: return "running";
    case Phase::AwaitingVotes: return "awaiting_votes";
    case Phase::AwaitingValidation: return "awaiting_validation";
    case Phase::Done: return "done";
    }
    return "?";
}

inline Phase phase_from_string(const std::string& s)
{
    for (Phase p : {Phase::AwaitingInitVotes, Phase::Running, Phase::AwaitingVotes, Phase::AwaitingValidation,
             Phase::Done})
        if (s == to_string(p))
            return p;
    throw FormatError("unknown phase \"" + s + "\"");
}

/// How the next location is chosen. Random keeps the rest of the loop intact
/// and serves as the equal-budget baseline.
enum class SelectionStrategy { ExpectedImprovement, Random };

inline const char* to_string(SelectionStrategy s)
{
    return s == SelectionStrategy::ExpectedImprovement ? "ei" : "random";
}

inline SelectionStrategy selection_from_string(const std::string& s)
{
    if (s == "ei")
        return SelectionStrategy::ExpectedImprovement;
    if (s == "random")
        return SelectionStrategy::Random;
    throw ArgumentError("unknown selection strategy \"" + s + "\"");
}

struct SessionConfig {
    std::size_t init_samples = 10;     // j
    std::size_t init_comparisons = 20; // n_total
    std::size_t q = 3;
    std::size_t max_iterations = 20;   // M
    double xi = kDefaultXi;
    VoterConfig voter;
    SurrogateMode surrogate_mode = SurrogateMode::Coordinate;
    SelectionStrategy selection = SelectionStrategy::ExpectedImprovement;
    std::uint64_t rng_seed = 0;

    /// Initial comparisons per sample, rounded up.
    std::size_t per_sample_comparisons() const
    {
        return init_samples == 0 ? 0 : (init_comparisons + init_samples - 1) / init_samples;
    }

    void validate() const
    {
        if (init_samples < 2)
            throw ArgumentError("init_samples j must be >= 2");
        if (init_comparisons < 1)
            throw ArgumentError("init_comparisons must be >= 1");
        if (q < 1)
            throw ArgumentError("q must be >= 1");
        if (per_sample_comparisons() > init_samples - 1)
            throw ArgumentError("init_comparisons too large: each sample can meet at most j-1 distinct partners");
        if (!(xi >= 0) || !std::isfinite(xi))
            throw ArgumentError("xi must be finite and >= 0");
        voter.validate();
        if (voter.kind == VoterKind::ProxyAgent && max_iterations > 0 && voter.validation_period > max_iterations)
            throw ArgumentError("validation period m must not exceed max_iterations M");
    }
};

inline void to_json(nlohmann::json& j, const SessionConfig& c)
{
    j = nlohmann::json{{"init_samples", c.init_samples}, {"init_comparisons", c.init_comparisons}, {"q", c.q},
        {"m", c.voter.validation_period}, {"iters", c.max_iterations}, {"xi", c.xi},
        {"voter", to_string(c.voter.kind)}, {"validator", to_string(c.voter.validator)},
        {"flip_prob", c.voter.oracle_flip_prob}, {"surrogate", to_string(c.surrogate_mode)},
        {"selection", to_string(c.selection)}, {"seed", c.rng_seed}, {"voter_seed", c.voter.rng_seed}};
}

/// Reads a config object. Keys may use underscores or the CLI's dashes;
/// absent keys keep the value already in `c`.
inline void merge_config(SessionConfig& c, const nlohmann::json& j)
{
    if (!j.is_object())
        throw FormatError("session config must be a JSON object");
    auto get = [&j](const char* key) -> const nlohmann::json* {
        if (j.contains(key))
            return &j.at(key);
        std::string dashed(key);
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        if (j.contains(dashed))
            return &j.at(dashed);
        return nullptr;
    };
    try {
        if (auto v = get("init_samples")) c.init_samples = v->get<std::size_t>();
        if (auto v = get("init_comparisons")) c.init_comparisons = v->get<std::size_t>();
        if (auto v = get("q")) c.q = v->get<std::size_t>();
        if (auto v = get("m")) c.voter.validation_period = v->get<std::size_t>();
        if (auto v = get("iters")) c.max_iterations = v->get<std::size_t>();
        if (auto v = get("xi")) c.xi = v->get<double>();
        if (auto v = get("voter")) c.voter.kind = voter_kind_from_string(v->get<std::string>());
        if (auto v = get("validator")) c.voter.validator = voter_kind_from_string(v->get<std::string>());
        if (auto v = get("flip_prob")) c.voter.oracle_flip_prob = v->get<double>();
        if (auto v = get("surrogate")) c.surrogate_mode = surrogate_mode_from_string(v->get<std::string>());
        if (auto v = get("selection")) c.selection = selection_from_string(v->get<std::string>());
        if (auto v = get("seed")) c.rng_seed = v->get<std::uint64_t>();
        if (auto v = get("voter_seed")) c.voter.rng_seed = v->get<std::uint64_t>();
    }
    catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("session config: ") + e.what());
    }
}

inline void from_json(const nlohmann::json& j, SessionConfig& c)
{
    c = SessionConfig{};
    merge_config(c, j);
}

struct VoteCounts {
    std::size_t human = 0;
    std::size_t proxy = 0;
    std::size_t oracle = 0;

    void add(VoteSource s)
    {
        switch (s) {
        case VoteSource::Human: ++human; break;
        case VoteSource::Proxy: ++proxy; break;
        case VoteSource::Oracle: ++oracle; break;
        }
    }
    std::size_t total() const { return human + proxy + oracle; }
    friend bool operator==(const VoteCounts&, const VoteCounts&) = default;
};

/// State of the loop after initialization (k = 0) or after iteration k.
struct IterationMetrics {
    std::size_t k = 0;
    std::optional<LocationId> new_location;
    std::optional<LocationId> proxy;
    LocationId incumbent;
    double incumbent_utility = 0;
    std::optional<double> incumbent_oracle_score;
    /// Cumulative votes by source, initialization included.
    VoteCounts votes;

    friend bool operator==(const IterationMetrics&, const IterationMetrics&) = default;
};

struct ValidationMetrics {
    std::size_t k = 0;
    std::size_t pending = 0;
    std::size_t flips = 0;
    double rate = 0;

    friend bool operator==(const ValidationMetrics&, const ValidationMetrics&) = default;
};

struct Metrics {
    IterationMetrics init;
    std::vector<IterationMetrics> iterations;
    std::vector<ValidationMetrics> validations;
    VoteCounts init_votes;
    VoteCounts loop_votes;

    std::vector<double> best_utility() const
    {
        std::vector<double> out;
        for (const auto& it : iterations)
            out.push_back(it.incumbent_utility);
        return out;
    }

    std::vector<double> best_oracle_score() const
    {
        std::vector<double> out;
        for (const auto& it : iterations)
            if (it.incumbent_oracle_score)
                out.push_back(*it.incumbent_oracle_score);
        return out;
    }

    std::vector<double> correction_rates() const
    {
        std::vector<double> out;
        for (const auto& v : validations)
            out.push_back(v.rate);
        return out;
    }

    /// Incumbent oracle score after the last iteration (or initialization).
    std::optional<double> final_oracle_score() const
    {
        return iterations.empty() ? init.incumbent_oracle_score : iterations.back().incumbent_oracle_score;
    }

    friend bool operator==(const Metrics&, const Metrics&) = default;
};

namespace detail {

inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline nlohmann::json counts_json(const VoteCounts& c)
{
    return {{"human", c.human}, {"proxy", c.proxy}, {"oracle", c.oracle}};
}

inline VoteCounts counts_from_json(const nlohmann::json& j)
{
    return {j.at("human").get<std::size_t>(), j.at("proxy").get<std::size_t>(), j.at("oracle").get<std::size_t>()};
}

inline nlohmann::json optional_id(const std::optional<LocationId>& id)
{
    return id ? nlohmann::json(id->index) : nlohmann::json(nullptr);
}

inline std::optional<LocationId> optional_id_from(const nlohmann::json& j)
{
    if (j.is_null())
        return std::nullopt;
    return LocationId{j.get<std::size_t>()};
}

} // namespace detail

inline void to_json(nlohmann::json& j, const IterationMetrics& m)
{
    j = {{"k", m.k}, {"new_location", detail::optional_id(m.new_location)}, {"proxy", detail::optional_id(m.proxy)},
        {"incumbent", m.incumbent.index}, {"incumbent_utility", m.incumbent_utility},
        {"incumbent_oracle_score",
            m.incumbent_oracle_score ? nlohmann::json(*m.incumbent_oracle_score) : nlohmann::json(nullptr)},
        {"votes", detail::counts_json(m.votes)}};
}

inline void from_json(const nlohmann::json& j, IterationMetrics& m)
{
    m.k = j.at("k").get<std::size_t>();
    m.new_location = detail::optional_id_from(j.at("new_location"));
    m.proxy = detail::optional_id_from(j.at("proxy"));
    m.incumbent = LocationId{j.at("incumbent").get<std::size_t>()};
    m.incumbent_utility = j.at("incumbent_utility").get<double>();
    const auto& s = j.at("incumbent_oracle_score");
    m.incumbent_oracle_score = s.is_null() ? std::nullopt : std::optional<double>(s.get<double>());
    m.votes = detail::counts_from_json(j.at("votes"));
}

inline void to_json(nlohmann::json& j, const ValidationMetrics& v)
{
    j = {{"k", v.k}, {"pending", v.pending}, {"flips", v.flips}, {"rate", v.rate}};
}

inline void from_json(const nlohmann::json& j, ValidationMetrics& v)
{
    v.k = j.at("k").get<std::size_t>();
    v.pending = j.at("pending").get<std::size_t>();
    v.flips = j.at("flips").get<std::size_t>();
    v.rate = j.at("rate").get<double>();
}

inline void to_json(nlohmann::json& j, const Metrics& m)
{
    j = {{"init", m.init}, {"iterations", m.iterations}, {"validations", m.validations},
        {"init_votes", detail::counts_json(m.init_votes)}, {"loop_votes", detail::counts_json(m.loop_votes)},
        {"best_utility", m.best_utility()}, {"best_oracle_score", m.best_oracle_score()},
        {"correction_rate", m.correction_rates()}};
}

inline void from_json(const nlohmann::json& j, Metrics& m)
{
    m.init = j.at("init").get<IterationMetrics>();
    m.iterations = j.at("iterations").get<std::vector<IterationMetrics>>();
    m.validations = j.at("validations").get<std::vector<ValidationMetrics>>();
    m.init_votes = detail::counts_from_json(j.at("init_votes"));
    m.loop_votes = detail::counts_from_json(j.at("loop_votes"));
}

/// Per-iteration rows, initialization first (k = 0).
inline void write_metrics_csv(const Metrics& m, std::ostream& os)
{
    os << "k,new_location,proxy,incumbent_id,incumbent_utility,incumbent_oracle_score,votes_human,votes_proxy,"
          "votes_oracle\n";
    auto row = [&os](const IterationMetrics& it) {
        os << it.k << ',' << (it.new_location ? std::to_string(it.new_location->index) : "") << ','
           << (it.proxy ? std::to_string(it.proxy->index) : "") << ',' << it.incumbent.index << ','
           << detail::format_double(it.incumbent_utility) << ','
           << (it.incumbent_oracle_score ? detail::format_double(*it.incumbent_oracle_score) : "") << ','
           << it.votes.human << ',' << it.votes.proxy << ',' << it.votes.oracle << '\n';
    };
    row(m.init);
    for (const auto& it : m.iterations)
        row(it);
}

inline void write_validations_csv(const Metrics& m, std::ostream& os)
{
    os << "k,pending,flips,rate\n";
    for (const auto& v : m.validations)
        os << v.k << ',' << v.pending << ',' << v.flips << ',' << detail::format_double(v.rate) << '\n';
}

/// A pair awaiting a human verdict. `first` is the location being judged
/// (the new measurement, or an initial sample), `second` its opponent.
struct VotePair {
    LocationId first;
    LocationId second;

    friend auto operator<=>(const VotePair&, const VotePair&) = default;
};

struct Vote {
    LocationId first;
    LocationId second;
    LocationId preferred;
};

/// A vote batch that does not exactly answer the pending request.
class IncompleteVotesError : public ArgumentError {
public:
    IncompleteVotesError(const std::string& what, std::vector<VotePair> missing)
        : ArgumentError(what), missing_(std::move(missing))
    {
    }
    const std::vector<VotePair>& missing() const { return missing_; }

private:
    std::vector<VotePair> missing_;
};

/// An unvalidated proxy vote as shown to the validator: the actual new
/// measurement against its opponent.
struct PendingValidationItem {
    std::size_t log_index = 0;
    ComparisonRecord record;
    LocationId new_location;
    LocationId opponent;
};

/// Posterior maps over the whole grid plus the numerical baseline.
struct MapSnapshot {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> mean;
    std::vector<double> variance;
    std::vector<std::pair<LocationId, double>> explored;
    std::string baseline_kind;
    std::vector<double> baseline;
};

class Session;

/// Answers suspensions on behalf of a human.
class HumanChannel {
public:
    virtual ~HumanChannel() = default;
    virtual std::vector<Vote> answer_votes(const Session& session, std::span<const VotePair> pairs) = 0;
    virtual std::set<std::size_t> answer_validation(const Session& session,
        std::span<const PendingValidationItem> items)
        = 0;
};

/// One px-BO run: initialization, then steps of surrogate fit, acquisition,
/// measurement, voting, optional validation and refit. Human input is an
/// explicit suspension (AwaitingInitVotes / AwaitingVotes /
/// AwaitingValidation) resolved through submit_votes / submit_validation.
class Session {
public:
    static Session initialize(std::shared_ptr<const ObservationGrid> grid, const SessionConfig& config)
    {
        if (!grid)
            throw ArgumentError("session needs a grid");
        config.validate();
        if (config.init_samples > grid->size())
            throw CapacityError("init_samples " + std::to_string(config.init_samples) + " exceeds the "
                + std::to_string(grid->size()) + " grid locations");
        const bool needs_oracle = config.voter.kind == VoterKind::Oracle
            || (config.voter.kind == VoterKind::ProxyAgent && config.voter.validator == VoterKind::Oracle);
        if (needs_oracle && !grid->oracle_score())
            throw ArgumentError("oracle voting needs a grid with oracle scores");

        Session s(std::move(grid), config);

        // j distinct samples, partial Fisher-Yates over all locations
        std::vector<LocationId> all(s.grid_->size());
        for (std::size_t i = 0; i < all.size(); ++i)
            all[i] = LocationId{i};
        const std::size_t j = config.init_samples;
        for (std::size_t i = 0; i < j; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
            std::swap(all[i], all[pick(s.rng_)]);
            s.add_explored(all[i]);
        }

        // spread n_total votes as evenly as possible, distinct partners per sample
        for (std::size_t i = 0; i < j; ++i) {
            const std::size_t count
                = config.init_comparisons / j + (i < config.init_comparisons % j ? 1 : 0);
            std::vector<LocationId> partners;
            for (std::size_t p = 0; p < j; ++p)
                if (p != i)
                    partners.push_back(s.explored_[p]);
            for (std::size_t c = 0; c < count; ++c) {
                std::uniform_int_distribution<std::size_t> pick(c, partners.size() - 1);
                std::swap(partners[c], partners[pick(s.rng_)]);
                s.pending_votes_.push_back({s.explored_[i], partners[c]});
            }
        }

        if (config.voter.human_channel() == VoterKind::Interactive) {
            s.phase_ = Phase::AwaitingInitVotes;
            return s;
        }

        std::vector<ComparisonRecord> recs;
        for (const auto& p : s.pending_votes_) {
            const LocationId w = oracle_judge(p.first, p.second, *s.grid_->oracle_score(),
                config.voter.oracle_flip_prob, s.voter_rng_);
            recs.push_back({w, w == p.first ? p.second : p.first, VoteSource::Oracle, true, 0});
        }
        s.complete_init(recs);
        return s;
    }

    /// One loop iteration, or up to the first suspension inside it.
    void step()
    {
        require(Phase::Running, "step");
        const LocationId x_new = select_location();
        pending_new_ = x_new;
        const auto request = build_comparison_request(x_new, explored_, bt_, config_.q, rng_);

        switch (config_.voter.kind) {
        case VoterKind::Oracle:
            record_iteration_votes(
                oracle_vote(request, *grid_->oracle_score(), config_.voter.oracle_flip_prob, voter_rng_, k_));
            break;
        case VoterKind::ProxyAgent: {
            // measurement of x_new, then its most similar explored location
            const LocationId proxy = find_proxy(grid_->payload(x_new), explored_, *grid_);
            pending_proxy_ = proxy;
            record_iteration_votes(proxy_vote(request, proxy, bt_, k_));
            break;
        }
        case VoterKind::Interactive:
            pending_votes_.clear();
            for (LocationId opp : request.opponents)
                pending_votes_.push_back({x_new, opp});
            phase_ = Phase::AwaitingVotes;
            break;
        }
    }

    /// Answers the pending vote request. The batch must cover every pending
    /// pair exactly once; otherwise nothing changes.
    void submit_votes(std::span<const Vote> votes)
    {
        if (phase_ != Phase::AwaitingInitVotes && phase_ != Phase::AwaitingVotes)
            throw StateError(std::string("submit_votes in phase ") + to_string(phase_));

        std::set<VotePair> expected(pending_votes_.begin(), pending_votes_.end());
        std::set<VotePair> seen;
        std::vector<ComparisonRecord> recs;
        for (const auto& v : votes) {
            const VotePair key{v.first, v.second};
            if (!expected.count(key))
                throw ArgumentError("vote (" + std::to_string(v.first.index) + ", " + std::to_string(v.second.index)
                    + ") does not belong to the pending request");
            if (!seen.insert(key).second)
                throw ArgumentError("vote (" + std::to_string(v.first.index) + ", " + std::to_string(v.second.index)
                    + ") answered twice");
            if (v.preferred != v.first && v.preferred != v.second)
                throw ArgumentError("preferred location " + std::to_string(v.preferred.index)
                    + " is not part of its pair");
            const LocationId loser = v.preferred == v.first ? v.second : v.first;
            recs.push_back({v.preferred, loser, VoteSource::Human, true,
                phase_ == Phase::AwaitingInitVotes ? 0 : k_});
        }
        std::vector<VotePair> missing;
        for (const auto& p : pending_votes_)
            if (!seen.count(p))
                missing.push_back(p);
        if (!missing.empty()) {
            std::string what = "vote batch incomplete, missing:";
            for (const auto& p : missing)
                what += " (" + std::to_string(p.first.index) + ", " + std::to_string(p.second.index) + ")";
            throw IncompleteVotesError(what, missing);
        }

        // records follow the order of the pending request
        std::map<VotePair, ComparisonRecord> by_pair;
        for (std::size_t i = 0; i < recs.size(); ++i)
            by_pair.emplace(VotePair{votes[i].first, votes[i].second}, recs[i]);
        std::vector<ComparisonRecord> ordered;
        for (const auto& p : pending_votes_)
            ordered.push_back(by_pair.at(p));

        if (phase_ == Phase::AwaitingInitVotes)
            complete_init(ordered);
        else
            record_iteration_votes(ordered);
    }

    /// Resolves the pending validation round in one call. Returns the number
    /// of corrections.
    std::size_t submit_validation(const std::set<std::size_t>& flips)
    {
        require(Phase::AwaitingValidation, "submit_validation");
        const auto pending = pending_proxy_records(log_);
        for (std::size_t i : flips)
            if (std::find(pending.begin(), pending.end(), i) == pending.end())
                throw ArgumentError("validation index " + std::to_string(i) + " is not a pending proxy vote");
        const std::size_t n = resolve_validation(flips);
        finish_iteration();
        return n;
    }

    std::vector<PendingValidationItem> pending_validation() const
    {
        std::vector<PendingValidationItem> out;
        for (std::size_t i : pending_proxy_records(log_)) {
            const auto& rec = log_[i];
            const LocationId subject = measured_at(rec.iteration);
            out.push_back({i, rec, subject, rec.winner == subject ? rec.loser : rec.winner});
        }
        return out;
    }

    std::vector<LocationId> unexplored() const
    {
        std::vector<LocationId> out;
        for (std::size_t i = 0; i < grid_->size(); ++i)
            if (!is_explored_[i])
                out.push_back(LocationId{i});
        return out;
    }

    LocationId incumbent() const { return current_best(bt_); }

    /// GP posterior over every location from the current utilities.
    MapSnapshot map() const
    {
        MapSnapshot snap;
        snap.height = grid_->height();
        snap.width = grid_->width();
        std::vector<double> targets;
        for (LocationId id : explored_) {
            const double u = bt_.contains(id) ? bt_.utility(id) : 0.0;
            snap.explored.emplace_back(id, u);
            targets.push_back(u);
        }
        std::vector<LocationId> all(grid_->size());
        for (std::size_t i = 0; i < all.size(); ++i)
            all[i] = LocationId{i};
        const auto gp = fit_gp(*inputs_, explored_, targets);
        const auto post = predict(gp, *inputs_, all);
        for (const auto& [id, m] : post.mean) {
            snap.mean.push_back(m);
            snap.variance.push_back(post.variance.at(id));
        }
        if (grid_->oracle_score()) {
            snap.baseline_kind = "oracle_score";
            snap.baseline = *grid_->oracle_score();
        }
        else if (grid_->kind() == PayloadKind::Spectrum && grid_->channels() == 2) {
            snap.baseline_kind = "loop_area";
            for (const auto& id : all)
                snap.baseline.push_back(loop_area(*grid_, id));
        }
        return snap;
    }

    Phase phase() const { return phase_; }
    std::size_t iteration() const { return k_; }
    const SessionConfig& config() const { return config_; }
    const ObservationGrid& grid() const { return *grid_; }
    std::shared_ptr<const ObservationGrid> grid_ptr() const { return grid_; }
    const std::vector<LocationId>& explored() const { return explored_; }
    const ComparisonLog& log() const { return log_; }
    const BtModel& model() const { return bt_; }
    const Metrics& metrics() const { return metrics_; }
    std::span<const VotePair> pending_votes() const { return pending_votes_; }
    std::optional<LocationId> pending_location() const { return pending_new_; }

    /// Versioned snapshot: everything needed to continue the run exactly.
    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["format"] = kSnapshotFormat;
        j["version"] = kSnapshotVersion;
        j["config"] = config_;
        j["dataset"] = {{"name", grid_->name()}, {"height", grid_->height()}, {"width", grid_->width()},
            {"fingerprint", grid_->fingerprint()}};
        j["phase"] = to_string(phase_);
        j["iteration"] = k_;
        std::vector<std::size_t> ex;
        for (auto id : explored_)
            ex.push_back(id.index);
        j["explored"] = ex;
        j["log"] = log_.records();
        nlohmann::json bt;
        bt["fitted_on"] = bt_.fitted_on;
        bt["converged"] = bt_.converged;
        bt["iterations_used"] = bt_.iterations_used;
        nlohmann::json utils = nlohmann::json::array();
        for (const auto& [id, u] : bt_.utilities)
            utils.push_back({id.index, u});
        bt["utilities"] = utils;
        j["bt"] = bt;
        std::ostringstream r1, r2;
        r1 << rng_;
        r2 << voter_rng_;
        j["rng"] = r1.str();
        j["voter_rng"] = r2.str();
        nlohmann::json pv = nlohmann::json::array();
        for (const auto& p : pending_votes_)
            pv.push_back({p.first.index, p.second.index});
        j["pending_votes"] = pv;
        j["pending_new"] = detail::optional_id(pending_new_);
        j["pending_proxy"] = detail::optional_id(pending_proxy_);
        j["metrics"] = metrics_;
        return j;
    }

    static Session from_json(const nlohmann::json& j, std::shared_ptr<const ObservationGrid> grid)
    {
        if (!grid)
            throw ArgumentError("session import needs a grid");
        try {
            if (!j.is_object() || j.value("format", "") != kSnapshotFormat)
                throw FormatError("not a px-BO session snapshot");
            if (j.at("version").get<int>() != kSnapshotVersion)
                throw FormatError("unsupported snapshot version " + j.at("version").dump());
            if (j.at("dataset").at("fingerprint").get<std::string>() != grid->fingerprint())
                throw FormatError("snapshot was recorded on a different dataset");

            Session s(std::move(grid), j.at("config").get<SessionConfig>());
            s.phase_ = phase_from_string(j.at("phase").get<std::string>());
            s.k_ = j.at("iteration").get<std::size_t>();
            for (auto idx : j.at("explored").get<std::vector<std::size_t>>()) {
                if (idx >= s.grid_->size())
                    throw FormatError("snapshot explored location out of range");
                s.add_explored(LocationId{idx});
            }
            s.log_ = ComparisonLog(j.at("log").get<std::vector<ComparisonRecord>>());
            const auto& bt = j.at("bt");
            s.bt_.fitted_on = bt.at("fitted_on").get<std::size_t>();
            s.bt_.converged = bt.at("converged").get<bool>();
            s.bt_.iterations_used = bt.at("iterations_used").get<std::size_t>();
            for (const auto& e : bt.at("utilities"))
                s.bt_.utilities.emplace(LocationId{e.at(0).get<std::size_t>()}, e.at(1).get<double>());
            std::istringstream r1(j.at("rng").get<std::string>()), r2(j.at("voter_rng").get<std::string>());
            r1 >> s.rng_;
            r2 >> s.voter_rng_;
            if (r1.fail() || r2.fail())
                throw FormatError("snapshot rng state is corrupt");
            for (const auto& p : j.at("pending_votes"))
                s.pending_votes_.push_back({LocationId{p.at(0).get<std::size_t>()}, LocationId{p.at(1).get<std::size_t>()}});
            s.pending_new_ = detail::optional_id_from(j.at("pending_new"));
            s.pending_proxy_ = detail::optional_id_from(j.at("pending_proxy"));
            s.metrics_ = j.at("metrics").get<Metrics>();
            return s;
        }
        catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("corrupt session snapshot: ") + e.what());
        }
    }

    static constexpr const char* kSnapshotFormat = "pxbo-session";
    static constexpr int kSnapshotVersion = 1;

private:
    Session(std::shared_ptr<const ObservationGrid> grid, const SessionConfig& config)
        : grid_(std::move(grid)),
          config_(config),
          rng_(config.rng_seed),
          voter_rng_(config.voter.rng_seed)
    {
        inputs_ = std::make_shared<const SurrogateInput>(make_inputs(*grid_, config_.surrogate_mode));
        is_explored_.assign(grid_->size(), false);
    }

    void require(Phase p, const char* op) const
    {
        if (phase_ != p)
            throw StateError(std::string(op) + " called in phase " + to_string(phase_) + ", needs " + to_string(p));
    }

    void add_explored(LocationId id)
    {
        if (is_explored_.at(id.index))
            throw StateError("location " + std::to_string(id.index) + " explored twice");
        is_explored_[id.index] = true;
        explored_.push_back(id);
    }

    bool exhausted() const { return explored_.size() >= grid_->size(); }

    LocationId measured_at(std::size_t iteration) const
    {
        return explored_.at(config_.init_samples + iteration - 1);
    }

    std::optional<double> oracle_of(LocationId id) const
    {
        if (!grid_->oracle_score())
            return std::nullopt;
        return (*grid_->oracle_score())[id.index];
    }

    IterationMetrics snapshot_metrics(std::size_t k) const
    {
        IterationMetrics m;
        m.k = k;
        m.incumbent = current_best(bt_);
        m.incumbent_utility = bt_.utility(m.incumbent);
        m.incumbent_oracle_score = oracle_of(m.incumbent);
        m.votes = metrics_.init_votes;
        m.votes.human += metrics_.loop_votes.human;
        m.votes.proxy += metrics_.loop_votes.proxy;
        m.votes.oracle += metrics_.loop_votes.oracle;
        return m;
    }

    void complete_init(const std::vector<ComparisonRecord>& recs)
    {
        log_.append(recs);
        for (const auto& r : recs)
            metrics_.init_votes.add(r.source);
        pending_votes_.clear();
        bt_ = fit(log_, explored_);
        metrics_.init = snapshot_metrics(0);
        k_ = 1;
        phase_ = (k_ > config_.max_iterations || exhausted()) ? Phase::Done : Phase::Running;
    }

    LocationId select_location()
    {
        const auto candidates = unexplored();
        if (candidates.empty())
            throw StateError("no unexplored locations left");
        if (config_.selection == SelectionStrategy::Random) {
            std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
            return candidates[pick(rng_)];
        }
        std::vector<double> targets;
        for (LocationId id : explored_)
            targets.push_back(bt_.utility(id));
        const auto gp = fit_gp(*inputs_, explored_, targets);
        const auto post = predict(gp, *inputs_, candidates);
        return select_next(post, bt_.max_utility(), config_.xi);
    }

    void record_iteration_votes(const std::vector<ComparisonRecord>& recs)
    {
        log_.append(recs);
        for (const auto& r : recs)
            metrics_.loop_votes.add(r.source);
        pending_votes_.clear();
        add_explored(*pending_new_);

        const bool last = k_ >= config_.max_iterations || exhausted();
        if (config_.voter.kind == VoterKind::ProxyAgent && !pending_proxy_records(log_).empty()
            && (k_ % config_.voter.validation_period == 0 || last)) {
            if (config_.voter.validator == VoterKind::Oracle) {
                resolve_validation(oracle_validation_flips());
            }
            else {
                phase_ = Phase::AwaitingValidation;
                return;
            }
        }
        finish_iteration();
    }

    // The oracle judges each pending vote on the actual new measurement.
    std::set<std::size_t> oracle_validation_flips()
    {
        std::set<std::size_t> flips;
        for (const auto& item : pending_validation()) {
            const LocationId judged = oracle_judge(item.new_location, item.opponent, *grid_->oracle_score(),
                config_.voter.oracle_flip_prob, voter_rng_);
            if (judged != item.record.winner)
                flips.insert(item.log_index);
        }
        return flips;
    }

    std::size_t resolve_validation(const std::set<std::size_t>& flips)
    {
        const std::size_t pending = pending_proxy_records(log_).size();
        const std::size_t n = apply_validation(log_, flips);
        metrics_.validations.push_back(
            {k_, pending, n, pending ? static_cast<double>(n) / static_cast<double>(pending) : 0.0});
        return n;
    }

    void finish_iteration()
    {
        bt_ = fit(log_, explored_);
        auto m = snapshot_metrics(k_);
        m.new_location = pending_new_;
        m.proxy = pending_proxy_;
        metrics_.iterations.push_back(m);
        pending_new_.reset();
        pending_proxy_.reset();
        ++k_;
        phase_ = (k_ > config_.max_iterations || exhausted()) ? Phase::Done : Phase::Running;
    }

    std::shared_ptr<const ObservationGrid> grid_;
    std::shared_ptr<const SurrogateInput> inputs_;
    SessionConfig config_;
    Phase phase_ = Phase::Running;
    std::size_t k_ = 1;
    std::vector<LocationId> explored_;
    std::vector<bool> is_explored_;
    ComparisonLog log_;
    BtModel bt_;
    Rng rng_;
    Rng voter_rng_;
    std::vector<VotePair> pending_votes_;
    std::optional<LocationId> pending_new_;
    std::optional<LocationId> pending_proxy_;
    Metrics metrics_;
};

/// Drives the session until Done. Suspensions go to `channel`; without one
/// a suspension is reported as a DeadlockError.
inline const Metrics& run_to_completion(Session& session, HumanChannel* channel = nullptr)
{
    while (session.phase() != Phase::Done) {
        switch (session.phase()) {
        case Phase::Running:
            session.step();
            break;
        case Phase::AwaitingInitVotes:
        case Phase::AwaitingVotes: {
            if (!channel)
                throw DeadlockError(std::string("session suspended in ") + to_string(session.phase())
                    + " with no answering channel");
            const std::vector<VotePair> pairs(session.pending_votes().begin(), session.pending_votes().end());
            const auto votes = channel->answer_votes(session, pairs);
            session.submit_votes(votes);
            break;
        }
        case Phase::AwaitingValidation: {
            if (!channel)
                throw DeadlockError("session suspended for validation with no answering channel");
            const auto items = session.pending_validation();
            session.submit_validation(channel->answer_validation(session, items));
            break;
        }
        case Phase::Done:
            break;
        }
    }
    return session.metrics();
}

/// Scripted stand-in for the human: answers votes and validations from the
/// grid's oracle scores, each judgement flipped with probability flip_prob.
class OracleChannel : public HumanChannel {
public:
    explicit OracleChannel(double flip_prob = 0.0, std::uint64_t seed = 0) : flip_prob_(flip_prob), rng_(seed) {}

    std::vector<Vote> answer_votes(const Session& session, std::span<const VotePair> pairs) override
    {
        std::vector<Vote> out;
        for (const auto& p : pairs)
            out.push_back({p.first, p.second, judge(session, p.first, p.second)});
        return out;
    }

    std::set<std::size_t> answer_validation(const Session& session,
        std::span<const PendingValidationItem> items) override
    {
        std::set<std::size_t> flips;
        for (const auto& it : items)
            if (judge(session, it.new_location, it.opponent) != it.record.winner)
                flips.insert(it.log_index);
        return flips;
    }

private:
    LocationId judge(const Session& session, LocationId a, LocationId b)
    {
        const auto& scores = session.grid().oracle_score();
        if (!scores)
            throw DataError("oracle channel needs oracle scores");
        return oracle_judge(a, b, *scores, flip_prob_, rng_);
    }

    double flip_prob_;
    Rng rng_;
};

inline void export_session(const Session& session, const std::filesystem::path& path,
    const nlohmann::json& extra = nullptr)
{
    auto j = session.to_json();
    if (!extra.is_null())
        j["extra"] = extra;
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw FormatError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

inline nlohmann::json read_snapshot(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    }
    catch (const nlohmann::json::exception& e) {
        throw FormatError("corrupt session snapshot " + path.string() + ": " + e.what());
    }
}

inline Session import_session(const std::filesystem::path& path, std::shared_ptr<const ObservationGrid> grid)
{
    return Session::from_json(read_snapshot(path), std::move(grid));
}

} // namespace pxbo

#endif // PXBO_ORCHESTRATOR_HPP
