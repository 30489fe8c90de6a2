#ifndef PXBO_SERVICE_HPP
#define PXBO_SERVICE_HPP

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <set>
#include <string>

#include "orchestrator.hpp"

#include <httplib.h>
#include <json.hpp>

namespace pxbo::service {

using nlohmann::json;

/// Status code plus JSON body, independent of the HTTP transport.
struct Response {
    int status = 200;
    json body;
};

inline Response error_response(int status, const std::string& message, json extra = json::object())
{
    extra["error"] = message;
    return {status, std::move(extra)};
}

/// Bundles below a root directory, one per subdirectory, loaded on first use.
class DatasetCatalog {
public:
    DatasetCatalog() = default;
    explicit DatasetCatalog(std::filesystem::path root) : root_(std::move(root)) {}

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        if (root_.empty() || !std::filesystem::is_directory(root_))
            return out;
        for (const auto& e : std::filesystem::directory_iterator(root_))
            if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json"))
                out.push_back(e.path().filename().string());
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Null when no bundle of that name exists.
    std::shared_ptr<const ObservationGrid> get(const std::string& name)
    {
        std::lock_guard lock(mutex_);
        if (auto it = cache_.find(name); it != cache_.end())
            return it->second;
        if (root_.empty() || name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos)
            return nullptr;
        const auto dir = root_ / name;
        if (!std::filesystem::exists(dir / "manifest.json"))
            return nullptr;
        auto grid = std::make_shared<const ObservationGrid>(load_bundle(dir));
        cache_.emplace(name, grid);
        return grid;
    }

    void add(const std::string& name, std::shared_ptr<const ObservationGrid> grid)
    {
        std::lock_guard lock(mutex_);
        cache_[name] = std::move(grid);
    }

private:
    std::filesystem::path root_;
    std::mutex mutex_;
    std::map<std::string, std::shared_ptr<const ObservationGrid>> cache_;
};

/// Payload as JSON render data: image patches row-major with their shape,
/// spectra as one array per channel.
inline json render_payload(const ObservationGrid& grid, LocationId id)
{
    const auto p = grid.payload(id);
    const auto shape = grid.payload_shape();
    json out{{"id", id.index}, {"row", grid.row(id)}, {"col", grid.col(id)}, {"kind", to_string(shape.kind)}};
    if (shape.kind == PayloadKind::ImagePatch) {
        out["shape"] = {shape.rows, shape.cols};
        out["data"] = std::vector<float>(p.begin(), p.end());
    }
    else {
        json channels = json::array();
        for (std::size_t c = 0; c < shape.rows; ++c) {
            auto ch = p.subspan(c * shape.cols, shape.cols);
            channels.push_back(std::vector<float>(ch.begin(), ch.end()));
        }
        out["channels"] = channels;
    }
    return out;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t)
{
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline json location_json(const ObservationGrid& grid, LocationId id)
{
    return {{"id", id.index}, {"row", grid.row(id)}, {"col", grid.col(id)}};
}

inline json state_json(const std::string& id, const Session& s)
{
    json j{{"id", id}, {"phase", to_string(s.phase())}, {"k", s.iteration()}, {"explored", s.explored().size()},
        {"config", s.config()},
        {"dataset", {{"name", s.grid().name()}, {"height", s.grid().height()}, {"width", s.grid().width()},
                        {"kind", to_string(s.grid().kind())}}}};
    if (s.model().utilities.empty()) {
        j["incumbent"] = nullptr;
    }
    else {
        const LocationId inc = s.incumbent();
        auto inc_json = location_json(s.grid(), inc);
        inc_json["utility"] = s.model().utility(inc);
        if (s.grid().oracle_score())
            inc_json["oracle_score"] = (*s.grid().oracle_score())[inc.index];
        j["incumbent"] = inc_json;
    }
    return j;
}

inline json pending_json(const Session& s)
{
    json j{{"phase", to_string(s.phase())}, {"k", s.iteration()}};
    std::set<LocationId> shown;
    if (s.phase() == Phase::AwaitingInitVotes || s.phase() == Phase::AwaitingVotes) {
        json cmp = json::array();
        for (const auto& p : s.pending_votes()) {
            cmp.push_back({{"new_location", p.first.index}, {"opponent", p.second.index}});
            shown.insert(p.first);
            shown.insert(p.second);
        }
        j["pending"] = {{"type", "comparisons"}, {"comparisons", cmp}};
    }
    else if (s.phase() == Phase::AwaitingValidation) {
        json items = json::array();
        for (const auto& it : s.pending_validation()) {
            items.push_back({{"log_index", it.log_index}, {"new_location", it.new_location.index},
                {"opponent", it.opponent.index}, {"winner", it.record.winner.index},
                {"loser", it.record.loser.index}, {"iteration", it.record.iteration}});
            shown.insert(it.new_location);
            shown.insert(it.opponent);
        }
        j["pending"] = {{"type", "validation"}, {"items", items}};
    }
    else {
        j["pending"] = nullptr;
        return j;
    }
    json payloads = json::object();
    for (LocationId id : shown)
        payloads[std::to_string(id.index)] = render_payload(s.grid(), id);
    j["pending"]["payloads"] = payloads;
    return j;
}

inline json map_json(const Session& s)
{
    const auto snap = s.map();
    json explored = json::array();
    for (const auto& [id, u] : snap.explored) {
        auto e = location_json(s.grid(), id);
        e["utility"] = u;
        explored.push_back(e);
    }
    return {{"height", snap.height}, {"width", snap.width}, {"k", s.iteration()}, {"mean", snap.mean},
        {"variance", snap.variance}, {"explored", explored},
        {"baseline", snap.baseline_kind.empty() ? json(nullptr)
                                                : json{{"kind", snap.baseline_kind}, {"values", snap.baseline}}}};
}

inline json metrics_json(const Session& s)
{
    json j = s.metrics();
    j["best_oracle_score"] = s.metrics().best_oracle_score();
    j["best_utility"] = s.metrics().best_utility();
    j["correction_rates"] = s.metrics().correction_rates();
    return j;
}

/// In-process session registry behind the HTTP API. Each session has one
/// writer at a time; mutations run on a copy that replaces the live state
/// only on success. Reads use the last published copy and never block on a
/// running step.
class Service {
public:
    explicit Service(std::shared_ptr<DatasetCatalog> catalog = std::make_shared<DatasetCatalog>())
        : catalog_(std::move(catalog)), token_rng_(std::random_device{}())
    {
    }

    DatasetCatalog& catalog() { return *catalog_; }

    Response list_datasets() const { return {200, json{{"datasets", catalog_->names()}}}; }

    Response list_sessions() const
    {
        json out = json::array();
        std::lock_guard lock(registry_mutex_);
        for (const auto& [id, e] : sessions_)
            out.push_back(describe(id, *e));
        return {200, json{{"sessions", out}}};
    }

    /// Body: {"dataset": name} or {"synthetic": {height, width, image_side,
    /// noise, seed}}, plus an optional "config" object.
    Response create_session(const json& body)
    {
        if (!body.is_object())
            return error_response(422, "request body must be a JSON object");
        std::shared_ptr<const ObservationGrid> grid;
        try {
            if (body.contains("dataset")) {
                if (!body["dataset"].is_string())
                    return error_response(422, "\"dataset\" must be a string");
                grid = catalog_->get(body["dataset"].get<std::string>());
                if (!grid)
                    return error_response(422, "unknown dataset \"" + body["dataset"].get<std::string>() + "\"");
            }
            else if (body.contains("synthetic")) {
                const auto& g = body["synthetic"];
                grid = std::make_shared<const ObservationGrid>(generate_domain_wall_grid(g.value("height", 20u),
                    g.value("width", 20u), g.value("image_side", 16u), g.value("noise", 0.1),
                    g.value("seed", std::uint64_t{0})));
            }
            else {
                return error_response(422, "body needs \"dataset\" or \"synthetic\"");
            }
            SessionConfig config;
            if (body.contains("config"))
                merge_config(config, body["config"]);
            auto session = Session::initialize(grid, config);

            auto entry = std::make_shared<Entry>(std::move(session));
            std::string id;
            {
                std::lock_guard lock(registry_mutex_);
                id = next_id();
                sessions_.emplace(id, entry);
            }
            return {201, describe(id, *entry)};
        }
        catch (const json::exception& e) {
            return error_response(422, std::string("malformed body: ") + e.what());
        }
        catch (const Error& e) {
            return error_response(422, e.what());
        }
    }

    Response get_state(const std::string& id) const
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        return {200, describe(id, *e)};
    }

    Response get_pending(const std::string& id) const
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        return {200, pending_json(*e->read())};
    }

    Response get_map(const std::string& id) const
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        try {
            return {200, map_json(*e->read())};
        }
        catch (const Error& ex) {
            return error_response(500, ex.what());
        }
    }

    Response get_metrics(const std::string& id) const
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        return {200, metrics_json(*e->read())};
    }

    /// Body: [{new_location, opponent, preferred}] or {"votes": [...]},
    /// optionally with "k" and "phase" naming the request being answered.
    Response post_votes(const std::string& id, const json& body)
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        const json* list = &body;
        if (body.is_object()) {
            if (!body.contains("votes"))
                return error_response(422, "body needs a \"votes\" array");
            list = &body["votes"];
        }
        if (!list->is_array())
            return error_response(422, "votes must be an array");

        std::vector<Vote> votes;
        try {
            for (const auto& v : *list) {
                const auto first = v.contains("new_location") ? v.at("new_location") : v.at("first");
                const auto second = v.contains("opponent") ? v.at("opponent") : v.at("second");
                votes.push_back({LocationId{first.get<std::size_t>()}, LocationId{second.get<std::size_t>()},
                    LocationId{v.at("preferred").get<std::size_t>()}});
            }
        }
        catch (const json::exception& ex) {
            return error_response(422, std::string("malformed vote: ") + ex.what());
        }

        return e->mutate([&](Session& s) -> Response {
            if (s.phase() != Phase::AwaitingInitVotes && s.phase() != Phase::AwaitingVotes)
                return error_response(409, std::string("no votes pending in phase ") + to_string(s.phase()));
            if (auto r = check_request_key(s, body))
                return *r;
            const std::set<VotePair> pending(s.pending_votes().begin(), s.pending_votes().end());
            for (const auto& v : votes)
                if (!pending.count({v.first, v.second}))
                    return error_response(409, "vote (" + std::to_string(v.first.index) + ", "
                            + std::to_string(v.second.index) + ") targets a request other than the pending one");
            try {
                s.submit_votes(votes);
            }
            catch (const IncompleteVotesError& ex) {
                json missing = json::array();
                for (const auto& p : ex.missing())
                    missing.push_back({{"new_location", p.first.index}, {"opponent", p.second.index}});
                return error_response(422, ex.what(), {{"missing", missing}});
            }
            return {200, {{"phase", to_string(s.phase())}, {"k", s.iteration()}}};
        });
    }

    /// Body: {"flip": [log indices]}; resolves every pending validation.
    Response post_validate(const std::string& id, const json& body)
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        std::set<std::size_t> flips;
        try {
            if (!body.is_object() || !body.contains("flip") || !body["flip"].is_array())
                return error_response(422, "body needs a \"flip\" array");
            for (const auto& f : body["flip"])
                flips.insert(f.get<std::size_t>());
        }
        catch (const json::exception& ex) {
            return error_response(422, std::string("malformed flip list: ") + ex.what());
        }
        return e->mutate([&](Session& s) -> Response {
            if (s.phase() != Phase::AwaitingValidation)
                return error_response(409, std::string("no validation pending in phase ") + to_string(s.phase()));
            if (auto r = check_request_key(s, body))
                return *r;
            const std::size_t n = s.submit_validation(flips);
            return {200, {{"corrections", n}, {"phase", to_string(s.phase())}, {"k", s.iteration()}}};
        });
    }

    /// Steps the loop until it suspends or finishes. Optional body
    /// {"max_iterations": n} bounds the number of steps.
    Response post_step(const std::string& id, const json& body)
    {
        auto e = find(id);
        if (!e)
            return not_found(id);
        std::size_t limit = std::numeric_limits<std::size_t>::max();
        if (body.is_object() && body.contains("max_iterations")) {
            const auto& v = body["max_iterations"];
            if (!v.is_number_integer() || v.get<std::int64_t>() <= 0)
                return error_response(422, "max_iterations must be a positive integer");
            limit = v.get<std::size_t>();
        }
        return e->mutate([&](Session& s) -> Response {
            if (s.phase() != Phase::Running)
                return error_response(409, std::string("cannot step in phase ") + to_string(s.phase()));
            std::size_t steps = 0;
            while (s.phase() == Phase::Running && steps < limit) {
                s.step();
                ++steps;
            }
            return {200, {{"phase", to_string(s.phase())}, {"k", s.iteration()}, {"steps", steps}}};
        });
    }

    /// Snapshot of a session for export; null when unknown.
    std::shared_ptr<const Session> snapshot(const std::string& id) const
    {
        auto e = find(id);
        return e ? e->read() : nullptr;
    }

private:
    struct Entry {
        explicit Entry(Session s) : live(std::move(s)), published(std::make_shared<const Session>(live)) {}

        std::shared_ptr<const Session> read() const
        {
            std::lock_guard lock(publish_mutex);
            return published;
        }

        std::chrono::system_clock::time_point last_update() const
        {
            std::lock_guard lock(publish_mutex);
            return updated;
        }

        template <typename F>
        Response mutate(F&& f)
        {
            std::lock_guard writer(write_mutex);
            Session work = live;
            Response r;
            try {
                r = f(work);
            }
            catch (const StateError& e) {
                return error_response(409, e.what());
            }
            catch (const ArgumentError& e) {
                return error_response(422, e.what());
            }
            catch (const Error& e) {
                return error_response(500, e.what());
            }
            if (r.status < 300) {
                live = std::move(work);
                auto pub = std::make_shared<const Session>(live);
                std::lock_guard lock(publish_mutex);
                published = std::move(pub);
                updated = std::chrono::system_clock::now();
            }
            return r;
        }

        std::mutex write_mutex;
        Session live;
        mutable std::mutex publish_mutex;
        std::shared_ptr<const Session> published;
        const std::chrono::system_clock::time_point created = std::chrono::system_clock::now();
        std::chrono::system_clock::time_point updated = created;
    };

    static json describe(const std::string& id, const Entry& e)
    {
        json j = state_json(id, *e.read());
        j["created"] = utc_timestamp(e.created);
        j["updated"] = utc_timestamp(e.last_update());
        return j;
    }

    static std::optional<Response> check_request_key(const Session& s, const json& body)
    {
        if (!body.is_object())
            return std::nullopt;
        if (body.contains("k") && (!body["k"].is_number_integer() || body["k"].get<std::int64_t>() != static_cast<std::int64_t>(s.iteration())))
            return error_response(409, "request key k does not match the pending request (k = "
                    + std::to_string(s.iteration()) + ")");
        if (body.contains("phase") && body["phase"] != to_string(s.phase()))
            return error_response(409, std::string("request key phase does not match (phase = ")
                    + to_string(s.phase()) + ")");
        return std::nullopt;
    }

    static Response not_found(const std::string& id) { return error_response(404, "unknown session \"" + id + "\""); }

    std::shared_ptr<Entry> find(const std::string& id) const
    {
        std::lock_guard lock(registry_mutex_);
        auto it = sessions_.find(id);
        return it == sessions_.end() ? nullptr : it->second;
    }

    std::string next_id()
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "s%llu-%08llx", static_cast<unsigned long long>(++counter_),
            static_cast<unsigned long long>(token_rng_() & 0xffffffffull));
        return buf;
    }

    std::shared_ptr<DatasetCatalog> catalog_;
    mutable std::mutex registry_mutex_;
    std::map<std::string, std::shared_ptr<Entry>> sessions_;
    std::uint64_t counter_ = 0;
    std::mt19937_64 token_rng_;
};

struct ServerOptions {
    /// Value of Access-Control-Allow-Origin; empty disables CORS headers.
    std::string console_origin = "*";
};

/// Registers the API routes on an httplib server.
inline void mount(httplib::Server& server, Service& service, const ServerOptions& options = {})
{
    auto reply = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    auto parse = [](const httplib::Request& req, json& out) -> bool {
        if (req.body.empty()) {
            out = json::object();
            return true;
        }
        out = json::parse(req.body, nullptr, false);
        return !out.is_discarded();
    };
    auto with_body = [reply, parse](auto handler) {
        return [reply, parse, handler](const httplib::Request& req, httplib::Response& res) {
            json body;
            if (!parse(req, body))
                return reply(res, error_response(422, "request body is not valid JSON"));
            reply(res, handler(req, body));
        };
    };

    if (!options.console_origin.empty()) {
        const std::string origin = options.console_origin;
        server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", origin);
        });
        server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });
    }

    server.Get("/health", [reply](const httplib::Request&, httplib::Response& res) {
        reply(res, {200, json{{"status", "ok"}}});
    });
    server.Get("/datasets",
        [reply, &service](const httplib::Request&, httplib::Response& res) { reply(res, service.list_datasets()); });
    server.Get("/sessions",
        [reply, &service](const httplib::Request&, httplib::Response& res) { reply(res, service.list_sessions()); });
    server.Post("/sessions",
        with_body([&service](const httplib::Request&, const json& b) { return service.create_session(b); }));
    server.Get(R"(/sessions/([^/]+)/state)", [reply, &service](const httplib::Request& req, httplib::Response& res) {
        reply(res, service.get_state(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/pending)", [reply, &service](const httplib::Request& req, httplib::Response& res) {
        reply(res, service.get_pending(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/map)", [reply, &service](const httplib::Request& req, httplib::Response& res) {
        reply(res, service.get_map(req.matches[1]));
    });
    server.Get(R"(/sessions/([^/]+)/metrics)", [reply, &service](const httplib::Request& req, httplib::Response& res) {
        reply(res, service.get_metrics(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/votes)", with_body([&service](const httplib::Request& req, const json& b) {
        return service.post_votes(req.matches[1], b);
    }));
    server.Post(R"(/sessions/([^/]+)/validate)", with_body([&service](const httplib::Request& req, const json& b) {
        return service.post_validate(req.matches[1], b);
    }));
    server.Post(R"(/sessions/([^/]+)/step)", with_body([&service](const httplib::Request& req, const json& b) {
        return service.post_step(req.matches[1], b);
    }));
}

} // namespace pxbo::service

#endif // PXBO_SERVICE_HPP
