#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include <pxbo/pxbo.hpp>
#include <pxbo/service.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pxbo;

namespace {

std::uint64_t env_seed()
{
    if (const char* s = std::getenv("PXBO_SEED")) {
        try {
            return std::stoull(s);
        }
        catch (const std::exception&) {
            throw ArgumentError(std::string("PXBO_SEED is not an unsigned integer: ") + s);
        }
    }
    return 0;
}

std::uint64_t derived_voter_seed(std::uint64_t seed)
{
    return seed + 0x9E3779B97F4A7C15ull;
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& s)
{
    const auto x = s.find_first_of("xX");
    if (x == std::string::npos)
        throw ArgumentError("--grid must look like HxW, got \"" + s + "\"");
    try {
        return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
    }
    catch (const std::exception&) {
        throw ArgumentError("--grid must look like HxW, got \"" + s + "\"");
    }
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw FormatError("cannot write " + path.string());
    out << text;
}

std::string grid_csv(const std::vector<double>& values, std::size_t height, std::size_t width)
{
    std::ostringstream os;
    for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            if (c)
                os << ',';
            os << detail::format_double(values[r * width + c]);
        }
        os << '\n';
    }
    return os.str();
}

double median(std::vector<double> v)
{
    if (v.empty())
        return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Writes the snapshot, metrics and posterior grids of a finished run.
void write_run_outputs(const Session& s, const fs::path& out, const json& extra)
{
    fs::create_directories(out);
    export_session(s, out / "session.json", extra);
    std::ostringstream metrics, validations;
    write_metrics_csv(s.metrics(), metrics);
    write_validations_csv(s.metrics(), validations);
    write_text(out / "metrics.csv", metrics.str());
    write_text(out / "validations.csv", validations.str());

    const auto snap = s.map();
    write_text(out / "posterior_mean.csv", grid_csv(snap.mean, snap.height, snap.width));
    write_text(out / "posterior_variance.csv", grid_csv(snap.variance, snap.height, snap.width));
    if (!snap.baseline.empty())
        write_text(out / ("baseline_" + snap.baseline_kind + ".csv"), grid_csv(snap.baseline, snap.height, snap.width));
    std::ostringstream ex;
    ex << "id,row,col,utility\n";
    for (const auto& [id, u] : snap.explored)
        ex << id.index << ',' << s.grid().row(id) << ',' << s.grid().col(id) << ',' << detail::format_double(u) << '\n';
    write_text(out / "explored.csv", ex.str());
}

struct RunOptions {
    std::string dataset;
    std::string out;
    std::string config_file;
    std::string voter, validator, surrogate, selection;
    double flip_prob = 0, xi = kDefaultXi;
    std::size_t init_samples = 0, init_comparisons = 0, q = 0, m = 0, iters = 0;
    std::uint64_t seed = 0, voter_seed = 0;
};

int cmd_gen_synthetic(const std::string& grid_spec, std::size_t side, double noise, std::optional<std::uint64_t> seed,
    const std::string& out)
{
    const auto [h, w] = parse_grid(grid_spec);
    const std::uint64_t s = seed ? *seed : env_seed();
    const auto grid = generate_domain_wall_grid(h, w, side, noise, s);
    write_bundle(grid, out);
    std::cout << "wrote " << grid.name() << " (" << h << "x" << w << ", " << side << "x" << side << " patches) to "
              << out << '\n';
    return 0;
}

int cmd_inspect(const std::string& dataset)
{
    const auto g = load_bundle(dataset);
    json j{{"name", g.name()}, {"height", g.height()}, {"width", g.width()}, {"kind", to_string(g.kind())},
        {"payload_size", g.payload_size()}, {"data_range", g.data_range()}, {"fingerprint", g.fingerprint()},
        {"has_oracle_score", g.oracle_score().has_value()}};
    if (g.oracle_score()) {
        const auto& s = *g.oracle_score();
        const auto best = std::max_element(s.begin(), s.end()) - s.begin();
        j["oracle_best"] = {{"id", best}, {"score", s[static_cast<std::size_t>(best)]}};
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

int cmd_run(const CLI::App& sub, const RunOptions& o)
{
    SessionConfig config;
    config.rng_seed = env_seed();
    bool voter_seed_given = false;
    if (!o.config_file.empty()) {
        std::ifstream in(o.config_file);
        if (!in)
            throw FormatError("cannot open config " + o.config_file);
        json j = json::parse(in, nullptr, false);
        if (j.is_discarded())
            throw FormatError("config " + o.config_file + " is not valid JSON");
        merge_config(config, j);
        voter_seed_given = j.contains("voter_seed") || j.contains("voter-seed");
    }
    auto given = [&sub](const char* name) { return sub.get_option(name)->count() > 0; };
    if (given("--voter")) config.voter.kind = voter_kind_from_string(o.voter);
    if (given("--validator")) config.voter.validator = voter_kind_from_string(o.validator);
    if (given("--flip-prob")) config.voter.oracle_flip_prob = o.flip_prob;
    if (given("--init-samples")) config.init_samples = o.init_samples;
    if (given("--init-comparisons")) config.init_comparisons = o.init_comparisons;
    if (given("--q")) config.q = o.q;
    if (given("--m")) config.voter.validation_period = o.m;
    if (given("--iters")) config.max_iterations = o.iters;
    if (given("--surrogate")) config.surrogate_mode = surrogate_mode_from_string(o.surrogate);
    if (given("--selection")) config.selection = selection_from_string(o.selection);
    if (given("--xi")) config.xi = o.xi;
    if (given("--seed"))
        config.rng_seed = o.seed;
    if (given("--voter-seed")) {
        config.voter.rng_seed = o.voter_seed;
        voter_seed_given = true;
    }
    if (!voter_seed_given)
        config.voter.rng_seed = derived_voter_seed(config.rng_seed);

    auto grid = std::make_shared<const ObservationGrid>(load_bundle(o.dataset));
    auto session = Session::initialize(grid, config);
    run_to_completion(session);

    json extra{{"dataset_path", fs::absolute(o.dataset).lexically_normal().string()}};
    write_run_outputs(session, o.out, extra);

    const auto& m = session.metrics();
    std::cout << "run finished: k=" << m.iterations.size() << " incumbent=" << session.incumbent().index;
    if (auto f = m.final_oracle_score())
        std::cout << " oracle_score=" << detail::format_double(*f);
    std::cout << " -> " << o.out << '\n';
    return session.phase() == Phase::Done ? 0 : 1;
}

struct RunSummary {
    fs::path dir;
    SessionConfig config;
    Metrics metrics;
    std::string dataset_path;
};

RunSummary load_run(const fs::path& dir)
{
    const auto j = read_snapshot(dir / "session.json");
    RunSummary r;
    r.dir = dir;
    try {
        r.config = j.at("config").get<SessionConfig>();
        r.metrics = j.at("metrics").get<Metrics>();
        r.dataset_path = j.at("extra").at("dataset_path").get<std::string>();
    }
    catch (const nlohmann::json::exception& e) {
        throw FormatError("run " + dir.string() + ": " + e.what());
    }
    return r;
}

std::vector<double> oracle_trace(const Metrics& m)
{
    std::vector<double> t;
    if (m.init.incumbent_oracle_score)
        t.push_back(*m.init.incumbent_oracle_score);
    for (double v : m.best_oracle_score())
        t.push_back(v);
    return t;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out, bool baseline)
{
    std::vector<RunSummary> runs;
    for (const auto& d : dirs)
        runs.push_back(load_run(d));
    if (runs.empty())
        throw ArgumentError("compare needs at least one run directory");

    // random-sampling baselines with the same config, seed and budget
    std::vector<std::future<Metrics>> jobs;
    if (baseline) {
        for (const auto& r : runs) {
            jobs.push_back(std::async(std::launch::async, [r] {
                auto cfg = r.config;
                cfg.selection = SelectionStrategy::Random;
                auto grid = std::make_shared<const ObservationGrid>(load_bundle(r.dataset_path));
                auto s = Session::initialize(grid, cfg);
                return run_to_completion(s);
            }));
        }
    }
    std::vector<Metrics> random_runs;
    for (auto& j : jobs)
        random_runs.push_back(j.get());

    std::size_t len = 0;
    for (const auto& r : runs)
        len = std::max(len, oracle_trace(r.metrics).size());
    std::ostringstream trace;
    trace << "k,median_best_oracle_score" << (baseline ? ",median_random_oracle_score" : "") << ",runs\n";
    for (std::size_t k = 0; k < len; ++k) {
        std::vector<double> bo, rnd;
        for (const auto& r : runs)
            if (auto t = oracle_trace(r.metrics); k < t.size())
                bo.push_back(t[k]);
        for (const auto& m : random_runs)
            if (auto t = oracle_trace(m); k < t.size())
                rnd.push_back(t[k]);
        trace << k << ',' << detail::format_double(median(bo));
        if (baseline)
            trace << ',' << detail::format_double(median(rnd));
        trace << ',' << bo.size() << '\n';
    }

    std::size_t rounds = 0;
    for (const auto& r : runs)
        rounds = std::max(rounds, r.metrics.validations.size());
    std::ostringstream corr;
    corr << "round,k,mean_rate,median_rate,runs\n";
    double rate_sum = 0;
    std::size_t rate_n = 0;
    for (std::size_t i = 0; i < rounds; ++i) {
        std::vector<double> rates;
        std::size_t k = 0;
        for (const auto& r : runs) {
            if (i < r.metrics.validations.size()) {
                rates.push_back(r.metrics.validations[i].rate);
                k = r.metrics.validations[i].k;
            }
        }
        double mean = 0;
        for (double v : rates)
            mean += v;
        mean /= static_cast<double>(rates.size());
        rate_sum += mean * static_cast<double>(rates.size());
        rate_n += rates.size();
        corr << i + 1 << ',' << k << ',' << detail::format_double(mean) << ',' << detail::format_double(median(rates))
             << ',' << rates.size() << '\n';
    }

    std::vector<double> finals, random_finals;
    for (const auto& r : runs)
        if (auto f = r.metrics.final_oracle_score())
            finals.push_back(*f);
    for (const auto& m : random_runs)
        if (auto f = m.final_oracle_score())
            random_finals.push_back(*f);

    json summary{{"runs", runs.size()}, {"median_final_oracle_score", finals.empty() ? json(nullptr) : json(median(finals))}};
    if (baseline)
        summary["median_random_final_oracle_score"] = random_finals.empty() ? json(nullptr) : json(median(random_finals));
    summary["mean_correction_rate"] = rate_n ? json(rate_sum / static_cast<double>(rate_n)) : json(nullptr);

    if (!out.empty()) {
        fs::create_directories(out);
        write_text(fs::path(out) / "oracle_trace.csv", trace.str());
        write_text(fs::path(out) / "correction_rates.csv", corr.str());
        write_text(fs::path(out) / "summary.json", summary.dump(2) + "\n");
    }
    else {
        std::cout << trace.str() << '\n' << corr.str() << '\n';
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_serve(const std::string& datasets, const std::string& listen, const std::string& origin)
{
    const auto colon = listen.rfind(':');
    if (colon == std::string::npos)
        throw ArgumentError("--listen must look like ADDR:PORT");
    const std::string host = listen.substr(0, colon);
    const int port = std::stoi(listen.substr(colon + 1));

    service::Service svc(std::make_shared<service::DatasetCatalog>(datasets));
    httplib::Server server;
    service::mount(server, svc, {origin});
    std::cout << "pxbo service on http://" << host << ':' << port << " (datasets: " << datasets << ")" << std::endl;
    if (!server.listen(host, port))
        throw Error("cannot listen on " + listen);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"px-BO: preference-driven Bayesian optimization over a measurement grid"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic domain-wall dataset bundle");
    std::string grid_spec = "20x20", gen_out;
    std::size_t side = 16;
    double noise = 0.1;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--grid", grid_spec, "Grid size HxW")->capture_default_str();
    gen->add_option("--image-side", side, "Patch side in pixels")->capture_default_str();
    gen->add_option("--noise", noise, "Gaussian pixel noise sigma")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Random seed (default: $PXBO_SEED or 0)");
    gen->add_option("--out", gen_out, "Output bundle directory")->required();

    auto* inspect = app.add_subcommand("inspect", "Summarize a dataset bundle");
    std::string inspect_dir;
    inspect->add_option("--dataset", inspect_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);

    auto* run = app.add_subcommand("run", "Headless px-BO run with a scripted voter");
    RunOptions ro;
    SessionConfig defaults;
    ro.init_samples = defaults.init_samples;
    ro.init_comparisons = defaults.init_comparisons;
    ro.q = defaults.q;
    ro.m = defaults.voter.validation_period;
    ro.iters = defaults.max_iterations;
    ro.voter = "oracle";
    ro.validator = "oracle";
    ro.surrogate = "coord";
    ro.selection = "ei";
    run->add_option("--dataset", ro.dataset, "Bundle directory")->required()->check(CLI::ExistingDirectory);
    run->add_option("--out", ro.out, "Output directory")->required();
    run->add_option("--config", ro.config_file, "JSON config; flags given on the command line take precedence")
        ->check(CLI::ExistingFile);
    run->add_option("--voter", ro.voter, "oracle | proxy")->capture_default_str();
    run->add_option("--validator", ro.validator, "Validator standing in for the human with --voter proxy")
        ->capture_default_str();
    run->add_option("--flip-prob", ro.flip_prob, "Oracle flip probability rho")->capture_default_str();
    run->add_option("--init-samples", ro.init_samples, "Initial random samples j")->capture_default_str();
    run->add_option("--init-comparisons", ro.init_comparisons, "Initial comparisons in total")->capture_default_str();
    run->add_option("--q", ro.q, "Comparisons per new location")->capture_default_str();
    run->add_option("--m", ro.m, "Validation period (proxy voter)")->capture_default_str();
    run->add_option("--iters", ro.iters, "Loop iterations M")->capture_default_str();
    run->add_option("--surrogate", ro.surrogate, "coord | feature")->capture_default_str();
    run->add_option("--selection", ro.selection, "ei | random")->capture_default_str();
    run->add_option("--xi", ro.xi, "Expected-improvement exploration margin")->capture_default_str();
    run->add_option("--seed", ro.seed, "Loop seed (default: $PXBO_SEED or 0)");
    run->add_option("--voter-seed", ro.voter_seed, "Voter seed (default: derived from --seed)");

    auto* serve = app.add_subcommand("serve", "Start the HTTP JSON API");
    std::string datasets = ".", listen = "127.0.0.1:8080", origin = "*";
    serve->add_option("--datasets", datasets, "Directory of dataset bundles")->capture_default_str();
    serve->add_option("--listen", listen, "ADDR:PORT")->capture_default_str();
    serve->add_option("--console-origin", origin, "Allowed CORS origin")->capture_default_str();

    auto* compare = app.add_subcommand("compare", "Aggregate run directories");
    std::vector<std::string> run_dirs;
    std::string compare_out;
    bool no_baseline = false;
    compare->add_option("--runs", run_dirs, "Run output directories")->required()->check(CLI::ExistingDirectory);
    compare->add_option("--out", compare_out, "Write CSV/JSON summaries here");
    compare->add_flag("--no-baseline", no_baseline, "Skip the random-sampling baseline");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen)
            return cmd_gen_synthetic(grid_spec, side, noise, gen_seed, gen_out);
        if (*inspect)
            return cmd_inspect(inspect_dir);
        if (*run)
            return cmd_run(*run, ro);
        if (*serve)
            return cmd_serve(datasets, listen, origin);
        if (*compare)
            return cmd_compare(run_dirs, compare_out, !no_baseline);
    }
    catch (const Error& e) {
        std::cerr << "pxbo: " << e.what() << '\n';
        return 1;
    }
    catch (const std::exception& e) {
        std::cerr << "pxbo: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
