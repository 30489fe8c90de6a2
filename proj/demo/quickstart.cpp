// Runs one proxy-voted session with oracle validation on a small synthetic
// grid and prints the incumbent after every iteration.
#include <iostream>
#include <memory>

#include <pxbo/pxbo.hpp>

int main()
{
    auto grid = std::make_shared<const pxbo::ObservationGrid>(pxbo::generate_domain_wall_grid(20, 20, 16, 0.05, 1));

    pxbo::SessionConfig config;
    config.max_iterations = 20;
    config.voter.kind = pxbo::VoterKind::ProxyAgent;
    config.voter.validator = pxbo::VoterKind::Oracle;
    config.voter.validation_period = 4;
    config.rng_seed = 7;

    auto session = pxbo::Session::initialize(grid, config);
    const auto& metrics = pxbo::run_to_completion(session);

    const auto best = pxbo::synthetic::best_index(grid->size());
    std::cout << "best location on grid: " << best << " (score " << (*grid->oracle_score())[best] << ")\n";
    for (const auto& it : metrics.iterations)
        std::cout << "k=" << it.k << " incumbent=" << it.incumbent.index << " score=" << *it.incumbent_oracle_score
                  << '\n';
    for (const auto& v : metrics.validations)
        std::cout << "validation at k=" << v.k << ": " << v.flips << "/" << v.pending << " corrected\n";
}
