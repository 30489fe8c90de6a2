#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <pxbo/service.hpp>

#include "temp_dir.hpp"

using namespace pxbo;
using namespace pxbo::service;

namespace {

json synthetic_body(const std::string& voter, const std::string& validator = "oracle", std::size_t iters = 4,
    std::size_t m = 2)
{
    return {{"synthetic", {{"height", 6}, {"width", 6}, {"image_side", 8}, {"noise", 0.1}, {"seed", 3}}},
        {"config", {{"voter", voter}, {"validator", validator}, {"iters", iters}, {"m", m}, {"seed", 1}}}};
}

/// Answers every pending comparison in favour of the higher oracle score.
json answer_all(Service& svc, const std::string& id)
{
    auto snap = svc.snapshot(id);
    const auto& scores = *snap->grid().oracle_score();
    json votes = json::array();
    for (const auto& p : snap->pending_votes()) {
        const auto pref = scores[p.first.index] > scores[p.second.index] ? p.first : p.second;
        votes.push_back({{"new_location", p.first.index}, {"opponent", p.second.index}, {"preferred", pref.index}});
    }
    return votes;
}

std::string create(Service& svc, const json& body)
{
    auto r = svc.create_session(body);
    EXPECT_EQ(r.status, 201) << r.body.dump();
    return r.body.at("id").get<std::string>();
}

} // namespace

TEST(ServiceApi, CreateAndReadState)
{
    Service svc;
    auto r = svc.create_session(synthetic_body("interactive"));
    ASSERT_EQ(r.status, 201) << r.body.dump();
    const auto id = r.body["id"].get<std::string>();
    EXPECT_EQ(r.body["phase"], "awaiting_init_votes");
    EXPECT_EQ(r.body["explored"], 10);
    EXPECT_TRUE(r.body.contains("created"));

    auto st = svc.get_state(id);
    EXPECT_EQ(st.status, 200);
    EXPECT_EQ(st.body["config"]["voter"], "interactive");
    EXPECT_EQ(st.body["dataset"]["height"], 6);

    auto id2 = create(svc, synthetic_body("oracle"));
    EXPECT_NE(id, id2);
    EXPECT_EQ(svc.list_sessions().body["sessions"].size(), 2u);
}

TEST(ServiceApi, UnknownSessionIs404)
{
    Service svc;
    EXPECT_EQ(svc.get_state("nope").status, 404);
    EXPECT_EQ(svc.get_pending("nope").status, 404);
    EXPECT_EQ(svc.get_map("nope").status, 404);
    EXPECT_EQ(svc.get_metrics("nope").status, 404);
    EXPECT_EQ(svc.post_votes("nope", json::array()).status, 404);
    EXPECT_EQ(svc.post_validate("nope", {{"flip", json::array()}}).status, 404);
    EXPECT_EQ(svc.post_step("nope", json::object()).status, 404);
}

TEST(ServiceApi, CreateRejectsBadBodies)
{
    Service svc;
    EXPECT_EQ(svc.create_session(json::array()).status, 422);
    EXPECT_EQ(svc.create_session(json::object()).status, 422);
    EXPECT_EQ(svc.create_session({{"dataset", "missing"}}).status, 422);
    auto bad = synthetic_body("oracle");
    bad["config"]["q"] = "three";
    EXPECT_EQ(svc.create_session(bad).status, 422);
    bad = synthetic_body("oracle");
    bad["config"]["init_samples"] = 1000;
    EXPECT_EQ(svc.create_session(bad).status, 422);
}

TEST(ServiceApi, PendingCarriesRenderData)
{
    Service svc;
    const auto id = create(svc, synthetic_body("interactive"));
    auto p = svc.get_pending(id);
    ASSERT_EQ(p.status, 200);
    EXPECT_EQ(p.body["pending"]["type"], "comparisons");
    const auto& cmp = p.body["pending"]["comparisons"];
    EXPECT_EQ(cmp.size(), 20u);
    const auto first = std::to_string(cmp[0]["new_location"].get<std::size_t>());
    const auto& payload = p.body["pending"]["payloads"][first];
    EXPECT_EQ(payload["kind"], "image_patch");
    EXPECT_EQ(payload["shape"], json({8, 8}));
    EXPECT_EQ(payload["data"].size(), 64u);
}

TEST(ServiceApi, SpectrumPayloadsAreSplitByChannel)
{
    auto catalog = std::make_shared<DatasetCatalog>();
    std::vector<float> data(3 * 3 * 2 * 8);
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<float>(i % 13);
    catalog->add("loops", std::make_shared<const ObservationGrid>(
                              "loops", 3, 3, PayloadShape{PayloadKind::Spectrum, 2, 8}, data));
    Service svc(catalog);
    auto r = svc.create_session({{"dataset", "loops"},
        {"config", {{"voter", "interactive"}, {"init_samples", 3}, {"init_comparisons", 3}, {"iters", 1}}}});
    ASSERT_EQ(r.status, 201) << r.body.dump();
    auto p = svc.get_pending(r.body["id"]);
    const auto& payloads = p.body["pending"]["payloads"];
    ASSERT_FALSE(payloads.empty());
    const auto& one = payloads.begin().value();
    EXPECT_EQ(one["kind"], "spectrum");
    EXPECT_EQ(one["channels"].size(), 2u);
    EXPECT_EQ(one["channels"][1].size(), 8u);

    auto map = svc.get_map(r.body["id"]);
    ASSERT_EQ(map.status, 200) << map.body.dump();
    EXPECT_EQ(map.body["baseline"]["kind"], "loop_area");
}

TEST(ServiceApi, VoteBatchMustBeComplete)
{
    Service svc;
    const auto id = create(svc, synthetic_body("interactive"));
    auto votes = answer_all(svc, id);
    json partial = json::array({votes[0], votes[1]});
    auto r = svc.post_votes(id, partial);
    EXPECT_EQ(r.status, 422);
    EXPECT_EQ(r.body["missing"].size(), 18u);
    EXPECT_EQ(svc.get_state(id).body["phase"], "awaiting_init_votes");
    EXPECT_EQ(svc.snapshot(id)->log().size(), 0u);

    auto ok = svc.post_votes(id, {{"votes", votes}});
    EXPECT_EQ(ok.status, 200) << ok.body.dump();
    EXPECT_EQ(ok.body["phase"], "running");
    EXPECT_EQ(svc.snapshot(id)->log().size(), 20u);

    // replaying the same batch never applies twice
    EXPECT_EQ(svc.post_votes(id, votes).status, 409);
    EXPECT_EQ(svc.snapshot(id)->log().size(), 20u);
}

TEST(ServiceApi, MalformedVotesAre422)
{
    Service svc;
    const auto id = create(svc, synthetic_body("interactive"));
    EXPECT_EQ(svc.post_votes(id, {{"nothing", 1}}).status, 422);
    EXPECT_EQ(svc.post_votes(id, json::array({{{"new_location", "a"}}})).status, 422);
    auto votes = answer_all(svc, id);
    votes[0]["preferred"] = 9999;
    EXPECT_EQ(svc.post_votes(id, votes).status, 422);
}

TEST(ServiceApi, LoopWithInteractiveVotes)
{
    Service svc;
    const auto id = create(svc, synthetic_body("interactive", "oracle", 3));
    ASSERT_EQ(svc.post_votes(id, answer_all(svc, id)).status, 200);

    std::size_t explored = 10;
    for (std::size_t k = 1; k <= 3; ++k) {
        auto st = svc.post_step(id, json::object());
        ASSERT_EQ(st.status, 200) << st.body.dump();
        EXPECT_EQ(st.body["phase"], "awaiting_votes");
        EXPECT_EQ(svc.post_step(id, json::object()).status, 409);

        auto pend = svc.get_pending(id);
        ASSERT_EQ(pend.body["pending"]["comparisons"].size(), 3u);
        auto votes = answer_all(svc, id);
        auto two = json::array({votes[0], votes[1]});
        auto miss = svc.post_votes(id, two);
        EXPECT_EQ(miss.status, 422);
        ASSERT_EQ(miss.body["missing"].size(), 1u);
        EXPECT_EQ(miss.body["missing"][0]["opponent"], votes[2]["opponent"]);

        // a stale request key is rejected
        EXPECT_EQ(svc.post_votes(id, {{"votes", votes}, {"k", k + 5}}).status, 409);
        auto ok = svc.post_votes(id, {{"votes", votes}, {"k", k}});
        ASSERT_EQ(ok.status, 200) << ok.body.dump();
        ++explored;
        EXPECT_EQ(svc.get_map(id).body["explored"].size(), explored);
    }
    EXPECT_EQ(svc.get_state(id).body["phase"], "done");
    auto metrics = svc.get_metrics(id);
    EXPECT_EQ(metrics.body["iterations"].size(), 3u);
    EXPECT_EQ(metrics.body["best_oracle_score"].size(), 3u);
}

TEST(ServiceApi, ValidationRound)
{
    Service svc;
    const auto id = create(svc, synthetic_body("proxy", "interactive", 4, 2));
    ASSERT_EQ(svc.post_votes(id, answer_all(svc, id)).status, 200);
    EXPECT_EQ(svc.post_validate(id, {{"flip", json::array()}}).status, 409);

    auto st = svc.post_step(id, json::object());
    ASSERT_EQ(st.status, 200);
    EXPECT_EQ(st.body["phase"], "awaiting_validation");
    EXPECT_EQ(st.body["steps"], 2);

    auto pend = svc.get_pending(id);
    EXPECT_EQ(pend.body["pending"]["type"], "validation");
    const auto& items = pend.body["pending"]["items"];
    ASSERT_EQ(items.size(), 6u);
    EXPECT_FALSE(pend.body["pending"]["payloads"].empty());

    EXPECT_EQ(svc.post_validate(id, {{"flip", {0}}}).status, 422);
    EXPECT_EQ(svc.post_validate(id, {{"flip", "all"}}).status, 422);

    auto none = svc.post_validate(id, {{"flip", json::array()}});
    ASSERT_EQ(none.status, 200);
    EXPECT_EQ(none.body["corrections"], 0);
    EXPECT_EQ(none.body["phase"], "running");
    EXPECT_EQ(svc.post_validate(id, {{"flip", json::array()}}).status, 409);

    auto st2 = svc.post_step(id, json::object());
    ASSERT_EQ(st2.body["phase"], "awaiting_validation");
    const auto idx = svc.get_pending(id).body["pending"]["items"][0]["log_index"].get<std::size_t>();
    auto one = svc.post_validate(id, {{"flip", {idx}}});
    ASSERT_EQ(one.status, 200);
    EXPECT_EQ(one.body["corrections"], 1);
    EXPECT_EQ(one.body["phase"], "done");
    auto rates = svc.get_metrics(id).body["correction_rates"];
    ASSERT_EQ(rates.size(), 2u);
    EXPECT_DOUBLE_EQ(rates[1].get<double>(), 1.0 / 6.0);
}

TEST(ServiceApi, StepBoundedByMaxIterations)
{
    Service svc;
    const auto id = create(svc, synthetic_body("oracle", "oracle", 5));
    EXPECT_EQ(svc.post_step(id, {{"max_iterations", 0}}).status, 422);
    auto r = svc.post_step(id, {{"max_iterations", 2}});
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["k"], 3);
    EXPECT_EQ(r.body["phase"], "running");
    auto rest = svc.post_step(id, json::object());
    EXPECT_EQ(rest.body["phase"], "done");
    EXPECT_EQ(rest.body["steps"], 3);
    EXPECT_EQ(svc.post_step(id, json::object()).status, 409);
}

TEST(ServiceApi, ReadsDuringStepSeeCompletedSnapshots)
{
    Service svc;
    const auto id = create(svc, synthetic_body("oracle", "oracle", 12));
    std::atomic<bool> done{false};
    std::atomic<int> bad{0};
    std::thread reader([&] {
        while (!done) {
            auto st = svc.get_state(id).body;
            const std::size_t k = st["k"];
            const std::size_t explored = st["explored"];
            if (explored != 10 + k - 1)
                ++bad;
        }
    });
    for (int i = 0; i < 12; ++i)
        svc.post_step(id, {{"max_iterations", 1}});
    done = true;
    reader.join();
    EXPECT_EQ(bad.load(), 0);
    EXPECT_EQ(svc.get_state(id).body["phase"], "done");
}

TEST(ServiceApi, DatasetCatalogLoadsBundles)
{
    test::TempDir dir;
    write_bundle(generate_domain_wall_grid(4, 4, 8, 0.0, 1), dir.path() / "walls");
    auto catalog = std::make_shared<DatasetCatalog>(dir.path());
    EXPECT_EQ(catalog->names(), std::vector<std::string>{"walls"});
    EXPECT_EQ(catalog->get("../etc"), nullptr);
    Service svc(catalog);
    EXPECT_EQ(svc.list_datasets().body["datasets"][0], "walls");
    auto r = svc.create_session({{"dataset", "walls"}, {"config", {{"voter", "oracle"}, {"iters", 2}}}});
    ASSERT_EQ(r.status, 201) << r.body.dump();
    EXPECT_EQ(svc.post_step(r.body["id"], json::object()).body["phase"], "done");
}

TEST(ServiceHttp, LoopbackRoundTrip)
{
    Service svc;
    httplib::Server server;
    mount(server, svc, {"http://console.test"});
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto created = client.Post("/sessions", synthetic_body("interactive").dump(), "application/json");
    ASSERT_TRUE(created);
    EXPECT_EQ(created->status, 201);
    EXPECT_EQ(created->get_header_value("Access-Control-Allow-Origin"), "http://console.test");
    const auto id = json::parse(created->body)["id"].get<std::string>();

    auto state = client.Get("/sessions/" + id + "/state");
    ASSERT_TRUE(state);
    EXPECT_EQ(json::parse(state->body)["phase"], "awaiting_init_votes");

    auto step = client.Post("/sessions/" + id + "/step", "", "application/json");
    ASSERT_TRUE(step);
    EXPECT_EQ(step->status, 409);

    auto votes = client.Post("/sessions/" + id + "/votes", answer_all(svc, id).dump(), "application/json");
    ASSERT_TRUE(votes);
    EXPECT_EQ(votes->status, 200);

    auto garbage = client.Post("/sessions/" + id + "/votes", "{not json", "application/json");
    ASSERT_TRUE(garbage);
    EXPECT_EQ(garbage->status, 422);

    auto missing = client.Get("/sessions/zzz/metrics");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);

    auto pre = client.Options("/sessions");
    ASSERT_TRUE(pre);
    EXPECT_EQ(pre->status, 204);
    EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);

    server.stop();
    t.join();
}
