#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>

#include <json.hpp>

#include "ardueco/sim.hpp"

using namespace ardueco;
using namespace ardueco::sim;

namespace {

// One device, one 60 s straight ride between two dock zones 240 m apart.
SimConfig one_ride_scenario() {
    SimConfig cfg;
    cfg.seed = 7;
    cfg.n_devices = 1;
    cfg.duration_s = 300;
    cfg.trace_gen.reset();
    cfg.field.background_ppm = 2.0;
    cfg.zones = {
        {"z0", "ardueco-dock", {45.4000, 11.8700}, 60.0},
        {"z1", "ardueco-dock", {45.4000 + 240.0 / 111194.9, 11.8700}, 60.0},
    };
    MobilityTrace t;
    t.device_index = 0;
    t.start_s = 0.0;
    t.speed_mps = 4.0;
    t.start_zone = "z0";
    t.end_zone = "z1";
    t.waypoints = {cfg.zones[0].center, cfg.zones[1].center};
    cfg.traces = {t};
    cfg.noise_sd = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("field sampling is background plus gaussian plumes") {
    PollutionField field;
    field.background_ppm = 1.0;
    field.sources.push_back({{45.40, 11.87}, 8.0, 200.0, std::nullopt});

    SECTION("at the source center") {
        CHECK(field_sample(field, 45.40, 11.87, 0.0) == Catch::Approx(9.0).epsilon(1e-9));
    }
    SECTION("10 sigma away it is background") {
        const double far_lat = 45.40 + 10.0 * 200.0 / 111194.9;
        CHECK(field_sample(field, far_lat, 11.87, 0.0) == Catch::Approx(1.0).margin(1e-6));
    }
    SECTION("at one sigma, closed form") {
        const double lat = 45.40 + 200.0 / 111194.9;  // one sigma north
        const double expected = 1.0 + 8.0 * std::exp(-0.5);
        CHECK(field_sample(field, lat, 11.87, 0.0) == Catch::Approx(expected).epsilon(2e-3));
    }
    SECTION("time profile modulates the amplitude") {
        field.sources[0].profile = TimeProfile{3600.0, 0.0};
        const double at_zero = field_sample(field, 45.40, 11.87, 0.0);
        const double at_quarter = field_sample(field, 45.40, 11.87, 900.0);
        CHECK(at_zero == Catch::Approx(1.0 + 8.0 * 0.5).epsilon(1e-9));     // sin(0) -> half
        CHECK(at_quarter == Catch::Approx(1.0 + 8.0 * 1.0).epsilon(1e-9));  // peak
    }
}

TEST_CASE("equirectangular distance sanity") {
    // one degree of latitude is ~111.19 km on the sphere
    CHECK(equirect_distance_m({45.0, 11.0}, {46.0, 11.0}) == Catch::Approx(111194.9).epsilon(1e-3));
    CHECK(equirect_distance_m({45.0, 11.0}, {45.0, 11.0}) == 0.0);
    // longitude shrinks with cos(lat); both points sit at lat 60
    const double lon_deg = equirect_distance_m({60.0, 11.0}, {60.0, 12.0});
    CHECK(lon_deg == Catch::Approx(111194.9 * std::cos(60.0 * kDegToRad)).epsilon(1e-3));
}

TEST_CASE("mobility trace interpolation") {
    MobilityTrace t;
    t.speed_mps = 4.0;
    t.waypoints = {{45.4000, 11.87}, {45.4000 + 240.0 / 111194.9, 11.87}};
    CHECK(t.length_m() == Catch::Approx(240.0).epsilon(1e-6));
    CHECK(t.duration_s() == Catch::Approx(60.0).epsilon(1e-6));
    const auto mid = t.position_at(30.0);
    CHECK(mid.lat == Catch::Approx(45.4000 + 120.0 / 111194.9).epsilon(1e-9));
    const auto past_end = t.position_at(120.0);
    CHECK(past_end.lat == Catch::Approx(t.waypoints.back().lat));
}

TEST_CASE("energy accounting") {
    EnergyProfile p;
    p.active_ma = 80.0;
    p.sleep_ma = 1.0;
    p.battery_mah = 3000.0;

    SECTION("always active") {
        const auto r = energy_account(p, 3600.0, 0.0);
        CHECK(r.consumed_mah == Catch::Approx(80.0));
        CHECK(r.lifetime_h == Catch::Approx(3000.0 / 80.0));
        CHECK_FALSE(r.depleted);
    }
    SECTION("50/50 split equals the hand-computed weighted sum") {
        const auto r = energy_account(p, 1800.0, 1800.0);
        CHECK(r.consumed_mah == Catch::Approx((80.0 * 1800.0 + 1.0 * 1800.0) / 3600.0).epsilon(1e-12));
        CHECK(r.lifetime_h == Catch::Approx(3000.0 / ((80.0 + 1.0) / 2.0)).epsilon(1e-12));
    }
    SECTION("deep sleep at 90% idle strictly beats staying awake") {
        const double total = 36000.0;
        const auto enabled = energy_account(p, 0.1 * total, 0.9 * total);
        const auto disabled = energy_account(p, total, 0.0);
        CHECK(enabled.lifetime_h > disabled.lifetime_h);
        CHECK(enabled.consumed_mah < disabled.consumed_mah);
    }
    SECTION("depletion flag") {
        const auto r = energy_account(p, 3600.0 * 40.0, 0.0);  // 40 h at 80 mA > 3000 mAh
        CHECK(r.depleted);
        CHECK(r.remaining_mah == 0.0);
    }
}

TEST_CASE("network delivery decisions") {
    SECTION("probability zero always delivers within bounds") {
        Rng rng(4);
        for (int i = 0; i < 1000; ++i) {
            const auto d = network_deliver(0.0, {5, 50}, rng);
            REQUIRE(d.delivered);
            REQUIRE(d.latency_ms >= 5);
            REQUIRE(d.latency_ms <= 50);
        }
    }
    SECTION("drop rate within 3 sigma of p over 10000 frames") {
        Rng rng(9);
        const double p = 0.5;
        int dropped = 0;
        const int n = 10000;
        for (int i = 0; i < n; ++i)
            if (!network_deliver(p, {5, 50}, rng).delivered) ++dropped;
        const double sigma = std::sqrt(p * (1 - p) / n);
        CHECK(std::abs(static_cast<double>(dropped) / n - p) <= 3.0 * sigma);
    }
}

TEST_CASE("a clean 60 s ride yields exactly 12 readings and a complete upload") {
    const auto cfg = one_ride_scenario();
    auto result = run_sim(cfg);

    CHECK(result.report["totals"]["generated"] == 12);
    CHECK(result.report["totals"]["stored"] == 12);
    CHECK(result.report["totals"]["rides"] == 1);
    CHECK(result.report["totals"]["rides_complete"] == 1);
    CHECK(result.report["totals"]["frames_dropped"] == 0);

    // relative timestamps 0,5,...,55 exactly
    const auto rows = result.store.query({});
    REQUIRE(rows.size() == 12);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        REQUIRE(rows[i].reading.seq == i);
        REQUIRE(rows[i].reading.t_s == static_cast<std::int64_t>(i) * 5);
        REQUIRE(rows[i].reading.fix_valid);
    }
}

TEST_CASE("sampled ppm tracks the field within the quantization bound when noiseless") {
    auto cfg = one_ride_scenario();
    cfg.noise_sd = 0.0;
    auto result = run_sim(cfg);
    const auto rows = result.store.query({});
    REQUIRE_FALSE(rows.empty());
    for (const auto& r : rows) {
        const double truth = field_sample(cfg.field, r.reading.lat, r.reading.lon, 0.0);
        REQUIRE(std::abs(r.reading.channels[0].ppm - truth) / truth <= 0.01);
    }
}

TEST_CASE("gps warmup readings are logged without a fix") {
    auto cfg = one_ride_scenario();
    cfg.gps_warmup_s = 12;
    auto result = run_sim(cfg);
    CHECK(result.report["totals"]["generated"] == 12);
    CHECK(result.report["totals"]["stored"] == 12);
    const auto rows = result.store.query({});
    int fixed = 0;
    for (const auto& r : rows) fixed += r.reading.fix_valid ? 1 : 0;
    CHECK(fixed == 9);  // samples at 0, 5, 10 are inside the 12 s warmup
}

TEST_CASE("same seed gives byte-identical reports, different seeds differ") {
    auto cfg = default_scenario();
    cfg.duration_s = 600;
    cfg.n_devices = 3;
    const auto a = run_sim(cfg);
    const auto b = run_sim(cfg);
    CHECK(a.report.dump() == b.report.dump());
    const auto ga = ingest::export_geojson(a.store.query({}));
    const auto gb = ingest::export_geojson(b.store.query({}));
    CHECK(ga == gb);

    auto other = cfg;
    other.seed = 43;
    const auto c = run_sim(other);
    CHECK(a.report.dump() != c.report.dump());
}

TEST_CASE("default scenario: clean run conserves readings and completes rides") {
    auto cfg = default_scenario();
    cfg.duration_s = 1200;
    cfg.n_devices = 4;
    auto result = run_sim(cfg);
    const auto& totals = result.report["totals"];
    REQUIRE(totals["rides"].get<int>() >= 4);  // every device rode at least once
    CHECK(totals["stored"] == totals["generated"]);
    CHECK(totals["rides_complete"] == totals["rides"]);
    CHECK(totals["duplicates_dropped"] == 0);
    CHECK(totals["quarantined"] == 0);
    // header per ride, expected == stored per ride
    for (const auto& dev : result.report["devices"]) {
        for (const auto& ride : dev["rides"]) {
            REQUIRE(ride["status"] == "complete");
            REQUIRE(ride["expected"] == ride["stored"]);
        }
    }
}

TEST_CASE("loss with qos1 still conserves every reading end to end") {
    auto cfg = default_scenario();
    cfg.duration_s = 1200;
    cfg.n_devices = 4;
    cfg.drop_probability = 0.2;
    cfg.qos = 1;
    auto result = run_sim(cfg);
    const auto& totals = result.report["totals"];
    CHECK(totals["frames_dropped"].get<int>() > 0);  // the channel really was lossy
    CHECK(totals["stored"] == totals["generated"]);
    CHECK(totals["rides_complete"] == totals["rides"]);
    CHECK(totals["retransmissions"].get<int>() > 0);
}

TEST_CASE("loss with qos0 loses roughly the drop fraction") {
    auto cfg = default_scenario();
    cfg.duration_s = 1800;
    cfg.n_devices = 6;
    cfg.drop_probability = 0.2;
    cfg.qos = 0;
    auto result = run_sim(cfg);
    const auto& totals = result.report["totals"];
    const double generated = totals["generated"].get<double>();
    REQUIRE(generated > 200);
    const double fraction = totals["delivery_fraction"].get<double>();
    const double sigma = std::sqrt(0.2 * 0.8 / generated);
    INFO("delivery fraction " << fraction << " over " << generated << " readings");
    CHECK(std::abs(fraction - 0.8) <= 3.0 * sigma);
}

TEST_CASE("depleted battery halts sampling") {
    auto cfg = one_ride_scenario();
    cfg.energy.battery_mah = 0.5;  // flat after ~22 s at 80 mA
    cfg.energy.deep_sleep_enabled = false;
    auto result = run_sim(cfg);
    CHECK(result.report["devices"][0]["energy"]["depleted"] == true);
    CHECK(result.report["totals"]["generated"].get<int>() < 12);
}

TEST_CASE("scenario parsing validates fields by name") {
    SECTION("defaults fill in") {
        const auto parsed = parse_scenario(nlohmann::json::parse(R"({"zones":[
            {"zone_id":"z0","ssid":"s","lat":45.0,"lon":11.0,"radius_m":50}],
            "trace_gen":{}})"));
        REQUIRE(parsed.ok());
        CHECK(parsed.config.n_devices == 10);
        CHECK(parsed.config.sample_period_s == 5);
    }
    SECTION("zero devices is named") {
        auto j = nlohmann::json::parse(R"({"n_devices":0,"zones":[
            {"zone_id":"z0","ssid":"s","lat":45.0,"lon":11.0,"radius_m":50}],"trace_gen":{}})");
        const auto parsed = parse_scenario(j);
        REQUIRE_FALSE(parsed.ok());
        bool named = false;
        for (const auto& e : parsed.errors) named |= e.field == "n_devices";
        CHECK(named);
    }
    SECTION("bad drop probability is named") {
        auto j = nlohmann::json::parse(R"({"drop_probability":1.5,"zones":[
            {"zone_id":"z0","ssid":"s","lat":45.0,"lon":11.0,"radius_m":50}],"trace_gen":{}})");
        const auto parsed = parse_scenario(j);
        REQUIRE_FALSE(parsed.ok());
        bool named = false;
        for (const auto& e : parsed.errors) named |= e.field == "drop_probability";
        CHECK(named);
    }
    SECTION("missing traces and trace_gen is an error") {
        const auto parsed = parse_scenario(nlohmann::json::parse("{}"));
        REQUIRE_FALSE(parsed.ok());
    }
}

TEST_CASE("generated traces start and end at dock zones and fit the horizon") {
    auto cfg = default_scenario();
    Rng rng(cfg.seed);
    const auto traces = sim::detail::generate_traces(cfg, rng);
    REQUIRE_FALSE(traces.empty());
    for (const auto& t : traces) {
        REQUIRE(t.waypoints.size() >= 2);
        REQUIRE(t.start_s + t.duration_s() + cfg.trace_gen->upload_slack_s <= cfg.duration_s);
        bool starts_at_zone = false, ends_at_zone = false;
        for (const auto& z : cfg.zones) {
            starts_at_zone |= equirect_distance_m(t.waypoints.front(), z.center) < 1.0;
            ends_at_zone |= equirect_distance_m(t.waypoints.back(), z.center) < 1.0;
        }
        REQUIRE(starts_at_zone);
        REQUIRE(ends_at_zone);
    }
}
