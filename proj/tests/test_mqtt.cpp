#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ardueco/broker.hpp"
#include "ardueco/mqtt.hpp"

using namespace ardueco;
using namespace ardueco::mqtt;

namespace {

std::string rand_text(Rng& rng, std::size_t min_len, std::size_t max_len, bool topic) {
    static const char alphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789_-/";
    const auto n = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(min_len),
                                                            static_cast<std::int64_t>(max_len)));
    std::string s;
    for (std::size_t i = 0; i < n; ++i)
        s += alphabet[rng.uniform_int(0, topic ? 38 : 37)];  // '/' only in topics
    return s;
}

Packet random_packet(Rng& rng) {
    switch (rng.uniform_int(0, 8)) {
        case 0: {
            Connect c;
            c.client_id = rand_text(rng, 1, 23, false);
            c.keep_alive_s = static_cast<std::uint16_t>(rng.uniform_int(0, 65535));
            if (rng.bernoulli(0.5)) c.auth_token = rand_text(rng, 0, 16, false);
            return c;
        }
        case 1: return Connack{rng.bernoulli(0.5)};
        case 2: {
            Publish p;
            p.topic = "t/" + rand_text(rng, 1, 40, true);
            const auto len = rng.uniform_int(0, 300);
            for (std::int64_t i = 0; i < len; ++i)
                p.payload.push_back(static_cast<std::uint8_t>(rng.uniform_int(0, 255)));
            p.qos = rng.bernoulli(0.5) ? 1 : 0;
            if (p.qos == 1) {
                p.packet_id = static_cast<std::uint16_t>(rng.uniform_int(1, 65535));
                p.dup = rng.bernoulli(0.3);
            }
            return p;
        }
        case 3: return Puback{static_cast<std::uint16_t>(rng.uniform_int(1, 65535))};
        case 4: {
            Subscribe s;
            s.packet_id = static_cast<std::uint16_t>(rng.uniform_int(1, 65535));
            const auto n = rng.uniform_int(1, 4);
            for (std::int64_t i = 0; i < n; ++i)
                s.filters.push_back({rand_text(rng, 1, 30, true), rng.bernoulli(0.5) ? std::uint8_t{1} : std::uint8_t{0}});
            return s;
        }
        case 5: {
            Suback s;
            s.packet_id = static_cast<std::uint16_t>(rng.uniform_int(1, 65535));
            const auto n = rng.uniform_int(1, 4);
            for (std::int64_t i = 0; i < n; ++i)
                s.granted.push_back(rng.bernoulli(0.2) ? 0x80 : (rng.bernoulli(0.5) ? 1 : 0));
            return s;
        }
        case 6: return Pingreq{};
        case 7: return Pingresp{};
        default: return Disconnect{};
    }
}

}  // namespace

TEST_CASE("remaining-length varint") {
    // framing oracle: hand-counted encodings
    CHECK(encode_remaining_length(0).value() == Bytes{0x00});
    CHECK(encode_remaining_length(127).value() == Bytes{0x7F});
    CHECK(encode_remaining_length(128).value() == Bytes{0x80, 0x01});
    CHECK(encode_remaining_length(321).value() == Bytes{0xC1, 0x02});
    CHECK_FALSE(encode_remaining_length(kMaxRemainingLength + 1).ok());

    SECTION("bijective for all n < 2^21, exhaustively") {
        for (std::uint32_t n = 0; n < (1u << 21); ++n) {
            const auto enc = encode_remaining_length(n);
            REQUIRE(enc.ok());
            const auto dec = decode_remaining_length(enc.value());
            REQUIRE(dec.status == VarintDecode::Status::Ok);
            REQUIRE(dec.value == n);
            REQUIRE(dec.consumed == enc.value().size());
        }
    }

    SECTION("four continuation bytes are malformed") {
        const Bytes all_cont{0x80, 0x80, 0x80, 0x80};
        CHECK(decode_remaining_length(all_cont).status == VarintDecode::Status::Bad);
    }
}

TEST_CASE("fixed framing bytes") {
    CHECK(encode(Pingreq{}).value() == Bytes{0xC0, 0x00});
    CHECK(encode(Disconnect{}).value() == Bytes{0xE0, 0x00});

    // Publish qos0, topic "t", empty payload: remaining length 3
    Publish p;
    p.topic = "t";
    const auto wire = encode(p).value();
    CHECK(wire.size() == 5);
    CHECK(wire[0] == 0x30);
    CHECK(wire[1] == 0x03);

    CHECK(encode(Puback{1}).value() == Bytes{0x40, 0x02, 0x00, 0x01});
}

TEST_CASE("decode(encode(p)) == p over randomized packets") {
    Rng rng(0xA11CE);
    for (int i = 0; i < 12000; ++i) {
        const Packet p = random_packet(rng);
        const auto wire = encode(p);
        REQUIRE(wire.ok());
        const auto back = decode(wire.value());
        REQUIRE(back.status == DecodeResult::Status::Ok);
        REQUIRE(back.consumed == wire.value().size());
        REQUIRE(back.packet == p);
    }
}

TEST_CASE("decoder handles truncation and garbage") {
    Publish p;
    p.topic = "sensors/co";
    p.payload = {1, 2, 3};
    const auto wire = encode(p).value();

    SECTION("every strict prefix needs more data") {
        for (std::size_t n = 0; n < wire.size(); ++n) {
            const auto r = decode(std::span<const std::uint8_t>(wire.data(), n));
            REQUIRE(r.status == DecodeResult::Status::NeedMore);
        }
    }

    SECTION("two packets back to back decode in sequence") {
        Bytes two = wire;
        const auto ping = encode(Pingreq{}).value();
        two.insert(two.end(), ping.begin(), ping.end());
        const auto first = decode(two);
        REQUIRE(first.status == DecodeResult::Status::Ok);
        REQUIRE(first.consumed == wire.size());
        const auto second = decode(std::span<const std::uint8_t>(two).subspan(first.consumed));
        REQUIRE(second.status == DecodeResult::Status::Ok);
        CHECK(std::holds_alternative<Pingreq>(second.packet));
    }

    SECTION("reserved type nibbles") {
        CHECK(decode(Bytes{0x00, 0x00}).error == CodecError::ReservedType);
        CHECK(decode(Bytes{0xF0, 0x00}).error == CodecError::ReservedType);
    }

    SECTION("flag violations") {
        CHECK(decode(Bytes{0xC1, 0x00}).error == CodecError::BadFlags);  // pingreq with flags
        CHECK(decode(Bytes{0x36, 0x03, 0x00, 0x01, 't'}).error == CodecError::BadFlags);  // qos 2
        CHECK(decode(Bytes{0x80, 0x02, 0x00, 0x01}).error == CodecError::BadFlags);  // subscribe w/o 0x02
    }

    SECTION("oversize encode is rejected") {
        Publish big;
        big.topic = "t";
        big.payload.resize(kMaxRemainingLength);
        CHECK_FALSE(encode(big).ok());
    }

    SECTION("wildcards are not publishable") {
        Publish bad;
        bad.topic = "a/+/b";
        CHECK_FALSE(encode(bad).ok());
    }
}

TEST_CASE("topic matching") {
    CHECK(topic_matches("ardueco/+/data", "ardueco/bike-03/data"));
    CHECK_FALSE(topic_matches("ardueco/+/data", "ardueco/bike-03/session"));
    CHECK_FALSE(topic_matches("ardueco/+/data", "ardueco/a/b/data"));
    CHECK(topic_matches("ardueco/#", "ardueco/bike-03/data"));
    CHECK(topic_matches("#", "anything/at/all"));
    CHECK(topic_matches("a/b", "a/b"));
    CHECK_FALSE(topic_matches("a/b", "a"));
    CHECK_FALSE(topic_matches("a", "a/b"));

    CHECK(filter_valid("ardueco/+/data"));
    CHECK(filter_valid("#"));
    CHECK_FALSE(filter_valid("a/#/b"));
    CHECK_FALSE(filter_valid("a+/b"));
    CHECK_FALSE(filter_valid(""));
}

TEST_CASE("client session QoS bookkeeping") {
    ClientSession s("dev");
    (void)s.connect_packet();
    s.on_packet(Connack{true});
    REQUIRE(s.connected());

    const Bytes payload{'x'};

    SECTION("qos 0 leaves inflight untouched") {
        auto w = s.publish("t", payload, 0, 0);
        REQUIRE(w.ok());
        CHECK(s.inflight_count() == 0);
    }

    SECTION("qos 1 tracks until acked") {
        auto w = s.publish("t", payload, 1, 0);
        REQUIRE(w.ok());
        CHECK(s.inflight_count() == 1);
        const auto decoded = decode(w.value());
        const auto id = *std::get<Publish>(decoded.packet).packet_id;
        s.on_packet(Puback{id});
        CHECK(s.inflight_count() == 0);
    }

    SECTION("not connected is an error") {
        ClientSession idle("x");
        CHECK_FALSE(idle.publish("t", payload, 1, 0).ok());
    }

    SECTION("window backpressure") {
        RetryPolicy tight;
        tight.window = 4;
        ClientSession w("dev", tight);
        (void)w.connect_packet();
        w.on_packet(Connack{true});
        for (int i = 0; i < 4; ++i) REQUIRE(w.publish("t", payload, 1, 0).ok());
        auto blocked = w.publish("t", payload, 1, 0);
        REQUIRE_FALSE(blocked.ok());
        CHECK(blocked.error() == SessionError::Backpressure);
    }

    SECTION("timeout retransmits with dup=1 and backs off") {
        RetryPolicy pol;
        pol.timeout_ms = 1000;
        ClientSession c("dev", pol);
        (void)c.connect_packet();
        c.on_packet(Connack{true});
        REQUIRE(c.publish("t", payload, 1, 0).ok());

        CHECK(c.tick(999).retransmissions.empty());
        auto due = c.tick(1000);
        REQUIRE(due.retransmissions.size() == 1);
        const auto re = decode(due.retransmissions[0]);
        CHECK(std::get<Publish>(re.packet).dup);

        // second retry waits 2x base
        CHECK(c.tick(1999).retransmissions.empty());
        CHECK(c.tick(3000).retransmissions.size() == 1);
    }

    SECTION("max retries raises a delivery failure") {
        RetryPolicy pol;
        pol.timeout_ms = 100;
        pol.max_retries = 3;
        ClientSession c("dev", pol);
        (void)c.connect_packet();
        c.on_packet(Connack{true});
        REQUIRE(c.publish("t", payload, 1, 0).ok());
        int resends = 0;
        std::vector<std::uint16_t> failed;
        for (TimeMs t = 0; t <= 100000 && failed.empty(); t += 100) {
            auto out = c.tick(t);
            resends += static_cast<int>(out.retransmissions.size());
            failed = out.failed;
        }
        REQUIRE(failed.size() == 1);
        CHECK(resends == 3);
        CHECK(c.inflight_count() == 0);
    }

    SECTION("packet ids are unique among inflight and never zero") {
        RetryPolicy pol;
        pol.window = 64;
        ClientSession c("dev", pol);
        (void)c.connect_packet();
        c.on_packet(Connack{true});
        std::vector<std::uint16_t> ids;
        for (int i = 0; i < 64; ++i) {
            auto w = c.publish("t", payload, 1, 0);
            REQUIRE(w.ok());
            ids.push_back(*std::get<Publish>(decode(w.value()).packet).packet_id);
        }
        std::sort(ids.begin(), ids.end());
        CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
        CHECK(ids.front() != 0);
    }
}

TEST_CASE("broker connection lifecycle and routing") {
    Broker broker;
    std::vector<std::pair<std::string, Bytes>> ingested;
    broker.set_ingest_hook([&](const std::string& topic, const Bytes& payload) {
        ingested.emplace_back(topic, payload);
    });

    auto frames_for = [](const Broker::Output& out, int conn) {
        std::vector<Packet> ps;
        for (const auto& [c, bytes] : out.frames)
            if (c == conn) ps.push_back(decode(bytes).packet);
        return ps;
    };

    SECTION("connect then connack") {
        broker.open_connection(1);
        auto out = broker.on_bytes(1, encode(Connect{"c1"}).value());
        auto ps = frames_for(out, 1);
        REQUIRE(ps.size() == 1);
        CHECK(std::get<Connack>(ps[0]).accepted);
    }

    SECTION("first packet must be connect") {
        broker.open_connection(1);
        auto out = broker.on_bytes(1, encode(Pingreq{}).value());
        REQUIRE(out.closed == std::vector<int>{1});
        CHECK_FALSE(broker.connection_open(1));
    }

    SECTION("garbage closes the connection but not the broker") {
        broker.open_connection(1);
        auto out = broker.on_bytes(1, Bytes{0x00, 0x00});
        REQUIRE(out.closed == std::vector<int>{1});
        broker.open_connection(2);
        auto ok = broker.on_bytes(2, encode(Connect{"c2"}).value());
        CHECK(frames_for(ok, 2).size() == 1);
    }

    SECTION("qos1 publish is acked and routed to subscriber and hook") {
        broker.open_connection(1);
        broker.open_connection(2);
        broker.on_bytes(1, encode(Connect{"pub"}).value());
        broker.on_bytes(2, encode(Connect{"sub"}).value());
        Subscribe sub;
        sub.packet_id = 7;
        sub.filters = {{"ardueco/+/data", 1}};
        auto sub_out = broker.on_bytes(2, encode(sub).value());
        REQUIRE(frames_for(sub_out, 2).size() == 1);
        CHECK(std::get<Suback>(frames_for(sub_out, 2)[0]).granted == std::vector<std::uint8_t>{1});

        Publish pub;
        pub.topic = "ardueco/bike-00/data";
        pub.payload = {'h', 'i'};
        pub.qos = 1;
        pub.packet_id = 42;
        auto out = broker.on_bytes(1, encode(pub).value());

        auto acks = frames_for(out, 1);
        REQUIRE(acks.size() == 1);
        CHECK(std::get<Puback>(acks[0]).packet_id == 42);

        auto deliveries = frames_for(out, 2);
        REQUIRE(deliveries.size() == 1);
        CHECK(std::get<Publish>(deliveries[0]).topic == pub.topic);
        CHECK(std::get<Publish>(deliveries[0]).payload == pub.payload);

        REQUIRE(ingested.size() == 1);
        CHECK(ingested[0].first == pub.topic);
    }

    SECTION("duplicate delivery passes through downstream") {
        broker.open_connection(1);
        broker.on_bytes(1, encode(Connect{"pub"}).value());
        Publish pub;
        pub.topic = "ardueco/bike-00/data";
        pub.qos = 1;
        pub.packet_id = 9;
        broker.on_bytes(1, encode(pub).value());
        pub.dup = true;
        broker.on_bytes(1, encode(pub).value());
        CHECK(ingested.size() == 2);  // dedup is the ingest layer's job
    }

    SECTION("auth token enforcement") {
        Broker::Options opts;
        opts.required_token = "sekrit";
        Broker strict(opts);
        strict.open_connection(1);
        Connect c;
        c.client_id = "dev";
        auto out = strict.on_bytes(1, encode(c).value());
        REQUIRE(out.frames.size() == 1);
        CHECK_FALSE(std::get<Connack>(decode(out.frames[0].second).packet).accepted);
        CHECK(out.closed == std::vector<int>{1});

        strict.open_connection(2);
        c.auth_token = "sekrit";
        auto ok = strict.on_bytes(2, encode(c).value());
        CHECK(std::get<Connack>(decode(ok.frames[0].second).packet).accepted);
    }

    SECTION("pingreq and disconnect") {
        broker.open_connection(1);
        broker.on_bytes(1, encode(Connect{"c"}).value());
        auto out = broker.on_bytes(1, encode(Pingreq{}).value());
        REQUIRE(frames_for(out, 1).size() == 1);
        CHECK(std::holds_alternative<Pingresp>(frames_for(out, 1)[0]));
        broker.on_bytes(1, encode(Disconnect{}).value());
        CHECK_FALSE(broker.connection_open(1));
    }

    SECTION("second connect on one connection is a violation") {
        broker.open_connection(1);
        broker.on_bytes(1, encode(Connect{"c"}).value());
        auto out = broker.on_bytes(1, encode(Connect{"c"}).value());
        CHECK(out.closed == std::vector<int>{1});
    }
}

// At-least-once over a lossy byte channel: every qos-1 publish is eventually
// delivered or surfaces a delivery failure, never silent loss.
TEST_CASE("at-least-once over a lossy channel") {
    for (const double drop : {0.2, 0.5}) {
        Rng rng(static_cast<std::uint64_t>(drop * 100) + 11);
        Broker broker;
        std::vector<std::string> arrived;
        broker.set_ingest_hook([&](const std::string&, const Bytes& payload) {
            arrived.emplace_back(payload.begin(), payload.end());
        });

        RetryPolicy pol;
        pol.timeout_ms = 50;
        pol.max_retries = 24;  // generous so loss this heavy still converges
        pol.window = 8;
        ClientSession session("dev", pol);
        broker.open_connection(1);

        auto to_broker = [&](const Bytes& frame, bool lossless = false) {
            if (!lossless && rng.bernoulli(drop)) return;  // frame eaten by the channel
            auto out = broker.on_bytes(1, frame);
            for (const auto& [conn, bytes] : out.frames) {
                if (!lossless && rng.bernoulli(drop)) continue;
                session.on_packet(decode(bytes).packet);
            }
        };

        // connection setup is delivered intact here; reconnect-on-timeout is
        // the firmware's job and tested there
        to_broker(session.connect_packet(), true);
        REQUIRE(session.connected());

        std::map<std::uint16_t, std::string> inflight_body;
        std::set<std::string> failed_bodies;
        int sent = 0;
        TimeMs now = 0;
        const int total = 60;
        while ((sent < total || session.inflight_count() > 0) && now < 1000000) {
            while (sent < total) {
                const std::string body = "m" + std::to_string(sent);
                auto w = session.publish("t", Bytes(body.begin(), body.end()), 1, now);
                if (!w.ok()) break;  // window full
                inflight_body[*std::get<Publish>(decode(w.value()).packet).packet_id] = body;
                ++sent;
                to_broker(w.value());
            }
            now += 50;
            auto out = session.tick(now);
            for (const auto& f : out.retransmissions) to_broker(f);
            for (auto id : out.failed) failed_bodies.insert(inflight_body.at(id));
        }

        // no silent loss: every body either reached the broker or failed loudly
        const std::set<std::string> arrived_set(arrived.begin(), arrived.end());
        INFO("drop=" << drop << " delivered=" << arrived_set.size() << " failed=" << failed_bodies.size());
        for (int i = 0; i < total; ++i) {
            const std::string body = "m" + std::to_string(i);
            REQUIRE((arrived_set.count(body) || failed_bodies.count(body)));
        }
    }
}
