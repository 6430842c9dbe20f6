#pragma once

// Broker side of the MQTT subset. Transport-agnostic: the owner feeds raw
// bytes per connection and ships the returned frames back. Every accepted
// PUBLISH is routed to matching subscribers and to the ingest hook (the
// per-message handler seam). Duplicate QoS-1 publishes are passed through
// downstream; deduplication is the ingest layer's job.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ardueco/mqtt.hpp"

namespace ardueco::mqtt {

class Broker {
public:
    struct Options {
        std::optional<std::string> required_token;  // unset = accept everyone
    };

    using IngestHook = std::function<void(const std::string& topic, const Bytes& payload)>;

    Broker() = default;
    explicit Broker(Options opts) : opts_(std::move(opts)) {}

    void set_ingest_hook(IngestHook hook) { ingest_hook_ = std::move(hook); }

    struct Output {
        std::vector<std::pair<int, Bytes>> frames;  // (connection, wire bytes)
        std::vector<int> closed;                    // connections to drop after sending
    };

    void open_connection(int conn_id) { conns_[conn_id]; }

    void close_connection(int conn_id) {
        conns_.erase(conn_id);
        std::erase_if(subs_, [conn_id](const Sub& s) { return s.conn_id == conn_id; });
    }

    bool connection_open(int conn_id) const { return conns_.count(conn_id) != 0; }
    std::uint64_t publishes_received() const { return publishes_received_; }

    // Feed raw bytes from one connection; packets are processed in arrival
    // order. Any protocol violation closes that connection.
    Output on_bytes(int conn_id, std::span<const std::uint8_t> data) {
        Output out;
        auto it = conns_.find(conn_id);
        if (it == conns_.end()) return out;
        auto& conn = it->second;
        conn.rx.insert(conn.rx.end(), data.begin(), data.end());

        std::size_t consumed = 0;
        while (true) {
            const auto r = decode(std::span<const std::uint8_t>(conn.rx).subspan(consumed));
            if (r.status == DecodeResult::Status::NeedMore) break;
            if (r.status == DecodeResult::Status::Bad) {
                drop(conn_id, out);
                return out;
            }
            consumed += r.consumed;
            handle_packet(conn_id, conn, r.packet, out);
            if (!conns_.count(conn_id)) return out;  // violation or clean disconnect
        }
        conn.rx.erase(conn.rx.begin(), conn.rx.begin() + static_cast<std::ptrdiff_t>(consumed));
        return out;
    }

private:
    struct Conn {
        Bytes rx;
        bool got_connect = false;
        std::string client_id;
    };
    struct Sub {
        int conn_id;
        std::string filter;
        std::uint8_t max_qos;
    };

    void drop(int conn_id, Output& out) {
        close_connection(conn_id);
        out.closed.push_back(conn_id);
    }

    // Returns false if the connection was closed (violation or disconnect).
    bool handle_packet(int conn_id, Conn& conn, const Packet& p, Output& out) {
        if (const auto* c = std::get_if<Connect>(&p)) {
            if (conn.got_connect) {  // second CONNECT is a violation
                drop(conn_id, out);
                return false;
            }
            conn.got_connect = true;
            conn.client_id = c->client_id;
            const bool accepted = !opts_.required_token || c->auth_token == opts_.required_token;
            out.frames.emplace_back(conn_id, encode(Connack{accepted}).value());
            if (!accepted) {
                drop(conn_id, out);
                return false;
            }
            return true;
        }
        if (!conn.got_connect) {  // CONNECT must be first
            drop(conn_id, out);
            return false;
        }

        if (const auto* pub = std::get_if<Publish>(&p)) {
            ++publishes_received_;
            if (pub->qos == 1) out.frames.emplace_back(conn_id, encode(Puback{*pub->packet_id}).value());
            route(*pub, out);
            return true;
        }
        if (const auto* sub = std::get_if<Subscribe>(&p)) {
            Suback ack;
            ack.packet_id = sub->packet_id;
            for (const auto& f : sub->filters) {
                if (!filter_valid(f.filter)) {
                    ack.granted.push_back(0x80);
                    continue;
                }
                subs_.push_back(Sub{conn_id, f.filter, f.max_qos});
                ack.granted.push_back(f.max_qos);
            }
            out.frames.emplace_back(conn_id, encode(ack).value());
            return true;
        }
        if (std::holds_alternative<Pingreq>(p)) {
            out.frames.emplace_back(conn_id, encode(Pingresp{}).value());
            return true;
        }
        if (std::holds_alternative<Disconnect>(p)) {
            close_connection(conn_id);
            return true;
        }
        // client-bound packet types arriving at the broker are violations
        drop(conn_id, out);
        return false;
    }

    // Fan out downstream at QoS 0; at-least-once reaches subscribers because
    // the publisher retransmits and dups are re-routed.
    void route(const Publish& pub, Output& out) {
        if (ingest_hook_) ingest_hook_(pub.topic, pub.payload);
        for (const auto& s : subs_) {
            if (!topic_matches(s.filter, pub.topic)) continue;
            Publish fwd;
            fwd.topic = pub.topic;
            fwd.payload = pub.payload;
            fwd.qos = 0;
            out.frames.emplace_back(s.conn_id, encode(fwd).value());
        }
    }

    Options opts_;
    IngestHook ingest_hook_;
    std::map<int, Conn> conns_;
    std::vector<Sub> subs_;
    std::uint64_t publishes_received_ = 0;
};

}  // namespace ardueco::mqtt
