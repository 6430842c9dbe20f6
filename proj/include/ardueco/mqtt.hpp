#pragma once

// MQTT 3.1.1 subset, from scratch: CONNECT/CONNACK, PUBLISH/PUBACK (QoS 0/1),
// SUBSCRIBE/SUBACK, PINGREQ/PINGRESP, DISCONNECT. Clean session always; no
// QoS 2, retain, wills or persistent state. Big-endian 16-bit lengths and
// packet ids, remaining-length varint, bit-exact framing.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ardueco/core.hpp"

namespace ardueco::mqtt {

enum class CodecError {
    Oversize,      // remaining length > 2^28-1
    BadVarint,     // more than 4 continuation bytes
    ReservedType,  // type nibble 0 or 15
    Unsupported,   // valid MQTT type outside the subset (QoS2 acks, unsubscribe)
    BadFlags,      // fixed-header flags violate the packet type
    Malformed,     // variable header/payload inconsistent with remaining length
};

enum class SessionError { NotConnected, Backpressure, PayloadTooLarge };

struct Connect {
    std::string client_id;
    std::uint16_t keep_alive_s = 60;
    std::optional<std::string> auth_token;  // stands in for certificates, sent as username
    bool operator==(const Connect&) const = default;
};
struct Connack {
    bool accepted = true;
    bool operator==(const Connack&) const = default;
};
struct Publish {
    std::string topic;
    std::vector<std::uint8_t> payload;
    std::uint8_t qos = 0;
    std::optional<std::uint16_t> packet_id;  // present iff qos == 1
    bool dup = false;
    bool operator==(const Publish&) const = default;
};
struct Puback {
    std::uint16_t packet_id = 0;
    bool operator==(const Puback&) const = default;
};
struct TopicFilter {
    std::string filter;
    std::uint8_t max_qos = 1;
    bool operator==(const TopicFilter&) const = default;
};
struct Subscribe {
    std::uint16_t packet_id = 0;
    std::vector<TopicFilter> filters;
    bool operator==(const Subscribe&) const = default;
};
struct Suback {
    std::uint16_t packet_id = 0;
    std::vector<std::uint8_t> granted;  // 0x00/0x01 per filter, 0x80 = failure
    bool operator==(const Suback&) const = default;
};
struct Pingreq {
    bool operator==(const Pingreq&) const = default;
};
struct Pingresp {
    bool operator==(const Pingresp&) const = default;
};
struct Disconnect {
    bool operator==(const Disconnect&) const = default;
};

using Packet =
    std::variant<Connect, Connack, Publish, Puback, Subscribe, Suback, Pingreq, Pingresp, Disconnect>;

using Bytes = std::vector<std::uint8_t>;

constexpr std::uint32_t kMaxRemainingLength = 268435455;  // 2^28 - 1

// ---- remaining-length varint ----

inline Result<Bytes, CodecError> encode_remaining_length(std::uint32_t n) {
    if (n > kMaxRemainingLength) return CodecError::Oversize;
    Bytes out;
    do {
        std::uint8_t byte = n % 128;
        n /= 128;
        if (n > 0) byte |= 0x80;
        out.push_back(byte);
    } while (n > 0);
    return out;
}

struct VarintDecode {
    enum class Status { Ok, NeedMore, Bad } status = Status::Bad;
    std::uint32_t value = 0;
    std::size_t consumed = 0;
};

inline VarintDecode decode_remaining_length(std::span<const std::uint8_t> buf) {
    VarintDecode d;
    std::uint32_t multiplier = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i >= buf.size()) {
            d.status = VarintDecode::Status::NeedMore;
            return d;
        }
        d.value += static_cast<std::uint32_t>(buf[i] & 0x7F) * multiplier;
        if ((buf[i] & 0x80) == 0) {
            d.status = VarintDecode::Status::Ok;
            d.consumed = i + 1;
            return d;
        }
        multiplier *= 128;
    }
    d.status = VarintDecode::Status::Bad;  // 4 bytes, continuation still set
    return d;
}

namespace detail {

inline void put_u16(Bytes& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_string(Bytes& out, std::string_view s) {
    put_u16(out, static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

inline bool topic_publishable(std::string_view topic) {
    return !topic.empty() && topic.find('+') == std::string_view::npos &&
           topic.find('#') == std::string_view::npos;
}

// Cursor over the variable header/payload region.
struct Reader {
    std::span<const std::uint8_t> buf;
    std::size_t pos = 0;

    bool u8(std::uint8_t& v) {
        if (pos + 1 > buf.size()) return false;
        v = buf[pos++];
        return true;
    }
    bool u16(std::uint16_t& v) {
        if (pos + 2 > buf.size()) return false;
        v = static_cast<std::uint16_t>(buf[pos] << 8 | buf[pos + 1]);
        pos += 2;
        return true;
    }
    bool str(std::string& v) {
        std::uint16_t n = 0;
        if (!u16(n) || pos + n > buf.size()) return false;
        v.assign(reinterpret_cast<const char*>(buf.data()) + pos, n);
        pos += n;
        return true;
    }
    bool done() const { return pos == buf.size(); }
    std::span<const std::uint8_t> rest() { return buf.subspan(pos); }
};

}  // namespace detail

// ---- encode ----

inline Result<Bytes, CodecError> encode(const Packet& p) {
    std::uint8_t first = 0;
    Bytes body;

    if (const auto* c = std::get_if<Connect>(&p)) {
        first = 0x10;
        detail::put_string(body, "MQTT");
        body.push_back(0x04);  // protocol level 3.1.1
        std::uint8_t flags = 0x02;  // clean session, always
        if (c->auth_token) flags |= 0x80;
        body.push_back(flags);
        detail::put_u16(body, c->keep_alive_s);
        detail::put_string(body, c->client_id);
        if (c->auth_token) detail::put_string(body, *c->auth_token);
    } else if (const auto* c = std::get_if<Connack>(&p)) {
        first = 0x20;
        body.push_back(0x00);  // session present: never (clean sessions only)
        body.push_back(c->accepted ? 0x00 : 0x05);
    } else if (const auto* pub = std::get_if<Publish>(&p)) {
        if (!detail::topic_publishable(pub->topic)) return CodecError::Malformed;
        if (pub->qos > 1 || (pub->qos == 1) != pub->packet_id.has_value()) return CodecError::Malformed;
        if (pub->packet_id && *pub->packet_id == 0) return CodecError::Malformed;
        if (pub->qos == 0 && pub->dup) return CodecError::Malformed;
        first = static_cast<std::uint8_t>(0x30 | (pub->dup ? 0x08 : 0x00) | (pub->qos << 1));
        detail::put_string(body, pub->topic);
        if (pub->qos == 1) detail::put_u16(body, *pub->packet_id);
        body.insert(body.end(), pub->payload.begin(), pub->payload.end());
    } else if (const auto* a = std::get_if<Puback>(&p)) {
        first = 0x40;
        detail::put_u16(body, a->packet_id);
    } else if (const auto* s = std::get_if<Subscribe>(&p)) {
        if (s->filters.empty()) return CodecError::Malformed;
        first = 0x82;
        detail::put_u16(body, s->packet_id);
        for (const auto& f : s->filters) {
            if (f.filter.empty() || f.max_qos > 1) return CodecError::Malformed;
            detail::put_string(body, f.filter);
            body.push_back(f.max_qos);
        }
    } else if (const auto* s = std::get_if<Suback>(&p)) {
        first = 0x90;
        detail::put_u16(body, s->packet_id);
        body.insert(body.end(), s->granted.begin(), s->granted.end());
    } else if (std::holds_alternative<Pingreq>(p)) {
        first = 0xC0;
    } else if (std::holds_alternative<Pingresp>(p)) {
        first = 0xD0;
    } else {
        first = 0xE0;  // Disconnect
    }

    if (body.size() > kMaxRemainingLength) return CodecError::Oversize;
    auto rl = encode_remaining_length(static_cast<std::uint32_t>(body.size()));
    Bytes out;
    out.reserve(1 + rl.value().size() + body.size());
    out.push_back(first);
    out.insert(out.end(), rl.value().begin(), rl.value().end());
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

// ---- decode ----

struct DecodeResult {
    enum class Status { Ok, NeedMore, Bad } status = Status::Bad;
    Packet packet;
    std::size_t consumed = 0;
    CodecError error = CodecError::Malformed;
};

namespace detail {

inline DecodeResult bad(CodecError e) {
    DecodeResult r;
    r.status = DecodeResult::Status::Bad;
    r.error = e;
    return r;
}

}  // namespace detail

inline DecodeResult decode(std::span<const std::uint8_t> buf) {
    if (buf.empty()) {
        DecodeResult r;
        r.status = DecodeResult::Status::NeedMore;
        return r;
    }
    const std::uint8_t first = buf[0];
    const std::uint8_t type = first >> 4;
    const std::uint8_t flags = first & 0x0F;
    if (type == 0 || type == 15) return detail::bad(CodecError::ReservedType);

    const auto rl = decode_remaining_length(buf.subspan(1));
    if (rl.status == VarintDecode::Status::Bad) return detail::bad(CodecError::BadVarint);
    if (rl.status == VarintDecode::Status::NeedMore) {
        DecodeResult r;
        r.status = DecodeResult::Status::NeedMore;
        return r;
    }
    if (rl.value > kMaxRemainingLength) return detail::bad(CodecError::Oversize);
    const std::size_t total = 1 + rl.consumed + rl.value;
    if (buf.size() < total) {
        DecodeResult r;
        r.status = DecodeResult::Status::NeedMore;
        return r;
    }

    detail::Reader rd{buf.subspan(1 + rl.consumed, rl.value)};
    DecodeResult r;
    r.status = DecodeResult::Status::Ok;
    r.consumed = total;

    switch (type) {
        case 1: {  // CONNECT
            if (flags != 0) return detail::bad(CodecError::BadFlags);
            Connect c;
            std::string proto;
            std::uint8_t level = 0, cflags = 0;
            if (!rd.str(proto) || proto != "MQTT") return detail::bad(CodecError::Malformed);
            if (!rd.u8(level) || level != 0x04) return detail::bad(CodecError::Malformed);
            if (!rd.u8(cflags)) return detail::bad(CodecError::Malformed);
            // subset: clean session required, no will, no password
            if ((cflags & 0x02) == 0 || (cflags & 0x7C) != 0) return detail::bad(CodecError::Malformed);
            if (!rd.u16(c.keep_alive_s)) return detail::bad(CodecError::Malformed);
            if (!rd.str(c.client_id)) return detail::bad(CodecError::Malformed);
            if (cflags & 0x80) {
                std::string token;
                if (!rd.str(token)) return detail::bad(CodecError::Malformed);
                c.auth_token = std::move(token);
            }
            if (!rd.done()) return detail::bad(CodecError::Malformed);
            r.packet = std::move(c);
            return r;
        }
        case 2: {  // CONNACK
            if (flags != 0) return detail::bad(CodecError::BadFlags);
            if (rl.value != 2) return detail::bad(CodecError::Malformed);
            std::uint8_t ack = 0, code = 0;
            rd.u8(ack);
            rd.u8(code);
            if (ack > 1) return detail::bad(CodecError::Malformed);
            r.packet = Connack{code == 0};
            return r;
        }
        case 3: {  // PUBLISH
            Publish pub;
            pub.dup = (flags & 0x08) != 0;
            pub.qos = (flags >> 1) & 0x03;
            if (pub.qos > 1) return detail::bad(CodecError::BadFlags);   // QoS 2 out of subset
            if (flags & 0x01) return detail::bad(CodecError::BadFlags);  // retain out of subset
            if (pub.qos == 0 && pub.dup) return detail::bad(CodecError::BadFlags);
            if (!rd.str(pub.topic)) return detail::bad(CodecError::Malformed);
            if (!detail::topic_publishable(pub.topic)) return detail::bad(CodecError::Malformed);
            if (pub.qos == 1) {
                std::uint16_t id = 0;
                if (!rd.u16(id) || id == 0) return detail::bad(CodecError::Malformed);
                pub.packet_id = id;
            }
            auto rest = rd.rest();
            pub.payload.assign(rest.begin(), rest.end());
            r.packet = std::move(pub);
            return r;
        }
        case 4: {  // PUBACK
            if (flags != 0) return detail::bad(CodecError::BadFlags);
            if (rl.value != 2) return detail::bad(CodecError::Malformed);
            std::uint16_t id = 0;
            rd.u16(id);
            r.packet = Puback{id};
            return r;
        }
        case 8: {  // SUBSCRIBE
            if (flags != 0x02) return detail::bad(CodecError::BadFlags);
            Subscribe s;
            if (!rd.u16(s.packet_id)) return detail::bad(CodecError::Malformed);
            while (!rd.done()) {
                TopicFilter f;
                if (!rd.str(f.filter) || !rd.u8(f.max_qos)) return detail::bad(CodecError::Malformed);
                if (f.filter.empty() || f.max_qos > 1) return detail::bad(CodecError::Malformed);
                s.filters.push_back(std::move(f));
            }
            if (s.filters.empty()) return detail::bad(CodecError::Malformed);
            r.packet = std::move(s);
            return r;
        }
        case 9: {  // SUBACK
            if (flags != 0) return detail::bad(CodecError::BadFlags);
            Suback s;
            if (!rd.u16(s.packet_id)) return detail::bad(CodecError::Malformed);
            auto rest = rd.rest();
            s.granted.assign(rest.begin(), rest.end());
            r.packet = std::move(s);
            return r;
        }
        case 12:  // PINGREQ
            if (flags != 0 || rl.value != 0) return detail::bad(CodecError::BadFlags);
            r.packet = Pingreq{};
            return r;
        case 13:  // PINGRESP
            if (flags != 0 || rl.value != 0) return detail::bad(CodecError::BadFlags);
            r.packet = Pingresp{};
            return r;
        case 14:  // DISCONNECT
            if (flags != 0 || rl.value != 0) return detail::bad(CodecError::BadFlags);
            r.packet = Disconnect{};
            return r;
        default:  // 5,6,7 (QoS 2 acks), 10,11 (unsubscribe)
            return detail::bad(CodecError::Unsupported);
    }
}

namespace detail {

inline std::vector<std::string_view> split_levels(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (true) {
        const auto e = s.find('/', pos);
        if (e == std::string_view::npos) {
            out.push_back(s.substr(pos));
            return out;
        }
        out.push_back(s.substr(pos, e - pos));
        pos = e + 1;
    }
}

}  // namespace detail

// Subscribe-side topic matching: '+' matches one level, '#' matches the
// remainder. Publish topics never contain wildcards.
inline bool topic_matches(std::string_view filter, std::string_view topic) {
    const auto f = detail::split_levels(filter);
    const auto t = detail::split_levels(topic);
    std::size_t i = 0;
    for (; i < f.size(); ++i) {
        if (f[i] == "#") return true;
        if (i >= t.size()) return false;
        if (f[i] != "+" && f[i] != t[i]) return false;
    }
    return i == t.size();
}

// Wildcards may appear only as whole levels, '#' only as the last one.
inline bool filter_valid(std::string_view filter) {
    if (filter.empty()) return false;
    const auto levels = detail::split_levels(filter);
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const auto lev = levels[i];
        if (lev == "#") return i + 1 == levels.size();
        if (lev.find('#') != std::string_view::npos) return false;
        if (lev != "+" && lev.find('+') != std::string_view::npos) return false;
    }
    return true;
}

// ---- client session: QoS-1 inflight tracking and retransmission ----

struct RetryPolicy {
    TimeMs timeout_ms = 1000;  // base retry timeout
    int backoff_factor = 2;    // doubles per attempt
    int cap_multiple = 8;      // backoff capped at cap_multiple * timeout_ms
    int max_retries = 8;       // delivery-failure signal past this many resends
    std::size_t window = 16;   // max inflight QoS-1 publishes
};

enum class SessionState { Idle, Connecting, Connected, Closed };

class ClientSession {
public:
    explicit ClientSession(std::string client_id, RetryPolicy policy = {})
        : client_id_(std::move(client_id)), policy_(policy) {}

    SessionState state() const { return state_; }
    bool connected() const { return state_ == SessionState::Connected; }
    std::size_t inflight_count() const { return inflight_.size(); }
    std::uint64_t retransmissions() const { return retransmissions_; }

    Bytes connect_packet(std::optional<std::string> auth_token = {}, std::uint16_t keep_alive_s = 60) {
        state_ = SessionState::Connecting;
        return encode(Connect{client_id_, keep_alive_s, std::move(auth_token)}).value();
    }

    Bytes disconnect_packet() {
        state_ = SessionState::Closed;
        return encode(Disconnect{}).value();
    }

    // Feed a broker->client packet. Returns the acked packet id for Puback.
    std::optional<std::uint16_t> on_packet(const Packet& p) {
        if (const auto* c = std::get_if<Connack>(&p)) {
            state_ = c->accepted ? SessionState::Connected : SessionState::Closed;
            return {};
        }
        if (const auto* a = std::get_if<Puback>(&p)) {
            inflight_.erase(a->packet_id);
            return a->packet_id;
        }
        return {};
    }

    Result<Bytes, SessionError> publish(std::string_view topic, std::span<const std::uint8_t> payload,
                                        std::uint8_t qos, TimeMs now) {
        if (state_ != SessionState::Connected) return SessionError::NotConnected;
        Publish pub;
        pub.topic = std::string(topic);
        pub.payload.assign(payload.begin(), payload.end());
        pub.qos = qos;
        if (qos == 0) {
            auto wire = encode(pub);
            if (!wire.ok()) return SessionError::PayloadTooLarge;
            return wire.value();
        }
        if (inflight_.size() >= policy_.window) return SessionError::Backpressure;
        pub.packet_id = take_packet_id();
        auto wire = encode(pub);
        if (!wire.ok()) return SessionError::PayloadTooLarge;
        Inflight entry;
        entry.packet = std::move(pub);
        entry.send_count = 1;
        entry.next_retry_at = now + policy_.timeout_ms;
        inflight_.emplace(*entry.packet.packet_id, std::move(entry));
        return wire.value();
    }

    struct TickOutput {
        std::vector<Bytes> retransmissions;          // dup=1 re-encodes, due entries only
        std::vector<std::uint16_t> failed;           // delivery-failure signals, removed from inflight
    };

    // Re-emits every overdue entry with exponential backoff; entries past
    // max_retries are dropped with a failure signal, never silently.
    TickOutput tick(TimeMs now) {
        TickOutput out;
        for (auto it = inflight_.begin(); it != inflight_.end();) {
            auto& e = it->second;
            if (now < e.next_retry_at) {
                ++it;
                continue;
            }
            if (e.send_count > policy_.max_retries) {
                out.failed.push_back(it->first);
                it = inflight_.erase(it);
                continue;
            }
            e.packet.dup = true;
            out.retransmissions.push_back(encode(e.packet).value());
            ++retransmissions_;
            TimeMs backoff = policy_.timeout_ms;
            for (int i = 1; i < e.send_count; ++i) {
                backoff *= policy_.backoff_factor;
                if (backoff >= policy_.timeout_ms * policy_.cap_multiple) {
                    backoff = policy_.timeout_ms * policy_.cap_multiple;
                    break;
                }
            }
            ++e.send_count;
            e.next_retry_at = now + backoff;
            ++it;
        }
        return out;
    }

private:
    struct Inflight {
        Publish packet;
        int send_count = 0;
        TimeMs next_retry_at = 0;
    };

    // 16-bit counter, never 0, wraps skipping ids still inflight.
    std::uint16_t take_packet_id() {
        for (;;) {
            const std::uint16_t id = next_packet_id_++;
            if (next_packet_id_ == 0) next_packet_id_ = 1;
            if (id != 0 && !inflight_.count(id)) return id;
        }
    }

    std::string client_id_;
    RetryPolicy policy_;
    SessionState state_ = SessionState::Idle;
    std::map<std::uint16_t, Inflight> inflight_;
    std::uint16_t next_packet_id_ = 1;
    std::uint64_t retransmissions_ = 0;
};

}  // namespace ardueco::mqtt
