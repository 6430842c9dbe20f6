// ardueco: one binary for the whole pipeline. Subcommands: simulate a fleet,
// serve the broker+ingest service over TCP, replay device logs, export
// GeoJSON, print store stats, validate a params.json.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "ardueco/broker.hpp"
#include "ardueco/firmware.hpp"
#include "ardueco/ingest.hpp"
#include "ardueco/sim.hpp"
#include "ardueco/store.hpp"

using namespace ardueco;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

// All file outputs are atomic: temp file in the same directory, rename on
// success, so failures never leave a partial file behind.
bool write_file_atomic(const std::filesystem::path& path, const std::string& content,
                       std::string& error) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            error = "cannot write " + tmp;
            return false;
        }
        out << content;
        out.flush();
        if (!out) {
            error = "write failed: " + tmp;
            std::filesystem::remove(tmp, ec);
            return false;
        }
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        error = "rename failed: " + ec.message();
        std::filesystem::remove(tmp, ec);
        return false;
    }
    return true;
}

double wall_clock_utc_s() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

int cmd_simulate(const std::string& scenario_path, const std::string& out_path,
                 const std::string& geojson_path, bool tracks) {
    std::ifstream in(scenario_path);
    if (!in) {
        std::cerr << "cannot read scenario: " << scenario_path << "\n";
        return kExitDomain;
    }
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        std::cerr << "scenario is not valid JSON: " << scenario_path << "\n";
        return kExitDomain;
    }
    const auto parsed = sim::parse_scenario(j);
    if (!parsed.ok()) {
        for (const auto& e : parsed.errors) std::cerr << "scenario." << e.field << ": " << e.message << "\n";
        return kExitDomain;
    }

    auto result = sim::run_sim(parsed.config);

    std::string error;
    if (!write_file_atomic(out_path, result.report.dump(2) + "\n", error)) {
        std::cerr << error << "\n";
        return kExitDomain;
    }
    if (!geojson_path.empty()) {
        const auto rows = result.store.query({});
        if (!write_file_atomic(geojson_path, ingest::export_geojson(rows, 0, tracks) + "\n", error)) {
            std::cerr << error << "\n";
            return kExitDomain;
        }
    }
    const auto& totals = result.report["totals"];
    std::cout << "generated=" << totals["generated"] << " stored=" << totals["stored"]
              << " rides=" << totals["rides"] << " complete=" << totals["rides_complete"]
              << " dropped_frames=" << totals["frames_dropped"] << "\n";
    return kExitOk;
}

volatile std::sig_atomic_t g_stop = 0;
void handle_stop(int) { g_stop = 1; }

int cmd_serve(int port, const std::string& store_path, const std::string& token) {
    auto store = ingest::ReadingStore::open(store_path);
    if (!store.ok()) {
        std::cerr << store.error() << "\n";
        return kExitDomain;
    }
    ingest::Ingestor ingestor(store.value());
    mqtt::Broker::Options opts;
    if (!token.empty()) opts.required_token = token;
    mqtt::Broker broker(opts);
    broker.set_ingest_hook([&](const std::string& topic, const mqtt::Bytes& payload) {
        ingestor.on_message(topic, payload, wall_clock_utc_s());
    });

    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) {
        std::perror("socket");
        return kExitDomain;
    }
    const int one = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        std::cerr << "cannot bind port " << port << " (in use?)\n";
        ::close(listener);
        return kExitDomain;
    }
    if (::listen(listener, 16) != 0) {
        std::perror("listen");
        ::close(listener);
        return kExitDomain;
    }

    std::signal(SIGINT, handle_stop);
    std::signal(SIGTERM, handle_stop);
    std::cout << "listening on port " << port << ", store " << store_path << "\n" << std::flush;

    std::map<int, int> conn_by_fd;  // fd -> broker connection id
    int next_conn = 1;

    auto send_frames = [&](const mqtt::Broker::Output& out) {
        for (const auto& [conn, bytes] : out.frames) {
            for (const auto& [fd, id] : conn_by_fd) {
                if (id != conn) continue;
                std::size_t off = 0;
                while (off < bytes.size()) {
                    const auto n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
                    if (n <= 0) break;
                    off += static_cast<std::size_t>(n);
                }
                break;
            }
        }
        for (const int conn : out.closed) {
            for (auto it = conn_by_fd.begin(); it != conn_by_fd.end(); ++it) {
                if (it->second != conn) continue;
                ::close(it->first);
                conn_by_fd.erase(it);
                break;
            }
        }
    };

    while (!g_stop) {
        std::vector<pollfd> fds;
        fds.push_back({listener, POLLIN, 0});
        for (const auto& [fd, conn] : conn_by_fd) fds.push_back({fd, POLLIN, 0});
        const int ready = ::poll(fds.data(), fds.size(), 200);
        if (ready <= 0) continue;

        if (fds[0].revents & POLLIN) {
            const int client = ::accept(listener, nullptr, nullptr);
            if (client >= 0) {
                conn_by_fd[client] = next_conn;
                broker.open_connection(next_conn);
                ++next_conn;
            }
        }
        for (std::size_t i = 1; i < fds.size(); ++i) {
            if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
            const int fd = fds[i].fd;
            const auto it = conn_by_fd.find(fd);
            if (it == conn_by_fd.end()) continue;
            std::uint8_t buf[4096];
            const auto n = ::recv(fd, buf, sizeof buf, 0);
            if (n <= 0) {  // peer went away
                broker.close_connection(it->second);
                ::close(fd);
                conn_by_fd.erase(it);
                continue;
            }
            const int conn = it->second;
            auto out = broker.on_bytes(conn, std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
            send_frames(out);
        }
    }

    for (const auto& [fd, conn] : conn_by_fd) ::close(fd);
    ::close(listener);
    store.value().flush();
    const auto& c = ingestor.counters();
    std::cout << "stored=" << store.value().size() << " accepted=" << c.accepted
              << " duplicates=" << c.duplicates << " quarantined=" << c.quarantined << "\n";
    return kExitOk;
}

int cmd_replay(const std::string& log_path, const std::string& store_path, const std::string& device) {
    std::ifstream in(log_path);
    if (!in) {
        std::cerr << "cannot read log: " << log_path << "\n";
        return kExitDomain;
    }
    auto store = ingest::ReadingStore::open(store_path);
    if (!store.ok()) {
        std::cerr << store.error() << "\n";
        return kExitDomain;
    }
    ingest::Ingestor ingestor(store.value());
    std::string line;
    std::uint64_t lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++lines;
        ingestor.ingest_reading_line(device, line, wall_clock_utc_s());
    }
    store.value().flush();

    const auto& c = ingestor.counters();
    std::cout << "lines=" << lines << " ingested=" << c.accepted << " duplicates=" << c.duplicates
              << " quarantined=" << c.quarantined << "\n";
    for (const auto& [key, s] : ingestor.summaries()) {
        std::cout << "ride " << s.ride_id << " device " << s.device_id << " rows " << s.received_count
                  << " status " << ingest::to_string(s.status) << "\n";
    }
    return kExitOk;
}

int cmd_export(const std::string& store_path, const std::string& geojson_path,
               const std::string& grid_path, int precision, bool tracks) {
    auto store = ingest::ReadingStore::open(store_path);
    if (!store.ok()) {
        std::cerr << store.error() << "\n";
        return kExitDomain;
    }
    const auto rows = store.value().query({});
    std::string error;
    if (!geojson_path.empty()) {
        if (!write_file_atomic(geojson_path, ingest::export_geojson(rows, 0, tracks) + "\n", error)) {
            std::cerr << error << "\n";
            return kExitDomain;
        }
    }
    if (!grid_path.empty()) {
        const auto cells = ingest::aggregate_grid(rows, precision);
        if (!write_file_atomic(grid_path, ingest::grid_geojson_doc(cells).dump() + "\n", error)) {
            std::cerr << error << "\n";
            return kExitDomain;
        }
    }
    std::size_t fixed = 0;
    for (const auto& r : rows) fixed += r.reading.fix_valid ? 1 : 0;
    std::cout << "records=" << rows.size() << " features=" << fixed << "\n";
    return kExitOk;
}

int cmd_stats(const std::string& store_path, int precision) {
    auto store = ingest::ReadingStore::open(store_path);
    if (!store.ok()) {
        std::cerr << store.error() << "\n";
        return kExitDomain;
    }
    const auto rows = store.value().query({});

    struct RideRow {
        std::string device;
        std::uint64_t count = 0;
        double first = 0, last = 0;
    };
    std::map<std::string, RideRow> rides;
    for (const auto& r : rows) {
        auto& row = rides[r.reading.ride_id];
        row.device = r.device_id;
        if (row.count == 0) {
            row.first = row.last = r.reading.utc_s;
        } else {
            row.first = std::min(row.first, r.reading.utc_s);
            row.last = std::max(row.last, r.reading.utc_s);
        }
        ++row.count;
    }
    std::printf("%-10s %-10s %8s %14s %14s\n", "ride", "device", "rows", "first_utc", "last_utc");
    for (const auto& [ride, row] : rides)
        std::printf("%-10s %-10s %8llu %14.0f %14.0f\n", ride.c_str(), row.device.c_str(),
                    static_cast<unsigned long long>(row.count), row.first, row.last);

    const auto cells = ingest::aggregate_grid(rows, precision);
    std::printf("\n%-14s %8s %10s %10s %10s\n", "cell", "count", "mean_ppm", "min_ppm", "max_ppm");
    for (const auto& c : cells)
        std::printf("%-14s %8llu %10.3f %10.3f %10.3f\n", c.cell_id.c_str(),
                    static_cast<unsigned long long>(c.count), c.mean_ppm, c.min_ppm, c.max_ppm);
    return kExitOk;
}

int cmd_validate(const std::string& params_path) {
    std::ifstream in(params_path);
    if (!in) {
        std::cerr << "cannot read " << params_path << "\n";
        return kExitDomain;
    }
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto parsed = firmware::parse_device_config(text);
    if (parsed.ok()) {
        std::cout << "ok: device would boot to Sampling\n";
        return kExitOk;
    }
    for (const auto& e : parsed.errors) std::cout << e.field << ": " << e.message << "\n";
    return kExitDomain;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ArduECO pipeline: fleet simulator, MQTT ingest service, log tools"};
    app.require_subcommand(1);

    std::string scenario_path, out_path, geojson_path, grid_path, store_path, log_path, params_path;
    std::string device_id = "replay";
    std::string token;
    int port = 1883;
    int precision = 7;
    bool tracks = false;

    auto* simulate = app.add_subcommand("simulate", "run a scenario and write the report");
    simulate->add_option("--scenario", scenario_path, "scenario JSON")->required();
    simulate->add_option("--out", out_path, "report JSON output")->required();
    simulate->add_option("--geojson", geojson_path, "optional GeoJSON output");
    simulate->add_flag("--tracks", tracks, "include per-ride LineStrings");

    auto* serve = app.add_subcommand("serve", "run the broker + ingest service");
    serve->add_option("--port", port, "TCP port")->required();
    serve->add_option("--store", store_path, "store file")->envname("ARDUECO_STORE")->required();
    serve->add_option("--token", token, "require this auth token on connect");

    auto* replay = app.add_subcommand("replay", "ingest a perm_log through the dedup path");
    replay->add_option("--perm-log", log_path, "device perm_log.txt")->required();
    replay->add_option("--store", store_path, "store file")->envname("ARDUECO_STORE")->required();
    replay->add_option("--device", device_id, "device id for the dedup key");

    auto* exp = app.add_subcommand("export", "write GeoJSON from a store");
    exp->add_option("--store", store_path, "store file")->envname("ARDUECO_STORE")->required();
    exp->add_option("--geojson", geojson_path, "GeoJSON output");
    exp->add_option("--grid", grid_path, "grid-cell aggregate GeoJSON output");
    exp->add_option("--precision", precision, "geohash precision (1-12)")->check(CLI::Range(1, 12));
    exp->add_flag("--tracks", tracks, "include per-ride LineStrings");

    auto* stats = app.add_subcommand("stats", "per-ride and per-cell tables");
    stats->add_option("--store", store_path, "store file")->envname("ARDUECO_STORE")->required();
    stats->add_option("--precision", precision, "geohash precision (1-12)")->check(CLI::Range(1, 12));

    auto* validate = app.add_subcommand("validate-config", "check a params.json");
    validate->add_option("--params", params_path, "params.json path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (simulate->parsed()) return cmd_simulate(scenario_path, out_path, geojson_path, tracks);
        if (serve->parsed()) return cmd_serve(port, store_path, token);
        if (replay->parsed()) return cmd_replay(log_path, store_path, device_id);
        if (exp->parsed()) return cmd_export(store_path, geojson_path, grid_path, precision, tracks);
        if (stats->parsed()) return cmd_stats(store_path, precision);
        if (validate->parsed()) return cmd_validate(params_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDomain;
    }
    return kExitUsage;
}
