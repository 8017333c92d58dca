// gridwatch command-line front end. All engine work goes through the C API
// in gridwatch.h; this file only parses arguments, moves bytes between files
// and the library, and maps statuses to exit codes.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "gridwatch.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitIslanded = 3;

std::string read_file_or_die(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "error: cannot open " << path << "\n";
    std::exit(kExitError);
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_or_die(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    std::cerr << "error: cannot write " << path << "\n";
    std::exit(kExitError);
  }
  out << contents;
}

// Takes ownership of a library-allocated string.
std::string take(char* s) {
  std::string out = s ? s : "";
  gw_string_free(s);
  return out;
}

int fail_with_last_error(const std::string& prefix) {
  std::cerr << "error: " << prefix << ": " << gw_last_error() << "\n";
  return kExitError;
}

gw_grid* parse_grid_or_die(const std::string& path, bool lenient) {
  gw_grid* grid = nullptr;
  if (gw_grid_parse_file(path.c_str(), lenient ? 1 : 0, &grid) != GW_OK) {
    std::cerr << "error: grid parse failed: " << gw_last_error() << "\n";
    std::exit(kExitError);
  }
  return grid;
}

gw_server* g_server = nullptr;

void handle_signal(int) {
  if (g_server) gw_server_stop(g_server);
}

int cmd_powerflow(const std::string& grid_path, bool lenient, double tol, int max_iter,
                  const std::string& out_path) {
  gw_grid* grid = parse_grid_or_die(grid_path, lenient);
  const nlohmann::json opts{{"tol", tol}, {"max_iter", max_iter}};
  char* out = nullptr;
  const gw_status status = gw_powerflow(grid, opts.dump().c_str(), &out);
  gw_grid_free(grid);
  const std::string solution = take(out);
  if (!out_path.empty())
    write_file_or_die(out_path, solution + "\n");
  else
    std::cout << solution << "\n";
  switch (status) {
    case GW_OK: return kExitOk;
    case GW_SOLVE_DIVERGED: return kExitDiverged;
    case GW_SOLVE_ISLANDED: return kExitIslanded;
    default: return fail_with_last_error("power flow");
  }
}

int cmd_contingency(const std::string& grid_path, bool lenient, const std::string& reports_dir,
                    double floor, double threshold, uint64_t budget, int max_order,
                    bool exhaustive, int res, int jobs, const std::string& out_dir) {
  gw_grid* grid = parse_grid_or_die(grid_path, lenient);

  nlohmann::json reports = nlohmann::json::array();
  int unreadable = 0;
  if (!reports_dir.empty()) {
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(reports_dir, ec)) {
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
    if (ec) {
      std::cerr << "error: cannot read reports directory " << reports_dir << "\n";
      gw_grid_free(grid);
      return kExitError;
    }
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
      try {
        // Plain report JSON or a signed envelope; the library unwraps both.
        reports.push_back(nlohmann::json::parse(read_file_or_die(path.string())));
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping unreadable report " << path << ": " << e.what() << "\n";
        ++unreadable;
      }
    }
  }

  nlohmann::json cfg{{"floor", floor},
                     {"threshold", exhaustive ? 0.0 : threshold},
                     {"budget", exhaustive ? 0 : budget},
                     {"max_order", max_order},
                     {"raster_res", res},
                     {"jobs", jobs},
                     {"reports", reports}};
  char* out = nullptr;
  const gw_status status = gw_contingency(grid, cfg.dump().c_str(), &out);
  gw_grid_free(grid);
  if (status != GW_OK) return fail_with_last_error("contingency analysis");
  const nlohmann::json result = nlohmann::json::parse(take(out));

  std::filesystem::create_directories(out_dir);
  const auto table_path = (std::filesystem::path(out_dir) / "ranked.csv").string();
  const auto csv_path = (std::filesystem::path(out_dir) / "risk.csv").string();
  const auto svg_path = (std::filesystem::path(out_dir) / "risk.svg").string();
  write_file_or_die(table_path, result["table_csv"].get<std::string>());
  write_file_or_die(csv_path, result["raster_csv"].get<std::string>());
  write_file_or_die(svg_path, result["raster_svg"].get<std::string>());

  nlohmann::json summary = result["summary"];
  summary["reports_skipped"] = summary["reports_skipped"].get<int>() + unreadable;
  summary["outputs"] = {table_path, csv_path, svg_path};
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_serve(const std::string& grid_path, bool lenient, const std::string& registry,
              const std::string& store, const std::string& listen, const std::string& geo) {
  gw_grid* grid = parse_grid_or_die(grid_path, lenient);

  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) {
    std::cerr << "error: --listen must be HOST:PORT\n";
    return kExitError;
  }
  const std::string host = listen.substr(0, colon);
  const int port = std::atoi(listen.c_str() + colon + 1);

  std::string geo_json;
  if (!geo.empty()) {
    double lat, lon, mpu;
    if (std::sscanf(geo.c_str(), "%lf,%lf,%lf", &lat, &lon, &mpu) != 3) {
      std::cerr << "error: --geo must be LAT,LON,METERS_PER_UNIT\n";
      return kExitError;
    }
    geo_json = nlohmann::json{{"origin_lat", lat},
                              {"origin_lon", lon},
                              {"meters_per_unit", mpu}}
                   .dump();
  }

  gw_server* server = nullptr;
  if (gw_server_create(grid, registry.c_str(), store.c_str(),
                       geo_json.empty() ? nullptr : geo_json.c_str(), &server) != GW_OK) {
    gw_grid_free(grid);
    return fail_with_last_error("server setup");
  }
  gw_grid_free(grid);

  g_server = server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);

  std::cerr << "listening on " << host << ":" << port << " (POST /reports, GET /risk, GET /health)\n";
  const gw_status status = gw_server_listen(server, host.c_str(), port);
  g_server = nullptr;
  gw_server_free(server);
  if (status != GW_OK) return fail_with_last_error("serve");
  std::cerr << "shut down cleanly\n";
  return kExitOk;
}

int cmd_report_keygen(const std::string& device_id, const std::string& out_path,
                      const std::string& registry_path, uint64_t seed) {
  char* out = nullptr;
  if (gw_report_keygen(device_id.c_str(), seed, &out) != GW_OK)
    return fail_with_last_error("keygen");
  const std::string key_json = take(out);
  if (!out_path.empty())
    write_file_or_die(out_path, key_json + "\n");
  else
    std::cout << key_json << "\n";

  if (!registry_path.empty()) {
    nlohmann::json registry = nlohmann::json::array();
    if (std::filesystem::exists(registry_path))
      registry = nlohmann::json::parse(read_file_or_die(registry_path));
    const nlohmann::json key = nlohmann::json::parse(key_json);
    registry.push_back({{"device_key_id", key["device_key_id"]},
                        {"public_key_b64", key["public_key_b64"]}});
    write_file_or_die(registry_path, registry.dump(2) + "\n");
    std::cerr << "enrolled " << device_id << " in " << registry_path << "\n";
  }
  return kExitOk;
}

int cmd_report_sign(const std::string& key_path, const std::string& report_path,
                    const std::string& out_path, uint64_t seed) {
  const std::string key = read_file_or_die(key_path);
  const std::string report = read_file_or_die(report_path);
  char* out = nullptr;
  if (gw_report_sign(report.c_str(), key.c_str(), seed, &out) != GW_OK)
    return fail_with_last_error("sign");
  const std::string envelope = take(out);
  if (!out_path.empty())
    write_file_or_die(out_path, envelope + "\n");
  else
    std::cout << envelope << "\n";
  return kExitOk;
}

int cmd_report_send(const std::string& envelope_path, const std::string& url) {
  const std::string envelope = read_file_or_die(envelope_path);
  // Split http://host:port/path
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) {
    std::cerr << "error: --url must look like http://host:port\n";
    return kExitError;
  }
  const auto rest = url.substr(scheme + 3);
  const auto slash = rest.find('/');
  const std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  httplib::Client client(("http://" + hostport).c_str());
  client.set_connection_timeout(5);
  const auto res = client.Post("/reports", envelope, "application/json");
  if (!res) {
    std::cerr << "error: cannot reach " << hostport << "\n";
    return kExitError;
  }
  std::cout << res->body << "\n";
  return res->status == 200 ? kExitOk : kExitError;
}

int cmd_capsule_keygen(const std::string& out_path, uint64_t seed) {
  char* out = nullptr;
  if (gw_capsule_keygen(seed, &out) != GW_OK) return fail_with_last_error("capsule keygen");
  const std::string key = take(out);
  if (!out_path.empty())
    write_file_or_die(out_path, key + "\n");
  else
    std::cout << key << "\n";
  return kExitOk;
}

int cmd_capsule_package(const std::vector<std::string>& payload_files,
                        const std::string& policy_path, const std::string& owner_key_path,
                        const std::string& keyserver_path, const std::string& out_path,
                        uint64_t seed) {
  const nlohmann::json request{
      {"payload_files", payload_files},
      {"policy", nlohmann::json::parse(read_file_or_die(policy_path))},
      {"owner_key", nlohmann::json::parse(read_file_or_die(owner_key_path))}};
  char* out = nullptr;
  if (gw_capsule_package(request.dump().c_str(), keyserver_path.c_str(), out_path.c_str(), seed,
                         &out) != GW_OK)
    return fail_with_last_error("capsule package");
  std::cout << take(out) << "\n";
  return kExitOk;
}

int cmd_capsule_install(const std::string& capsule_path, const std::string& keyserver_path,
                        const std::string& owner_key_path, const std::string& platform,
                        std::string token, const std::string& state_path) {
  const nlohmann::json owner = nlohmann::json::parse(read_file_or_die(owner_key_path));
  if (token.empty()) {
    // Convenience: mint the token locally when the caller holds the
    // keyserver file anyway (simulated deployments).
    char* minted = nullptr;
    if (gw_attestation_token(keyserver_path.c_str(), platform.c_str(), &minted) != GW_OK)
      return fail_with_last_error("attestation");
    token = take(minted);
  }
  char* out = nullptr;
  if (gw_capsule_install(capsule_path.c_str(), keyserver_path.c_str(),
                         owner["public_key_b64"].get<std::string>().c_str(), platform.c_str(),
                         token.c_str(), state_path.c_str(), &out) != GW_OK)
    return fail_with_last_error("capsule install");
  std::cout << take(out) << "\n";
  return kExitOk;
}

int cmd_capsule_simulate(const std::string& state_path, const std::string& script_path,
                         bool dry_run) {
  const std::string script = read_file_or_die(script_path);
  char* out = nullptr;
  if (gw_capsule_simulate(state_path.c_str(), script.c_str(), dry_run ? 1 : 0, &out) != GW_OK)
    return fail_with_last_error("capsule simulate");
  std::cout << take(out) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridwatch: report-driven power grid risk analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(gw_version()));

  // powerflow
  auto* pf_cmd = app.add_subcommand("powerflow", "Solve the steady-state power flow");
  std::string pf_grid, pf_out;
  bool pf_lenient = false;
  double pf_tol = 1e-8;
  int pf_max_iter = 20;
  pf_cmd->add_option("--grid", pf_grid, "Grid JSON file")->required();
  pf_cmd->add_flag("--lenient", pf_lenient, "Tolerate unknown keys in the grid file");
  pf_cmd->add_option("--tol", pf_tol, "Mismatch tolerance (p.u.)");
  pf_cmd->add_option("--max-iter", pf_max_iter, "Newton iteration limit");
  pf_cmd->add_option("--out", pf_out, "Write the solution JSON here instead of stdout");

  // contingency
  auto* ct_cmd = app.add_subcommand("contingency", "Screened outage analysis and risk surface");
  std::string ct_grid, ct_reports, ct_out = ".";
  bool ct_lenient = false, ct_exhaustive = false;
  double ct_floor = 0.001, ct_threshold = 0.0;
  uint64_t ct_budget = 0;
  int ct_max_order = 2, ct_res = 32, ct_jobs = 4;
  ct_cmd->add_option("--grid", ct_grid, "Grid JSON file")->required();
  ct_cmd->add_flag("--lenient", ct_lenient, "Tolerate unknown keys in the grid file");
  ct_cmd->add_option("--reports", ct_reports, "Directory of report/envelope JSON files");
  ct_cmd->add_option("--floor", ct_floor, "Baseline per-asset failure probability");
  ct_cmd->add_option("--threshold", ct_threshold, "Minimum contingency probability to assess");
  ct_cmd->add_option("--budget", ct_budget, "Max contingencies to assess (0 = unlimited)");
  ct_cmd->add_option("--max-order", ct_max_order, "Highest outage order to enumerate");
  ct_cmd->add_flag("--exhaustive", ct_exhaustive,
                   "Assess every enumerated contingency (threshold 0, unlimited budget)");
  ct_cmd->add_option("--res", ct_res, "Risk raster resolution (cells per side)");
  ct_cmd->add_option("--jobs", ct_jobs, "Parallel assessment workers");
  ct_cmd->add_option("--out", ct_out, "Output directory for ranked.csv / risk.csv / risk.svg");

  // serve
  auto* sv_cmd = app.add_subcommand("serve", "Run the report ingestion service");
  std::string sv_grid, sv_registry, sv_store, sv_listen = "127.0.0.1:8080", sv_geo;
  bool sv_lenient = false;
  sv_cmd->add_option("--grid", sv_grid, "Grid JSON file")->required();
  sv_cmd->add_flag("--lenient", sv_lenient, "Tolerate unknown keys in the grid file");
  sv_cmd->add_option("--registry", sv_registry, "Device registry JSON file")->required();
  sv_cmd->add_option("--store-path", sv_store, "Accepted-report log (NDJSON, append-only)")->required();
  sv_cmd->add_option("--listen", sv_listen, "HOST:PORT to bind");
  sv_cmd->add_option("--geo", sv_geo, "Map georeference LAT,LON,METERS_PER_UNIT");

  // report
  auto* rp_cmd = app.add_subcommand("report", "Create, sign, and submit incident reports");
  rp_cmd->require_subcommand(1);
  auto* rp_keygen = rp_cmd->add_subcommand("keygen", "Generate a device keypair");
  std::string rpk_device = "device", rpk_out, rpk_registry;
  uint64_t rpk_seed = 0;
  rp_keygen->add_option("--device-id", rpk_device, "Device key identifier");
  rp_keygen->add_option("--out", rpk_out, "Write the keypair JSON here");
  rp_keygen->add_option("--registry", rpk_registry, "Append the public half to this registry");
  rp_keygen->add_option("--seed", rpk_seed, "Deterministic key (test builds only)");
  auto* rp_sign = rp_cmd->add_subcommand("sign", "Canonicalize and sign a report");
  std::string rps_key, rps_report, rps_out;
  uint64_t rps_seed = 0;
  rp_sign->add_option("--key", rps_key, "Device keypair JSON file")->required();
  rp_sign->add_option("--report", rps_report, "Report JSON file")->required();
  rp_sign->add_option("--out", rps_out, "Write the envelope JSON here");
  rp_sign->add_option("--seed", rps_seed, "Deterministic nonce (test builds only)");
  auto* rp_send = rp_cmd->add_subcommand("send", "POST an envelope to a running service");
  std::string rpd_envelope, rpd_url = "http://127.0.0.1:8080";
  rp_send->add_option("--envelope", rpd_envelope, "Envelope JSON file")->required();
  rp_send->add_option("--url", rpd_url, "Service base URL");

  // capsule
  auto* cp_cmd = app.add_subcommand("capsule", "Package, install, and simulate data capsules");
  cp_cmd->require_subcommand(1);
  auto* cp_keygen = cp_cmd->add_subcommand("keygen", "Generate an owner signing keypair");
  std::string cpk_out;
  uint64_t cpk_seed = 0;
  cp_keygen->add_option("--out", cpk_out, "Write the keypair JSON here");
  cp_keygen->add_option("--seed", cpk_seed, "Deterministic key (test builds only)");
  auto* cp_ksinit = cp_cmd->add_subcommand("keyserver-init", "Create a keyserver state file");
  std::string cpi_keyserver;
  uint64_t cpi_seed = 0;
  cp_ksinit->add_option("--keyserver", cpi_keyserver, "Keyserver state file")->required();
  cp_ksinit->add_option("--seed", cpi_seed, "Deterministic secret (test builds only)");
  auto* cp_attest = cp_cmd->add_subcommand("attest", "Mint an attestation token");
  std::string cpa_keyserver, cpa_platform;
  cp_attest->add_option("--keyserver", cpa_keyserver, "Keyserver state file")->required();
  cp_attest->add_option("--platform", cpa_platform, "Platform descriptor")->required();
  auto* cp_package = cp_cmd->add_subcommand("package", "Encrypt and sign a capsule");
  std::vector<std::string> cpp_payload;
  std::string cpp_policy, cpp_owner, cpp_keyserver, cpp_out;
  uint64_t cpp_seed = 0;
  cp_package->add_option("--payload", cpp_payload, "Payload file(s)")->required();
  cp_package->add_option("--policy", cpp_policy, "Policy JSON file")->required();
  cp_package->add_option("--owner-key", cpp_owner, "Owner keypair JSON file")->required();
  cp_package->add_option("--keyserver", cpp_keyserver, "Keyserver state file")->required();
  cp_package->add_option("--out", cpp_out, "Capsule output file")->required();
  cp_package->add_option("--seed", cpp_seed, "Deterministic ids/keys (test builds only)");
  auto* cp_install = cp_cmd->add_subcommand("install", "Verify and install a capsule");
  std::string cpl_capsule, cpl_keyserver, cpl_owner, cpl_platform = "android-4.1.1_6", cpl_token,
              cpl_state;
  cp_install->add_option("--capsule", cpl_capsule, "Capsule file")->required();
  cp_install->add_option("--keyserver", cpl_keyserver, "Keyserver state file")->required();
  cp_install->add_option("--owner-key", cpl_owner, "Owner keypair JSON (public half used)")
      ->required();
  cp_install->add_option("--platform", cpl_platform, "Platform descriptor for attestation");
  cp_install->add_option("--token", cpl_token, "Attestation token (minted locally when empty)");
  cp_install->add_option("--state", cpl_state, "Taint state file")->required();
  auto* cp_sim = cp_cmd->add_subcommand("simulate", "Replay an event script against the state");
  std::string cps_state, cps_script;
  bool cps_dry = false;
  cp_sim->add_option("--state", cps_state, "Taint state file")->required();
  cp_sim->add_option("--script", cps_script, "Event script JSON file")->required();
  cp_sim->add_flag("--dry-run", cps_dry, "Do not write the updated state back");

  CLI11_PARSE(app, argc, argv);

  if (pf_cmd->parsed()) return cmd_powerflow(pf_grid, pf_lenient, pf_tol, pf_max_iter, pf_out);
  if (ct_cmd->parsed())
    return cmd_contingency(ct_grid, ct_lenient, ct_reports, ct_floor, ct_threshold, ct_budget,
                           ct_max_order, ct_exhaustive, ct_res, ct_jobs, ct_out);
  if (sv_cmd->parsed())
    return cmd_serve(sv_grid, sv_lenient, sv_registry, sv_store, sv_listen, sv_geo);
  if (rp_cmd->parsed()) {
    if (rp_keygen->parsed()) return cmd_report_keygen(rpk_device, rpk_out, rpk_registry, rpk_seed);
    if (rp_sign->parsed()) return cmd_report_sign(rps_key, rps_report, rps_out, rps_seed);
    if (rp_send->parsed()) return cmd_report_send(rpd_envelope, rpd_url);
  }
  if (cp_cmd->parsed()) {
    if (cp_keygen->parsed()) return cmd_capsule_keygen(cpk_out, cpk_seed);
    if (cp_ksinit->parsed()) {
      if (gw_keyserver_init(cpi_keyserver.c_str(), cpi_seed) != GW_OK)
        return fail_with_last_error("keyserver-init");
      std::cout << "keyserver initialized at " << cpi_keyserver << "\n";
      return kExitOk;
    }
    if (cp_attest->parsed()) {
      char* token = nullptr;
      if (gw_attestation_token(cpa_keyserver.c_str(), cpa_platform.c_str(), &token) != GW_OK)
        return fail_with_last_error("attest");
      std::cout << take(token) << "\n";
      return kExitOk;
    }
    if (cp_package->parsed())
      return cmd_capsule_package(cpp_payload, cpp_policy, cpp_owner, cpp_keyserver, cpp_out,
                                 cpp_seed);
    if (cp_install->parsed())
      return cmd_capsule_install(cpl_capsule, cpl_keyserver, cpl_owner, cpl_platform, cpl_token,
                                 cpl_state);
    if (cp_sim->parsed()) return cmd_capsule_simulate(cps_state, cps_script, cps_dry);
  }
  return kExitError;
}
