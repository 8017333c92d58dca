#include "gridwatch.h"

#include <cstring>
#include <memory>
#include <string>

#include "core/capsule.hpp"
#include "core/contingency.hpp"
#include "core/grid.hpp"
#include "core/powerflow.hpp"
#include "core/report.hpp"
#include "core/service.hpp"
#include "core/util.hpp"
#include "core/version.hpp"

using namespace gridwatch;

struct gw_grid {
  grid::GridSpec spec;
};

struct gw_server {
  std::unique_ptr<service::ReportService> service;
};

namespace {

thread_local std::string t_last_error;

void set_error(const std::string& msg) { t_last_error = msg; }

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Translates C++ failures into status codes at the API boundary.
template <typename Fn>
gw_status guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const util::ParseError& e) {
    set_error(e.what());
    return GW_ERR_PARSE;
  } catch (const util::IoError& e) {
    set_error(e.what());
    return GW_ERR_IO;
  } catch (const std::invalid_argument& e) {
    set_error(e.what());
    return GW_ERR_INVALID_ARG;
  } catch (const std::exception& e) {
    set_error(e.what());
    return GW_ERR_INTERNAL;
  }
}

std::unique_ptr<util::Rng> make_rng(uint64_t seed) {
#ifdef GRIDWATCH_TEST_HOOKS
  if (seed != 0) return std::make_unique<util::SeededRng>(seed);
#else
  if (seed != 0)
    throw std::invalid_argument("seeded randomness is disabled in this build");
#endif
  return std::make_unique<util::SystemRng>();
}

nlohmann::json parse_optional_object(const char* json, const char* what) {
  if (!json || !*json) return nlohmann::json::object();
  const nlohmann::json j = util::parse_json(json);
  if (!j.is_object()) throw util::ParseError(std::string(what) + " must be a JSON object");
  return j;
}

nlohmann::json flows_to_json(const std::vector<pf::BranchFlow>& flows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : flows) {
    arr.push_back({{"branch_id", f.branch_id},
                   {"p_from", f.p_from},
                   {"q_from", f.q_from},
                   {"p_to", f.p_to},
                   {"q_to", f.q_to},
                   {"loading", f.loading}});
  }
  return arr;
}

capsule::KeyServer load_keyserver(const std::string& path) {
  return capsule::KeyServer::from_json(util::parse_json(util::read_file(path)));
}

void save_keyserver(const std::string& path, const capsule::KeyServer& ks) {
  util::write_file_atomic(path, ks.to_json().dump(2) + "\n");
}

capsule::TaintWorld load_world_or_fresh(const std::string& path) {
  try {
    util::read_file(path);
  } catch (const util::IoError&) {
    return capsule::TaintWorld{};  // file absent: start empty
  }
  return capsule::TaintWorld::restore(path);
}

}  // namespace

extern "C" {

const char* gw_version(void) { return kVersion; }

const char* gw_last_error(void) { return t_last_error.c_str(); }

void gw_string_free(char* s) { ::free(s); }

gw_status gw_grid_parse(const char* json_text, int lenient, gw_grid** out_grid) {
  if (!json_text || !out_grid) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto g = std::make_unique<gw_grid>();
    g->spec = grid::parse_grid(json_text, lenient != 0);
    *out_grid = g.release();
    return GW_OK;
  });
}

gw_status gw_grid_parse_file(const char* path, int lenient, gw_grid** out_grid) {
  if (!path || !out_grid) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto g = std::make_unique<gw_grid>();
    g->spec = grid::parse_grid(util::read_file(path), lenient != 0);
    *out_grid = g.release();
    return GW_OK;
  });
}

void gw_grid_free(gw_grid* grid) { delete grid; }

gw_status gw_grid_summary(const gw_grid* grid, char** out_json) {
  if (!grid || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    *out_json = dup_string(grid::grid_to_json(grid->spec).dump(2));
    return GW_OK;
  });
}

gw_status gw_powerflow(const gw_grid* grid, const char* options_json, char** out_json) {
  if (!grid || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const nlohmann::json opts_in = parse_optional_object(options_json, "options");
    pf::SolveOptions opts;
    opts.tol = opts_in.value("tol", opts.tol);
    opts.max_iter = opts_in.value("max_iter", opts.max_iter);

    const auto u = pf::Controls::from_spec(grid->spec);
    const auto outcome = pf::solve_newton(grid->spec, u, opts);

    nlohmann::json j;
    gw_status status = GW_OK;
    if (const auto* conv = std::get_if<pf::Converged>(&outcome)) {
      j["outcome"] = "converged";
      j["iterations"] = conv->iterations;
      j["final_mismatch_norm"] = conv->final_mismatch_norm;
      j["norm_trace"] = conv->norm_trace;
      j["warnings"] = conv->warnings;
      nlohmann::json buses = nlohmann::json::array();
      for (size_t i = 0; i < grid->spec.buses.size(); ++i) {
        buses.push_back({{"id", grid->spec.buses[i].id},
                         {"v", conv->state.v(static_cast<Eigen::Index>(i))},
                         {"theta", conv->state.theta(static_cast<Eigen::Index>(i))}});
      }
      j["buses"] = buses;
      j["branches"] = flows_to_json(pf::line_flows(conv->state, grid->spec));
    } else if (const auto* div = std::get_if<pf::Diverged>(&outcome)) {
      j["outcome"] = "diverged";
      j["iterations"] = div->iterations;
      j["mismatch_norm"] = div->mismatch_norm;
      j["diagnostic"] = div->diagnostic;
      j["norm_trace"] = div->norm_trace;
      status = GW_SOLVE_DIVERGED;
      set_error("power flow diverged: " + div->diagnostic);
    } else {
      const auto& isl = std::get<pf::Islanded>(outcome);
      j["outcome"] = "islanded";
      j["islands"] = isl.islands;
      status = GW_SOLVE_ISLANDED;
      set_error("grid splits into islands without a slack bus");
    }
    *out_json = dup_string(j.dump(2));
    return status;
  });
}

gw_status gw_contingency(const gw_grid* grid, const char* config_json, char** out_json) {
  if (!grid || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const nlohmann::json cfg = parse_optional_object(config_json, "config");
    cty::ScreeningPolicy policy;
    policy.floor = cfg.value("floor", policy.floor);
    policy.threshold = cfg.value("threshold", policy.threshold);
    const auto budget = cfg.value("budget", uint64_t{0});
    policy.budget = budget == 0 ? SIZE_MAX : static_cast<size_t>(budget);
    policy.max_order = cfg.value("max_order", policy.max_order);
    const int raster_res = cfg.value("raster_res", 32);
    const int jobs = cfg.value("jobs", 4);
    const geo::GeoReference georef;  // documented defaults

    std::vector<cty::AssetObservation> observations;
    size_t skipped = 0;
    if (cfg.contains("reports")) {
      for (const auto& rj : cfg["reports"]) {
        try {
          report::IncidentReport r;
          if (rj.is_object() && rj.contains("payload_b64")) {
            // Envelope form: unwrap the payload. Offline analysis trusts its
            // input directory; signature enforcement lives on the ingest
            // path.
            const auto envelope = report::envelope_from_json(rj);
            if (!envelope) throw util::ParseError("bad envelope");
            r = report::report_from_json(util::parse_json(
                std::string(envelope->payload.begin(), envelope->payload.end())));
          } else {
            r = report::report_from_json(rj);
          }
          const auto asset = report::map_to_asset(r.lat, r.lon, grid->spec,
                                                  report::kDefaultAssetRadiusM, georef);
          if (asset) observations.push_back({*asset, r.confidence, r.report_id});
        } catch (const util::ParseError&) {
          ++skipped;
        }
      }
    }

    const auto probs = cty::derive_probabilities(observations, grid->spec, policy);
    std::vector<cty::Contingency> candidates;
    for (int order = 1; order <= policy.max_order; ++order) {
      auto batch = cty::enumerate_contingencies(grid->spec, order);
      candidates.insert(candidates.end(), batch.begin(), batch.end());
    }
    const auto screened = cty::screen(candidates, probs, policy);
    const auto assessment = cty::assess_all(grid->spec, screened, {}, jobs);
    const auto raster = cty::risk_surface(assessment, grid->spec, raster_res);

    nlohmann::json j;
    j["table_csv"] = cty::table_to_csv(assessment);
    j["raster_csv"] = cty::raster_to_csv(raster);
    j["raster_svg"] = cty::raster_to_svg(raster, grid->spec);
    j["summary"] = {{"candidates", candidates.size()},
                    {"screened", screened.size()},
                    {"observations", observations.size()},
                    {"reports_skipped", skipped}};
    *out_json = dup_string(j.dump());
    return GW_OK;
  });
}

gw_status gw_report_keygen(const char* device_key_id, uint64_t seed, char** out_json) {
  if (!device_key_id || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto rng = make_rng(seed);
    const auto kp = report::generate_device_key(*rng, device_key_id);
    nlohmann::json j{{"device_key_id", kp.device_key_id},
                     {"public_key_b64", util::to_base64(kp.public_key)},
                     {"secret_key_b64", util::to_base64(kp.secret_key)}};
    *out_json = dup_string(j.dump(2));
    return GW_OK;
  });
}

gw_status gw_report_sign(const char* report_json, const char* key_json, uint64_t seed,
                         char** out_envelope_json) {
  if (!report_json || !key_json || !out_envelope_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const nlohmann::json kj = util::parse_json(key_json);
    report::DeviceKeyPair kp;
    kp.device_key_id = kj.at("device_key_id").get<std::string>();
    const auto pk = util::from_base64(kj.at("public_key_b64").get<std::string>());
    const auto sk = util::from_base64(kj.at("secret_key_b64").get<std::string>());
    if (!pk || !sk) throw util::ParseError("bad key encoding");
    kp.public_key = *pk;
    kp.secret_key = *sk;

    auto rng = make_rng(seed);
    nlohmann::json rj = util::parse_json(report_json);
    if (!rj.is_object()) throw util::ParseError("report must be a JSON object");
    // Convenience defaults for fields the device normally generates.
    if (!rj.contains("report_id")) rj["report_id"] = util::uuid4(*rng);
    if (!rj.contains("nonce")) rj["nonce"] = util::to_hex(rng->bytes(16));
    if (!rj.contains("timestamp")) rj["timestamp"] = util::now_millis();
    if (!rj.contains("device_key_id")) rj["device_key_id"] = kp.device_key_id;
    if (!rj.contains("attachments")) rj["attachments"] = nlohmann::json::array();
    if (!rj.contains("description")) rj["description"] = "";

    const auto r = report::report_from_json(rj);
    const auto envelope = report::sign(r, kp);
    *out_envelope_json = dup_string(report::envelope_to_json(envelope).dump(2));
    return GW_OK;
  });
}

gw_status gw_server_create(const gw_grid* grid, const char* registry_path, const char* store_path,
                           const char* geo_json, gw_server** out_server) {
  if (!grid || !registry_path || !store_path || !out_server) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    service::ServiceConfig cfg;
    cfg.spec = grid->spec;
    cfg.registry = report::DeviceRegistry::load_file(registry_path);
    cfg.store_path = store_path;
    const nlohmann::json gj = parse_optional_object(geo_json, "geo");
    cfg.geo.origin_lat = gj.value("origin_lat", cfg.geo.origin_lat);
    cfg.geo.origin_lon = gj.value("origin_lon", cfg.geo.origin_lon);
    cfg.geo.meters_per_unit = gj.value("meters_per_unit", cfg.geo.meters_per_unit);
    auto s = std::make_unique<gw_server>();
    s->service = std::make_unique<service::ReportService>(std::move(cfg));
    *out_server = s.release();
    return GW_OK;
  });
}

gw_status gw_server_listen(gw_server* server, const char* host, int port) {
  if (!server || !host) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    if (!server->service->listen(host, port)) {
      set_error("cannot listen on " + std::string(host) + ":" + std::to_string(port));
      return GW_ERR_IO;
    }
    return GW_OK;
  });
}

gw_status gw_server_stop(gw_server* server) {
  if (!server) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    server->service->stop();
    return GW_OK;
  });
}

void gw_server_free(gw_server* server) { delete server; }

gw_status gw_capsule_keygen(uint64_t seed, char** out_json) {
  if (!out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto rng = make_rng(seed);
    const auto kp = capsule::generate_owner_key(*rng);
    nlohmann::json j{{"public_key_b64", util::to_base64(kp.public_key)},
                     {"secret_key_b64", util::to_base64(kp.secret_key)}};
    *out_json = dup_string(j.dump(2));
    return GW_OK;
  });
}

gw_status gw_keyserver_init(const char* keyserver_path, uint64_t seed) {
  if (!keyserver_path) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto rng = make_rng(seed);
    save_keyserver(keyserver_path, capsule::KeyServer::generate(*rng));
    return GW_OK;
  });
}

gw_status gw_attestation_token(const char* keyserver_path, const char* platform,
                               char** out_token_hex) {
  if (!keyserver_path || !platform || !out_token_hex) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const auto ks = load_keyserver(keyserver_path);
    *out_token_hex = dup_string(ks.attestation_token(platform));
    return GW_OK;
  });
}

gw_status gw_capsule_package(const char* request_json, const char* keyserver_path,
                             const char* capsule_path, uint64_t seed, char** out_json) {
  if (!request_json || !keyserver_path || !capsule_path || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const nlohmann::json req = util::parse_json(request_json);
    std::vector<capsule::PayloadObject> payload;
    if (req.contains("payload")) {
      for (const auto& item : req["payload"]) {
        const auto data = util::from_base64(item.at("data_b64").get<std::string>());
        if (!data) throw util::ParseError("bad data_b64 in payload");
        payload.push_back({item.at("name").get<std::string>(), *data});
      }
    }
    if (req.contains("payload_files")) {
      for (const auto& item : req["payload_files"]) {
        const std::string path = item.get<std::string>();
        const std::string data = util::read_file(path);
        std::string name = path;
        if (const auto slash = name.find_last_of('/'); slash != std::string::npos)
          name = name.substr(slash + 1);
        payload.push_back({name, util::Bytes(data.begin(), data.end())});
      }
    }
    const auto policy = capsule::policy_from_json(req.at("policy"));
    const auto& okj = req.at("owner_key");
    capsule::OwnerKeyPair owner;
    const auto pk = util::from_base64(okj.at("public_key_b64").get<std::string>());
    const auto sk = util::from_base64(okj.at("secret_key_b64").get<std::string>());
    if (!pk || !sk) throw util::ParseError("bad owner key encoding");
    owner.public_key = *pk;
    owner.secret_key = *sk;

    auto ks = load_keyserver(keyserver_path);
    auto rng = make_rng(seed);
    const auto c = capsule::package_capsule(payload, policy, owner, ks, *rng);
    const auto raw = capsule::capsule_to_bytes(c);
    util::write_file(capsule_path, std::string_view(reinterpret_cast<const char*>(raw.data()),
                                                    raw.size()));
    save_keyserver(keyserver_path, ks);
    nlohmann::json j{{"capsule_id", c.capsule_id}, {"key_id", c.key_id}};
    *out_json = dup_string(j.dump(2));
    return GW_OK;
  });
}

gw_status gw_capsule_install(const char* capsule_path, const char* keyserver_path,
                             const char* owner_public_key_b64, const char* platform,
                             const char* token_hex, const char* state_path, char** out_json) {
  if (!capsule_path || !keyserver_path || !owner_public_key_b64 || !platform || !token_hex ||
      !state_path || !out_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    const std::string raw_text = util::read_file(capsule_path);
    const util::Bytes raw(raw_text.begin(), raw_text.end());
    const auto c = capsule::capsule_from_bytes(raw);
    const auto pk = util::from_base64(owner_public_key_b64);
    if (!pk) throw util::ParseError("bad owner public key encoding");
    auto ks = load_keyserver(keyserver_path);
    auto world = load_world_or_fresh(state_path);

    const capsule::Attestation att{platform, token_hex};
    const auto result = world.install(c, *pk, att, ks);
    if (result.status != capsule::InstallStatus::Installed) {
      std::string reason;
      switch (result.status) {
        case capsule::InstallStatus::BadSignature: reason = "BadSignature"; break;
        case capsule::InstallStatus::KeyDenied: reason = "KeyDenied"; break;
        case capsule::InstallStatus::DigestMismatch: reason = "DigestMismatch"; break;
        case capsule::InstallStatus::NotFound: reason = "NotFound"; break;
        default: reason = "Unknown";
      }
      set_error(reason + ": " + result.detail);
      return GW_ERR_REJECTED;
    }
    world.persist(state_path);
    nlohmann::json j{{"capsule_id", c.capsule_id},
                     {"label", result.label},
                     {"objects", result.object_ids}};
    *out_json = dup_string(j.dump(2));
    return GW_OK;
  });
}

gw_status gw_capsule_simulate(const char* state_path, const char* script_json, int dry_run,
                              char** out_transcript_json) {
  if (!state_path || !script_json || !out_transcript_json) {
    set_error("null argument");
    return GW_ERR_INVALID_ARG;
  }
  return guarded([&]() {
    auto world = capsule::TaintWorld::restore(state_path);
    const auto transcript = capsule::run_simulation(world, util::parse_json(script_json));
    if (!dry_run) world.persist(state_path);
    *out_transcript_json = dup_string(transcript.dump(2));
    return GW_OK;
  });
}

}  // extern "C"
