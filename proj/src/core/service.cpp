#include "core/service.hpp"


#include "httplib.h"

#include "core/util.hpp"
#include "core/version.hpp"

namespace gridwatch::service {

namespace {

int status_for(report::RejectReason r) {
  using report::RejectReason;
  switch (r) {
    case RejectReason::Malformed: return 400;
    case RejectReason::UnknownKey: return 403;
    case RejectReason::Revoked: return 403;
    case RejectReason::SignatureInvalid: return 403;
    case RejectReason::StaleTimestamp: return 422;
    case RejectReason::Replay: return 409;
  }
  return 400;
}

}  // namespace

struct ReportService::Impl {
  ServiceConfig cfg;
  report::ReportStore store;
  httplib::Server server;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), store(cfg.store_path) { wire(); }

  void wire() {
    // Default httplib options include SO_REUSEPORT, which would let a second
    // instance bind the same address instead of failing fast. Keep only
    // SO_REUSEADDR so restarts are quick but double-binds are errors.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes),
                 sizeof(yes));
    });

    server.Post("/reports", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = util::parse_json(req.body);
      } catch (const util::ParseError& e) {
        res.status = 400;
        res.set_content(
            nlohmann::json{{"decision", "rejected"}, {"reason", "Malformed"}, {"detail", e.what()}}
                .dump(),
            "application/json");
        return;
      }
      const auto envelope = report::envelope_from_json(body);
      if (!envelope) {
        res.status = 400;
        res.set_content(nlohmann::json{{"decision", "rejected"},
                                       {"reason", "Malformed"},
                                       {"detail", "envelope must be {payload_b64, signature_b64, "
                                                  "device_key_id}"}}
                            .dump(),
                        "application/json");
        return;
      }
      const auto outcome = store.ingest(*envelope, cfg.registry, &cfg.spec, cfg.geo,
                                        cfg.asset_radius_m, util::now_millis());
      if (outcome.accepted) {
        nlohmann::json rec{{"decision", "accepted"}, {"report_id", outcome.report_id}};
        if (outcome.asset) {
          rec["asset"] = {{"kind", grid::element_kind_name(outcome.asset->kind)},
                          {"id", outcome.asset->id}};
        } else {
          rec["asset"] = nullptr;
        }
        res.status = 200;
        res.set_content(rec.dump(), "application/json");
      } else {
        res.status = status_for(*outcome.reason);
        res.set_content(nlohmann::json{{"decision", "rejected"},
                                       {"reason", report::reject_reason_name(*outcome.reason)},
                                       {"detail", outcome.detail}}
                            .dump(),
                        "application/json");
      }
    });

    server.Get("/risk", [this](const httplib::Request& req, httplib::Response& res) {
      int requested = cfg.default_raster_res;
      if (req.has_param("res")) {
        try {
          requested = std::stoi(req.get_param_value("res"));
        } catch (const std::exception&) {
          res.status = 400;
          res.set_content("res must be an integer\n", "text/plain");
          return;
        }
      }
      try {
        res.set_content(risk_csv(std::clamp(requested, 2, 512)), "text/csv");
      } catch (const std::exception& e) {
        res.status = 500;
        res.set_content(std::string("risk computation failed: ") + e.what() + "\n", "text/plain");
      }
    });

    server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(nlohmann::json{{"name", "gridwatch"},
                                     {"version", kVersion},
                                     {"buses", cfg.spec.buses.size()},
                                     {"accepted_reports", store.accepted_count()}}
                          .dump(),
                      "application/json");
    });
  }

  std::string risk_csv(int res) {
    // Snapshot of accepted reports; assessment runs without holding locks.
    std::vector<cty::AssetObservation> observations;
    for (const auto& rec : store.accepted()) {
      if (!rec.asset) continue;  // stored for audit, excluded from probabilities
      observations.push_back({*rec.asset, rec.report.confidence, rec.report.report_id});
    }
    const auto probs = cty::derive_probabilities(observations, cfg.spec, cfg.policy);
    std::vector<cty::Contingency> candidates;
    for (int order = 1; order <= cfg.policy.max_order; ++order) {
      auto batch = cty::enumerate_contingencies(cfg.spec, order);
      candidates.insert(candidates.end(), batch.begin(), batch.end());
    }
    const auto screened = cty::screen(candidates, probs, cfg.policy);
    const auto assessment = cty::assess_all(cfg.spec, screened, {}, cfg.jobs);
    return cty::raster_to_csv(cty::risk_surface(assessment, cfg.spec, res));
  }
};

ReportService::ReportService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

ReportService::~ReportService() {
  stop();
}

bool ReportService::listen(const std::string& host, int port) {
  return impl_->server.listen(host, port);
}

void ReportService::stop() { impl_->server.stop(); }

}  // namespace gridwatch::service
