#pragma once

#include <memory>
#include <string>

#include "core/contingency.hpp"
#include "core/geo.hpp"
#include "core/grid.hpp"
#include "core/report.hpp"

namespace gridwatch::service {

struct ServiceConfig {
  grid::GridSpec spec;
  report::DeviceRegistry registry;
  std::string store_path;
  geo::GeoReference geo;
  double asset_radius_m = report::kDefaultAssetRadiusM;
  cty::ScreeningPolicy policy{0.001, 1e-4, 256, 2};
  int default_raster_res = 32;
  int jobs = 4;
};

// Report ingestion service:
//   POST /reports  SignedEnvelope JSON -> acceptance record or 4xx + reason
//   GET  /risk?res=N -> risk raster CSV from the accepted reports
//   GET  /health -> name/version/counters
class ReportService {
 public:
  explicit ReportService(ServiceConfig cfg);
  ~ReportService();

  ReportService(const ReportService&) = delete;
  ReportService& operator=(const ReportService&) = delete;

  // Blocks until stop(); false when the address can't be bound. stop() is
  // safe from another thread or a signal handler.
  bool listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gridwatch::service
