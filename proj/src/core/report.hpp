#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "core/geo.hpp"
#include "core/grid.hpp"
#include "core/util.hpp"

namespace gridwatch::report {

struct Attachment {
  std::string modality;       // image | video | audio
  std::string content_digest;  // SHA-256, 64 lowercase hex chars
  int64_t byte_length = 0;
};

struct IncidentReport {
  std::string report_id;  // UUID
  std::string device_key_id;
  int64_t timestamp_ms = 0;  // UTC epoch milliseconds
  double lat = 0.0;          // WGS-84 degrees
  double lon = 0.0;
  double confidence = 0.0;  // reporter-assessed hazard likelihood, [0, 1]
  std::string description;
  std::vector<Attachment> attachments;
  std::string nonce_hex;  // 128-bit, 32 lowercase hex chars
};

// Deterministic signing form: sorted keys, no whitespace, shortest
// round-trip numbers, NFC-normalized strings. Throws util::ParseError on
// invalid field values (non-finite numbers, bad ranges, invalid UTF-8).
util::Bytes canonical_bytes(const IncidentReport& r);

// Strict parse + validation; rejects unknown keys and out-of-range values.
IncidentReport report_from_json(const nlohmann::json& j);
nlohmann::json report_to_json(const IncidentReport& r);

struct SignedEnvelope {
  util::Bytes payload;    // canonical report bytes
  util::Bytes signature;  // Ed25519 detached, 64 bytes
  std::string device_key_id;
};

nlohmann::json envelope_to_json(const SignedEnvelope& e);
std::optional<SignedEnvelope> envelope_from_json(const nlohmann::json& j);

struct DeviceKeyPair {
  std::string device_key_id;
  util::Bytes public_key;  // 32 bytes
  util::Bytes secret_key;  // 64 bytes
};

DeviceKeyPair generate_device_key(util::Rng& rng, const std::string& device_key_id);

// Throws util::ParseError when the report's device_key_id does not match the
// signing key.
SignedEnvelope sign(const IncidentReport& r, const DeviceKeyPair& key);

struct RegistryEntry {
  std::string device_key_id;
  util::Bytes public_key;
  int64_t enrolled_at = 0;
  bool revoked = false;
  std::string role;  // recorded, not yet used for weighting
};

class DeviceRegistry {
 public:
  static DeviceRegistry from_json(const nlohmann::json& j);
  static DeviceRegistry load_file(const std::string& path);

  void add(RegistryEntry entry);
  const RegistryEntry* find(const std::string& device_key_id) const;
  size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, RegistryEntry> entries_;
};

enum class RejectReason {
  Malformed,
  UnknownKey,
  Revoked,
  SignatureInvalid,
  StaleTimestamp,
  Replay,
};

std::string reject_reason_name(RejectReason r);

struct Rejection {
  RejectReason reason;
  std::string detail;
};

inline constexpr int64_t kTimestampWindowMs = 300'000;  // +/- 300 s

// Stateless checks: key known and unrevoked, signature over the payload
// bytes, payload parses back to a canonical report naming the same key, and
// |now - timestamp| within the window. Replay is the store's job.
std::variant<IncidentReport, Rejection> check_envelope(const SignedEnvelope& e,
                                                       const DeviceRegistry& registry,
                                                       int64_t now_ms);

// Nearest branch by point-to-segment distance; none beyond radius_m. Ties go
// to the lowest branch id.
std::optional<grid::ElementRef> map_to_asset(double lat, double lon, const grid::GridSpec& spec,
                                             double radius_m, const geo::GeoReference& geo);

inline constexpr double kDefaultAssetRadiusM = 500.0;

struct StoredReport {
  IncidentReport report;
  std::optional<grid::ElementRef> asset;
  int64_t accepted_at = 0;
};

struct IngestOutcome {
  bool accepted = false;
  std::optional<RejectReason> reason;
  std::string detail;
  std::string report_id;
  std::optional<grid::ElementRef> asset;
};

// Append-only accepted-report log (newline-delimited JSON, fsync per accept)
// plus the (device_key_id, nonce) replay index rebuilt from it on startup.
// Rejections go to <path>.rejects for audit. The nonce check and the
// append are one critical section, so a duplicate can never be accepted
// twice even under concurrent submission.
class ReportStore {
 public:
  explicit ReportStore(std::string path);
  ~ReportStore();

  ReportStore(const ReportStore&) = delete;
  ReportStore& operator=(const ReportStore&) = delete;

  IngestOutcome ingest(const SignedEnvelope& e, const DeviceRegistry& registry,
                       const grid::GridSpec* spec, const geo::GeoReference& geo, double radius_m,
                       int64_t now_ms);

  std::vector<StoredReport> accepted() const;
  size_t accepted_count() const;
  const std::string& path() const { return path_; }

 private:
  void append_locked(const StoredReport& rec);
  void log_rejection(const SignedEnvelope& e, const Rejection& r, int64_t now_ms);

  std::string path_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::vector<StoredReport> accepted_;
  std::set<std::pair<std::string, std::string>> seen_;  // (device_key_id, nonce)
};

}  // namespace gridwatch::report
