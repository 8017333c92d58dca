#include "core/report.hpp"

#include <sodium.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include <fcntl.h>
#include <unistd.h>

#include "core/unicode_nfc.hpp"

namespace gridwatch::report {

using util::Bytes;
using util::ParseError;

namespace {

std::string nfc_or_throw(const std::string& s, const char* field) {
  auto n = util::nfc_normalize(s);
  if (!n) throw ParseError(std::string("invalid UTF-8 in ") + field);
  return *n;
}

bool is_lower_hex(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
  });
}

void validate(const IncidentReport& r) {
  if (!util::looks_like_uuid(r.report_id)) throw ParseError("report_id must be a UUID");
  if (r.device_key_id.empty()) throw ParseError("device_key_id must be non-empty");
  if (!std::isfinite(r.lat) || r.lat < -90.0 || r.lat > 90.0)
    throw ParseError("lat out of range [-90, 90]");
  if (!std::isfinite(r.lon) || r.lon < -180.0 || r.lon > 180.0)
    throw ParseError("lon out of range [-180, 180]");
  if (!std::isfinite(r.confidence) || r.confidence < 0.0 || r.confidence > 1.0)
    throw ParseError("confidence out of range [0, 1]");
  if (r.nonce_hex.size() != 32 || !is_lower_hex(r.nonce_hex))
    throw ParseError("nonce must be 32 lowercase hex chars");
  for (const auto& a : r.attachments) {
    if (a.modality != "image" && a.modality != "video" && a.modality != "audio")
      throw ParseError("attachment modality must be image|video|audio");
    if (a.content_digest.size() != 64 || !is_lower_hex(a.content_digest))
      throw ParseError("attachment content_digest must be 64 lowercase hex chars");
    if (a.byte_length < 0) throw ParseError("attachment byte_length must be >= 0");
  }
}

}  // namespace

nlohmann::json report_to_json(const IncidentReport& r) {
  nlohmann::json j;
  j["report_id"] = r.report_id;
  j["device_key_id"] = r.device_key_id;
  j["timestamp"] = r.timestamp_ms;
  j["location"] = {{"lat", r.lat}, {"lon", r.lon}};
  j["confidence"] = r.confidence;
  j["description"] = r.description;
  nlohmann::json atts = nlohmann::json::array();
  for (const auto& a : r.attachments) {
    atts.push_back({{"modality", a.modality},
                    {"content_digest", a.content_digest},
                    {"byte_length", a.byte_length}});
  }
  j["attachments"] = atts;
  j["nonce"] = r.nonce_hex;
  return j;
}

IncidentReport report_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("report must be a JSON object");
  static const std::set<std::string> kKeys = {"report_id", "device_key_id", "timestamp",
                                              "location",  "confidence",    "description",
                                              "attachments", "nonce"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKeys.count(it.key())) throw ParseError("unknown report key '" + it.key() + "'");
  for (const auto& k : kKeys)
    if (!j.contains(k)) throw ParseError("missing report key '" + k + "'");

  IncidentReport r;
  if (!j["report_id"].is_string()) throw ParseError("report_id must be a string");
  r.report_id = j["report_id"].get<std::string>();
  if (!j["device_key_id"].is_string()) throw ParseError("device_key_id must be a string");
  r.device_key_id = j["device_key_id"].get<std::string>();
  if (!j["timestamp"].is_number_integer()) throw ParseError("timestamp must be an integer");
  r.timestamp_ms = j["timestamp"].get<int64_t>();
  const auto& loc = j["location"];
  if (!loc.is_object() || loc.size() != 2 || !loc.contains("lat") || !loc.contains("lon") ||
      !loc["lat"].is_number() || !loc["lon"].is_number())
    throw ParseError("location must be {lat, lon}");
  r.lat = loc["lat"].get<double>();
  r.lon = loc["lon"].get<double>();
  if (!j["confidence"].is_number()) throw ParseError("confidence must be a number");
  r.confidence = j["confidence"].get<double>();
  if (!j["description"].is_string()) throw ParseError("description must be a string");
  r.description = j["description"].get<std::string>();
  if (!j["attachments"].is_array()) throw ParseError("attachments must be an array");
  for (const auto& a : j["attachments"]) {
    if (!a.is_object() || a.size() != 3 || !a.contains("modality") ||
        !a.contains("content_digest") || !a.contains("byte_length") ||
        !a["modality"].is_string() || !a["content_digest"].is_string() ||
        !a["byte_length"].is_number_integer())
      throw ParseError("attachment must be {modality, content_digest, byte_length}");
    r.attachments.push_back({a["modality"].get<std::string>(),
                             a["content_digest"].get<std::string>(),
                             a["byte_length"].get<int64_t>()});
  }
  if (!j["nonce"].is_string()) throw ParseError("nonce must be a string");
  r.nonce_hex = j["nonce"].get<std::string>();
  validate(r);
  return r;
}

util::Bytes canonical_bytes(const IncidentReport& r) {
  IncidentReport n = r;
  n.description = nfc_or_throw(r.description, "description");
  n.device_key_id = nfc_or_throw(r.device_key_id, "device_key_id");
  validate(n);
  const std::string text = util::canonical_dump(report_to_json(n));
  return Bytes(text.begin(), text.end());
}

nlohmann::json envelope_to_json(const SignedEnvelope& e) {
  return {{"payload_b64", util::to_base64(e.payload)},
          {"signature_b64", util::to_base64(e.signature)},
          {"device_key_id", e.device_key_id}};
}

std::optional<SignedEnvelope> envelope_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.size() != 3 || !j.contains("payload_b64") ||
      !j.contains("signature_b64") || !j.contains("device_key_id"))
    return std::nullopt;
  if (!j["payload_b64"].is_string() || !j["signature_b64"].is_string() ||
      !j["device_key_id"].is_string())
    return std::nullopt;
  auto payload = util::from_base64(j["payload_b64"].get<std::string>());
  auto signature = util::from_base64(j["signature_b64"].get<std::string>());
  if (!payload || !signature) return std::nullopt;
  return SignedEnvelope{*payload, *signature, j["device_key_id"].get<std::string>()};
}

DeviceKeyPair generate_device_key(util::Rng& rng, const std::string& device_key_id) {
  DeviceKeyPair kp;
  kp.device_key_id = device_key_id;
  kp.public_key.resize(crypto_sign_PUBLICKEYBYTES);
  kp.secret_key.resize(crypto_sign_SECRETKEYBYTES);
  const Bytes seed = rng.bytes(crypto_sign_SEEDBYTES);
  crypto_sign_seed_keypair(kp.public_key.data(), kp.secret_key.data(), seed.data());
  return kp;
}

SignedEnvelope sign(const IncidentReport& r, const DeviceKeyPair& key) {
  if (r.device_key_id != key.device_key_id)
    throw ParseError("report device_key_id does not match the signing key");
  if (key.secret_key.size() != crypto_sign_SECRETKEYBYTES)
    throw ParseError("bad secret key length");
  SignedEnvelope e;
  e.payload = canonical_bytes(r);
  e.signature.resize(crypto_sign_BYTES);
  crypto_sign_detached(e.signature.data(), nullptr, e.payload.data(), e.payload.size(),
                       key.secret_key.data());
  e.device_key_id = key.device_key_id;
  return e;
}

DeviceRegistry DeviceRegistry::from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParseError("registry must be a JSON array");
  DeviceRegistry reg;
  for (const auto& item : j) {
    if (!item.is_object() || !item.contains("device_key_id") || !item.contains("public_key_b64"))
      throw ParseError("registry entries need device_key_id and public_key_b64");
    RegistryEntry e;
    e.device_key_id = item["device_key_id"].get<std::string>();
    auto pk = util::from_base64(item["public_key_b64"].get<std::string>());
    if (!pk || pk->size() != crypto_sign_PUBLICKEYBYTES)
      throw ParseError("bad public key for " + e.device_key_id);
    e.public_key = *pk;
    e.enrolled_at = item.value("enrolled_at", int64_t{0});
    e.revoked = item.value("revoked", false);
    e.role = item.value("role", std::string{});
    reg.add(std::move(e));
  }
  return reg;
}

DeviceRegistry DeviceRegistry::load_file(const std::string& path) {
  return from_json(util::parse_json(util::read_file(path)));
}

void DeviceRegistry::add(RegistryEntry entry) {
  const std::string id = entry.device_key_id;
  if (!entries_.emplace(id, std::move(entry)).second)
    throw ParseError("duplicate device_key_id in registry: " + id);
}

const RegistryEntry* DeviceRegistry::find(const std::string& device_key_id) const {
  auto it = entries_.find(device_key_id);
  return it == entries_.end() ? nullptr : &it->second;
}

std::string reject_reason_name(RejectReason r) {
  switch (r) {
    case RejectReason::Malformed: return "Malformed";
    case RejectReason::UnknownKey: return "UnknownKey";
    case RejectReason::Revoked: return "Revoked";
    case RejectReason::SignatureInvalid: return "SignatureInvalid";
    case RejectReason::StaleTimestamp: return "StaleTimestamp";
    case RejectReason::Replay: return "Replay";
  }
  return "Unknown";
}

std::variant<IncidentReport, Rejection> check_envelope(const SignedEnvelope& e,
                                                       const DeviceRegistry& registry,
                                                       int64_t now_ms) {
  const RegistryEntry* entry = registry.find(e.device_key_id);
  if (!entry)
    return Rejection{RejectReason::UnknownKey, "no such device key: " + e.device_key_id};
  if (entry->revoked) return Rejection{RejectReason::Revoked, "key revoked: " + e.device_key_id};

  if (e.signature.size() != crypto_sign_BYTES ||
      crypto_sign_verify_detached(e.signature.data(), e.payload.data(), e.payload.size(),
                                  entry->public_key.data()) != 0)
    return Rejection{RejectReason::SignatureInvalid, "detached signature check failed"};

  IncidentReport r;
  try {
    const std::string text(e.payload.begin(), e.payload.end());
    r = report_from_json(util::parse_json(text));
    // The signed bytes must already be in canonical form; anything else is
    // a second encoding of the same report and gets rejected.
    const Bytes canon = canonical_bytes(r);
    if (canon != e.payload)
      return Rejection{RejectReason::Malformed, "payload is not in canonical form"};
  } catch (const ParseError& ex) {
    return Rejection{RejectReason::Malformed, ex.what()};
  }
  if (r.device_key_id != e.device_key_id)
    return Rejection{RejectReason::Malformed, "payload names a different device_key_id"};

  if (std::llabs(now_ms - r.timestamp_ms) > kTimestampWindowMs)
    return Rejection{RejectReason::StaleTimestamp,
                     "timestamp outside the 300 s acceptance window"};
  return r;
}

std::optional<grid::ElementRef> map_to_asset(double lat, double lon, const grid::GridSpec& spec,
                                             double radius_m, const geo::GeoReference& geo) {
  const geo::MapPoint p = geo::to_map_units(geo, lat, lon);
  std::optional<grid::ElementRef> best;
  double best_m = radius_m;
  // Branch list scanned in ascending id order so ties keep the lowest id.
  std::vector<const grid::Branch*> ordered;
  for (const auto& br : spec.branches) ordered.push_back(&br);
  std::sort(ordered.begin(), ordered.end(),
            [](const grid::Branch* a, const grid::Branch* b) { return a->id < b->id; });
  for (const grid::Branch* br : ordered) {
    const grid::Bus* a = spec.find_bus(br->from_bus);
    const grid::Bus* b = spec.find_bus(br->to_bus);
    const double d =
        geo::point_segment_distance(p, {a->x, a->y}, {b->x, b->y}) * geo.meters_per_unit;
    if (d < best_m || (d == best_m && !best)) {
      best_m = d;
      best = grid::ElementRef{grid::ElementKind::Branch, br->id};
    }
  }
  return best;
}

ReportStore::ReportStore(std::string path) : path_(std::move(path)) {
  // Replay the existing log to rebuild both the accepted list and the
  // replay index; a corrupt line is a hard startup error.
  std::string existing;
  try {
    existing = util::read_file(path_);
  } catch (const util::IoError&) {
    existing.clear();  // fresh store
  }
  size_t start = 0;
  int line_no = 1;
  while (start < existing.size()) {
    size_t end = existing.find('\n', start);
    if (end == std::string::npos) end = existing.size();
    const std::string line = existing.substr(start, end - start);
    if (!line.empty()) {
      try {
        const nlohmann::json j = util::parse_json(line);
        StoredReport rec;
        rec.report = report_from_json(j.at("report"));
        rec.accepted_at = j.at("accepted_at").get<int64_t>();
        if (!j.at("asset").is_null()) {
          rec.asset = grid::ElementRef{j["asset"].at("kind").get<std::string>() == "branch"
                                           ? grid::ElementKind::Branch
                                           : grid::ElementKind::Generator,
                                       j["asset"].at("id").get<int>()};
        }
        seen_.emplace(rec.report.device_key_id, rec.report.nonce_hex);
        accepted_.push_back(std::move(rec));
      } catch (const std::exception& ex) {
        throw util::IoError("corrupt report store at " + path_ + " line " +
                            std::to_string(line_no) + ": " + ex.what());
      }
    }
    start = end + 1;
    ++line_no;
  }
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd_ < 0) throw util::IoError("cannot open report store: " + path_);
}

ReportStore::~ReportStore() {
  if (fd_ >= 0) ::close(fd_);
}

void ReportStore::append_locked(const StoredReport& rec) {
  nlohmann::json j;
  j["accepted_at"] = rec.accepted_at;
  if (rec.asset) {
    j["asset"] = {{"kind", grid::element_kind_name(rec.asset->kind)}, {"id", rec.asset->id}};
  } else {
    j["asset"] = nullptr;
  }
  j["report"] = report_to_json(rec.report);
  const std::string line = util::canonical_dump(j) + "\n";
  size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) throw util::IoError("report store append failed");
    written += static_cast<size_t>(n);
  }
  if (::fsync(fd_) != 0) throw util::IoError("report store fsync failed");
}

void ReportStore::log_rejection(const SignedEnvelope& e, const Rejection& r, int64_t now_ms) {
  nlohmann::json j;
  j["at"] = now_ms;
  j["device_key_id"] = e.device_key_id;
  j["reason"] = reject_reason_name(r.reason);
  j["detail"] = r.detail;
  std::ofstream out(path_ + ".rejects", std::ios::app);
  if (out) out << util::canonical_dump(j) << "\n";
}

IngestOutcome ReportStore::ingest(const SignedEnvelope& e, const DeviceRegistry& registry,
                                  const grid::GridSpec* spec, const geo::GeoReference& geo,
                                  double radius_m, int64_t now_ms) {
  auto checked = check_envelope(e, registry, now_ms);
  if (const auto* rej = std::get_if<Rejection>(&checked)) {
    log_rejection(e, *rej, now_ms);
    return {false, rej->reason, rej->detail, "", std::nullopt};
  }
  const IncidentReport& r = std::get<IncidentReport>(checked);

  std::optional<grid::ElementRef> asset;
  if (spec) asset = map_to_asset(r.lat, r.lon, *spec, radius_m, geo);

  {
    std::lock_guard lock(mu_);
    const auto key = std::make_pair(r.device_key_id, r.nonce_hex);
    if (seen_.count(key)) {
      const Rejection rej{RejectReason::Replay, "nonce already accepted for this key"};
      log_rejection(e, rej, now_ms);
      return {false, rej.reason, rej.detail, r.report_id, std::nullopt};
    }
    StoredReport rec{r, asset, now_ms};
    append_locked(rec);
    seen_.insert(key);
    accepted_.push_back(std::move(rec));
  }
  return {true, std::nullopt, "", r.report_id, asset};
}

std::vector<StoredReport> ReportStore::accepted() const {
  std::lock_guard lock(mu_);
  return accepted_;
}

size_t ReportStore::accepted_count() const {
  std::lock_guard lock(mu_);
  return accepted_.size();
}

}  // namespace gridwatch::report
