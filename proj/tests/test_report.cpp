#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sodium.h>

#include <atomic>
#include <limits>
#include <random>
#include <thread>

#include "core/geo.hpp"
#include "core/report.hpp"
#include "core/unicode_nfc.hpp"
#include "core/util.hpp"
#include "protocol_fuzz.hpp"
#include "test_support.hpp"

using namespace gridwatch;
using report::DeviceKeyPair;
using report::DeviceRegistry;
using report::IncidentReport;
using report::RejectReason;
using report::SignedEnvelope;

namespace {

// Reference vectors frozen from a mature Unicode implementation.
struct NfcVector {
  const char* input_hex;
  const char* nfc_hex;
};
constexpr NfcVector kNfcVectors[] = {
    {"63616665cc81", "636166c3a9"},
    {"c3a9cc81", "c3a9cc81"},
    {"e1b88bcca3", "e1b88dcc87"},
    {"64cca3cc87", "e1b88dcc87"},
    {"41cc8a", "c385"},
    {"eab080", "eab080"},
    {"e18480e185a1e186a8", "eab081"},
    {"e18480e185a1", "eab080"},
    {"71cc87cca3", "71cca3cc87"},
    {"e284ab", "c385"},
    {"cd84", "cc88cc81"},
    {"efac81", "efac81"},
    {"cea9cc81cc80cc96", "ce8fcc96cc80"},
    {"ed959ceab5adec96b420ebb3b4eab3a0ec849c", "ed959ceab5adec96b420ebb3b4eab3a0ec849c"},
    {"7472c3a8732073c3bb72cc81", "7472c3a8732073c3bbc595"},
};

std::string from_hex_str(const char* hex) {
  const auto bytes = *util::from_hex(hex);
  return std::string(bytes.begin(), bytes.end());
}

IncidentReport sample_report(const std::string& device, int64_t ts, const std::string& nonce32) {
  IncidentReport r;
  r.report_id = "9f1b2a64-1c3d-4e5f-8a9b-0c1d2e3f4a5b";
  r.device_key_id = device;
  r.timestamp_ms = ts;
  r.lat = 40.23;
  r.lon = -74.74;
  r.confidence = 0.7;
  r.description = "tree leaning over the line";
  r.attachments.push_back(
      {"image", std::string(64, 'a'), 12345});
  r.nonce_hex = nonce32;
  return r;
}

std::string fresh_nonce(std::mt19937_64& rng) {
  static const char* hexd = "0123456789abcdef";
  std::string s;
  for (int i = 0; i < 32; ++i) s += hexd[rng() % 16];
  return s;
}

std::string fresh_uuid(std::mt19937_64& rng) {
  std::string s = fresh_nonce(rng);
  return s.substr(0, 8) + "-" + s.substr(8, 4) + "-4" + s.substr(13, 3) + "-8" +
         s.substr(17, 3) + "-" + s.substr(20, 12);
}

}  // namespace

TEST_CASE("nfc: matches the frozen reference vectors") {
  for (const auto& v : kNfcVectors) {
    const auto got = util::nfc_normalize(from_hex_str(v.input_hex));
    REQUIRE(got.has_value());
    CHECK(util::to_hex(util::Bytes(got->begin(), got->end())) == v.nfc_hex);
  }
  CHECK_FALSE(util::nfc_normalize("\xff\xfe").has_value());
  CHECK_FALSE(util::nfc_normalize("\xc3").has_value());        // truncated
  CHECK_FALSE(util::nfc_normalize("\xc0\xaf").has_value());    // overlong
  CHECK_FALSE(util::nfc_normalize("\xed\xa0\x80").has_value());  // surrogate
}

TEST_CASE("canonical bytes: deterministic and construction-order free") {
  util::SeededRng rng(7);
  const auto r = sample_report("dev-1", 1700000000000, "00112233445566778899aabbccddeeff");
  const auto b1 = report::canonical_bytes(r);
  const auto b2 = report::canonical_bytes(r);
  CHECK(b1 == b2);

  // Same content via a shuffled JSON document parses to identical bytes.
  nlohmann::json shuffled;
  shuffled["nonce"] = r.nonce_hex;
  shuffled["description"] = r.description;
  shuffled["attachments"] = report::report_to_json(r)["attachments"];
  shuffled["timestamp"] = r.timestamp_ms;
  shuffled["confidence"] = r.confidence;
  shuffled["location"] = {{"lon", r.lon}, {"lat", r.lat}};
  shuffled["device_key_id"] = r.device_key_id;
  shuffled["report_id"] = r.report_id;
  CHECK(report::canonical_bytes(report::report_from_json(shuffled)) == b1);

  // The canonical text itself: sorted keys, no whitespace.
  const std::string text(b1.begin(), b1.end());
  CHECK(text.find("\"attachments\"") < text.find("\"confidence\""));
  CHECK(text.find("\"confidence\"") < text.find("\"description\""));
  CHECK(text.find("\"confidence\":0.7") != std::string::npos);  // no structural whitespace
  CHECK(text.find('\n') == std::string::npos);
  CHECK(text.find(": ") == std::string::npos);
  CHECK(text.find(", ") == std::string::npos);

  // Description in decomposed form canonicalizes to the composed bytes.
  auto decomposed = r;
  decomposed.description = "arbre précaire";
  auto composed = r;
  composed.description = "arbre précaire";
  CHECK(report::canonical_bytes(decomposed) == report::canonical_bytes(composed));
}

TEST_CASE("canonical bytes: non-finite and out-of-range fields are rejected") {
  auto r = sample_report("dev-1", 1700000000000, "00112233445566778899aabbccddeeff");
  r.confidence = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(report::canonical_bytes(r), util::ParseError);
  r.confidence = 1.5;
  CHECK_THROWS_AS(report::canonical_bytes(r), util::ParseError);
  r.confidence = 0.5;
  r.lat = 91.0;
  CHECK_THROWS_AS(report::canonical_bytes(r), util::ParseError);
  r.lat = 40.0;
  r.nonce_hex = "XYZ";
  CHECK_THROWS_AS(report::canonical_bytes(r), util::ParseError);
}

struct ProtocolFixture {
  util::SeededRng keyrng{42};
  DeviceKeyPair alice = report::generate_device_key(keyrng, "dev-alice");
  DeviceKeyPair bob = report::generate_device_key(keyrng, "dev-bob");
  DeviceKeyPair mallory = report::generate_device_key(keyrng, "dev-mallory");  // unregistered
  DeviceKeyPair carol = report::generate_device_key(keyrng, "dev-carol");      // revoked
  DeviceRegistry registry;
  int64_t now = 1700000000000;

  ProtocolFixture() {
    registry.add({"dev-alice", alice.public_key, now, false, "civilian"});
    registry.add({"dev-bob", bob.public_key, now, false, "utility"});
    registry.add({"dev-carol", carol.public_key, now, true, ""});
  }
};

TEST_CASE("verify: accept and reject paths") {
  ProtocolFixture fx;
  std::mt19937_64 rng(1);

  SUBCASE("sign then verify round trip") {
    const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
    const auto env = report::sign(r, fx.alice);
    const auto result = report::check_envelope(env, fx.registry, fx.now + 1000);
    REQUIRE(std::holds_alternative<IncidentReport>(result));
    CHECK(std::get<IncidentReport>(result).report_id == r.report_id);
  }

  SUBCASE("any single payload byte flip invalidates the signature") {
    const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
    auto env = report::sign(r, fx.alice);
    std::uniform_int_distribution<size_t> pick(0, env.payload.size() - 1);
    for (int trial = 0; trial < 50; ++trial) {
      auto tampered = env;
      const size_t pos = pick(rng);
      tampered.payload[pos] ^= static_cast<uint8_t>(1 + rng() % 255);
      const auto result = report::check_envelope(tampered, fx.registry, fx.now);
      REQUIRE(std::holds_alternative<report::Rejection>(result));
      CHECK(std::get<report::Rejection>(result).reason == RejectReason::SignatureInvalid);
    }
  }

  SUBCASE("unknown and revoked keys") {
    const auto r1 = sample_report("dev-mallory", fx.now, fresh_nonce(rng));
    const auto env1 = report::sign(r1, fx.mallory);
    auto res1 = report::check_envelope(env1, fx.registry, fx.now);
    CHECK(std::get<report::Rejection>(res1).reason == RejectReason::UnknownKey);

    const auto r2 = sample_report("dev-carol", fx.now, fresh_nonce(rng));
    const auto env2 = report::sign(r2, fx.carol);
    auto res2 = report::check_envelope(env2, fx.registry, fx.now);
    CHECK(std::get<report::Rejection>(res2).reason == RejectReason::Revoked);
  }

  SUBCASE("stale timestamps, both directions") {
    const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
    const auto env = report::sign(r, fx.alice);
    auto late = report::check_envelope(env, fx.registry, fx.now + 300'001);
    CHECK(std::get<report::Rejection>(late).reason == RejectReason::StaleTimestamp);
    auto early = report::check_envelope(env, fx.registry, fx.now - 300'001);
    CHECK(std::get<report::Rejection>(early).reason == RejectReason::StaleTimestamp);
    auto edge = report::check_envelope(env, fx.registry, fx.now + 300'000);
    CHECK(std::holds_alternative<IncidentReport>(edge));
  }

  SUBCASE("validly signed non-canonical payload is rejected") {
    const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
    const std::string pretty = report::report_to_json(r).dump(2);  // whitespace
    SignedEnvelope env;
    env.payload.assign(pretty.begin(), pretty.end());
    env.signature.resize(64);
    crypto_sign_detached(env.signature.data(), nullptr, env.payload.data(), env.payload.size(),
                         fx.alice.secret_key.data());
    env.device_key_id = "dev-alice";
    auto res = report::check_envelope(env, fx.registry, fx.now);
    REQUIRE(std::holds_alternative<report::Rejection>(res));
    CHECK(std::get<report::Rejection>(res).reason == RejectReason::Malformed);
  }

  SUBCASE("payload naming a different key id is rejected") {
    auto r = sample_report("dev-bob", fx.now, fresh_nonce(rng));
    auto env = report::sign(r, fx.bob);
    env.device_key_id = "dev-alice";  // lie in the clear field
    auto res = report::check_envelope(env, fx.registry, fx.now);
    REQUIRE(std::holds_alternative<report::Rejection>(res));
    // alice's key does not verify bob's signature
    CHECK(std::get<report::Rejection>(res).reason == RejectReason::SignatureInvalid);
  }
}

TEST_CASE("map_to_asset: nearest branch, radius cutoff, tie-break") {
  const auto spec = testsupport::load_sevenbus();
  const geo::GeoReference geo;

  // Midpoint of branch 2 (buses 1 and 3).
  const auto* b1 = spec.find_bus(1);
  const auto* b3 = spec.find_bus(3);
  const auto mid = geo::from_map_units(geo, (b1->x + b3->x) / 2, (b1->y + b3->y) / 2);
  auto hit = report::map_to_asset(mid.lat, mid.lon, spec, 500.0, geo);
  REQUIRE(hit.has_value());
  CHECK(hit->id == 2);

  // Far corner of the map: nothing within 500 m.
  const auto nowhere = geo::from_map_units(geo, 50.0, 50.0);
  CHECK_FALSE(report::map_to_asset(nowhere.lat, nowhere.lon, spec, 500.0, geo).has_value());

  // Equidistant parallel branches: lowest id wins regardless of file order.
  grid::GridSpec tie;
  tie.buses.push_back({1, grid::BusKind::Slack, 1.0, 0.0, 1.0, ""});
  tie.buses.push_back({2, grid::BusKind::Pq, std::nullopt, 4.0, 1.0, ""});
  tie.buses.push_back({3, grid::BusKind::Pq, std::nullopt, 0.0, -1.0, ""});
  tie.buses.push_back({4, grid::BusKind::Pq, std::nullopt, 4.0, -1.0, ""});
  tie.branches.push_back({5, 1, 2, 0.0, 0.1, 0.0, 1.0, true});
  tie.branches.push_back({3, 3, 4, 0.0, 0.1, 0.0, 1.0, true});
  const auto center = geo::from_map_units(geo, 2.0, 0.0);
  auto tied = report::map_to_asset(center.lat, center.lon, tie, 5000.0, geo);
  REQUIRE(tied.has_value());
  CHECK(tied->id == 3);

  // Determinism: pure function of its inputs.
  for (int i = 0; i < 5; ++i)
    CHECK(report::map_to_asset(mid.lat, mid.lon, spec, 500.0, geo) == hit);
}

TEST_CASE("ingest: accept, no-asset accept, malformed") {
  ProtocolFixture fx;
  std::mt19937_64 rng(2);
  const auto spec = testsupport::load_sevenbus();
  const geo::GeoReference geo;
  testsupport::TempDir tmp("ingest");
  report::ReportStore store(tmp.file("store.ndjson"));

  // Near the midpoint of branch 1 (buses 1-2).
  const auto* a = spec.find_bus(1);
  const auto* b = spec.find_bus(2);
  const auto near = geo::from_map_units(geo, (a->x + b->x) / 2, (a->y + b->y) / 2);
  auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
  r.lat = near.lat;
  r.lon = near.lon;
  const auto out = store.ingest(report::sign(r, fx.alice), fx.registry, &spec, geo, 500.0, fx.now);
  CHECK(out.accepted);
  REQUIRE(out.asset.has_value());
  CHECK(out.asset->id == 1);
  CHECK(out.asset->kind == grid::ElementKind::Branch);

  // Open country: accepted, stored, but no asset.
  auto far = sample_report("dev-alice", fx.now, fresh_nonce(rng));
  const auto remote = geo::from_map_units(geo, 40.0, -40.0);
  far.lat = remote.lat;
  far.lon = remote.lon;
  const auto out2 = store.ingest(report::sign(far, fx.alice), fx.registry, &spec, geo, 500.0, fx.now);
  CHECK(out2.accepted);
  CHECK_FALSE(out2.asset.has_value());
  CHECK(store.accepted_count() == 2);

  // Garbage payload bytes, validly signed: rejected, nothing stored.
  SignedEnvelope garbage;
  garbage.payload = {'n', 'o', 't', ' ', 'j', 's', 'o', 'n'};
  garbage.signature.resize(64);
  crypto_sign_detached(garbage.signature.data(), nullptr, garbage.payload.data(),
                       garbage.payload.size(), fx.alice.secret_key.data());
  garbage.device_key_id = "dev-alice";
  const auto out3 = store.ingest(garbage, fx.registry, &spec, geo, 500.0, fx.now);
  CHECK_FALSE(out3.accepted);
  CHECK(out3.reason == RejectReason::Malformed);
  CHECK(store.accepted_count() == 2);

  // Resubmission of the first envelope: replay.
  const auto out4 = store.ingest(report::sign(r, fx.alice), fx.registry, &spec, geo, 500.0, fx.now);
  CHECK_FALSE(out4.accepted);
  CHECK(out4.reason == RejectReason::Replay);
}

TEST_CASE("persistence: replay rejection survives restart; corrupt store fails closed") {
  ProtocolFixture fx;
  std::mt19937_64 rng(3);
  const auto spec = testsupport::load_sevenbus();
  const geo::GeoReference geo;
  testsupport::TempDir tmp("persist");
  const std::string path = tmp.file("store.ndjson");

  const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
  const auto env = report::sign(r, fx.alice);
  {
    report::ReportStore store(path);
    CHECK(store.ingest(env, fx.registry, &spec, geo, 500.0, fx.now).accepted);
  }
  {
    report::ReportStore store(path);  // restart
    CHECK(store.accepted_count() == 1);
    const auto out = store.ingest(env, fx.registry, &spec, geo, 500.0, fx.now);
    CHECK_FALSE(out.accepted);
    CHECK(out.reason == RejectReason::Replay);
  }

  // Truncate mid-record: startup must refuse.
  auto contents = util::read_file(path);
  util::write_file(path, contents.substr(0, contents.size() / 2));
  CHECK_THROWS_AS(report::ReportStore{path}, util::IoError);
}

TEST_CASE("atomicity: 100-way concurrent duplicate submission accepts exactly once") {
  ProtocolFixture fx;
  std::mt19937_64 rng(4);
  const auto spec = testsupport::load_sevenbus();
  const geo::GeoReference geo;
  testsupport::TempDir tmp("atomic");
  report::ReportStore store(tmp.file("store.ndjson"));

  const auto r = sample_report("dev-alice", fx.now, fresh_nonce(rng));
  const auto env = report::sign(r, fx.alice);

  std::atomic<int> accepted{0}, replayed{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 100; ++t) {
    threads.emplace_back([&]() {
      const auto out = store.ingest(env, fx.registry, &spec, geo, 500.0, fx.now);
      if (out.accepted)
        accepted.fetch_add(1);
      else if (out.reason == RejectReason::Replay)
        replayed.fetch_add(1);
    });
  }
  for (auto& t : threads) t.join();
  CHECK(accepted.load() == 1);
  CHECK(replayed.load() == 99);
  CHECK(store.accepted_count() == 1);
}

TEST_CASE("fuzz: 10k+ mutated envelopes, zero false accepts, zero false rejects") {
  const auto spec = testsupport::load_sevenbus();
  testsupport::TempDir tmp("fuzz");
  report::ReportStore store(tmp.file("store.ndjson"));
  const auto stats = protocol_fuzz::run(store, spec, 12'000, 0xFEEDFACE);
  CHECK(stats.total >= 10'000);
  CHECK(stats.false_accepts == 0);
  CHECK(stats.false_rejects == 0);
  CHECK(stats.accepted == static_cast<size_t>(stats.valid_sent));
}
