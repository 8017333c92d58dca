#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sodium.h>

#include <random>

#include "capsule_scenarios.hpp"
#include "core/capsule.hpp"
#include "core/util.hpp"
#include "ref_monitor.hpp"
#include "test_support.hpp"

using namespace gridwatch;
using namespace gridwatch::capsule;

namespace {

CapsulePolicy permissive_policy() {
  // Own data may be read/written/sent over ipc anywhere; export stays shut.
  CapsulePolicy p;
  p.rules.push_back({{}, {}, OpPattern::Read, Verdict::Allow});
  p.rules.push_back({{}, {}, OpPattern::Write, Verdict::Allow});
  p.rules.push_back({{}, {}, OpPattern::Ipc, Verdict::Allow});
  return p;
}

struct CapsuleFixture {
  util::SeededRng rng{99};
  OwnerKeyPair owner = generate_owner_key(rng);
  KeyServer keyserver = KeyServer::generate(rng);
  Attestation good;

  CapsuleFixture() { good = {"android-4.1.1_6", keyserver.attestation_token("android-4.1.1_6")}; }

  Capsule make(const CapsulePolicy& policy, const std::string& name = "notes.txt",
               const std::string& data = "field checklist") {
    return package_capsule({{name, util::Bytes(data.begin(), data.end())}}, policy, owner,
                           keyserver, rng);
  }
};

}  // namespace

TEST_CASE("package/release: round trip, bad token, freshness") {
  CapsuleFixture fx;
  const std::string body = "confidential field data";
  const auto c = fx.make(permissive_policy(), "doc", body);

  SUBCASE("released key decrypts to the original bytes") {
    auto [status, key] = fx.keyserver.release_key(c.capsule_id, fx.good);
    REQUIRE(status == ReleaseStatus::Granted);
    util::Bytes plain(c.ciphertext.size() - crypto_secretbox_NONCEBYTES -
                      crypto_secretbox_MACBYTES);
    REQUIRE(crypto_secretbox_open_easy(
                plain.data(), c.ciphertext.data() + crypto_secretbox_NONCEBYTES,
                c.ciphertext.size() - crypto_secretbox_NONCEBYTES, c.ciphertext.data(),
                key.data()) == 0);
    const std::string container(plain.begin(), plain.end());
    CHECK(container.find(util::to_base64(util::Bytes(body.begin(), body.end()))) !=
          std::string::npos);
  }

  SUBCASE("flipped token bit denies the key") {
    Attestation bad = fx.good;
    bad.token_hex[3] = bad.token_hex[3] == 'a' ? 'b' : 'a';
    auto [status, key] = fx.keyserver.release_key(c.capsule_id, bad);
    CHECK(status == ReleaseStatus::KeyDenied);
    CHECK(key.empty());
  }

  SUBCASE("unknown capsule id") {
    auto [status, key] =
        fx.keyserver.release_key("00000000-0000-4000-8000-000000000000", fx.good);
    CHECK(status == ReleaseStatus::NotFound);
  }

  SUBCASE("identical payloads package to distinct capsules and keys") {
    const auto c2 = fx.make(permissive_policy(), "doc", body);
    CHECK(c.capsule_id != c2.capsule_id);
    CHECK(c.key_id != c2.key_id);
    CHECK(c.ciphertext != c2.ciphertext);
  }
}

TEST_CASE("capsule container: byte round trip and corruption detection") {
  CapsuleFixture fx;
  const auto c = fx.make(permissive_policy());
  const auto raw = capsule_to_bytes(c);
  CHECK(std::string(raw.begin(), raw.begin() + 4) == "EYC1");
  const auto back = capsule_from_bytes(raw);
  CHECK(back.capsule_id == c.capsule_id);
  CHECK(back.key_id == c.key_id);
  CHECK(back.ciphertext == c.ciphertext);
  CHECK(back.signature == c.signature);
  CHECK(util::canonical_dump(policy_to_json(back.policy)) ==
        util::canonical_dump(policy_to_json(c.policy)));

  auto truncated = raw;
  truncated.resize(raw.size() - 3);
  CHECK_THROWS_AS(capsule_from_bytes(truncated), util::ParseError);
  auto bad_magic = raw;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(capsule_from_bytes(bad_magic), util::ParseError);
}

TEST_CASE("install: labels, database, and the signature-before-key order") {
  CapsuleFixture fx;
  TaintWorld world;

  SUBCASE("valid capsule installs with a fresh label on every object") {
    const auto c = fx.make(permissive_policy());
    const auto result = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
    REQUIRE(result.status == InstallStatus::Installed);
    REQUIRE(result.object_ids.size() == 1);
    const auto* obj = world.find_object(result.object_ids[0]);
    REQUIRE(obj != nullptr);
    CHECK(obj->labels == std::set<uint32_t>{result.label});
    CHECK(world.database().at(c.capsule_id).count(result.object_ids[0]) == 1);

    const auto c2 = fx.make(permissive_policy(), "other.bin", "zzz");
    const auto result2 = world.install(c2, fx.owner.public_key, fx.good, fx.keyserver);
    REQUIRE(result2.status == InstallStatus::Installed);
    CHECK(result2.label != result.label);
  }

  SUBCASE("tampered signature: no key request, no graph mutation") {
    auto c = fx.make(permissive_policy());
    c.signature[10] ^= 0x01;
    const size_t log_before = fx.keyserver.request_log().size();
    const size_t objects_before = world.objects().size();
    const auto result = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
    CHECK(result.status == InstallStatus::BadSignature);
    CHECK(fx.keyserver.request_log().size() == log_before);  // never asked
    CHECK(world.objects().size() == objects_before);
    CHECK(world.database().empty());
  }

  SUBCASE("tampered policy breaks the signature") {
    auto c = fx.make(permissive_policy());
    c.policy.rules.push_back({{}, {}, OpPattern::Export, Verdict::Allow});
    const auto result = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
    CHECK(result.status == InstallStatus::BadSignature);
  }

  SUBCASE("bad attestation: KeyDenied after a logged request") {
    const auto c = fx.make(permissive_policy());
    Attestation bad{"rooted-device", "00ff00ff"};
    const auto result = world.install(c, fx.owner.public_key, bad, fx.keyserver);
    CHECK(result.status == InstallStatus::KeyDenied);
    REQUIRE_FALSE(fx.keyserver.request_log().empty());
    CHECK(fx.keyserver.request_log().back().status == ReleaseStatus::KeyDenied);
  }

  SUBCASE("ciphertext tamper: digest mismatch after valid signature") {
    auto c = fx.make(permissive_policy());
    c.ciphertext[c.ciphertext.size() / 2] ^= 0x40;
    const auto result = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
    CHECK(result.status == InstallStatus::DigestMismatch);
    CHECK(world.objects().empty());
  }
}

TEST_CASE("propagate: label flow and union") {
  CapsuleFixture fx;
  TaintWorld world;
  const auto ca = fx.make(permissive_policy(), "a.txt", "aaa");
  const auto cb = fx.make(permissive_policy(), "b.txt", "bbb");
  const auto ra = world.install(ca, fx.owner.public_key, fx.good, fx.keyserver);
  const auto rb = world.install(cb, fx.owner.public_key, fx.good, fx.keyserver);
  REQUIRE(ra.status == InstallStatus::Installed);
  REQUIRE(rb.status == InstallStatus::Installed);

  world.create_object("proc", ObjectKind::Process);
  world.create_object("scratch", ObjectKind::File);

  // File A read by the process: the process gains A's label.
  const auto& read_rec = world.propagate({ra.object_ids[0], "proc", Operation::Read, {}, {}});
  CHECK(read_rec.allowed);
  CHECK(world.find_object("proc")->labels == std::set<uint32_t>{ra.label});

  // Scratch gets B's label, then the process writes into it: union {A, B}.
  world.propagate({rb.object_ids[0], "scratch", Operation::Read, {}, {}});
  const auto& write_rec = world.propagate({"proc", "scratch", Operation::Write, {}, {}});
  CHECK(write_rec.allowed);
  CHECK(world.find_object("scratch")->labels == std::set<uint32_t>({ra.label, rb.label}));

  CHECK_THROWS_AS(world.propagate({"ghost", "proc", Operation::Read, {}, {}}), util::ParseError);

  // Fine-tier provenance must name installed capsules the source carries.
  CHECK_THROWS_AS(world.propagate({"scratch", "proc", Operation::Write, Tier::Fine,
                                   {{"00000000-0000-4000-8000-000000000000"}}}),
                  util::ParseError);
  CHECK_THROWS_AS(
      world.propagate({rb.object_ids[0], "proc", Operation::Write, Tier::Fine,
                       {{ca.capsule_id}}}),  // b.txt does not carry A's label
      util::ParseError);
}

TEST_CASE("keyserver: state file round trip preserves escrow and secret") {
  CapsuleFixture fx;
  const auto c = fx.make(permissive_policy());
  const auto restored = KeyServer::from_json(fx.keyserver.to_json());
  CHECK(restored.attestation_token("p") == fx.keyserver.attestation_token("p"));
  auto ks = restored;
  auto [status, key] = ks.release_key(c.capsule_id, fx.good);
  CHECK(status == ReleaseStatus::Granted);
  CHECK_FALSE(key.empty());
}

TEST_CASE("check_access: spec verdicts") {
  CapsuleFixture fx;
  TaintWorld world;
  const auto c = fx.make(permissive_policy());
  const auto r = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
  REQUIRE(r.status == InstallStatus::Installed);

  SUBCASE("export of labeled data to an unlabeled sink: default deny") {
    const auto d = check_access({r.label}, {}, Operation::Export, Tier::Coarse, world.installed());
    CHECK_FALSE(d.allow);
    REQUIRE(d.matches.size() == 1);
    CHECK(d.matches[0].rule_index == -1);  // no rule matched; default verdict
  }

  SUBCASE("unlabeled subject and object: allow, no policy involved") {
    const auto d = check_access({}, {}, Operation::Read, Tier::Coarse, world.installed());
    CHECK(d.allow);
    CHECK(d.matches.empty());
  }
}

TEST_CASE("check_access: tier divergence on a multi-context process") {
  CapsuleFixture fx;
  TaintWorld world;

  // Capsule A lets anything read/write its data; capsule B denies any flow
  // from a subject mixing B with foreign data into non-B objects.
  const auto ca = fx.make(permissive_policy(), "a.txt", "aaa");
  CapsulePolicy jealous;
  jealous.rules.push_back(
      {{{Atom::Self, Atom::Other}, {}}, {{}, {Atom::Self}}, OpPattern::Any, Verdict::Deny});
  jealous.rules.push_back({{}, {}, OpPattern::Read, Verdict::Allow});
  jealous.rules.push_back({{}, {}, OpPattern::Write, Verdict::Allow});
  const auto cb = fx.make(jealous, "b.txt", "bbb");

  const auto ra = world.install(ca, fx.owner.public_key, fx.good, fx.keyserver);
  const auto rb = world.install(cb, fx.owner.public_key, fx.good, fx.keyserver);
  REQUIRE(ra.status == InstallStatus::Installed);
  REQUIRE(rb.status == InstallStatus::Installed);

  world.create_object("app", ObjectKind::Process);
  world.create_object("a_only", ObjectKind::File);
  world.propagate({ra.object_ids[0], "a_only", Operation::Read, {}, {}});
  world.propagate({ra.object_ids[0], "app", Operation::Read, {}, {}});
  world.propagate({rb.object_ids[0], "app", Operation::Read, {}, {}});
  REQUIRE(world.find_object("app")->labels == std::set<uint32_t>({ra.label, rb.label}));

  // Fine tier: only A's data moves, B is uninvolved -> allow.
  const auto fine = check_access({ra.label}, {ra.label}, Operation::Write, Tier::Fine,
                                 world.installed());
  CHECK(fine.allow);
  // Coarse tier: the whole process label set {A,B} triggers B's deny rule.
  const auto coarse = check_access({ra.label, rb.label}, {ra.label}, Operation::Write,
                                   Tier::Coarse, world.installed());
  CHECK_FALSE(coarse.allow);

  // The same divergence through propagate's tier selection.
  const auto& fine_rec =
      world.propagate({"app", "a_only", Operation::Write, {}, {{ca.capsule_id}}});
  CHECK(fine_rec.tier == Tier::Fine);
  CHECK(fine_rec.allowed);
  const auto& coarse_rec = world.propagate({"app", "a_only", Operation::Write, {}, {}});
  CHECK(coarse_rec.tier == Tier::Coarse);
  CHECK_FALSE(coarse_rec.allowed);
}

TEST_CASE("propagate: no-leak-on-deny leaves state untouched") {
  CapsuleFixture fx;
  TaintWorld world;
  const auto c = fx.make(permissive_policy());  // export not allowed
  const auto r = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
  world.create_object("sink", ObjectKind::NetworkSink);

  testsupport::TempDir tmp("deny");
  world.persist(tmp.file("before.db"));
  const auto& rec = world.propagate({r.object_ids[0], "sink", Operation::Export, {}, {}});
  CHECK_FALSE(rec.allowed);
  CHECK(rec.labels_added.empty());
  CHECK(world.find_object("sink")->labels.empty());

  // Identical persisted state modulo the rejection record.
  auto before = TaintWorld::restore(tmp.file("before.db"));
  CHECK(before.objects().at("sink").labels.empty());
  CHECK(world.event_log().size() == before.event_log().size() + 1);
  CHECK(world.database() == before.database());
}

TEST_CASE("persist/restore: observational identity and label watermark") {
  CapsuleFixture fx;
  TaintWorld world;
  const auto c = fx.make(permissive_policy());
  const auto r = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);
  world.create_object("proc", ObjectKind::Process);
  world.propagate({r.object_ids[0], "proc", Operation::Read, {}, {}});

  testsupport::TempDir tmp("persist");
  const std::string path = tmp.file("taint.db");
  world.persist(path);
  auto restored = TaintWorld::restore(path);

  CHECK(restored.next_label() == world.next_label());
  CHECK(restored.database() == world.database());
  REQUIRE(restored.objects().size() == world.objects().size());
  for (const auto& [id, obj] : world.objects()) {
    CHECK(restored.objects().at(id).labels == obj.labels);
    CHECK(restored.objects().at(id).kind == obj.kind);
  }
  REQUIRE(restored.event_log().size() == world.event_log().size());

  // A capsule installed after restore gets a strictly greater label.
  const auto c2 = fx.make(permissive_policy(), "late.txt", "zz");
  const auto r2 = restored.install(c2, fx.owner.public_key, fx.good, fx.keyserver);
  REQUIRE(r2.status == InstallStatus::Installed);
  CHECK(r2.label > r.label);

  SUBCASE("truncated snapshot fails closed") {
    const auto contents = util::read_file(path);
    util::write_file(path, contents.substr(0, contents.size() - 10));
    CHECK_THROWS_AS(TaintWorld::restore(path), util::IoError);
  }
  SUBCASE("garbage snapshot fails closed") {
    util::write_file(path, "{\"format\":\"something-else\"}\n");
    CHECK_THROWS_AS(TaintWorld::restore(path), util::IoError);
  }
}

TEST_CASE("oracle equivalence: random policies and event streams") {
  int total_events = 0;
  for (uint32_t seed = 1; seed <= 40; ++seed) {
    const auto run = capsule_scenarios::run_random_scenario(seed, 300, 25);
    REQUIRE_MESSAGE(run.ok, run.why);
    total_events += run.events_applied;
  }
  CHECK(total_events > 8000);
}

TEST_CASE("simulate: script replay produces a transcript") {
  CapsuleFixture fx;
  TaintWorld world;
  const auto c = fx.make(permissive_policy(), "doc", "x");
  const auto r = world.install(c, fx.owner.public_key, fx.good, fx.keyserver);

  nlohmann::json script;
  script["objects"] = {{{"id", "proc"}, {"kind", "process"}},
                       {{"id", "outbound"}, {"kind", "network_sink"}}};
  script["events"] = {{{"source", r.object_ids[0]}, {"sink", "proc"}, {"op", "read"}},
                      {{"source", "proc"}, {"sink", "outbound"}, {"op", "export"}}};
  const auto transcript = run_simulation(world, script);
  REQUIRE(transcript.size() == 2);
  CHECK(transcript[0]["allowed"] == true);
  CHECK(transcript[1]["allowed"] == false);  // export is not in the policy
  CHECK(transcript[1]["tier"] == "coarse");
}
