#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "core/util.hpp"

namespace gridwatch::capsule {

// ---------------------------------------------------------------------------
// Policy language
//
// A rule matches when its subject pattern matches the subject label set, its
// object pattern matches the object label set, and the operation matches.
// Patterns are evaluated with `self` bound to the capsule the policy belongs
// to. Rules are first-match per capsule; a capsule whose labels are involved
// in an access but whose rules say nothing falls back to deny, and any
// single deny wins across capsules.
// ---------------------------------------------------------------------------

enum class Atom { Self, Other, None };

struct LabelPattern {
  std::vector<Atom> has;    // all must hold
  std::vector<Atom> lacks;  // none may hold
};

enum class Operation { Read, Write, Ipc, Export };
enum class OpPattern { Read, Write, Ipc, Export, Any };
enum class Verdict { Allow, Deny };
enum class Tier { Coarse, Fine, Service };

struct PolicyRule {
  LabelPattern subject;
  LabelPattern object;
  OpPattern operation = OpPattern::Any;
  Verdict verdict = Verdict::Deny;
};

struct CapsulePolicy {
  std::vector<PolicyRule> rules;  // ordered, first match wins; default deny
};

nlohmann::json policy_to_json(const CapsulePolicy& p);
CapsulePolicy policy_from_json(const nlohmann::json& j);

std::string operation_name(Operation op);
Operation operation_from_name(const std::string& s);
std::string tier_name(Tier t);
Tier tier_from_name(const std::string& s);

// ---------------------------------------------------------------------------
// Capsules on the wire
// ---------------------------------------------------------------------------

struct PayloadObject {
  std::string name;
  util::Bytes data;
};

struct Capsule {
  std::string capsule_id;  // UUID
  std::string key_id;      // UUID naming the escrowed decryption key
  CapsulePolicy policy;
  util::Bytes ciphertext;      // secretbox nonce || box of the payload container
  util::Bytes payload_digest;  // SHA-256 of the plaintext container, signed
  util::Bytes signature;       // owner Ed25519 over (capsule_id, policy, digest)
};

struct OwnerKeyPair {
  util::Bytes public_key;
  util::Bytes secret_key;
};

OwnerKeyPair generate_owner_key(util::Rng& rng);

// Binary container: magic "EYC1", version byte, then length-prefixed
// sections (capsule_id, key_id, policy JSON, ciphertext, digest+signature).
util::Bytes capsule_to_bytes(const Capsule& c);
Capsule capsule_from_bytes(const util::Bytes& raw);  // throws util::ParseError

// ---------------------------------------------------------------------------
// Key escrow + attestation
// ---------------------------------------------------------------------------

struct Attestation {
  std::string platform;   // descriptor of the installing agent
  std::string token_hex;  // HMAC-SHA256(server secret, platform)
};

enum class ReleaseStatus { Granted, KeyDenied, NotFound };

struct ReleaseRecord {
  std::string capsule_id;
  ReleaseStatus status;
};

// Stores decryption keys per capsule and hands them out only against a valid
// attestation token. Every request lands in the log, which is how tests pin
// the signature-before-key ordering.
class KeyServer {
 public:
  static KeyServer generate(util::Rng& rng);
  explicit KeyServer(util::Bytes server_secret);

  std::string attestation_token(const std::string& platform) const;
  bool attestation_valid(const Attestation& att) const;

  void escrow(const std::string& capsule_id, const std::string& key_id, util::Bytes key);
  std::pair<ReleaseStatus, util::Bytes> release_key(const std::string& capsule_id,
                                                    const Attestation& att);

  const std::vector<ReleaseRecord>& request_log() const { return log_; }

  nlohmann::json to_json() const;  // includes the secret; file is trusted
  static KeyServer from_json(const nlohmann::json& j);

 private:
  util::Bytes secret_;
  struct Escrowed {
    std::string key_id;
    util::Bytes key;
  };
  std::map<std::string, Escrowed> keys_;  // capsule_id -> key
  std::vector<ReleaseRecord> log_;
};

Capsule package_capsule(const std::vector<PayloadObject>& payload, const CapsulePolicy& policy,
                        const OwnerKeyPair& owner, KeyServer& keyserver, util::Rng& rng);

// ---------------------------------------------------------------------------
// Simulated object graph + taint database
// ---------------------------------------------------------------------------

enum class ObjectKind { File, Process, IpcMessage, ServiceEndpoint, Account, NetworkSink };

std::string object_kind_name(ObjectKind k);
ObjectKind object_kind_from_name(const std::string& s);

struct GraphObject {
  std::string id;
  ObjectKind kind = ObjectKind::File;
  std::set<uint32_t> labels;
};

struct InstalledCapsule {
  std::string capsule_id;
  uint32_t label = 0;
  CapsulePolicy policy;
};

struct FlowEvent {
  std::string source;
  std::string sink;
  Operation op = Operation::Read;
  std::optional<Tier> tier;  // derived from the endpoints when absent
  // Fine-tier data provenance: the capsules whose data actually moves. Must
  // be a subset of what the source carries.
  std::optional<std::vector<std::string>> data_capsules;
};

struct RuleMatch {
  std::string capsule_id;
  int rule_index = -1;  // -1: default verdict
  Verdict verdict = Verdict::Deny;
};

struct AccessDecision {
  bool allow = true;
  Tier tier = Tier::Coarse;
  std::vector<RuleMatch> matches;  // one per involved capsule, label order
};

// Pure first-match evaluation across every installed policy whose label is
// involved. The tier is recorded for the log; the caller picks the subject
// label set it implies (a coarse process presents its whole union, the fine
// tier presents just the moving data's labels).
AccessDecision check_access(const std::set<uint32_t>& subject_labels,
                            const std::set<uint32_t>& object_labels, Operation op, Tier tier,
                            const std::map<uint32_t, InstalledCapsule>& installed);

struct EventRecord {
  FlowEvent event;
  Tier tier = Tier::Coarse;
  bool allowed = false;
  std::vector<uint32_t> labels_added;  // to the sink
  std::vector<RuleMatch> matches;
};

enum class InstallStatus { Installed, BadSignature, KeyDenied, DigestMismatch, NotFound };

struct InstallResult {
  InstallStatus status = InstallStatus::Installed;
  uint32_t label = 0;
  std::vector<std::string> object_ids;
  std::string detail;
};

// The in-memory world the engine protects: object graph, per-capsule taint
// database, label allocator, and the append-only event log.
class TaintWorld {
 public:
  TaintWorld() = default;

  void create_object(const std::string& id, ObjectKind kind);
  const GraphObject* find_object(const std::string& id) const;

  // Verifies the signature before any key request, asks the keyserver for
  // the payload key, decrypts, checks the digest, then materializes payload
  // objects as sources of a fresh label.
  InstallResult install(const Capsule& c, const util::Bytes& owner_public_key,
                        const Attestation& att, KeyServer& keyserver);

  // Policy check plus label propagation; denied events mutate nothing but
  // still land in the log as rejections. Throws util::ParseError on unknown
  // object ids or invalid data_capsules.
  const EventRecord& propagate(const FlowEvent& event);

  const std::map<std::string, GraphObject>& objects() const { return objects_; }
  const std::map<uint32_t, InstalledCapsule>& installed() const { return installed_; }
  const std::map<std::string, std::set<std::string>>& database() const { return db_; }
  const std::vector<EventRecord>& event_log() const { return log_; }
  uint32_t next_label() const { return next_label_; }

  // Atomic snapshot (write-temp + rename). restore() refuses corrupt or
  // truncated snapshots outright.
  void persist(const std::string& path) const;
  static TaintWorld restore(const std::string& path);

 private:
  uint32_t allocate_label();

  std::map<std::string, GraphObject> objects_;
  std::map<uint32_t, InstalledCapsule> installed_;
  std::map<std::string, std::set<std::string>> db_;  // capsule -> tainted object ids
  std::vector<EventRecord> log_;
  uint32_t next_label_ = 1;
};

// Replays a simulate script ({"objects": [...], "events": [...]}) against a
// world and returns the verdict transcript.
nlohmann::json run_simulation(TaintWorld& world, const nlohmann::json& script);

}  // namespace gridwatch::capsule
