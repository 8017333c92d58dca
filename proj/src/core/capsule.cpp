#include "core/capsule.hpp"

#include <sodium.h>

#include <algorithm>
#include <cstring>

namespace gridwatch::capsule {

using util::Bytes;
using util::ParseError;

namespace {

constexpr char kMagic[4] = {'E', 'Y', 'C', '1'};
constexpr uint8_t kVersion = 1;

std::string atom_name(Atom a) {
  switch (a) {
    case Atom::Self: return "self";
    case Atom::Other: return "other";
    case Atom::None: return "none";
  }
  return "?";
}

Atom atom_from_name(const std::string& s) {
  if (s == "self") return Atom::Self;
  if (s == "other") return Atom::Other;
  if (s == "none") return Atom::None;
  throw ParseError("unknown label pattern atom '" + s + "'");
}

std::string op_pattern_name(OpPattern op) {
  switch (op) {
    case OpPattern::Read: return "read";
    case OpPattern::Write: return "write";
    case OpPattern::Ipc: return "ipc";
    case OpPattern::Export: return "export";
    case OpPattern::Any: return "any";
  }
  return "?";
}

OpPattern op_pattern_from_name(const std::string& s) {
  if (s == "read") return OpPattern::Read;
  if (s == "write") return OpPattern::Write;
  if (s == "ipc") return OpPattern::Ipc;
  if (s == "export") return OpPattern::Export;
  if (s == "any") return OpPattern::Any;
  throw ParseError("unknown operation '" + s + "'");
}

nlohmann::json pattern_to_json(const LabelPattern& p) {
  nlohmann::json j = nlohmann::json::object();
  if (!p.has.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (Atom a : p.has) arr.push_back(atom_name(a));
    j["has"] = arr;
  }
  if (!p.lacks.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (Atom a : p.lacks) arr.push_back(atom_name(a));
    j["lacks"] = arr;
  }
  return j;
}

LabelPattern pattern_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("label pattern must be an object");
  LabelPattern p;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "has" && it.key() != "lacks")
      throw ParseError("unknown pattern key '" + it.key() + "'");
    if (!it.value().is_array()) throw ParseError("pattern lists must be arrays");
    for (const auto& a : it.value()) {
      if (!a.is_string()) throw ParseError("pattern atoms must be strings");
      (it.key() == "has" ? p.has : p.lacks).push_back(atom_from_name(a.get<std::string>()));
    }
  }
  return p;
}

bool atom_holds(Atom a, const std::set<uint32_t>& labels, uint32_t self) {
  switch (a) {
    case Atom::Self: return labels.count(self) > 0;
    case Atom::Other:
      return std::any_of(labels.begin(), labels.end(), [&](uint32_t l) { return l != self; });
    case Atom::None: return labels.empty();
  }
  return false;
}

bool pattern_matches(const LabelPattern& p, const std::set<uint32_t>& labels, uint32_t self) {
  for (Atom a : p.has)
    if (!atom_holds(a, labels, self)) return false;
  for (Atom a : p.lacks)
    if (atom_holds(a, labels, self)) return false;
  return true;
}

bool op_matches(OpPattern pattern, Operation op) {
  switch (pattern) {
    case OpPattern::Any: return true;
    case OpPattern::Read: return op == Operation::Read;
    case OpPattern::Write: return op == Operation::Write;
    case OpPattern::Ipc: return op == Operation::Ipc;
    case OpPattern::Export: return op == Operation::Export;
  }
  return false;
}

void append_u32(Bytes& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

void append_section(Bytes& out, const Bytes& section) {
  append_u32(out, static_cast<uint32_t>(section.size()));
  out.insert(out.end(), section.begin(), section.end());
}

Bytes str_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

// Signed message: length-framed (capsule_id, policy, payload digest).
Bytes signing_message(const std::string& capsule_id, const CapsulePolicy& policy,
                      const Bytes& digest) {
  Bytes msg;
  append_section(msg, str_bytes(capsule_id));
  append_section(msg, str_bytes(util::canonical_dump(policy_to_json(policy))));
  append_section(msg, digest);
  return msg;
}

Bytes payload_container(const std::vector<PayloadObject>& payload) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& obj : payload)
    arr.push_back({{"data_b64", util::to_base64(obj.data)}, {"name", obj.name}});
  return str_bytes(util::canonical_dump(arr));
}

std::vector<PayloadObject> payload_from_container(const Bytes& container) {
  const nlohmann::json arr = util::parse_json(std::string(container.begin(), container.end()));
  if (!arr.is_array()) throw ParseError("payload container must be an array");
  std::vector<PayloadObject> out;
  for (const auto& item : arr) {
    auto data = util::from_base64(item.at("data_b64").get<std::string>());
    if (!data) throw ParseError("bad payload data encoding");
    out.push_back({item.at("name").get<std::string>(), *data});
  }
  return out;
}

Bytes sha256(const Bytes& data) {
  Bytes digest(crypto_hash_sha256_BYTES);
  crypto_hash_sha256(digest.data(), data.data(), data.size());
  return digest;
}

}  // namespace

nlohmann::json policy_to_json(const CapsulePolicy& p) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : p.rules) {
    rules.push_back({{"subject", pattern_to_json(r.subject)},
                     {"object", pattern_to_json(r.object)},
                     {"operation", op_pattern_name(r.operation)},
                     {"verdict", r.verdict == Verdict::Allow ? "allow" : "deny"}});
  }
  return {{"default", "deny"}, {"rules", rules}};
}

CapsulePolicy policy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("policy must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "default" && it.key() != "rules")
      throw ParseError("unknown policy key '" + it.key() + "'");
  if (j.contains("default") && j["default"] != "deny")
    throw ParseError("policy default verdict is fixed to deny");
  CapsulePolicy p;
  if (!j.contains("rules")) throw ParseError("policy needs a rules array");
  if (!j["rules"].is_array()) throw ParseError("rules must be an array");
  for (const auto& rj : j["rules"]) {
    if (!rj.is_object()) throw ParseError("rule must be an object");
    for (auto it = rj.begin(); it != rj.end(); ++it)
      if (it.key() != "subject" && it.key() != "object" && it.key() != "operation" &&
          it.key() != "verdict")
        throw ParseError("unknown rule key '" + it.key() + "'");
    PolicyRule r;
    r.subject = pattern_from_json(rj.value("subject", nlohmann::json::object()));
    r.object = pattern_from_json(rj.value("object", nlohmann::json::object()));
    r.operation = op_pattern_from_name(rj.value("operation", std::string("any")));
    const std::string v = rj.at("verdict").get<std::string>();
    if (v != "allow" && v != "deny") throw ParseError("verdict must be allow|deny");
    r.verdict = v == "allow" ? Verdict::Allow : Verdict::Deny;
    p.rules.push_back(std::move(r));
  }
  return p;
}

std::string operation_name(Operation op) {
  switch (op) {
    case Operation::Read: return "read";
    case Operation::Write: return "write";
    case Operation::Ipc: return "ipc";
    case Operation::Export: return "export";
  }
  return "?";
}

Operation operation_from_name(const std::string& s) {
  if (s == "read") return Operation::Read;
  if (s == "write") return Operation::Write;
  if (s == "ipc") return Operation::Ipc;
  if (s == "export") return Operation::Export;
  throw ParseError("unknown operation '" + s + "'");
}

std::string tier_name(Tier t) {
  switch (t) {
    case Tier::Coarse: return "coarse";
    case Tier::Fine: return "fine";
    case Tier::Service: return "service";
  }
  return "?";
}

Tier tier_from_name(const std::string& s) {
  if (s == "coarse") return Tier::Coarse;
  if (s == "fine") return Tier::Fine;
  if (s == "service") return Tier::Service;
  throw ParseError("unknown tier '" + s + "'");
}

OwnerKeyPair generate_owner_key(util::Rng& rng) {
  OwnerKeyPair kp;
  kp.public_key.resize(crypto_sign_PUBLICKEYBYTES);
  kp.secret_key.resize(crypto_sign_SECRETKEYBYTES);
  const Bytes seed = rng.bytes(crypto_sign_SEEDBYTES);
  crypto_sign_seed_keypair(kp.public_key.data(), kp.secret_key.data(), seed.data());
  return kp;
}

util::Bytes capsule_to_bytes(const Capsule& c) {
  Bytes out;
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kVersion);
  append_section(out, str_bytes(c.capsule_id));
  append_section(out, str_bytes(c.key_id));
  append_section(out, str_bytes(util::canonical_dump(policy_to_json(c.policy))));
  append_section(out, c.ciphertext);
  Bytes sig_section = c.payload_digest;
  sig_section.insert(sig_section.end(), c.signature.begin(), c.signature.end());
  append_section(out, sig_section);
  return out;
}

Capsule capsule_from_bytes(const util::Bytes& raw) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > raw.size()) throw ParseError("truncated capsule file");
  };
  need(5);
  if (std::memcmp(raw.data(), kMagic, 4) != 0) throw ParseError("bad capsule magic");
  if (raw[4] != kVersion)
    throw ParseError("unsupported capsule version " + std::to_string(raw[4]));
  pos = 5;
  auto section = [&]() {
    need(4);
    uint32_t len = raw[pos] | (raw[pos + 1] << 8) | (raw[pos + 2] << 16) |
                   (static_cast<uint32_t>(raw[pos + 3]) << 24);
    pos += 4;
    need(len);
    Bytes s(raw.begin() + static_cast<long>(pos), raw.begin() + static_cast<long>(pos + len));
    pos += len;
    return s;
  };
  Capsule c;
  const Bytes id = section();
  c.capsule_id = std::string(id.begin(), id.end());
  const Bytes kid = section();
  c.key_id = std::string(kid.begin(), kid.end());
  const Bytes policy = section();
  c.policy = policy_from_json(util::parse_json(std::string(policy.begin(), policy.end())));
  c.ciphertext = section();
  const Bytes sig_section = section();
  if (pos != raw.size()) throw ParseError("trailing bytes after capsule sections");
  if (sig_section.size() != crypto_hash_sha256_BYTES + crypto_sign_BYTES)
    throw ParseError("bad signature section length");
  c.payload_digest.assign(sig_section.begin(), sig_section.begin() + crypto_hash_sha256_BYTES);
  c.signature.assign(sig_section.begin() + crypto_hash_sha256_BYTES, sig_section.end());
  if (!util::looks_like_uuid(c.capsule_id) || !util::looks_like_uuid(c.key_id))
    throw ParseError("capsule ids must be UUIDs");
  return c;
}

KeyServer KeyServer::generate(util::Rng& rng) { return KeyServer(rng.bytes(32)); }

KeyServer::KeyServer(util::Bytes server_secret) : secret_(std::move(server_secret)) {
  if (secret_.size() != crypto_auth_hmacsha256_KEYBYTES)
    throw ParseError("keyserver secret must be 32 bytes");
}

std::string KeyServer::attestation_token(const std::string& platform) const {
  Bytes mac(crypto_auth_hmacsha256_BYTES);
  crypto_auth_hmacsha256(mac.data(), reinterpret_cast<const uint8_t*>(platform.data()),
                         platform.size(), secret_.data());
  return util::to_hex(mac);
}

bool KeyServer::attestation_valid(const Attestation& att) const {
  const auto mac = util::from_hex(att.token_hex);
  if (!mac || mac->size() != crypto_auth_hmacsha256_BYTES) return false;
  return crypto_auth_hmacsha256_verify(mac->data(),
                                       reinterpret_cast<const uint8_t*>(att.platform.data()),
                                       att.platform.size(), secret_.data()) == 0;
}

void KeyServer::escrow(const std::string& capsule_id, const std::string& key_id,
                       util::Bytes key) {
  keys_[capsule_id] = {key_id, std::move(key)};
}

std::pair<ReleaseStatus, util::Bytes> KeyServer::release_key(const std::string& capsule_id,
                                                             const Attestation& att) {
  auto it = keys_.find(capsule_id);
  if (it == keys_.end()) {
    log_.push_back({capsule_id, ReleaseStatus::NotFound});
    return {ReleaseStatus::NotFound, {}};
  }
  if (!attestation_valid(att)) {
    log_.push_back({capsule_id, ReleaseStatus::KeyDenied});
    return {ReleaseStatus::KeyDenied, {}};
  }
  log_.push_back({capsule_id, ReleaseStatus::Granted});
  return {ReleaseStatus::Granted, it->second.key};
}

nlohmann::json KeyServer::to_json() const {
  nlohmann::json keys = nlohmann::json::array();
  for (const auto& [capsule_id, e] : keys_) {
    keys.push_back({{"capsule_id", capsule_id},
                    {"key_id", e.key_id},
                    {"key_b64", util::to_base64(e.key)}});
  }
  return {{"server_secret_b64", util::to_base64(secret_)}, {"keys", keys}};
}

KeyServer KeyServer::from_json(const nlohmann::json& j) {
  auto secret = util::from_base64(j.at("server_secret_b64").get<std::string>());
  if (!secret) throw ParseError("bad keyserver secret encoding");
  KeyServer ks(*secret);
  for (const auto& item : j.at("keys")) {
    auto key = util::from_base64(item.at("key_b64").get<std::string>());
    if (!key) throw ParseError("bad escrowed key encoding");
    ks.escrow(item.at("capsule_id").get<std::string>(), item.at("key_id").get<std::string>(),
              *key);
  }
  return ks;
}

Capsule package_capsule(const std::vector<PayloadObject>& payload, const CapsulePolicy& policy,
                        const OwnerKeyPair& owner, KeyServer& keyserver, util::Rng& rng) {
  if (payload.empty()) throw ParseError("capsule payload must not be empty");
  std::set<std::string> names;
  for (const auto& obj : payload) {
    if (obj.name.empty()) throw ParseError("payload object names must be non-empty");
    if (!names.insert(obj.name).second)
      throw ParseError("duplicate payload object name '" + obj.name + "'");
  }
  if (owner.secret_key.size() != crypto_sign_SECRETKEYBYTES)
    throw ParseError("bad owner secret key");

  Capsule c;
  c.capsule_id = util::uuid4(rng);
  c.key_id = util::uuid4(rng);
  c.policy = policy;

  const Bytes container = payload_container(payload);
  c.payload_digest = sha256(container);

  const Bytes key = rng.bytes(crypto_secretbox_KEYBYTES);
  const Bytes nonce = rng.bytes(crypto_secretbox_NONCEBYTES);
  Bytes box(container.size() + crypto_secretbox_MACBYTES);
  crypto_secretbox_easy(box.data(), container.data(), container.size(), nonce.data(), key.data());
  c.ciphertext = nonce;
  c.ciphertext.insert(c.ciphertext.end(), box.begin(), box.end());

  const Bytes msg = signing_message(c.capsule_id, c.policy, c.payload_digest);
  c.signature.resize(crypto_sign_BYTES);
  crypto_sign_detached(c.signature.data(), nullptr, msg.data(), msg.size(),
                       owner.secret_key.data());

  keyserver.escrow(c.capsule_id, c.key_id, key);
  return c;
}

std::string object_kind_name(ObjectKind k) {
  switch (k) {
    case ObjectKind::File: return "file";
    case ObjectKind::Process: return "process";
    case ObjectKind::IpcMessage: return "ipc_message";
    case ObjectKind::ServiceEndpoint: return "service_endpoint";
    case ObjectKind::Account: return "account";
    case ObjectKind::NetworkSink: return "network_sink";
  }
  return "?";
}

ObjectKind object_kind_from_name(const std::string& s) {
  if (s == "file") return ObjectKind::File;
  if (s == "process") return ObjectKind::Process;
  if (s == "ipc_message") return ObjectKind::IpcMessage;
  if (s == "service_endpoint") return ObjectKind::ServiceEndpoint;
  if (s == "account") return ObjectKind::Account;
  if (s == "network_sink") return ObjectKind::NetworkSink;
  throw ParseError("unknown object kind '" + s + "'");
}

AccessDecision check_access(const std::set<uint32_t>& subject_labels,
                            const std::set<uint32_t>& object_labels, Operation op, Tier tier,
                            const std::map<uint32_t, InstalledCapsule>& installed) {
  AccessDecision decision;
  decision.tier = tier;

  std::set<uint32_t> involved = subject_labels;
  involved.insert(object_labels.begin(), object_labels.end());
  if (involved.empty()) return decision;  // no policy involved -> allow

  for (uint32_t label : involved) {
    auto it = installed.find(label);
    if (it == installed.end())
      throw ParseError("label " + std::to_string(label) + " has no installed capsule");
    const InstalledCapsule& cap = it->second;
    RuleMatch match{cap.capsule_id, -1, Verdict::Deny};  // default deny
    for (size_t ri = 0; ri < cap.policy.rules.size(); ++ri) {
      const PolicyRule& rule = cap.policy.rules[ri];
      if (!op_matches(rule.operation, op)) continue;
      if (!pattern_matches(rule.subject, subject_labels, label)) continue;
      if (!pattern_matches(rule.object, object_labels, label)) continue;
      match.rule_index = static_cast<int>(ri);
      match.verdict = rule.verdict;
      break;
    }
    if (match.verdict == Verdict::Deny) decision.allow = false;
    decision.matches.push_back(std::move(match));
  }
  return decision;
}

void TaintWorld::create_object(const std::string& id, ObjectKind kind) {
  if (id.empty()) throw ParseError("object id must be non-empty");
  if (objects_.count(id)) throw ParseError("object id '" + id + "' already exists");
  objects_[id] = GraphObject{id, kind, {}};
}

const GraphObject* TaintWorld::find_object(const std::string& id) const {
  auto it = objects_.find(id);
  return it == objects_.end() ? nullptr : &it->second;
}

uint32_t TaintWorld::allocate_label() { return next_label_++; }

InstallResult TaintWorld::install(const Capsule& c, const util::Bytes& owner_public_key,
                                  const Attestation& att, KeyServer& keyserver) {
  // Signature first; a capsule that fails here must never reach the
  // keyserver.
  const Bytes msg = signing_message(c.capsule_id, c.policy, c.payload_digest);
  if (owner_public_key.size() != crypto_sign_PUBLICKEYBYTES ||
      c.signature.size() != crypto_sign_BYTES ||
      crypto_sign_verify_detached(c.signature.data(), msg.data(), msg.size(),
                                  owner_public_key.data()) != 0)
    return {InstallStatus::BadSignature, 0, {}, "owner signature check failed"};

  auto [status, key] = keyserver.release_key(c.capsule_id, att);
  if (status == ReleaseStatus::NotFound)
    return {InstallStatus::NotFound, 0, {}, "capsule unknown to the keyserver"};
  if (status == ReleaseStatus::KeyDenied)
    return {InstallStatus::KeyDenied, 0, {}, "attestation rejected"};

  if (c.ciphertext.size() < crypto_secretbox_NONCEBYTES + crypto_secretbox_MACBYTES)
    return {InstallStatus::DigestMismatch, 0, {}, "ciphertext too short"};
  Bytes plain(c.ciphertext.size() - crypto_secretbox_NONCEBYTES - crypto_secretbox_MACBYTES);
  if (crypto_secretbox_open_easy(plain.data(), c.ciphertext.data() + crypto_secretbox_NONCEBYTES,
                                 c.ciphertext.size() - crypto_secretbox_NONCEBYTES,
                                 c.ciphertext.data(), key.data()) != 0)
    return {InstallStatus::DigestMismatch, 0, {}, "authenticated decryption failed"};
  if (sha256(plain) != c.payload_digest)
    return {InstallStatus::DigestMismatch, 0, {}, "payload digest mismatch after decryption"};

  std::vector<PayloadObject> payload;
  try {
    payload = payload_from_container(plain);
  } catch (const ParseError& e) {
    return {InstallStatus::DigestMismatch, 0, {}, std::string("bad payload container: ") + e.what()};
  }
  for (const auto& obj : payload) {
    const std::string id = c.capsule_id + "/" + obj.name;
    if (objects_.count(id)) return {InstallStatus::DigestMismatch, 0, {}, "object exists: " + id};
  }

  InstallResult result;
  result.label = allocate_label();
  for (const auto& obj : payload) {
    const std::string id = c.capsule_id + "/" + obj.name;
    objects_[id] = GraphObject{id, ObjectKind::File, {result.label}};
    db_[c.capsule_id].insert(id);
    result.object_ids.push_back(id);
  }
  installed_[result.label] = InstalledCapsule{c.capsule_id, result.label, c.policy};
  return result;
}

const EventRecord& TaintWorld::propagate(const FlowEvent& event) {
  auto src_it = objects_.find(event.source);
  if (src_it == objects_.end()) throw ParseError("unknown source object '" + event.source + "'");
  auto sink_it = objects_.find(event.sink);
  if (sink_it == objects_.end()) throw ParseError("unknown sink object '" + event.sink + "'");
  GraphObject& source = src_it->second;
  GraphObject& sink = sink_it->second;

  Tier tier;
  if (event.tier) {
    tier = *event.tier;
  } else if (source.kind == ObjectKind::ServiceEndpoint || sink.kind == ObjectKind::ServiceEndpoint) {
    tier = Tier::Service;
  } else if (event.data_capsules) {
    tier = Tier::Fine;
  } else {
    tier = Tier::Coarse;
  }

  // Effective subject labels: the whole source set at coarse/service tier,
  // only the moving data's labels at fine tier.
  std::set<uint32_t> effective = source.labels;
  if (tier == Tier::Fine && event.data_capsules) {
    effective.clear();
    for (const std::string& capsule_id : *event.data_capsules) {
      bool found = false;
      for (const auto& [label, cap] : installed_) {
        if (cap.capsule_id == capsule_id) {
          if (!source.labels.count(label))
            throw ParseError("data capsule " + capsule_id + " not carried by source");
          effective.insert(label);
          found = true;
        }
      }
      if (!found) throw ParseError("unknown data capsule " + capsule_id);
    }
  }

  const AccessDecision decision = check_access(effective, sink.labels, event.op, tier, installed_);

  EventRecord rec;
  rec.event = event;
  rec.tier = tier;
  rec.allowed = decision.allow;
  rec.matches = decision.matches;
  if (decision.allow) {
    for (uint32_t label : effective) {
      if (sink.labels.insert(label).second) {
        rec.labels_added.push_back(label);
        db_[installed_.at(label).capsule_id].insert(sink.id);
      }
    }
  }
  log_.push_back(std::move(rec));
  return log_.back();
}

namespace {

nlohmann::json event_record_to_json(const EventRecord& rec) {
  nlohmann::json j;
  j["source"] = rec.event.source;
  j["sink"] = rec.event.sink;
  j["op"] = operation_name(rec.event.op);
  j["tier"] = tier_name(rec.tier);
  if (rec.event.data_capsules) j["data_capsules"] = *rec.event.data_capsules;
  j["allowed"] = rec.allowed;
  j["labels_added"] = rec.labels_added;
  nlohmann::json matches = nlohmann::json::array();
  for (const auto& m : rec.matches) {
    matches.push_back({{"capsule_id", m.capsule_id},
                       {"rule", m.rule_index},
                       {"verdict", m.verdict == Verdict::Allow ? "allow" : "deny"}});
  }
  j["matches"] = matches;
  return j;
}

EventRecord event_record_from_json(const nlohmann::json& j) {
  EventRecord rec;
  rec.event.source = j.at("source").get<std::string>();
  rec.event.sink = j.at("sink").get<std::string>();
  rec.event.op = operation_from_name(j.at("op").get<std::string>());
  rec.tier = tier_from_name(j.at("tier").get<std::string>());
  rec.event.tier = rec.tier;
  if (j.contains("data_capsules"))
    rec.event.data_capsules = j["data_capsules"].get<std::vector<std::string>>();
  rec.allowed = j.at("allowed").get<bool>();
  rec.labels_added = j.at("labels_added").get<std::vector<uint32_t>>();
  for (const auto& m : j.at("matches")) {
    rec.matches.push_back({m.at("capsule_id").get<std::string>(), m.at("rule").get<int>(),
                           m.at("verdict") == "allow" ? Verdict::Allow : Verdict::Deny});
  }
  return rec;
}

}  // namespace

void TaintWorld::persist(const std::string& path) const {
  std::string out;
  nlohmann::json header{{"format", "gridwatch-taintdb"}, {"version", 1},
                        {"next_label", next_label_}};
  out += util::canonical_dump(header) + "\n";
  for (const auto& [id, obj] : objects_) {
    nlohmann::json j{{"type", "object"},
                     {"id", obj.id},
                     {"kind", object_kind_name(obj.kind)},
                     {"labels", obj.labels}};
    out += util::canonical_dump(j) + "\n";
  }
  for (const auto& [label, cap] : installed_) {
    nlohmann::json j{{"type", "install"},
                     {"capsule_id", cap.capsule_id},
                     {"label", label},
                     {"policy", policy_to_json(cap.policy)}};
    out += util::canonical_dump(j) + "\n";
  }
  for (const auto& [capsule_id, ids] : db_) {
    nlohmann::json j{{"type", "taint"}, {"capsule_id", capsule_id}, {"objects", ids}};
    out += util::canonical_dump(j) + "\n";
  }
  for (const auto& rec : log_) {
    nlohmann::json j = event_record_to_json(rec);
    j["type"] = "event";
    out += util::canonical_dump(j) + "\n";
  }
  nlohmann::json trailer{{"type", "end"}, {"records", objects_.size() + installed_.size() +
                                                          db_.size() + log_.size()}};
  out += util::canonical_dump(trailer) + "\n";
  util::write_file_atomic(path, out);
}

TaintWorld TaintWorld::restore(const std::string& path) {
  std::string text;
  try {
    text = util::read_file(path);
  } catch (const util::IoError& e) {
    throw util::IoError(std::string("cannot restore taint database: ") + e.what());
  }

  TaintWorld world;
  size_t start = 0;
  int line_no = 0;
  bool saw_header = false, saw_end = false;
  size_t records = 0;
  auto fail = [&](const std::string& why) {
    throw util::IoError("corrupt taint database " + path + " line " + std::to_string(line_no + 1) +
                        ": " + why);
  };
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) fail("missing trailing newline");
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) fail("blank line");
    nlohmann::json j;
    try {
      j = util::parse_json(line);
    } catch (const util::ParseError& e) {
      fail(e.what());
    }
    try {
      if (!saw_header) {
        if (j.at("format") != "gridwatch-taintdb" || j.at("version") != 1)
          fail("unrecognized header");
        world.next_label_ = j.at("next_label").get<uint32_t>();
        saw_header = true;
        continue;
      }
      if (saw_end) fail("records after the end marker");
      const std::string type = j.at("type").get<std::string>();
      if (type == "object") {
        GraphObject obj;
        obj.id = j.at("id").get<std::string>();
        obj.kind = object_kind_from_name(j.at("kind").get<std::string>());
        for (uint32_t l : j.at("labels")) obj.labels.insert(l);
        world.objects_[obj.id] = std::move(obj);
        ++records;
      } else if (type == "install") {
        InstalledCapsule cap;
        cap.capsule_id = j.at("capsule_id").get<std::string>();
        cap.label = j.at("label").get<uint32_t>();
        cap.policy = policy_from_json(j.at("policy"));
        if (cap.label >= world.next_label_) fail("label exceeds allocator watermark");
        world.installed_[cap.label] = std::move(cap);
        ++records;
      } else if (type == "taint") {
        auto& set = world.db_[j.at("capsule_id").get<std::string>()];
        for (const auto& id : j.at("objects")) set.insert(id.get<std::string>());
        ++records;
      } else if (type == "event") {
        world.log_.push_back(event_record_from_json(j));
        ++records;
      } else if (type == "end") {
        if (j.at("records").get<size_t>() != records) fail("record count mismatch");
        saw_end = true;
      } else {
        fail("unknown record type '" + type + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    } catch (const util::ParseError& e) {
      fail(e.what());
    }
  }
  if (!saw_header) fail("empty file");
  if (!saw_end) fail("missing end marker");

  // Cross-check db against the graph before trusting the snapshot.
  for (const auto& [capsule_id, ids] : world.db_) {
    uint32_t label = 0;
    for (const auto& [l, cap] : world.installed_)
      if (cap.capsule_id == capsule_id) label = l;
    if (label == 0) fail("taint entry for uninstalled capsule " + capsule_id);
    for (const auto& id : ids) {
      auto it = world.objects_.find(id);
      if (it == world.objects_.end() || !it->second.labels.count(label))
        fail("taint entry inconsistent with object graph for " + id);
    }
  }
  return world;
}

nlohmann::json run_simulation(TaintWorld& world, const nlohmann::json& script) {
  if (!script.is_object()) throw ParseError("simulation script must be an object");
  for (auto it = script.begin(); it != script.end(); ++it)
    if (it.key() != "objects" && it.key() != "events")
      throw ParseError("unknown script key '" + it.key() + "'");

  if (script.contains("objects")) {
    for (const auto& obj : script["objects"]) {
      const std::string id = obj.at("id").get<std::string>();
      const ObjectKind kind = object_kind_from_name(obj.at("kind").get<std::string>());
      // Re-running a script against saved state is fine as long as kinds
      // agree.
      if (const GraphObject* existing = world.find_object(id)) {
        if (existing->kind != kind)
          throw ParseError("object '" + id + "' already exists with kind " +
                           object_kind_name(existing->kind));
        continue;
      }
      world.create_object(id, kind);
    }
  }
  nlohmann::json transcript = nlohmann::json::array();
  if (script.contains("events")) {
    int index = 0;
    for (const auto& ev : script["events"]) {
      FlowEvent event;
      event.source = ev.at("source").get<std::string>();
      event.sink = ev.at("sink").get<std::string>();
      event.op = operation_from_name(ev.at("op").get<std::string>());
      if (ev.contains("tier")) event.tier = tier_from_name(ev["tier"].get<std::string>());
      if (ev.contains("data_capsules"))
        event.data_capsules = ev["data_capsules"].get<std::vector<std::string>>();
      const EventRecord& rec = world.propagate(event);
      nlohmann::json entry = event_record_to_json(rec);
      entry["index"] = index++;
      transcript.push_back(std::move(entry));
    }
  }
  return transcript;
}

}  // namespace gridwatch::capsule
