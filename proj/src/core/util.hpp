#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace gridwatch::util {

using Bytes = std::vector<uint8_t>;

// Thrown by parsers and validators; `where` carries a location hint
// ("line 3, column 7" for text inputs, a field path otherwise).
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string message, std::string where = {})
      : std::runtime_error(where.empty() ? message : message + " (" + where + ")"),
        where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string to_hex(const uint8_t* data, size_t len);
std::string to_hex(const Bytes& data);
std::optional<Bytes> from_hex(std::string_view hex);

std::string to_base64(const uint8_t* data, size_t len);
std::string to_base64(const Bytes& data);
std::optional<Bytes> from_base64(std::string_view b64);

// Deterministic serialization: object keys sorted lexicographically, no
// whitespace, shortest round-trip doubles, UTF-8 passthrough. Throws
// ParseError on non-finite numbers anywhere in the document.
std::string canonical_dump(const nlohmann::json& j);

// Parses JSON and converts nlohmann's byte offsets into line/column hints.
nlohmann::json parse_json(std::string_view text);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
// write-temp + rename; fsyncs the data before the rename.
void write_file_atomic(const std::string& path, std::string_view contents);

// Random source. The seeded variant exists for reproducible tests and is a
// ChaCha20 stream keyed from the seed; production paths use the system CSPRNG.
class Rng {
 public:
  virtual ~Rng() = default;
  virtual void fill(uint8_t* buf, size_t len) = 0;
  Bytes bytes(size_t len);
};

class SystemRng final : public Rng {
 public:
  void fill(uint8_t* buf, size_t len) override;
};

class SeededRng final : public Rng {
 public:
  explicit SeededRng(uint64_t seed);
  void fill(uint8_t* buf, size_t len) override;

 private:
  uint8_t state_[32];
};

// Canonical lowercase UUIDv4 text from 16 random bytes.
std::string uuid4(Rng& rng);
bool looks_like_uuid(std::string_view s);

int64_t now_millis();

}  // namespace gridwatch::util
