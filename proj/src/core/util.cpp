#include "core/util.hpp"

#include <sodium.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace gridwatch::util {

namespace {

void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw std::runtime_error("libsodium initialization failed");
}

void check_finite(const nlohmann::json& j, const std::string& path) {
  switch (j.type()) {
    case nlohmann::json::value_t::number_float:
      if (!std::isfinite(j.get<double>()))
        throw ParseError("non-finite number not representable", path);
      break;
    case nlohmann::json::value_t::object:
      for (auto it = j.begin(); it != j.end(); ++it) check_finite(it.value(), path + "." + it.key());
      break;
    case nlohmann::json::value_t::array: {
      size_t i = 0;
      for (const auto& v : j) check_finite(v, path + "[" + std::to_string(i++) + "]");
      break;
    }
    default:
      break;
  }
}

std::pair<int, int> line_col_at(std::string_view text, size_t byte_pos) {
  int line = 1, col = 1;
  for (size_t i = 0; i < byte_pos && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace

std::string to_hex(const uint8_t* data, size_t len) {
  ensure_sodium();
  std::string out(len * 2 + 1, '\0');
  sodium_bin2hex(out.data(), out.size(), data, len);
  out.resize(len * 2);
  return out;
}

std::string to_hex(const Bytes& data) { return to_hex(data.data(), data.size()); }

std::optional<Bytes> from_hex(std::string_view hex) {
  ensure_sodium();
  Bytes out(hex.size() / 2 + 1);
  size_t bin_len = 0;
  if (sodium_hex2bin(out.data(), out.size(), hex.data(), hex.size(), nullptr, &bin_len, nullptr) !=
      0)
    return std::nullopt;
  out.resize(bin_len);
  return out;
}

std::string to_base64(const uint8_t* data, size_t len) {
  ensure_sodium();
  std::string out(sodium_base64_encoded_len(len, sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), data, len, sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::string to_base64(const Bytes& data) { return to_base64(data.data(), data.size()); }

std::optional<Bytes> from_base64(std::string_view b64) {
  ensure_sodium();
  Bytes out(b64.size());
  size_t bin_len = 0;
  if (sodium_base642bin(out.data(), out.size(), b64.data(), b64.size(), nullptr, &bin_len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0)
    return std::nullopt;
  out.resize(bin_len);
  return out;
}

std::string canonical_dump(const nlohmann::json& j) {
  check_finite(j, "$");
  // nlohmann objects are backed by std::map, so keys come out sorted; doubles
  // use the shortest round-trip form.
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

nlohmann::json parse_json(std::string_view text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    auto [line, col] = line_col_at(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ParseError(std::string("JSON syntax error: ") + e.what(),
                     "line " + std::to_string(line) + ", column " + std::to_string(col));
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path);
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed: " + path);
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw IoError("cannot open temp file: " + tmp);
  size_t written = 0;
  while (written < contents.size()) {
    ssize_t n = ::write(fd, contents.data() + written, contents.size() - written);
    if (n < 0) {
      ::close(fd);
      throw IoError("write failed: " + tmp);
    }
    written += static_cast<size_t>(n);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw IoError("fsync failed: " + tmp);
  }
  ::close(fd);
  if (::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("rename failed: " + path);
}

Bytes Rng::bytes(size_t len) {
  Bytes b(len);
  fill(b.data(), len);
  return b;
}

void SystemRng::fill(uint8_t* buf, size_t len) {
  ensure_sodium();
  randombytes_buf(buf, len);
}

SeededRng::SeededRng(uint64_t seed) {
  ensure_sodium();
  std::memset(state_, 0, sizeof state_);
  std::memcpy(state_, &seed, sizeof seed);
  uint8_t expanded[32];
  crypto_hash_sha256(expanded, state_, sizeof state_);
  std::memcpy(state_, expanded, sizeof state_);
}

void SeededRng::fill(uint8_t* buf, size_t len) {
  randombytes_buf_deterministic(buf, len, state_);
  uint8_t next[32];
  crypto_hash_sha256(next, state_, sizeof state_);
  std::memcpy(state_, next, sizeof state_);
}

std::string uuid4(Rng& rng) {
  uint8_t b[16];
  rng.fill(b, sizeof b);
  b[6] = static_cast<uint8_t>((b[6] & 0x0F) | 0x40);
  b[8] = static_cast<uint8_t>((b[8] & 0x3F) | 0x80);
  const std::string hex = to_hex(b, sizeof b);
  return hex.substr(0, 8) + "-" + hex.substr(8, 4) + "-" + hex.substr(12, 4) + "-" +
         hex.substr(16, 4) + "-" + hex.substr(20, 12);
}

bool looks_like_uuid(std::string_view s) {
  if (s.size() != 36) return false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i == 8 || i == 13 || i == 18 || i == 23) {
      if (s[i] != '-') return false;
    } else if (!std::isxdigit(static_cast<unsigned char>(s[i])) ||
               (std::isalpha(static_cast<unsigned char>(s[i])) &&
                !std::islower(static_cast<unsigned char>(s[i])))) {
      return false;
    }
  }
  return true;
}

int64_t now_millis() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace gridwatch::util
