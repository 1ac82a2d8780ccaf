#include "consentgate/crypto.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>
#include <openssl/sha.h>

#include <stdexcept>

#include "consentgate/error.hpp"

namespace consentgate::crypto {

std::vector<std::uint8_t> random_bytes(std::size_t n) {
  std::vector<std::uint8_t> out(n);
  if (n > 0 && RAND_bytes(out.data(), static_cast<int>(n)) != 1) {
    throw std::runtime_error("RAND_bytes failed");
  }
  return out;
}

std::uint32_t random_below(std::uint32_t bound) {
  if (bound == 0) throw std::invalid_argument("random_below(0)");
  const std::uint32_t limit = UINT32_MAX - (UINT32_MAX % bound);
  for (;;) {
    const auto b = random_bytes(4);
    const std::uint32_t v = (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
                            (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
    if (v < limit) return v % bound;
  }
}

std::string to_hex(const std::vector<std::uint8_t>& bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

std::vector<std::uint8_t> from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  if (hex.size() % 2 != 0) throw Error(ErrorCode::InvalidArgument, "odd hex length");
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int hi = nibble(hex[2 * i]);
    const int lo = nibble(hex[2 * i + 1]);
    if (hi < 0 || lo < 0) throw Error(ErrorCode::InvalidArgument, "bad hex digit");
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

std::string sha256_hex(std::string_view data) {
  std::vector<std::uint8_t> digest(SHA256_DIGEST_LENGTH);
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest.data());
  return to_hex(digest);
}

std::string hmac_sha256_hex(const std::vector<std::uint8_t>& key, std::string_view message) {
  std::vector<std::uint8_t> mac(EVP_MAX_MD_SIZE);
  unsigned int len = 0;
  HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()),
       reinterpret_cast<const unsigned char*>(message.data()), message.size(), mac.data(), &len);
  mac.resize(len);
  return to_hex(mac);
}

bool constant_time_equal(std::string_view a, std::string_view b) {
  if (a.size() != b.size()) return false;
  return CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

std::string base64_encode(std::string_view data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()),
                                static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view data) {
  if (data.size() % 4 != 0) throw Error(ErrorCode::InvalidArgument, "bad base64 length");
  std::string out(3 * data.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(data.data()),
                                static_cast<int>(data.size()));
  if (n < 0) throw Error(ErrorCode::InvalidArgument, "bad base64");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock does not strip the padding bytes.
  if (!data.empty() && data.back() == '=') --len;
  if (data.size() > 1 && data[data.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

namespace {

std::string pbkdf2_hex(std::string_view secret, const std::vector<std::uint8_t>& salt,
                       int iterations) {
  std::vector<std::uint8_t> out(32);
  if (PKCS5_PBKDF2_HMAC(secret.data(), static_cast<int>(secret.size()), salt.data(),
                        static_cast<int>(salt.size()), iterations, EVP_sha256(),
                        static_cast<int>(out.size()), out.data()) != 1) {
    throw std::runtime_error("PBKDF2 failed");
  }
  return to_hex(out);
}

}  // namespace

std::string CredentialHasher::hash(std::string_view secret) const {
  const auto salt = random_bytes(16);
  return "pbkdf2-sha256$" + std::to_string(iterations_) + "$" + to_hex(salt) + "$" +
         pbkdf2_hex(secret, salt, iterations_);
}

bool CredentialHasher::verify(std::string_view secret, std::string_view encoded) const {
  // pbkdf2-sha256$iters$salt$hash
  const auto p1 = encoded.find('$');
  const auto p2 = encoded.find('$', p1 + 1);
  const auto p3 = encoded.find('$', p2 + 1);
  if (p1 == std::string_view::npos || p2 == std::string_view::npos ||
      p3 == std::string_view::npos || encoded.substr(0, p1) != "pbkdf2-sha256") {
    return false;
  }
  try {
    const int iterations = std::stoi(std::string(encoded.substr(p1 + 1, p2 - p1 - 1)));
    const auto salt = from_hex(encoded.substr(p2 + 1, p3 - p2 - 1));
    if (iterations <= 0) return false;
    return constant_time_equal(pbkdf2_hex(secret, salt, iterations), encoded.substr(p3 + 1));
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace consentgate::crypto
