#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace consentgate::crypto {

/// Cryptographically secure random bytes (OpenSSL RAND_bytes).
std::vector<std::uint8_t> random_bytes(std::size_t n);

/// Uniform integer in [0, bound) with rejection sampling over the CSPRNG.
std::uint32_t random_below(std::uint32_t bound);

std::string to_hex(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> from_hex(std::string_view hex);

std::string sha256_hex(std::string_view data);
std::string hmac_sha256_hex(const std::vector<std::uint8_t>& key, std::string_view message);

bool constant_time_equal(std::string_view a, std::string_view b);

std::string base64_encode(std::string_view data);
std::string base64_decode(std::string_view data);

/// Salted password hashing. Encoded form: pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>.
class CredentialHasher {
 public:
  explicit CredentialHasher(int iterations = 10000) : iterations_(iterations) {}

  std::string hash(std::string_view secret) const;
  bool verify(std::string_view secret, std::string_view encoded) const;

 private:
  int iterations_;
};

}  // namespace consentgate::crypto
