#pragma once

#include <openssl/evp.h>

#include <string>

#include "mabpe/bytes.hpp"

namespace mabpe {

// Hex digest of `data` with a named OpenSSL message digest (sha256, sha1, md5, ...).
inline std::string hex_digest(ByteView data, const std::string& algorithm = "sha256") {
  const EVP_MD* md = EVP_get_digestbyname(algorithm.c_str());
  if (!md) throw Error("unknown digest algorithm '" + algorithm + "'");
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1) throw Error("digest failed");
  return detail::to_hex(ByteView(out, len));
}

inline bool digest_supported(const std::string& algorithm) {
  return EVP_get_digestbyname(algorithm.c_str()) != nullptr;
}

}  // namespace mabpe
