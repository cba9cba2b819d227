#include "sclr/corpus.hpp"

#include <fstream>

#include <httplib.h>

namespace sclr {

namespace {

std::string fetch_url(const std::string& url) {
  const bool https = url.rfind("https://", 0) == 0;
  const std::size_t scheme_len = https ? 8 : 7;
  const std::size_t slash = url.find('/', scheme_len);
  const std::string host = url.substr(scheme_len, slash - scheme_len);
  const std::string path = slash == std::string::npos ? "/" : url.substr(slash);

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  require(!https, "https ingest requires an OpenSSL-enabled build");
#endif

  auto get = [&](auto& client) {
    client.set_follow_location(true);
    auto res = client.Get(path);
    require(res && res->status == 200,
            "failed to fetch '" + url + "'" +
                (res ? " (status " + std::to_string(res->status) + ")" : ""));
    return res->body;
  };
  if (https) {
#ifdef CPPHTTPLIB_OPENSSL_SUPPORT
    httplib::SSLClient client(host);
    return get(client);
#endif
  }
  httplib::Client client(host);
  return get(client);
}

}  // namespace

Corpus ingest(const std::string& path_or_url) {
  Corpus c;
  c.source = path_or_url;
  if (path_or_url.rfind("http://", 0) == 0 ||
      path_or_url.rfind("https://", 0) == 0) {
    c.raw = fetch_url(path_or_url);
  } else {
    std::ifstream in(path_or_url, std::ios::binary);
    require(bool(in), "cannot read corpus '" + path_or_url + "'");
    c.raw.assign((std::istreambuf_iterator<char>(in)),
                 std::istreambuf_iterator<char>());
  }
  require(!c.raw.empty(), "corpus '" + path_or_url + "' is empty");
  c.tokens = tokenize(c.raw);
  return c;
}

}  // namespace sclr
