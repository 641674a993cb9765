#include "ovl/provider.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <semaphore>

#include "httplib.h"
#include "json.hpp"

namespace ovl::provider {

using nlohmann::json;

void RemoteProviderConfig::validate() const {
  if (endpoint.empty())
    throw Error(ErrorKind::invalid_argument, "endpoint must be set");
  if (top_k < 1) throw Error(ErrorKind::invalid_argument, "top_k must be >= 1");
  if (!(timeout_sec > 0))
    throw Error(ErrorKind::invalid_argument, "timeout must be > 0");
  if (max_inflight < 1)
    throw Error(ErrorKind::invalid_argument, "max_inflight must be >= 1");
  if (retries < 0)
    throw Error(ErrorKind::invalid_argument, "retries must be >= 0");
  if (vocab_size < 1 || max_context < 1)
    throw Error(ErrorKind::invalid_argument,
                "remote provider needs vocab_size and max_context");
}

namespace {

class RemoteProvider final : public NextTokenProvider {
 public:
  explicit RemoteProvider(const RemoteProviderConfig& cfg)
      : cfg_(cfg), inflight_(cfg.max_inflight) {
    cfg_.validate();
  }

  ProviderCaps caps() const override {
    return {cfg_.vocab_size, cfg_.max_context};
  }

  std::vector<double> next_token_distribution(
      std::span<const Token> prefix) const override {
    const json body = {{"tokens", std::vector<Token>(prefix.begin(), prefix.end())},
                       {"top_k", cfg_.top_k}};
    const std::string payload = body.dump();

    inflight_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{inflight_};

    httplib::Result res;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      httplib::Client client(cfg_.endpoint);
      const auto timeout = std::chrono::duration<double>(cfg_.timeout_sec);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      res = client.Post("/v1/logprobs", payload, "application/json");
      if (res.error() == httplib::Error::ConnectionTimeout ||
          res.error() == httplib::Error::Read ||
          res.error() == httplib::Error::Write)
        throw Error(ErrorKind::remote_timeout,
                    "request timed out: " + cfg_.endpoint);
      if (res.error() != httplib::Error::Success || res->status >= 500)
        continue;  // retryable
      break;
    }
    if (res.error() != httplib::Error::Success || res->status >= 500)
      throw Error(ErrorKind::remote_retry_exhausted,
                  "gave up after " + std::to_string(cfg_.retries + 1) +
                      " attempts: " + cfg_.endpoint);
    if (res->status != 200)
      throw Error(ErrorKind::remote_http,
                  "http status " + std::to_string(res->status));
    return reconstruct(res->body);
  }

 private:
  std::vector<double> reconstruct(const std::string& body) const {
    const int V = cfg_.vocab_size;
    std::vector<double> dist(std::size_t(V), 0.0);
    std::vector<bool> seen(std::size_t(V), false);
    int n_entries = 0;
    double tail_logprob;
    try {
      const json r = json::parse(body);
      const auto& entries = r.at("entries");
      if (!entries.is_array())
        throw Error(ErrorKind::remote_malformed, "entries is not an array");
      for (const auto& e : entries) {
        const Token t = e.at("token").get<Token>();
        const double lp = e.at("logprob").get<double>();
        if (t < 0 || t >= V)
          throw Error(ErrorKind::remote_malformed,
                      "entry token out of vocabulary");
        if (seen[std::size_t(t)])
          throw Error(ErrorKind::remote_malformed, "duplicate entry token");
        seen[std::size_t(t)] = true;
        dist[std::size_t(t)] = std::exp(lp);
        ++n_entries;
      }
      tail_logprob = r.at("tail_logprob").get<double>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::remote_malformed,
                  std::string("bad response: ") + e.what());
    }
    const double tail = std::exp(tail_logprob);
    if (!(tail >= 0) || !std::isfinite(tail))
      throw Error(ErrorKind::remote_malformed, "bad tail mass");
    const int rest = V - n_entries;
    if (rest > 0) {
      const double each = tail / double(rest);
      for (int t = 0; t < V; ++t)
        if (!seen[std::size_t(t)]) dist[std::size_t(t)] = each;
    }
    double sum = 0.0;
    for (double p : dist) {
      if (!(p >= 0) || !std::isfinite(p))
        throw Error(ErrorKind::remote_malformed, "bad probability");
      sum += p;
    }
    if (!(sum > 0))
      throw Error(ErrorKind::remote_malformed, "distribution sums to zero");
    for (double& p : dist) p /= sum;
    return dist;
  }

  RemoteProviderConfig cfg_;
  mutable std::counting_semaphore<> inflight_;
};

}  // namespace

std::unique_ptr<NextTokenProvider> make_remote_provider(
    const RemoteProviderConfig& config) {
  return std::make_unique<RemoteProvider>(config);
}

}  // namespace ovl::provider
