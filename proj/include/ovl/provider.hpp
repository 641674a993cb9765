#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ovl/common.hpp"
#include "ovl/lm.hpp"

namespace ovl::provider {

struct ProviderCaps {
  int vocab_size = 0;
  int max_context = 0;
};

// Uniform next-token-distribution source. Implementations must return a
// length-vocab_size vector of nonnegative probabilities summing to 1 within
// 1e-6. Calls are const and safe from multiple threads.
class NextTokenProvider {
 public:
  virtual ~NextTokenProvider() = default;
  virtual ProviderCaps caps() const = 0;
  virtual std::vector<double> next_token_distribution(
      std::span<const Token> prefix) const = 0;
};

// Wraps a checkpoint; a thin delegation to lm::forward. The checkpoint must
// outlive the provider.
class LocalProvider final : public NextTokenProvider {
 public:
  explicit LocalProvider(const lm::Checkpoint& ckpt) : ckpt_(ckpt) {}
  ProviderCaps caps() const override {
    return {ckpt_.config.vocab_size, ckpt_.config.context_len};
  }
  std::vector<double> next_token_distribution(
      std::span<const Token> prefix) const override {
    return lm::forward(ckpt_, prefix);
  }

 private:
  const lm::Checkpoint& ckpt_;
};

struct RemoteProviderConfig {
  std::string endpoint;  // e.g. "http://127.0.0.1:8311"
  int top_k = 32;
  double timeout_sec = 5.0;
  int max_inflight = 4;
  int retries = 2;  // extra attempts on 5xx/connect failure
  // Capability descriptor; the wire protocol has no handshake.
  int vocab_size = 0;
  int max_context = 0;

  void validate() const;
};

// POST {endpoint}/v1/logprobs with {"tokens":[...],"top_k":k}; the response
// carries top-k token log-probs plus one aggregated tail mass, which is
// spread uniformly over the ids not returned, then the whole vector is
// renormalized.
std::unique_ptr<NextTokenProvider> make_remote_provider(
    const RemoteProviderConfig& config);

}  // namespace ovl::provider
