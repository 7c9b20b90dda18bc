#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>

#include "widistill/models.hpp"

namespace widistill {

/// Training diverged (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SgdOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t shuffle_seed = 0;  // epoch e shuffles with derive_seed(shuffle_seed, "shuffle", e)
};

struct EpochMetrics {
  double loss = 0.0;      // mean minibatch loss over the epoch
  double accuracy = 0.0;  // full-pass train accuracy after the epoch

  bool operator==(const EpochMetrics&) const = default;
};

/// Called after every epoch with the 1-based epoch index.
using EpochCallback = std::function<void(std::size_t epoch, const NetworkParams&, const EpochMetrics&)>;

/// Minibatch SGD with heavy-ball momentum (v = mu v + g; theta -= lr v).
/// Arithmetic runs in the dtype of `init`; the last minibatch may be short.
NetworkParams train_sgd(const ModelSpec& spec, NetworkParams init, const Tensor& samples,
                        std::span<const std::uint32_t> labels, const SgdOptions& opts,
                        const EpochCallback& on_epoch = {});

/// Logits for `samples`, evaluated in chunks of `chunk` rows.
Tensor predict(const ModelSpec& spec, const NetworkParams& params, const Tensor& samples,
               std::size_t chunk = 128);

}  // namespace widistill
