#pragma once

#include <stdexcept>
#include <string>

namespace fedtune {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model, dataset, search-space or experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

class FeedbackError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised when training produces a non-finite loss or weight. The context
/// fields are filled in as the error propagates up through the round loop.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what) : Error(what), detail_(what) {}

  DivergenceError(const std::string& detail, long client_id, long round,
                  std::string config_id)
      : Error(detail + " (client " + std::to_string(client_id) + ", round " +
              std::to_string(round) + ", config " + config_id + ")"),
        detail_(detail),
        client_id_(client_id),
        round_(round),
        config_id_(std::move(config_id)) {}

  const std::string& detail() const noexcept { return detail_; }
  long client_id() const noexcept { return client_id_; }
  long round() const noexcept { return round_; }
  const std::string& config_id() const noexcept { return config_id_; }

 private:
  std::string detail_;
  long client_id_ = -1;
  long round_ = -1;
  std::string config_id_;
};

}  // namespace fedtune
