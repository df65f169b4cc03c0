#pragma once

#include <optional>
#include <string>
#include <vector>

#include "faitheval/numerics.hpp"

namespace faitheval {

// Child-process launch spec for an external prediction adapter. The
// command is run through /bin/sh; the protocol is line-delimited JSON
// over the child's stdin/stdout (see README for the message shapes).
struct AdapterEndpoint {
  std::string command;
  int protocol_version = 1;
  int timeout_ms = 10000;

  void validate() const;
};

struct AdapterResult {
  std::vector<double> probs;
  std::optional<std::vector<double>> attention;  // per-token scores
  std::optional<Matrix> grads;                   // T x d
};

// Strictly request/response; one in-flight request at a time.
class AdapterClient {
 public:
  explicit AdapterClient(const AdapterEndpoint& endpoint);
  ~AdapterClient();

  AdapterClient(const AdapterClient&) = delete;
  AdapterClient& operator=(const AdapterClient&) = delete;

  const std::vector<std::string>& provides() const { return provides_; }
  bool provides_field(const std::string& name) const;

  AdapterResult predict(const std::string& id, const Matrix& embeddings);

 private:
  std::string read_line();
  void write_line(const std::string& line);
  void shutdown();

  int child_pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  int timeout_ms_ = 0;
  std::string buffer_;
  std::vector<std::string> provides_;
};

}  // namespace faitheval
