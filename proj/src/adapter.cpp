#include "faitheval/adapter.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "faitheval/version.hpp"
#include "json.hpp"

namespace faitheval {

void AdapterEndpoint::validate() const {
  if (command.empty()) {
    throw ParameterError("AdapterEndpoint: empty command");
  }
  if (timeout_ms <= 0) {
    throw ParameterError("AdapterEndpoint: timeout must be > 0");
  }
  if (protocol_version != kAdapterProtocolVersion) {
    throw ParameterError("AdapterEndpoint: unsupported protocol version");
  }
}

AdapterClient::AdapterClient(const AdapterEndpoint& endpoint) {
  endpoint.validate();
  timeout_ms_ = endpoint.timeout_ms;

  int to_pipe[2];
  int from_pipe[2];
  if (pipe(to_pipe) != 0 || pipe(from_pipe) != 0) {
    throw AdapterError("adapter: pipe() failed");
  }

  const pid_t pid = fork();
  if (pid < 0) {
    throw AdapterError("adapter: fork() failed");
  }
  if (pid == 0) {
    dup2(to_pipe[0], STDIN_FILENO);
    dup2(from_pipe[1], STDOUT_FILENO);
    close(to_pipe[0]);
    close(to_pipe[1]);
    close(from_pipe[0]);
    close(from_pipe[1]);
    execl("/bin/sh", "sh", "-c", endpoint.command.c_str(),
          static_cast<char*>(nullptr));
    _exit(127);
  }

  child_pid_ = pid;
  to_child_ = to_pipe[1];
  from_child_ = from_pipe[0];
  close(to_pipe[0]);
  close(from_pipe[1]);

  // Handshake.
  nlohmann::json hello{{"type", "hello"}, {"version", kAdapterProtocolVersion}};
  write_line(hello.dump());
  const std::string line = read_line();
  nlohmann::json ready;
  try {
    ready = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    shutdown();
    throw AdapterProtocolError("adapter: handshake reply is not valid JSON: " +
                               line);
  }
  if (!ready.is_object() || ready.value("type", "") != "ready" ||
      !ready.contains("provides") || !ready["provides"].is_array()) {
    shutdown();
    throw AdapterProtocolError("adapter: unexpected handshake reply: " + line);
  }
  provides_ = ready["provides"].get<std::vector<std::string>>();
  if (!provides_field("probs")) {
    shutdown();
    throw AdapterProtocolError("adapter: endpoint does not provide probs");
  }
}

AdapterClient::~AdapterClient() { shutdown(); }

void AdapterClient::shutdown() {
  if (to_child_ >= 0) {
    close(to_child_);
    to_child_ = -1;
  }
  if (from_child_ >= 0) {
    close(from_child_);
    from_child_ = -1;
  }
  if (child_pid_ > 0) {
    int status = 0;
    // Give the child a moment to exit on closed stdin, then escalate.
    for (int i = 0; i < 50; ++i) {
      if (waitpid(child_pid_, &status, WNOHANG) != 0) {
        child_pid_ = -1;
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    kill(child_pid_, SIGKILL);
    waitpid(child_pid_, &status, 0);
    child_pid_ = -1;
  }
}

bool AdapterClient::provides_field(const std::string& name) const {
  for (const auto& p : provides_) {
    if (p == name) return true;
  }
  return false;
}

void AdapterClient::write_line(const std::string& line) {
  std::string payload = line;
  payload.push_back('\n');
  std::size_t written = 0;
  while (written < payload.size()) {
    const ssize_t n =
        write(to_child_, payload.data() + written, payload.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw AdapterProcessExit("adapter: write failed (process gone?)");
    }
    written += static_cast<std::size_t>(n);
  }
}

std::string AdapterClient::read_line() {
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::milliseconds(timeout_ms_);
  for (;;) {
    const auto newline = buffer_.find('\n');
    if (newline != std::string::npos) {
      std::string line = buffer_.substr(0, newline);
      buffer_.erase(0, newline + 1);
      return line;
    }

    const auto now = std::chrono::steady_clock::now();
    if (now >= deadline) {
      throw AdapterTimeout("adapter: timed out waiting for response");
    }
    const auto remaining =
        std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now);

    pollfd pfd{from_child_, POLLIN, 0};
    const int rc = poll(&pfd, 1, static_cast<int>(remaining.count()));
    if (rc == 0) {
      throw AdapterTimeout("adapter: timed out waiting for response");
    }
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw AdapterError("adapter: poll failed");
    }

    char chunk[4096];
    const ssize_t n = read(from_child_, chunk, sizeof(chunk));
    if (n == 0) {
      throw AdapterProcessExit("adapter: process closed its output");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw AdapterProcessExit("adapter: read failed (process gone?)");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

AdapterResult AdapterClient::predict(const std::string& id,
                                     const Matrix& embeddings) {
  nlohmann::json request;
  request["type"] = "predict";
  request["id"] = id;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < embeddings.cols(); ++j) {
      row.push_back(embeddings(i, j));
    }
    rows.push_back(std::move(row));
  }
  request["embeddings"] = std::move(rows);
  write_line(request.dump());

  const std::string line = read_line();
  nlohmann::json reply;
  try {
    reply = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw AdapterProtocolError("adapter: response is not valid JSON: " + line);
  }
  if (!reply.is_object() || reply.value("type", "") != "result") {
    throw AdapterProtocolError("adapter: unexpected message: " + line);
  }
  if (reply.value("id", "") != id) {
    throw AdapterProtocolError("adapter: response id mismatch");
  }
  AdapterResult result;
  try {
    result.probs = reply.at("probs").get<std::vector<double>>();
    if (reply.contains("attention")) {
      result.attention = reply["attention"].get<std::vector<double>>();
    }
    if (reply.contains("grads")) {
      const auto& g = reply["grads"];
      if (!g.is_array() || g.empty()) {
        throw AdapterProtocolError("adapter: grads must be a 2d array");
      }
      Matrix grads(g.size(), g[0].size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const auto row = g[i].get<std::vector<double>>();
        if (row.size() != grads.cols()) {
          throw AdapterProtocolError("adapter: ragged grads array");
        }
        for (std::size_t j = 0; j < row.size(); ++j) {
          grads(i, j) = row[j];
        }
      }
      result.grads = std::move(grads);
    }
  } catch (const nlohmann::json::exception& e) {
    throw AdapterProtocolError(std::string("adapter: malformed result: ") +
                               e.what());
  }

  if (result.probs.empty()) {
    throw AdapterProtocolError("adapter: empty probability vector");
  }
  double sum = 0.0;
  for (double p : result.probs) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      throw AdapterProtocolError("adapter: probability outside [0,1]");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw AdapterProtocolError(
        "adapter: probabilities do not sum to 1 (got " + std::to_string(sum) +
        ")");
  }
  if (result.attention && result.attention->size() != embeddings.rows()) {
    throw AdapterProtocolError("adapter: attention length != token count");
  }
  if (result.grads && (result.grads->rows() != embeddings.rows() ||
                       result.grads->cols() != embeddings.cols())) {
    throw AdapterProtocolError("adapter: grads shape != embeddings shape");
  }
  return result;
}

}  // namespace faitheval
