// Serves the built-in classifier over the adapter line protocol, so the
// engine can be pointed at itself (or the protocol exercised end to end).

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "faitheval/attribution.hpp"
#include "faitheval/model.hpp"
#include "faitheval/version.hpp"
#include "json.hpp"

using namespace faitheval;

int main(int argc, char** argv) {
  CLI::App app{"adapter-protocol server for a saved model"};
  std::string model_path;
  app.add_option("--model", model_path, "saved model file")->required();
  CLI11_PARSE(app, argc, argv);

  ModelParams params;
  try {
    params = load_model(model_path);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  std::string line;
  while (std::getline(std::cin, line)) {
    nlohmann::json reply;
    try {
      const auto request = nlohmann::json::parse(line);
      const std::string type = request.value("type", "");
      if (type == "hello") {
        if (request.value("version", -1) != kAdapterProtocolVersion) {
          reply = {{"type", "error"}, {"message", "unsupported version"}};
        } else {
          reply = {{"type", "ready"},
                   {"provides", {"probs", "attention", "grads"}}};
        }
      } else if (type == "predict") {
        const auto& rows = request.at("embeddings");
        Matrix x(rows.size(), rows.empty() ? 0 : rows[0].size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const auto row = rows[i].get<std::vector<double>>();
          for (std::size_t j = 0; j < row.size(); ++j) {
            x(i, j) = row[j];
          }
        }
        const auto trace = forward(x, params);
        const auto grads =
            backward_input_grad(trace, params, trace.predicted);
        const auto attention = attention_fa(trace);

        reply["type"] = "result";
        reply["id"] = request.value("id", "");
        reply["probs"] = trace.probs;
        reply["attention"] = attention.raw;
        nlohmann::json grad_rows = nlohmann::json::array();
        for (std::size_t i = 0; i < grads.wrt_input.rows(); ++i) {
          nlohmann::json row = nlohmann::json::array();
          for (std::size_t j = 0; j < grads.wrt_input.cols(); ++j) {
            row.push_back(grads.wrt_input(i, j));
          }
          grad_rows.push_back(std::move(row));
        }
        reply["grads"] = std::move(grad_rows);
      } else {
        reply = {{"type", "error"}, {"message", "unknown message type"}};
      }
    } catch (const std::exception& e) {
      reply = {{"type", "error"}, {"message", e.what()}};
    }
    std::cout << reply.dump() << "\n" << std::flush;
  }
  return 0;
}
