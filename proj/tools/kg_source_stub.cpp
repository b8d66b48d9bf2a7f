// Serves the mock knowledge source over the line protocol: one request per
// line on stdin, one response per line on stdout. With --http PORT the same
// documents are answered as POST bodies on /.

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "httplib.h"
#include "kgadapt/kg_builder.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mock knowledge source"};
  std::uint64_t seed = 0;
  int port = 0;
  double error_rate = -1.0;
  app.add_option("--seed", seed, "mock source seed");
  app.add_option("--http", port, "serve HTTP on this port instead of stdio");
  app.add_option("--error-rate", error_rate, "probability of injected errors");
  CLI11_PARSE(app, argc, argv);

  kgadapt::MockSourceOptions options;
  if (error_rate >= 0.0) options.error_rate = error_rate;
  kgadapt::MockKnowledgeSource source(seed, options);

  if (port > 0) {
    httplib::Server server;
    server.Post("/", [&](const httplib::Request& req, httplib::Response& res) {
      res.set_content(kgadapt::protocol::serve(source, req.body), "application/json");
    });
    std::cerr << "listening on 127.0.0.1:" << port << "\n";
    return server.listen("127.0.0.1", port) ? 0 : 1;
  }

  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    std::cout << kgadapt::protocol::serve(source, line) << '\n' << std::flush;
  }
  return 0;
}
