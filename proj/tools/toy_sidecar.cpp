// toy_sidecar: serves the toy backend over the wire protocol.
//
//   toy_sidecar                  frames on stdin/stdout
//   toy_sidecar --port 9090      TCP on 127.0.0.1 (0 picks a port, printed on stdout)
//   toy_sidecar --world 7        lexicon of toy world 7 instead of the hashed one

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>

#include <unistd.h>

#include "CLI11.hpp"

#include "carseg/protocol.hpp"
#include "carseg/toy_backend.hpp"

using namespace carseg;

namespace {
volatile std::sig_atomic_t g_stop = 0;
void on_signal(int) { g_stop = 1; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy backend server"};
  uint64_t seed = 0;
  int grid = 16;
  std::optional<int> port;
  std::optional<uint64_t> world;
  int world_size = 64;
  app.add_option("--seed", seed, "Lexicon seed");
  app.add_option("--grid", grid, "Feature grid size")->check(CLI::Range(2, 64));
  app.add_option("--port", port, "Serve TCP on this port instead of stdio")->check(CLI::Range(0, 65535));
  app.add_option("--world", world, "Use the lexicon of this toy world seed");
  app.add_option("--world-size", world_size, "Image size of that world")->check(CLI::Range(16, 512));
  CLI11_PARSE(app, argc, argv);

  toy::Lexicon lexicon(seed);
  if (world) {
    toy::WorldOptions opt;
    opt.size = world_size;
    lexicon = toy::make_world(*world, opt).lexicon;
  }
  toy::Params params;
  params.grid = grid;
  toy::ToyBackend backend(std::move(lexicon), params);

  if (!port) {
    std::ios::sync_with_stdio(false);
    wire::serve_stream(backend, std::cin, std::cout);
    return 0;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  wire::TcpServer server(backend, *port);
  std::printf("%d\n", server.port());
  std::fflush(stdout);
  while (!g_stop) pause();
  server.stop();
  return 0;
}
