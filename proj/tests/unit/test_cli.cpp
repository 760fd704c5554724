#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "json.hpp"

#include "carseg/image_io.hpp"
#include "carseg/protocol.hpp"
#include "carseg/toy_backend.hpp"
#include "helpers.hpp"

using namespace carseg;
using namespace carseg::test;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome sh(const std::string& cmd) {
  Outcome o;
  FILE* p = popen((cmd + " 2>&1").c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) o.output.append(buf, n);
  const int status = pclose(p);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

Outcome cli(const std::string& args) { return sh(std::string(CARSEG_CLI) + " " + args); }

std::string csv(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& t : v) s += (s.empty() ? "" : ",") + t;
  return s;
}

// Scratch directory holding toy worlds as PNG files plus a manifest.
struct Workspace {
  fs::path dir;
  std::vector<toy::World> worlds;

  explicit Workspace(const std::string& name, std::vector<uint64_t> seeds = {3}) {
    dir = fs::temp_directory_path() / ("carseg_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir / "gt");
    std::ofstream m(dir / "manifest.jsonl");
    for (uint64_t s : seeds) {
      worlds.push_back(toy::make_world(s, {.size = 48}));
      const std::string stem = "w" + std::to_string(s);
      write_png(dir / (stem + ".png"), worlds.back().image);
      write_label_png(dir / "gt" / (stem + "_labels.png"), worlds.back().ground_truth);
      m << nlohmann::json{{"image", stem + ".png"}, {"gt", "gt/" + stem + "_labels.png"}, {"queries", worlds.back().queries}}.dump()
        << "\n";
    }
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string image(size_t i = 0) const { return (dir / ("w" + std::to_string(seed(i)) + ".png")).string(); }
  uint64_t seed(size_t i) const { return worlds[i].lexicon.seed(); }
  std::string backend(size_t i = 0) const { return "toy:world=" + std::to_string(seed(i)) + ",size=48"; }
  std::string queries(size_t i = 0) const { return "\"" + csv(worlds[i].queries) + "\""; }
};

std::map<std::string, std::vector<uint8_t>> snapshot(const fs::path& dir) {
  std::map<std::string, std::vector<uint8_t>> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("run writes the documented outputs") {
    Workspace ws("run");
    const fs::path out = ws.dir / "out";
    const Outcome o = cli("run --image " + ws.image() + " --queries " + ws.queries() + " --backend " + ws.backend() +
                             " --out " + out.string() + " --trace --save-soft --dump-prompts");
    INFO(o.output);
    REQUIRE(o.code == 0);
    CHECK(fs::exists(out / "w3_labels.png"));
    CHECK(fs::exists(out / "w3_overlay.png"));
    CHECK(fs::exists(out / "w3_trace.jsonl"));
    CHECK(fs::exists(out / "w3_prompt_t1_q0.png"));
    const auto result = nlohmann::json::parse(std::ifstream(out / "w3_result.json"));
    const toy::World& w = ws.worlds[0];
    std::set<std::string> surviving;
    for (const auto& q : result.at("surviving")) surviving.insert(q.at("text").get<std::string>());
    CHECK(surviving == std::set<std::string>(w.planted.begin(), w.planted.end()));
    for (const auto& q : result.at("surviving")) CHECK(fs::exists(out / ("w3_soft_" + std::to_string(q.at("index").get<int>()) + ".png")));
    std::ifstream trace(out / "w3_trace.jsonl");
    int lines = 0;
    for (std::string l; std::getline(trace, l);) ++lines;
    CHECK(lines == result.at("steps").get<int>());
    const LabelMap labels = read_label_png(out / "w3_labels.png");
    CHECK(labels.same_shape(w.ground_truth));
  }

  TEST_CASE("identical invocations produce identical bytes") {
    Workspace ws("repro");
    const std::string args = "run --image " + ws.image() + " --queries " + ws.queries() + " --backend " + ws.backend() +
                             " --trace --save-soft --out ";
    REQUIRE(cli(args + (ws.dir / "a").string()).code == 0);
    REQUIRE(cli(args + (ws.dir / "b").string()).code == 0);
    const auto a = snapshot(ws.dir / "a"), b = snapshot(ws.dir / "b");
    CHECK(a.size() >= 5);
    CHECK(a == b);
  }

  TEST_CASE("jobs do not change the outputs") {
    Workspace ws("jobs", {3, 5, 8});
    // One backend serves every entry, so only determinism is checked here.
    const std::string args = "run --manifest " + (ws.dir / "manifest.jsonl").string() + " --backend toy:seed=2 --out ";
    const Outcome one = cli(args + (ws.dir / "j1").string() + " --jobs 1");
    INFO(one.output);
    REQUIRE(one.code == 0);
    REQUIRE(cli(args + (ws.dir / "j3").string() + " --jobs 3").code == 0);
    const auto a = snapshot(ws.dir / "j1"), b = snapshot(ws.dir / "j3");
    CHECK(a.size() == 9);
    CHECK(a == b);
  }

  TEST_CASE("eval reports a perfect score on ground truth") {
    Workspace ws("eval", {3, 5});
    const Outcome o = cli("eval --manifest " + (ws.dir / "manifest.jsonl").string() + " --pred " + (ws.dir / "gt").string() +
                             " --json");
    INFO(o.output);
    REQUIRE(o.code == 0);
    const auto j = nlohmann::json::parse(o.output);
    CHECK(j.at("miou") == 1.0);
    CHECK(j.at("j_mean") == 1.0);
    CHECK(j.at("f_mean") == 1.0);
    CHECK(j.at("images") == 2);
    const Outcome table = cli("eval --manifest " + (ws.dir / "manifest.jsonl").string() + " --pred " + (ws.dir / "gt").string());
    CHECK(table.output.find("100.00") != std::string::npos);
  }

  TEST_CASE("eval of a pipeline run") {
    Workspace ws("evalrun");
    const fs::path out = ws.dir / "out";
    REQUIRE(cli("run --image " + ws.image() + " --queries " + ws.queries() + " --backend " + ws.backend() + " --out " +
                   out.string())
                .code == 0);
    const Outcome o = cli("eval --manifest " + (ws.dir / "manifest.jsonl").string() + " --pred " + out.string() + " --json");
    REQUIRE(o.code == 0);
    CHECK(nlohmann::json::parse(o.output).at("miou").get<double>() >= 0.9);
  }

  TEST_CASE("missing files exit 4 and name the file") {
    Workspace ws("missing");
    fs::remove(ws.dir / "gt" / "w3_labels.png");
    const Outcome o = cli("eval --manifest " + (ws.dir / "manifest.jsonl").string() + " --pred " + (ws.dir / "gt").string());
    CHECK(o.code == 4);
    CHECK(o.output.find("w3_labels.png") != std::string::npos);
    const Outcome img = cli("run --image " + (ws.dir / "nope.png").string() + " --queries cat --backend toy --out " +
                               (ws.dir / "out").string());
    CHECK(img.code == 4);
    CHECK(img.output.find("nope.png") != std::string::npos);
  }

  TEST_CASE("usage and configuration errors exit 2") {
    Workspace ws("usage");
    const Outcome bad = cli("run --bogus");
    CHECK(bad.code == 2);
    CHECK(bad.output.find("--queries") != std::string::npos);
    CHECK(cli("").code == 2);
    CHECK(cli("run --image " + ws.image() + " --queries cat --eta 2 --backend toy --out " + ws.dir.string()).code == 2);
    CHECK(cli("run --image " + ws.image() + " --queries cat --backend toy:grid=1 --out " + ws.dir.string()).code == 2);
    CHECK(cli("run --image " + ws.image() + " --queries cat --prompts sparkle --backend toy --out " + ws.dir.string()).code == 2);
    CHECK(cli("run --image " + ws.image() + " --queries cat --crf --no-crf --backend toy --out " + ws.dir.string()).code == 2);
    std::ofstream(ws.dir / "bad.json") << "{\"eta\": \"high\"}";
    CHECK(cli("run --config " + (ws.dir / "bad.json").string() + " --image " + ws.image() +
                 " --queries cat --backend toy --out " + ws.dir.string())
              .code == 2);
  }

  TEST_CASE("backend selection") {
    Workspace ws("backend");
    wire::TcpServer probe(*make_backend("toy"));
    const int closed = probe.port();
    probe.stop();
    const std::string base = "run --image " + ws.image() + " --queries " + ws.queries() + " --out ";
    const Outcome down = cli(base + (ws.dir / "x").string() + " --backend remote:127.0.0.1:" + std::to_string(closed));
    CHECK(down.code == 3);

    REQUIRE(cli(base + (ws.dir / "local").string() + " --backend " + ws.backend()).code == 0);
    toy::ToyBackend served(ws.worlds[0].lexicon);
    wire::TcpServer server(served);
    const Outcome remote = cli(base + (ws.dir / "remote").string() + " --backend remote:127.0.0.1:" + std::to_string(server.port()));
    INFO(remote.output);
    REQUIRE(remote.code == 0);
    server.stop();
    CHECK(read_file(ws.dir / "local" / "w3_labels.png") == read_file(ws.dir / "remote" / "w3_labels.png"));

    const Outcome env = sh("CAR_BACKEND=" + ws.backend() + " " + CARSEG_CLI + " " + base + (ws.dir / "env").string());
    REQUIRE(env.code == 0);
    CHECK(read_file(ws.dir / "local" / "w3_labels.png") == read_file(ws.dir / "env" / "w3_labels.png"));
    CHECK(sh(std::string("CAR_BACKEND=nonsense ") + CARSEG_CLI + " " + base + (ws.dir / "y").string()).code == 2);
  }

  TEST_CASE("backend check") {
    const Outcome o = cli("backend-check --backend toy");
    CHECK(o.code == 0);
    CHECK(o.output.find("capabilities: {score, activations}") != std::string::npos);
    const Outcome piped = cli(std::string("backend-check --backend \"pipe:") + CARSEG_SIDECAR + "\"");
    CHECK(piped.code == 0);
  }

  TEST_CASE("prompts demo") {
    Workspace ws("demo");
    Grid<uint8_t> mask(48, 48, 0);
    for (int y = 10; y < 20; ++y)
      for (int x = 12; x < 30; ++x) mask(x, y) = 255;
    write_png_gray(ws.dir / "mask.png", mask);
    const Outcome o = cli("prompts-demo --image " + ws.image() + " --mask " + (ws.dir / "mask.png").string() +
                             " --prompts circle,blur --thickness 2 --out " + (ws.dir / "demo").string());
    INFO(o.output);
    REQUIRE(o.code == 0);
    CHECK(fs::exists(ws.dir / "demo" / "w3_circle.png"));
    CHECK(fs::exists(ws.dir / "demo" / "w3_blur.png"));
    CHECK(fs::exists(ws.dir / "demo" / "w3_combined.png"));
    write_png_gray(ws.dir / "empty.png", Grid<uint8_t>(48, 48, 0));
    CHECK(cli("prompts-demo --image " + ws.image() + " --mask " + (ws.dir / "empty.png").string() + " --out " +
                 (ws.dir / "demo").string())
              .code == 2);
  }

  TEST_CASE("proposal directory is used") {
    Workspace ws("sam");
    fs::create_directories(ws.dir / "props" / "w3");
    int k = 0;
    for (const auto& c : ws.worlds[0].scene.concepts) {
      Grid<uint8_t> g(48, 48, 0);
      for (size_t i = 0; i < g.size(); ++i) g[i] = c.mask.at(i) ? 255 : 0;
      write_png_gray(ws.dir / "props" / "w3" / ("p" + std::to_string(k++) + ".png"), g);
    }
    const Outcome o = cli("run --image " + ws.image() + " --queries " + ws.queries() + " --backend " + ws.backend() +
                             " --sam-proposals " + (ws.dir / "props").string() + " --out " + (ws.dir / "out").string());
    INFO(o.output);
    REQUIRE(o.code == 0);
    CHECK(read_label_png(ws.dir / "out" / "w3_labels.png") == ws.worlds[0].ground_truth);
  }
}
