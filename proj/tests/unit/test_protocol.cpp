#include <cstring>
#include <random>
#include <sstream>

#include "doctest.h"

#include "carseg/image_io.hpp"
#include "carseg/protocol.hpp"
#include "carseg/toy_backend.hpp"
#include "helpers.hpp"

using namespace carseg;
using namespace carseg::test;
using nlohmann::json;

namespace {

// In-memory transport answering from a fixed script.
class ScriptedTransport final : public wire::Transport {
 public:
  explicit ScriptedTransport(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  void send_line(const std::string& line) override { sent.push_back(line); }
  std::string recv_line() override {
    if (next_ >= replies_.size()) throw BackendError("backend closed the connection");
    return replies_[next_++];
  }
  std::vector<std::string> sent;

 private:
  std::vector<std::string> replies_;
  size_t next_ = 0;
};

// Loopback transport that answers through handle_frame.
class LoopbackTransport final : public wire::Transport {
 public:
  explicit LoopbackTransport(Backend& b) : backend_(b) {}
  void send_line(const std::string& line) override { pending_ = wire::handle_frame(backend_, line); }
  std::string recv_line() override { return pending_; }

 private:
  Backend& backend_;
  std::string pending_;
};

void require_same(const CamBundle& a, const CamBundle& b) {
  CHECK(a.channels == b.channels);
  CHECK(a.height == b.height);
  CHECK(a.width == b.width);
  CHECK(a.num_fg == b.num_fg);
  CHECK(a.attn_layers == b.attn_layers);
  CHECK(a.features == b.features);
  CHECK(a.grads == b.grads);
  CHECK(a.attention == b.attention);
  CHECK(a.scores == b.scores);
}

}  // namespace

TEST_SUITE("protocol") {
  TEST_CASE("base64 test vectors") {
    auto enc = [](std::string s) { return wire::base64_encode(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size())); };
    CHECK(enc("") == "");
    CHECK(enc("f") == "Zg==");
    CHECK(enc("fo") == "Zm8=");
    CHECK(enc("foo") == "Zm9v");
    CHECK(enc("foob") == "Zm9vYg==");
    CHECK(enc("fooba") == "Zm9vYmE=");
    CHECK(enc("foobar") == "Zm9vYmFy");
    const auto d = wire::base64_decode("Zm9vYmE=");
    CHECK(std::string(d.begin(), d.end()) == "fooba");
    CHECK_THROWS_AS(wire::base64_decode("Zm9"), BackendError);
    CHECK_THROWS_AS(wire::base64_decode("Zm9*"), BackendError);
    CHECK_THROWS_AS(wire::base64_decode("Z=9v"), BackendError);
  }

  TEST_CASE("float arrays round trip losslessly") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> u(-1e6f, 1e6f);
    std::uniform_int_distribution<uint32_t> bits;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<float> v(static_cast<size_t>(trial * 7));
      for (size_t i = 0; i < v.size(); ++i) {
        if (i % 3 == 0) {
          uint32_t b = bits(rng);
          if ((b & 0x7f800000u) == 0x7f800000u) b &= 0xbfffffffu;  // keep finite
          std::memcpy(&v[i], &b, 4);
        } else {
          v[i] = u(rng);
        }
      }
      const std::vector<float> back = wire::decode_floats(wire::encode_floats(v));
      REQUIRE(back.size() == v.size());
      CHECK(std::memcmp(back.data(), v.data(), v.size() * 4) == 0);
    }
    const float one = 1.0f;
    CHECK(wire::encode_floats(std::span(&one, 1)) == "AACAPw==");
    CHECK_THROWS_AS(wire::decode_floats("AACA"), BackendError);
  }

  TEST_CASE("request layout") {
    const ImageBuf img(4, 3, Rgb{1, 2, 3});
    const json s = wire::score_request(std::span(&img, 1), strings({"cat"}));
    CHECK(s.at("v") == 1);
    CHECK(s.at("op") == "score");
    CHECK(s.at("image_png_b64").is_array());
    CHECK(s.at("fg_texts") == json::array({"cat"}));
    const json a = wire::activations_request(img, strings({"cat"}), strings({"sky"}));
    CHECK(a.at("op") == "activations");
    CHECK(a.at("bg_texts") == json::array({"sky"}));
    CHECK(decode_png(wire::base64_decode(a.at("image_png_b64").get<std::string>())) == img);
  }

  TEST_CASE("malformed frames yield error replies") {
    toy::ToyBackend b(toy::Lexicon(0));
    auto reply = [&](const std::string& line) { return json::parse(wire::handle_frame(b, line)); };
    for (const char* bad : {"not json", "[1,2]", "{\"v\":2,\"op\":\"score\"}", "{\"v\":1}",
                            "{\"v\":1,\"op\":\"score\",\"fg_texts\":[\"a\"]}",
                            "{\"v\":1,\"op\":\"dance\",\"image_png_b64\":[]}",
                            "{\"v\":1,\"op\":\"score\",\"image_png_b64\":[\"@@@@\"],\"fg_texts\":[\"a\"]}",
                            "{\"v\":1,\"op\":\"score\",\"image_png_b64\":[],\"fg_texts\":[\"a\"]}"}) {
      const json r = reply(bad);
      CHECK(r.at("ok") == false);
      CHECK(r.at("err").is_string());
    }
  }

  TEST_CASE("serve_stream answers every line in order") {
    const toy::World w = toy::make_world(2, {.size = 32});
    toy::ToyBackend b(w.lexicon);
    std::stringstream in, out;
    in << wire::score_request(std::span(&w.image, 1), w.queries).dump() << "\n";
    in << "garbage\n";
    in << wire::activations_request(w.image, w.queries, strings({"sky"})).dump() << "\n";
    wire::serve_stream(b, in, out);
    std::string l1, l2, l3, extra;
    std::getline(out, l1);
    std::getline(out, l2);
    std::getline(out, l3);
    CHECK_FALSE(std::getline(out, extra));
    const Eigen::MatrixXd got = wire::parse_score_response(json::parse(l1), 1, w.queries.size());
    const Eigen::MatrixXd want = b.score(std::span(&w.image, 1), w.queries);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(json::parse(l2).at("ok") == false);
    const CamBundle cb = wire::parse_activations_response(json::parse(l3), w.queries.size(), 1);
    CHECK_NOTHROW(cb.validate(w.queries.size() + 1));
  }

  TEST_CASE("remote backend equals the local one through the codec") {
    const toy::World w = toy::make_world(4, {.size = 32});
    toy::ToyBackend local(w.lexicon);
    wire::RemoteBackend remote(std::make_unique<LoopbackTransport>(local), "loopback");
    const CamBundle a = local.activations(w.image, w.queries, strings({"sky", "road"}));
    const CamBundle b = remote.activations(w.image, w.queries, strings({"sky", "road"}));
    require_same(a, b);
    const std::vector<ImageBuf> imgs{w.image, w.image};
    CHECK(remote.score(imgs, w.queries).isApprox(local.score(imgs, w.queries), 1e-12));
  }

  TEST_CASE("client rejects bad replies") {
    const ImageBuf img(4, 4);
    auto remote_with = [](std::string reply) {
      return wire::RemoteBackend(std::make_unique<ScriptedTransport>(std::vector<std::string>{std::move(reply)}), "s");
    };
    const auto texts = strings({"a", "b"});
    {
      auto r = remote_with(R"({"v":2,"ok":true,"logits":[[1,2]]})");
      CHECK_THROWS_WITH_AS(r.score(std::span(&img, 1), texts), doctest::Contains("version"), BackendError);
    }
    {
      auto r = remote_with(R"({"v":1,"ok":true,"logits":[[1,2,3]]})");
      CHECK_THROWS_AS(r.score(std::span(&img, 1), texts), BackendError);
    }
    {
      auto r = remote_with(R"({"v":1,"ok":false,"err":"boom"})");
      CHECK_THROWS_WITH_AS(r.score(std::span(&img, 1), texts), doctest::Contains("boom"), BackendError);
    }
    {
      auto r = remote_with("{{{");
      CHECK_THROWS_AS(r.score(std::span(&img, 1), texts), BackendError);
    }
    {
      auto r = remote_with(R"({"v":1,"ok":true,"scores":[0.5,0.5],"features_b64":"","grads_b64":"","attn_b64":"",)"
                           R"("shape":{"K":1,"h":1,"w":1,"n_fg":2,"L":1}})");
      CHECK_THROWS_AS(r.activations(img, texts, {}), BackendError);
    }
    wire::RemoteBackend closed(std::make_unique<ScriptedTransport>(std::vector<std::string>{}), "s");
    CHECK_THROWS_AS(closed.score(std::span(&img, 1), texts), BackendError);
  }

  TEST_CASE("tcp server round trip") {
    const toy::World w = toy::make_world(6, {.size = 32});
    toy::ToyBackend local(w.lexicon);
    wire::TcpServer server(local);
    REQUIRE(server.port() > 0);
    auto remote = make_backend("remote:127.0.0.1:" + std::to_string(server.port()));
    CHECK(remote->kind() == BackendKind::Remote);
    require_same(remote->activations(w.image, w.queries, strings({"sky"})),
                 local.activations(w.image, w.queries, strings({"sky"})));
    auto second = make_backend("remote:127.0.0.1:" + std::to_string(server.port()));
    CHECK(second->score(std::span(&w.image, 1), w.queries).isApprox(local.score(std::span(&w.image, 1), w.queries)));
    server.stop();
  }

  TEST_CASE("unreachable remote is a backend error") {
    wire::TcpServer probe(*make_backend("toy"));
    const int port = probe.port();
    probe.stop();
    CHECK_THROWS_AS(make_backend("remote:127.0.0.1:" + std::to_string(port)), BackendError);
  }

  TEST_CASE("pipe transport to the sidecar") {
    const toy::World w = toy::make_world(9, {.size = 32});
    auto piped = make_backend(std::string("pipe:") + CARSEG_SIDECAR + " --world 9 --world-size 32");
    toy::ToyBackend local(w.lexicon);
    require_same(piped->activations(w.image, w.queries, {}), local.activations(w.image, w.queries, {}));
    auto dead = make_backend("pipe:exit 0");
    CHECK_THROWS_AS(dead->score(std::span(&w.image, 1), w.queries), BackendError);
  }
}
