// protocol.hpp
//
// Wire protocol, version 1. One JSON object per line, over TCP or a child
// process's stdin/stdout.
//
// Requests
//   {"v":1,"op":"score","image_png_b64":[<png>,...],"fg_texts":[...],"bg_texts":[],"role":"classifier"}
//   {"v":1,"op":"activations","image_png_b64":<png>,"fg_texts":[...],"bg_texts":[...],"role":"proposal"}
// Responses
//   {"v":1,"ok":true,"logits":[[...],...]}
//   {"v":1,"ok":true,"scores":[...],"features_b64":..,"grads_b64":..,"attn_b64":..,
//    "shape":{"K":..,"h":..,"w":..,"n_fg":..,"L":..}}
//   {"v":1,"ok":false,"err":"..."}
// Arrays are base64 of little-endian float32, row-major, laid out as in
// CamBundle. Score logits cover fg_texts followed by bg_texts; servers also
// accept "texts" in place of fg_texts. "role" is advisory; servers hosting two encoders use it to pick
// one.

#pragma once

#include <atomic>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "carseg/backend.hpp"

namespace carseg::wire {

inline constexpr int kVersion = 1;

std::string base64_encode(std::span<const uint8_t> bytes);
/// Throws BackendError on characters outside the alphabet or bad padding.
std::vector<uint8_t> base64_decode(std::string_view text);

std::string encode_floats(std::span<const float> values);
std::vector<float> decode_floats(std::string_view text);

nlohmann::json score_request(std::span<const ImageBuf> images, std::span<const std::string> texts);
nlohmann::json activations_request(const ImageBuf& image, std::span<const std::string> fg_texts,
                                   std::span<const std::string> bg_texts);
nlohmann::json score_response(const Eigen::MatrixXd& logits);
nlohmann::json activations_response(const CamBundle& bundle);
nlohmann::json error_response(const std::string& message);

/// Validates version, ok flag and shape; throws BackendError.
Eigen::MatrixXd parse_score_response(const nlohmann::json& reply, size_t images, size_t texts);
CamBundle parse_activations_response(const nlohmann::json& reply, size_t fg_texts, size_t bg_texts);

/// Answers one request line. Malformed input yields an error frame, never an exception.
std::string handle_frame(Backend& backend, std::string_view line);

/// Serves frames from `in` until EOF, one reply line per request line.
void serve_stream(Backend& backend, std::istream& in, std::ostream& out);

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send_line(const std::string& line) = 0;
  /// Next line without the trailing newline. Throws BackendError on EOF.
  virtual std::string recv_line() = 0;
};

std::unique_ptr<Transport> connect_tcp(const std::string& host, int port);
/// Runs `command` through /bin/sh with its stdin/stdout connected to the transport.
std::unique_ptr<Transport> spawn_pipe(const std::string& command);

class RemoteBackend final : public Backend {
 public:
  RemoteBackend(std::unique_ptr<Transport> transport, std::string descriptor);

  BackendKind kind() const override { return BackendKind::Remote; }
  std::string describe() const override { return descriptor_; }
  Eigen::MatrixXd score(std::span<const ImageBuf> images, std::span<const std::string> texts) override;
  CamBundle activations(const ImageBuf& image, std::span<const std::string> fg_texts,
                        std::span<const std::string> bg_texts) override;

 private:
  nlohmann::json roundtrip(const nlohmann::json& request);

  std::unique_ptr<Transport> transport_;
  std::string descriptor_;
  std::mutex mutex_;
};

/// Serves a backend on 127.0.0.1, one thread per connection. Port 0 picks a free port.
class TcpServer {
 public:
  TcpServer(Backend& backend, int port = 0);
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  int port() const { return port_; }
  void stop();

 private:
  void accept_loop();
  void serve_client(int fd);

  Backend& backend_;
  std::mutex backend_mutex_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex clients_mutex_;
  std::vector<int> client_fds_;
  std::vector<std::thread> clients_;
};

}  // namespace carseg::wire
