#include "carseg/protocol.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstring>
#include <istream>
#include <ostream>

#include "carseg/image_io.hpp"

namespace carseg::wire {
namespace {

using nlohmann::json;

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int sextet(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

std::vector<std::string> string_list(const json& frame, const char* key, bool required) {
  if (!frame.contains(key)) {
    if (required) throw BackendError(std::string("missing field '") + key + "'");
    return {};
  }
  const json& v = frame.at(key);
  if (!v.is_array()) throw BackendError(std::string("field '") + key + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw BackendError(std::string("field '") + key + "' must be an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

ImageBuf decode_image(const json& v) {
  if (!v.is_string()) throw BackendError("image_png_b64 entries must be strings");
  const std::vector<uint8_t> png = base64_decode(v.get<std::string>());
  try {
    return decode_png(png);
  } catch (const IoError& e) {
    throw BackendError(std::string("bad image: ") + e.what());
  }
}

void check_reply_header(const json& reply) {
  if (!reply.is_object()) throw BackendError("backend reply is not a JSON object");
  if (reply.contains("v") && reply.at("v") != kVersion)
    throw BackendError("protocol version mismatch: backend speaks v" + reply.at("v").dump());
  if (!reply.contains("ok") || !reply.at("ok").is_boolean()) throw BackendError("backend reply lacks 'ok'");
  if (!reply.at("ok").get<bool>()) {
    const std::string err = reply.contains("err") && reply.at("err").is_string() ? reply.at("err").get<std::string>()
                                                                                  : std::string("unspecified error");
    throw BackendError("backend error: " + err);
  }
  if (!reply.contains("v")) throw BackendError("protocol version mismatch: reply carries no version");
}

int shape_field(const json& shape, const char* key) {
  if (!shape.contains(key) || !shape.at(key).is_number_integer())
    throw BackendError(std::string("reply shape lacks integer '") + key + "'");
  return shape.at(key).get<int>();
}

void write_all(int fd, const char* data, size_t n, bool socket) {
  while (n > 0) {
    const ssize_t k = socket ? ::send(fd, data, n, MSG_NOSIGNAL) : ::write(fd, data, n);
    if (k < 0) {
      if (errno == EINTR) continue;
      throw BackendError(std::string("transport write failed: ") + std::strerror(errno));
    }
    data += k;
    n -= static_cast<size_t>(k);
  }
}

// Buffered line reader over a file descriptor.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}
  bool next(std::string& line) {
    for (;;) {
      const size_t nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return true;
      }
      std::array<char, 65536> chunk;
      const ssize_t k = ::read(fd_, chunk.data(), chunk.size());
      if (k < 0 && errno == EINTR) continue;
      if (k <= 0) return false;
      buffer_.append(chunk.data(), static_cast<size_t>(k));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

class FdTransport final : public Transport {
 public:
  FdTransport(int read_fd, int write_fd, bool socket, pid_t child)
      : read_fd_(read_fd), write_fd_(write_fd), socket_(socket), child_(child), reader_(read_fd) {}
  ~FdTransport() override {
    if (write_fd_ != read_fd_) ::close(write_fd_);
    ::close(read_fd_);
    if (child_ > 0) {
      int status = 0;
      ::waitpid(child_, &status, 0);
    }
  }
  void send_line(const std::string& line) override {
    std::string framed = line;
    framed.push_back('\n');
    write_all(write_fd_, framed.data(), framed.size(), socket_);
  }
  std::string recv_line() override {
    std::string line;
    if (!reader_.next(line)) throw BackendError("backend closed the connection");
    return line;
  }

 private:
  int read_fd_;
  int write_fd_;
  bool socket_;
  pid_t child_;
  LineReader reader_;
};

}  // namespace

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (uint32_t{bytes[i]} << 16) | (uint32_t{bytes[i + 1]} << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    uint32_t v = uint32_t{bytes[i]} << 16;
    if (i + 1 < bytes.size()) v |= uint32_t{bytes[i + 1]} << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw BackendError("base64 length is not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    const bool last = i + 4 == text.size();
    int v[4];
    int pad = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + static_cast<size_t>(j)];
      if (c == '=' && last && j >= 2) {
        v[j] = 0;
        ++pad;
        continue;
      }
      if (pad > 0 || (v[j] = sextet(c)) < 0) throw BackendError("invalid base64 data");
    }
    const uint32_t w = (static_cast<uint32_t>(v[0]) << 18) | (static_cast<uint32_t>(v[1]) << 12) |
                       (static_cast<uint32_t>(v[2]) << 6) | static_cast<uint32_t>(v[3]);
    out.push_back(static_cast<uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<uint8_t>(w));
  }
  return out;
}

std::string encode_floats(std::span<const float> values) {
  std::vector<uint8_t> bytes(values.size() * 4);
  for (size_t i = 0; i < values.size(); ++i) {
    uint32_t u;
    std::memcpy(&u, &values[i], 4);
    for (int b = 0; b < 4; ++b) bytes[4 * i + static_cast<size_t>(b)] = static_cast<uint8_t>(u >> (8 * b));
  }
  return base64_encode(bytes);
}

std::vector<float> decode_floats(std::string_view text) {
  const std::vector<uint8_t> bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw BackendError("float array byte count is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= uint32_t{bytes[4 * i + static_cast<size_t>(b)]} << (8 * b);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

json score_request(std::span<const ImageBuf> images, std::span<const std::string> texts) {
  json imgs = json::array();
  for (const auto& im : images) imgs.push_back(base64_encode(encode_png(im)));
  return {{"v", kVersion}, {"op", "score"}, {"role", "classifier"}, {"image_png_b64", imgs},
          {"fg_texts", std::vector<std::string>(texts.begin(), texts.end())}, {"bg_texts", json::array()}};
}

json activations_request(const ImageBuf& image, std::span<const std::string> fg_texts,
                         std::span<const std::string> bg_texts) {
  return {{"v", kVersion},
          {"op", "activations"},
          {"role", "proposal"},
          {"image_png_b64", base64_encode(encode_png(image))},
          {"fg_texts", std::vector<std::string>(fg_texts.begin(), fg_texts.end())},
          {"bg_texts", std::vector<std::string>(bg_texts.begin(), bg_texts.end())}};
}

json score_response(const Eigen::MatrixXd& logits) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < logits.cols(); ++j) row.push_back(logits(i, j));
    rows.push_back(std::move(row));
  }
  return {{"v", kVersion}, {"ok", true}, {"logits", rows}};
}

json activations_response(const CamBundle& b) {
  return {{"v", kVersion},
          {"ok", true},
          {"scores", b.scores},
          {"features_b64", encode_floats(b.features)},
          {"grads_b64", encode_floats(b.grads)},
          {"attn_b64", encode_floats(b.attention)},
          {"shape", {{"K", b.channels}, {"h", b.height}, {"w", b.width}, {"n_fg", b.num_fg}, {"L", b.attn_layers}}}};
}

json error_response(const std::string& message) { return {{"v", kVersion}, {"ok", false}, {"err", message}}; }

Eigen::MatrixXd parse_score_response(const json& reply, size_t images, size_t texts) {
  check_reply_header(reply);
  if (!reply.contains("logits") || !reply.at("logits").is_array()) throw BackendError("score reply lacks 'logits'");
  const json& rows = reply.at("logits");
  if (rows.size() != images) throw BackendError("score reply has wrong number of rows");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images), static_cast<Eigen::Index>(texts));
  for (size_t i = 0; i < images; ++i) {
    const json& row = rows.at(i);
    if (!row.is_array() || row.size() != texts) throw BackendError("score reply has wrong number of columns");
    for (size_t j = 0; j < texts; ++j) {
      if (!row.at(j).is_number()) throw BackendError("score reply has a non-numeric logit");
      const double v = row.at(j).get<double>();
      if (!std::isfinite(v)) throw BackendError("score reply has a non-finite logit");
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  return out;
}

CamBundle parse_activations_response(const json& reply, size_t fg_texts, size_t bg_texts) {
  check_reply_header(reply);
  for (const char* key : {"scores", "features_b64", "grads_b64", "attn_b64", "shape"})
    if (!reply.contains(key)) throw BackendError(std::string("activations reply lacks '") + key + "'");
  const json& shape = reply.at("shape");
  if (!shape.is_object()) throw BackendError("activations reply shape must be an object");
  CamBundle b;
  b.channels = shape_field(shape, "K");
  b.height = shape_field(shape, "h");
  b.width = shape_field(shape, "w");
  b.num_fg = shape_field(shape, "n_fg");
  b.attn_layers = shape_field(shape, "L");
  if (b.num_fg != static_cast<int>(fg_texts)) throw BackendError("activations reply n_fg does not match request");
  auto floats = [&](const char* key) {
    if (!reply.at(key).is_string()) throw BackendError(std::string("'") + key + "' must be a base64 string");
    return decode_floats(reply.at(key).get<std::string>());
  };
  b.features = floats("features_b64");
  b.grads = floats("grads_b64");
  b.attention = floats("attn_b64");
  const json& scores = reply.at("scores");
  if (!scores.is_array()) throw BackendError("activations reply 'scores' must be an array");
  for (const auto& s : scores) {
    if (!s.is_number()) throw BackendError("activations reply has a non-numeric score");
    b.scores.push_back(s.get<float>());
  }
  b.validate(fg_texts + bg_texts);
  return b;
}

std::string handle_frame(Backend& backend, std::string_view line) {
  json reply;
  try {
    json frame;
    try {
      frame = json::parse(line);
    } catch (const json::parse_error& e) {
      return error_response(std::string("malformed frame: ") + e.what()).dump();
    }
    if (!frame.is_object()) return error_response("malformed frame: expected an object").dump();
    if (!frame.contains("v") || frame.at("v") != kVersion)
      return error_response("unsupported protocol version, expected v1").dump();
    if (!frame.contains("op") || !frame.at("op").is_string()) return error_response("missing 'op'").dump();
    const std::string op = frame.at("op").get<std::string>();
    if (!frame.contains("image_png_b64")) return error_response("missing 'image_png_b64'").dump();
    if (op == "score") {
      const json& imgs = frame.at("image_png_b64");
      std::vector<ImageBuf> images;
      if (imgs.is_array()) {
        for (const auto& v : imgs) images.push_back(decode_image(v));
      } else {
        images.push_back(decode_image(imgs));
      }
      std::vector<std::string> texts = string_list(frame, frame.contains("texts") ? "texts" : "fg_texts", true);
      const std::vector<std::string> bg = string_list(frame, "bg_texts", false);
      texts.insert(texts.end(), bg.begin(), bg.end());
      reply = score_response(backend.score(images, texts));
    } else if (op == "activations") {
      const ImageBuf image = decode_image(frame.at("image_png_b64"));
      const std::vector<std::string> fg = string_list(frame, "fg_texts", true);
      const std::vector<std::string> bg = string_list(frame, "bg_texts", false);
      reply = activations_response(backend.activations(image, fg, bg));
    } else {
      return error_response("unknown op '" + op + "'").dump();
    }
  } catch (const std::exception& e) {
    return error_response(e.what()).dump();
  }
  return reply.dump();
}

void serve_stream(Backend& backend, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out << handle_frame(backend, line) << '\n';
    out.flush();
  }
}

std::unique_ptr<Transport> connect_tcp(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0)
    throw BackendError("cannot resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  int last_errno = 0;
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    last_errno = errno;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0)
    throw BackendError("cannot connect to " + host + ":" + service + ": " + std::strerror(last_errno));
  return std::make_unique<FdTransport>(fd, fd, true, -1);
}

std::unique_ptr<Transport> spawn_pipe(const std::string& command) {
  ::signal(SIGPIPE, SIG_IGN);
  int to_child[2], from_child[2];
  if (::pipe(to_child) != 0) throw BackendError("pipe() failed");
  if (::pipe(from_child) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw BackendError("pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw BackendError("fork() failed");
  if (pid == 0) {
    ::dup2(to_child[0], 0);
    ::dup2(from_child[1], 1);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  return std::make_unique<FdTransport>(from_child[0], to_child[1], false, pid);
}

RemoteBackend::RemoteBackend(std::unique_ptr<Transport> transport, std::string descriptor)
    : transport_(std::move(transport)), descriptor_(std::move(descriptor)) {}

json RemoteBackend::roundtrip(const json& request) {
  std::lock_guard lock(mutex_);
  transport_->send_line(request.dump());
  const std::string line = transport_->recv_line();
  try {
    return json::parse(line);
  } catch (const json::parse_error&) {
    throw BackendError("backend sent a malformed frame");
  }
}

Eigen::MatrixXd RemoteBackend::score(std::span<const ImageBuf> images, std::span<const std::string> texts) {
  require_score_inputs(images, texts);
  return parse_score_response(roundtrip(score_request(images, texts)), images.size(), texts.size());
}

CamBundle RemoteBackend::activations(const ImageBuf& image, std::span<const std::string> fg_texts,
                                     std::span<const std::string> bg_texts) {
  if (fg_texts.empty()) throw InvalidArgument("activations: no foreground texts");
  return parse_activations_response(roundtrip(activations_request(image, fg_texts, bg_texts)), fg_texts.size(),
                                    bg_texts.size());
}

TcpServer::TcpServer(Backend& backend, int port) : backend_(backend) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw BackendError("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
    ::close(listen_fd_);
    throw BackendError(std::string("cannot listen: ") + std::strerror(errno));
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

TcpServer::~TcpServer() { stop(); }

void TcpServer::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(clients_mutex_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : clients_)
    if (t.joinable()) t.join();
}

void TcpServer::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    std::lock_guard lock(clients_mutex_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    client_fds_.push_back(fd);
    clients_.emplace_back([this, fd] { serve_client(fd); });
  }
}

void TcpServer::serve_client(int fd) {
  LineReader reader(fd);
  std::string line;
  try {
    while (reader.next(line)) {
      if (line.empty()) continue;
      std::string reply;
      {
        std::lock_guard lock(backend_mutex_);
        reply = handle_frame(backend_, line);
      }
      reply.push_back('\n');
      write_all(fd, reply.data(), reply.size(), true);
    }
  } catch (const BackendError&) {
  }
  std::lock_guard lock(clients_mutex_);
  std::erase(client_fds_, fd);
  ::close(fd);
}

}  // namespace carseg::wire
