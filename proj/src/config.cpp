#include "carseg/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <variant>

#include "carseg/background.hpp"

namespace carseg {
namespace {

struct Value;
using List = std::vector<Value>;

// A parsed right-hand side. Words are unquoted tokens that are not numbers
// or booleans.
struct Value {
  enum class Kind { Number, Bool, String, List } kind = Kind::String;
  double number = 0.0;
  bool boolean = false;
  std::string text;
  List items;
};

class LineParser {
 public:
  LineParser(std::string_view s, int line) : s_(s), line_(line) {}

  Value parse_value() {
    skip_ws();
    if (at_end()) fail("missing value");
    const char c = s_[pos_];
    if (c == '[') return parse_list();
    if (c == '"') return parse_string();
    return parse_word();
  }

  void expect_end() {
    skip_ws();
    if (!at_end() && s_[pos_] != '#') fail("unexpected trailing characters");
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + msg);
  }
  bool at_end() const { return pos_ >= s_.size(); }
  void skip_ws() {
    while (!at_end() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  Value parse_list() {
    Value v;
    v.kind = Value::Kind::List;
    ++pos_;
    skip_ws();
    if (!at_end() && s_[pos_] == ']') {
      ++pos_;
      return v;
    }
    for (;;) {
      v.items.push_back(parse_value());
      skip_ws();
      if (at_end()) fail("unterminated list");
      if (s_[pos_] == ',') {
        ++pos_;
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return v;
      }
      fail("expected ',' or ']' in list");
    }
  }

  Value parse_string() {
    Value v;
    v.kind = Value::Kind::String;
    ++pos_;
    while (!at_end() && s_[pos_] != '"') {
      if (s_[pos_] == '\\') {
        ++pos_;
        if (at_end()) break;
      }
      v.text.push_back(s_[pos_++]);
    }
    if (at_end()) fail("unterminated string");
    ++pos_;
    return v;
  }

  Value parse_word() {
    const size_t start = pos_;
    while (!at_end() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != '#' && s_[pos_] != ' ' &&
           s_[pos_] != '\t')
      ++pos_;
    const std::string_view word = s_.substr(start, pos_ - start);
    if (word.empty()) fail("empty value");
    Value v;
    if (word == "true" || word == "false") {
      v.kind = Value::Kind::Bool;
      v.boolean = word == "true";
      return v;
    }
    double d = 0.0;
    auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), d);
    if (ec == std::errc() && ptr == word.data() + word.size()) {
      v.kind = Value::Kind::Number;
      v.number = d;
      v.text = std::string(word);
      return v;
    }
    v.kind = Value::Kind::String;
    v.text = std::string(word);
    return v;
  }

  std::string_view s_;
  size_t pos_ = 0;
  int line_;
};

class Assigner {
 public:
  Assigner(PipelineConfig& cfg, int line) : cfg_(cfg), line_(line) {}

  void assign(const std::string& section, const std::string& key, const Value& v) {
    const std::string full = section.empty() ? key : section + "." + key;
    if (full == "eta") cfg_.eta = number(v);
    else if (full == "theta") cfg_.theta = number(v);
    else if (full == "lambda") cfg_.lambda = number(v);
    else if (full == "phi_iom") cfg_.phi_iom = number(v);
    else if (full == "phi_iou") cfg_.phi_iou = number(v);
    else if (full == "prompt_types") {
      cfg_.prompt.types.clear();
      for (const auto& s : strings(v)) {
        auto t = parse_prompt_type(s);
        if (!t) fail("unknown prompt type '" + s + "'");
        cfg_.prompt.types.push_back(*t);
      }
    } else if (full == "caa_iters") cfg_.caa_iters = integer(v);
    else if (full == "sinkhorn_iters") cfg_.sinkhorn_iters = integer(v);
    else if (full == "sinkhorn_tol") cfg_.sinkhorn_tol = number(v);
    else if (full == "last_attn_layers") cfg_.last_attn_layers = integer(v);
    else if (full == "bg_set") cfg_.bg_queries = background_queries(parse_bg_set(string(v)));
    else if (full == "bg_queries") cfg_.bg_queries = strings(v);
    else if (full == "mutual_background") cfg_.mutual_background = boolean(v);
    else if (full == "stuff_queries") cfg_.stuff_queries = strings(v);
    else if (full == "max_steps") cfg_.max_steps = integer(v);
    else if (full == "prompt.color") {
      if (v.kind != Value::Kind::List || v.items.size() != 3) fail("color must be [r, g, b]");
      const int r = integer(v.items[0]), g = integer(v.items[1]), b = integer(v.items[2]);
      for (int c : {r, g, b})
        if (c < 0 || c > 255) fail("color components must be in 0..255");
      cfg_.prompt.color = {static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)};
    } else if (full == "prompt.thickness") cfg_.prompt.thickness = integer(v);
    else if (full == "prompt.blur_kernel") cfg_.prompt.blur_kernel = integer(v);
    else if (full == "prompt.blur_sigma") cfg_.prompt.blur_sigma = number(v);
    else if (full == "crf.enabled") cfg_.crf_enabled = boolean(v);
    else if (full == "crf.gauss_sxy") cfg_.crf.gauss_sxy = number(v);
    else if (full == "crf.gauss_w") cfg_.crf.gauss_w = number(v);
    else if (full == "crf.bilat_sxy") cfg_.crf.bilat_sxy = number(v);
    else if (full == "crf.bilat_srgb") cfg_.crf.bilat_srgb = number(v);
    else if (full == "crf.bilat_w") cfg_.crf.bilat_w = number(v);
    else if (full == "crf.iterations") cfg_.crf.iterations = integer(v);
    else if (full == "crf.exact_max_pixels") cfg_.crf.exact_max_pixels = integer(v);
    else fail("unknown key '" + full + "'");
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + msg);
  }
  double number(const Value& v) const {
    if (v.kind != Value::Kind::Number) fail("expected a number");
    return v.number;
  }
  int integer(const Value& v) const {
    const double d = number(v);
    if (d != static_cast<double>(static_cast<int>(d))) fail("expected an integer");
    return static_cast<int>(d);
  }
  bool boolean(const Value& v) const {
    if (v.kind != Value::Kind::Bool) fail("expected true or false");
    return v.boolean;
  }
  std::string string(const Value& v) const {
    if (v.kind == Value::Kind::List || v.kind == Value::Kind::Bool) fail("expected a string");
    return v.text;
  }
  std::vector<std::string> strings(const Value& v) const {
    if (v.kind != Value::Kind::List) fail("expected a list");
    std::vector<std::string> out;
    for (const auto& item : v.items) out.push_back(string(item));
    return out;
  }

  PipelineConfig& cfg_;
  int line_;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string quoted_list(const std::vector<std::string>& items) {
  std::string out = "[";
  for (size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += quote(items[i]);
  }
  return out + "]";
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

PipelineConfig parse_config(std::string_view text, PipelineConfig base) {
  PipelineConfig cfg = std::move(base);
  std::string section;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (close == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(std::string_view(line).substr(1, close - 1));
      if (section != "prompt" && section != "crf")
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": missing key");
    LineParser parser(std::string_view(line).substr(eq + 1), line_no);
    const Value v = parser.parse_value();
    parser.expect_end();
    Assigner(cfg, line_no).assign(section, key, v);
  }
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const PipelineConfig& cfg) {
  std::ostringstream o;
  std::vector<std::string> prompt_names;
  for (auto t : cfg.prompt.types) prompt_names.push_back(to_string(t));
  o << "eta = " << num(cfg.eta) << "\n"
    << "theta = " << num(cfg.theta) << "\n"
    << "lambda = " << num(cfg.lambda) << "\n"
    << "phi_iom = " << num(cfg.phi_iom) << "\n"
    << "phi_iou = " << num(cfg.phi_iou) << "\n"
    << "prompt_types = " << quoted_list(prompt_names) << "\n"
    << "caa_iters = " << cfg.caa_iters << "\n"
    << "sinkhorn_iters = " << cfg.sinkhorn_iters << "\n"
    << "sinkhorn_tol = " << num(cfg.sinkhorn_tol) << "\n"
    << "last_attn_layers = " << cfg.last_attn_layers << "\n"
    << "bg_queries = " << quoted_list(cfg.bg_queries) << "\n"
    << "mutual_background = " << (cfg.mutual_background ? "true" : "false") << "\n"
    << "stuff_queries = " << quoted_list(cfg.stuff_queries) << "\n"
    << "max_steps = " << cfg.max_steps << "\n"
    << "\n[prompt]\n"
    << "color = [" << int(cfg.prompt.color.r) << ", " << int(cfg.prompt.color.g) << ", "
    << int(cfg.prompt.color.b) << "]\n"
    << "thickness = " << cfg.prompt.thickness << "\n"
    << "blur_kernel = " << cfg.prompt.blur_kernel << "\n"
    << "blur_sigma = " << num(cfg.prompt.blur_sigma) << "\n"
    << "\n[crf]\n"
    << "enabled = " << (cfg.crf_enabled ? "true" : "false") << "\n"
    << "gauss_sxy = " << num(cfg.crf.gauss_sxy) << "\n"
    << "gauss_w = " << num(cfg.crf.gauss_w) << "\n"
    << "bilat_sxy = " << num(cfg.crf.bilat_sxy) << "\n"
    << "bilat_srgb = " << num(cfg.crf.bilat_srgb) << "\n"
    << "bilat_w = " << num(cfg.crf.bilat_w) << "\n"
    << "iterations = " << cfg.crf.iterations << "\n"
    << "exact_max_pixels = " << cfg.crf.exact_max_pixels << "\n";
  return o.str();
}

std::string config_fingerprint(const PipelineConfig& cfg) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : format_config(cfg)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace carseg
