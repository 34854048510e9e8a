#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace sacn {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct RunConfig {
  std::string data_dataset = "synthetic-simple";
  std::string data_dir = "data";
  std::size_t data_n = 400;
  std::size_t input_channels = 1;
  std::size_t input_height = 16;
  std::size_t input_width = 16;
  std::string model_mode = "sacn";  // sacn | baseline
  std::size_t conv_channels = 64;
  std::size_t primary_channels = 64;
  std::size_t primary_dim = 8;
  std::size_t primary_stride = 1;
  std::size_t primary_padding = 0;
  std::size_t class_dim = 16;
  std::size_t classes = 2;
  std::size_t routing_iters = 1;
  std::size_t attention_softmax_axis = 1;
  bool attention_spectral_norm = true;
  std::size_t decoder_hidden1 = 512;
  std::size_t decoder_hidden2 = 1024;
  std::string decoder_select = "longest";  // longest | coupling
  double margin_m_plus = 0.9;
  double margin_m_minus = 0.1;
  double margin_lambda = 0.5;
  double loss_xi = 0.0005;
  double init_variance = 0.15;
  std::string optimizer = "adam";  // adam | sgd
  double lr = 1e-3;
  std::size_t batch = 64;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: epochs decide
  std::uint64_t seed = 42;
};

namespace detail {

// One ordered key table serves parsing, serialization, and the docs.
template <typename C, typename F>
void visit_config(C& c, F&& f) {
  f("data.dataset", c.data_dataset);
  f("data.dir", c.data_dir);
  f("data.n", c.data_n);
  f("input.channels", c.input_channels);
  f("input.height", c.input_height);
  f("input.width", c.input_width);
  f("model.mode", c.model_mode);
  f("model.conv_channels", c.conv_channels);
  f("caps.primary_channels", c.primary_channels);
  f("caps.primary_dim", c.primary_dim);
  f("caps.primary_stride", c.primary_stride);
  f("caps.primary_padding", c.primary_padding);
  f("caps.class_dim", c.class_dim);
  f("model.classes", c.classes);
  f("caps.routing_iters", c.routing_iters);
  f("attention.softmax_axis", c.attention_softmax_axis);
  f("attention.spectral_norm", c.attention_spectral_norm);
  f("decoder.hidden1", c.decoder_hidden1);
  f("decoder.hidden2", c.decoder_hidden2);
  f("decoder.select", c.decoder_select);
  f("margin.m_plus", c.margin_m_plus);
  f("margin.m_minus", c.margin_m_minus);
  f("margin.lambda", c.margin_lambda);
  f("loss.xi", c.loss_xi);
  f("init.variance", c.init_variance);
  f("train.optimizer", c.optimizer);
  f("train.lr", c.lr);
  f("train.batch", c.batch);
  f("train.epochs", c.epochs);
  f("train.max_steps", c.max_steps);
  f("train.seed", c.seed);
}

inline std::string fmt_double(double v) {
  for (int p = 1; p <= 17; ++p) {
    std::ostringstream os;
    os << std::setprecision(p) << v;
    if (std::stod(os.str()) == v) return os.str();
  }
  return std::to_string(v);
}

template <typename V>
std::string fmt_value(const V& v) {
  if constexpr (std::is_same_v<V, std::string>) return v;
  else if constexpr (std::is_same_v<V, bool>) return v ? "true" : "false";
  else if constexpr (std::is_floating_point_v<V>) return fmt_double(v);
  else return std::to_string(v);
}

template <typename V>
void parse_value(V& field, const std::string& text, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, std::string>) {
      field = text;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (text == "true" || text == "1") field = true;
      else if (text == "false" || text == "0") field = false;
      else throw std::invalid_argument("not a bool");
    } else if constexpr (std::is_floating_point_v<V>) {
      std::size_t used = 0;
      field = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing junk");
    } else {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(text, &used);
      if (used != text.size() || text[0] == '-') throw std::invalid_argument("trailing junk");
      field = static_cast<V>(v);
    }
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + text + "' for config key '" + key + "'");
  }
}

}  // namespace detail

inline void config_set(RunConfig& c, const std::string& key, const std::string& value) {
  bool found = false;
  detail::visit_config(c, [&](const char* k, auto& field) {
    if (found || key != k) return;
    found = true;
    detail::parse_value(field, value, key);
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  detail::visit_config(c, [&](const char* k, const auto& field) {
    os << k << "=" << detail::fmt_value(field) << "\n";
  });
  return os.str();
}

// key=value lines; '#' starts a comment, blank lines ignored.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back())))
      line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start])))
      ++start;
    if (start == line.size()) continue;
    const std::size_t eq = line.find('=', start);
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    config_set(c, line.substr(start, eq - start), line.substr(eq + 1));
  }
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  RunConfig c;
  apply_config_text(c, buf.str());
  return c;
}

inline RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "synthetic-simple") {
    c.data_dataset = "synthetic-simple";
    c.init_variance = 0.01;
  } else if (name == "synthetic-complex") {
    c.data_dataset = "synthetic-complex";
    c.init_variance = 0.01;
    c.epochs = 40;
  } else if (name == "medical") {
    c.data_dataset = "medical";
    c.conv_channels = 512;
    c.primary_channels = 64;
    c.lr = 1e-3;
    c.batch = 64;
    c.epochs = 30;
    c.init_variance = 0.15;
  } else if (name == "mnist") {
    c.data_dataset = "mnist";
    c.input_height = 28;
    c.input_width = 28;
    c.classes = 10;
    c.conv_channels = 256;
    c.primary_channels = 256;
    c.lr = 2e-4;
    c.batch = 64;
    c.epochs = 60;
    c.init_variance = 0.01;
  } else if (name == "mnist-small") {
    c.data_dataset = "mnist";
    c.input_height = 28;
    c.input_width = 28;
    c.classes = 10;
    c.conv_channels = 32;
    c.primary_channels = 32;
    c.decoder_hidden1 = 256;
    c.decoder_hidden2 = 512;
    c.lr = 1e-3;
    c.batch = 64;
    c.epochs = 10;
    c.init_variance = 0.01;
    c.data_n = 5000;
  } else if (name == "cifar10") {
    c.data_dataset = "cifar10";
    c.input_channels = 3;
    c.input_height = 32;
    c.input_width = 32;
    c.classes = 10;
    c.conv_channels = 256;
    c.primary_channels = 256;
    c.lr = 2e-4;
    c.batch = 64;
    c.epochs = 60;
    c.init_variance = 0.01;
  } else if (name == "svhn") {
    c.data_dataset = "svhn";
    c.input_channels = 3;
    c.input_height = 32;
    c.input_width = 32;
    c.classes = 10;
    c.conv_channels = 256;
    c.primary_channels = 256;
    c.lr = 2e-4;
    c.batch = 32;
    c.epochs = 60;
    c.init_variance = 0.01;
  } else if (name == "miniature") {
    c.data_dataset = "synthetic-simple";
    c.input_height = 8;
    c.input_width = 8;
    c.conv_channels = 8;
    c.primary_channels = 8;
    c.primary_dim = 4;
    c.primary_stride = 1;
    c.primary_padding = 1;
    c.class_dim = 4;
    c.decoder_hidden1 = 16;
    c.decoder_hidden2 = 16;
    c.batch = 4;
    c.data_n = 32;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return c;
}

inline void validate_config(const RunConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  need(c.model_mode == "sacn" || c.model_mode == "baseline",
       "model.mode must be sacn or baseline, got '" + c.model_mode + "'");
  need(c.input_channels > 0 && c.input_height > 0 && c.input_width > 0,
       "input extents must be positive");
  need(c.conv_channels > 0, "model.conv_channels must be positive");
  need(c.primary_dim > 0 && c.primary_channels % c.primary_dim == 0,
       "caps.primary_channels must be a multiple of caps.primary_dim");
  need(c.primary_stride > 0, "caps.primary_stride must be positive");
  need(c.class_dim > 0, "caps.class_dim must be positive");
  need(c.classes >= 2, "model.classes must be at least 2");
  need(c.routing_iters >= 1, "caps.routing_iters must be at least 1");
  need(c.attention_softmax_axis == 1 || c.attention_softmax_axis == 2,
       "attention.softmax_axis must be 1 or 2");
  need(c.decoder_hidden1 > 0 && c.decoder_hidden2 > 0,
       "decoder hidden sizes must be positive");
  need(c.decoder_select == "longest" || c.decoder_select == "coupling",
       "decoder.select must be longest or coupling");
  need(0.0 < c.margin_m_minus && c.margin_m_minus < c.margin_m_plus &&
           c.margin_m_plus < 1.0,
       "margin thresholds need 0 < m_minus < m_plus < 1");
  need(c.margin_lambda > 0.0, "margin.lambda must be positive");
  need(c.loss_xi > 0.0, "loss.xi must be positive");
  need(c.init_variance > 0.0, "init.variance must be positive");
  need(c.optimizer == "adam" || c.optimizer == "sgd",
       "train.optimizer must be adam or sgd");
  need(c.lr >= 0.0, "train.lr cannot be negative");
  need(c.batch > 0, "train.batch must be positive");
}

}  // namespace sacn
