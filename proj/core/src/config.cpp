#include "metx/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace metx {

namespace {

std::string fmt_float(float v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

long long parse_ll(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
  return x;
}

float parse_float(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  float x = 0;
  try {
    x = std::stof(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: bad bool for " + key + ": '" + v + "'");
}

// Ordered field table; serialization order and the canonical key set.
const std::vector<std::pair<std::string, Field>>& field_table() {
  static const std::vector<std::pair<std::string, Field>> table = {
#define METX_INT_FIELD(name)                                                  \
  {#name,                                                                     \
   Field{[](const RunConfig& c) { return std::to_string(c.name); },           \
         [](RunConfig& c, const std::string& v) {                             \
           c.name = static_cast<int>(parse_ll(#name, v));                     \
         }}}
#define METX_FLOAT_FIELD(name)                                                \
  {#name, Field{[](const RunConfig& c) { return fmt_float(c.name); },         \
                [](RunConfig& c, const std::string& v) {                      \
                  c.name = parse_float(#name, v);                             \
                }}}
#define METX_BOOL_FIELD(name)                                                 \
  {#name, Field{[](const RunConfig& c) { return c.name ? "true" : "false"; }, \
                [](RunConfig& c, const std::string& v) {                      \
                  c.name = parse_bool(#name, v);                              \
                }}}
      {"seed", Field{[](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) {
                       c.seed = static_cast<std::uint64_t>(parse_ll("seed", v));
                     }}},
      METX_INT_FIELD(epochs),
      METX_INT_FIELD(batch_size),
      METX_FLOAT_FIELD(learning_rate),
      METX_FLOAT_FIELD(lambda),
      METX_INT_FIELD(num_expert),
      METX_INT_FIELD(dim),
      METX_INT_FIELD(heads),
      METX_INT_FIELD(vit_layers),
      METX_INT_FIELD(patch),
      METX_INT_FIELD(image_size),
      METX_INT_FIELD(channels),
      METX_INT_FIELD(dim_bilinear),
      METX_INT_FIELD(dim_mid),
      METX_INT_FIELD(enc_layers),
      METX_INT_FIELD(dec_layers),
      METX_INT_FIELD(t_max),
      METX_INT_FIELD(dataset_size),
      METX_BOOL_FIELD(use_bilinear_encoder),
      METX_BOOL_FIELD(use_expert_tokens),
      METX_BOOL_FIELD(use_orthogonal_loss),
      METX_BOOL_FIELD(use_expert_voting),
      METX_BOOL_FIELD(ce_token_normalize),
      {"out_dir", Field{[](const RunConfig& c) { return c.out_dir; },
                        [](RunConfig& c, const std::string& v) { c.out_dir = v; }}},
#undef METX_INT_FIELD
#undef METX_FLOAT_FIELD
#undef METX_BOOL_FIELD
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (num_expert < 1) fail("num_expert must be >= 1");
  if (dim < 1 || heads < 1 || dim % heads != 0) fail("dim must be divisible by heads");
  if (vit_layers < 0) fail("vit_layers must be >= 0");
  if (patch < 1 || image_size < 1 || image_size % patch != 0) {
    fail("image_size must be divisible by patch");
  }
  if (channels < 1) fail("channels must be >= 1");
  if (dim_bilinear < 1 || dim_mid < 1) fail("bilinear dims must be >= 1");
  if (enc_layers < 1) fail("enc_layers must be >= 1");
  if (dec_layers < 1) fail("dec_layers must be >= 1");
  if (t_max < 2) fail("t_max must be >= 2");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (dataset_size < 1) fail("dataset_size must be >= 1");
  if (!(learning_rate > 0.0f)) fail("learning_rate must be positive");
  if (lambda < 0.0f) fail("lambda must be >= 0");
  if (use_expert_voting && num_expert <= 1) {
    fail("use_expert_voting requires num_expert > 1");
  }
  if (!use_expert_tokens && num_expert != 1) {
    fail("use_expert_tokens = false requires num_expert = 1");
  }
}

std::string RunConfig::to_string() const {
  std::ostringstream os;
  for (const auto& [key, field] : field_table()) {
    os << key << " = " << field.get(*this) << '\n';
  }
  return os.str();
}

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig config;
  std::map<std::string, int> seen;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: malformed line '" + line + "'");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    bool matched = false;
    for (const auto& [name, field] : field_table()) {
      if (name == key) {
        field.set(config, value);
        matched = true;
        break;
      }
    }
    if (!matched) throw std::invalid_argument("config: unknown key '" + key + "'");
    if (++seen[key] > 1) {
      throw std::invalid_argument("config: duplicate key '" + key + "'");
    }
  }
  config.validate();
  return config;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return from_string(os.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("config: cannot write " + path);
  os << to_string();
}

RunConfig RunConfig::paper_preset() {
  RunConfig config;
  config.learning_rate = 1e-4f;
  return config;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.to_string() == b.to_string();
}

}  // namespace metx
