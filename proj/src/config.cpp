#include "sppo/config.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <map>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace sppo {

namespace {

[[noreturn]] void fail_at(const std::string& source, int line, const std::string& what) {
  if (line > 0) throw ConfigError(source + ":" + std::to_string(line) + ": " + what);
  throw ConfigError(source + ": " + what);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool is_bare_key(std::string_view k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted && c == '\\') {
      ++i;
    } else if (c == '"') {
      quoted = !quoted;
    } else if (c == '#' && !quoted) {
      return line.substr(0, i);
    }
  }
  return line;
}

struct ValueParser {
  std::string_view text;
  std::size_t pos = 0;
  const std::string& source;
  int line;

  [[noreturn]] void fail(const std::string& what) const { fail_at(source, line, what); }

  void skip_space() {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
  }

  ConfigValue::Scalar scalar() {
    skip_space();
    if (pos >= text.size()) fail("missing value");
    if (text[pos] == '"') return quoted();
    const auto end = text.find_first_of(",] \t", pos);
    const auto token = text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos);
    pos += token.size();
    if (token == "true") return true;
    if (token == "false") return false;
    if (token.starts_with("0x")) {
      std::uint64_t v = 0;
      const auto [p, ec] = std::from_chars(token.data() + 2, token.data() + token.size(), v, 16);
      if (ec != std::errc() || p != token.data() + token.size() || v > INT64_MAX)
        fail("invalid hex integer '" + std::string(token) + "'");
      return static_cast<std::int64_t>(v);
    }
    const bool real = token.find_first_of(".eE") != std::string_view::npos || token == "inf" || token == "nan";
    const char* first = token.data() + (token.starts_with('+') ? 1 : 0);
    const char* last = token.data() + token.size();
    if (!real) {
      std::int64_t v = 0;
      const auto [p, ec] = std::from_chars(first, last, v);
      if (ec == std::errc() && p == last && first != last) return v;
    } else {
      double v = 0;
      const auto [p, ec] = std::from_chars(first, last, v);
      if (ec == std::errc() && p == last && std::isfinite(v)) return v;
    }
    fail("invalid value '" + std::string(token) + "'");
  }

  std::string quoted() {
    std::string out;
    for (++pos; pos < text.size(); ++pos) {
      const char c = text[pos];
      if (c == '"') {
        ++pos;
        return out;
      }
      if (c == '\\') {
        if (++pos >= text.size()) break;
        switch (text[pos]) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(std::string("unsupported escape '\\") + text[pos] + "'");
        }
      } else {
        out += c;
      }
    }
    fail("unterminated string");
  }

  ConfigValue value() {
    ConfigValue v;
    v.line = line;
    skip_space();
    if (pos < text.size() && text[pos] == '[') {
      ++pos;
      std::vector<ConfigValue::Scalar> items;
      for (;;) {
        skip_space();
        if (pos < text.size() && text[pos] == ']') {
          ++pos;
          break;
        }
        if (pos < text.size() && text[pos] == '[') fail("nested arrays are not supported");
        items.push_back(scalar());
        skip_space();
        if (pos < text.size() && text[pos] == ',') {
          ++pos;
        } else if (pos < text.size() && text[pos] == ']') {
          ++pos;
          break;
        } else {
          fail("expected ',' or ']' in array");
        }
      }
      v.data = std::move(items);
    } else {
      v.data = scalar();
    }
    skip_space();
    if (pos != text.size()) fail("unexpected trailing text '" + std::string(text.substr(pos)) + "'");
    return v;
  }
};

// Typed access with file:line context.
struct Reader {
  const std::string& source;
  const ConfigEntry& e;

  [[noreturn]] void fail(const std::string& what) const { fail_at(source, e.value.line, e.qualified() + ": " + what); }

  const ConfigValue::Scalar& scalar() const {
    if (const auto* s = std::get_if<ConfigValue::Scalar>(&e.value.data)) return *s;
    fail("expected a single value, got an array");
  }
  const std::vector<ConfigValue::Scalar>& array() const {
    if (const auto* a = std::get_if<std::vector<ConfigValue::Scalar>>(&e.value.data)) return *a;
    fail("expected an array");
  }

  static std::optional<std::int64_t> int_of(const ConfigValue::Scalar& s) {
    if (const auto* i = std::get_if<std::int64_t>(&s)) return *i;
    return std::nullopt;
  }

  std::int64_t integer(std::int64_t lo = INT64_MIN) const {
    const auto v = int_of(scalar());
    if (!v) fail("expected an integer");
    if (*v < lo) fail("must be >= " + std::to_string(lo));
    return *v;
  }
  int small_int(int lo) const {
    const auto v = integer(lo);
    if (v > INT32_MAX) fail("value too large");
    return static_cast<int>(v);
  }
  double real() const {
    const auto& s = scalar();
    if (const auto* d = std::get_if<double>(&s)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&s)) return static_cast<double>(*i);
    fail("expected a number");
  }
  bool boolean() const {
    if (const auto* b = std::get_if<bool>(&scalar())) return *b;
    fail("expected true or false");
  }
  std::string string() const {
    if (const auto* s = std::get_if<std::string>(&scalar())) return *s;
    fail("expected a string");
  }
  std::vector<std::string> strings() const {
    std::vector<std::string> out;
    for (const auto& s : array()) {
      const auto* str = std::get_if<std::string>(&s);
      if (!str) fail("expected an array of strings");
      out.push_back(*str);
    }
    return out;
  }
  std::vector<std::int64_t> integers(std::int64_t lo) const {
    std::vector<std::int64_t> out;
    for (const auto& s : array()) {
      const auto v = int_of(s);
      if (!v) fail("expected an array of integers");
      if (*v < lo) fail("entries must be >= " + std::to_string(lo));
      out.push_back(*v);
    }
    return out;
  }
  std::vector<Eigen::Index> layers() const {
    std::vector<Eigen::Index> out;
    for (auto v : integers(1)) out.push_back(static_cast<Eigen::Index>(v));
    if (out.empty()) fail("at least one hidden layer is required");
    return out;
  }

  template <typename T>
  [[noreturn]] void bad_choice(const std::string& got, std::initializer_list<T> options) const {
    std::string list;
    for (auto o : options) list += (list.empty() ? "" : ", ") + std::string(to_string(o));
    fail("unknown value '" + got + "' (expected one of " + list + ")");
  }
  EnvId env() const {
    const auto name = string();
    if (auto id = parse_env_id(name)) return *id;
    bad_choice(name, {EnvId::PrecisionCartpole, EnvId::MountainCar, EnvId::Pendulum, EnvId::LunarLanderLite});
  }
  Algorithm algorithm() const {
    const auto name = string();
    if (auto a = parse_algorithm(name)) return *a;
    bad_choice(name, {Algorithm::Sppo, Algorithm::PpoGae, Algorithm::PpoBce, Algorithm::Grpo, Algorithm::Rloo,
                      Algorithm::Remax});
  }
};

using Setter = std::function<void(ExperimentConfig&, const Reader&)>;

// Keys shared by the two PPO-driven stages.
void add_optimizer_keys(std::map<std::string, Setter>& keys, const std::string& section,
                        StageConfig ExperimentConfig::*stage) {
  auto add = [&](const std::string& key, std::function<void(StageConfig&, const Reader&)> f) {
    keys[section + "." + key] = [stage, f](ExperimentConfig& c, const Reader& r) { f(c.*stage, r); };
  };
  add("batch_size", [](StageConfig& s, const Reader& r) { s.batch_size = r.small_int(1); });
  add("total_updates", [](StageConfig& s, const Reader& r) { s.total_updates = r.small_int(0); });
  add("policy_lr", [](StageConfig& s, const Reader& r) { s.policy_lr = r.real(); });
  add("critic_lr", [](StageConfig& s, const Reader& r) { s.critic_lr = r.real(); });
  add("epochs", [](StageConfig& s, const Reader& r) { s.epochs = r.small_int(1); });
  add("minibatches", [](StageConfig& s, const Reader& r) { s.minibatches = r.small_int(1); });
  add("clip_epsilon", [](StageConfig& s, const Reader& r) { s.clip_epsilon = r.real(); });
  add("gamma", [](StageConfig& s, const Reader& r) { s.gamma = r.real(); });
  add("lambda", [](StageConfig& s, const Reader& r) { s.lambda = r.real(); });
  add("entropy_coef", [](StageConfig& s, const Reader& r) { s.entropy_coef = r.real(); });
  add("max_grad_norm", [](StageConfig& s, const Reader& r) { s.max_grad_norm = r.real(); });
  add("eval_every", [](StageConfig& s, const Reader& r) { s.eval_every = r.small_int(1); });
  add("hidden", [](StageConfig& s, const Reader& r) { s.hidden = r.layers(); });
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> k;
    k["preset"] = [](ExperimentConfig& c, const Reader& r) { c.preset = r.string(); };
    k["seed"] = [](ExperimentConfig& c, const Reader& r) { c.seed = static_cast<std::uint64_t>(r.integer(0)); };
    k["output_dir"] = [](ExperimentConfig& c, const Reader& r) { c.output_dir = r.string(); };
    k["eval_episodes"] = [](ExperimentConfig& c, const Reader& r) { c.eval_episodes = r.small_int(1); };
    k["eval_seed"] = [](ExperimentConfig& c, const Reader& r) { c.eval_seed = static_cast<std::uint64_t>(r.integer(0)); };
    k["workers"] = [](ExperimentConfig& c, const Reader& r) { c.workers = r.small_int(1); };
    k["stages"] = [](ExperimentConfig& c, const Reader& r) {
      const std::array<Stage, 3> chain{Stage::Expert, Stage::Sft, Stage::Rl};
      std::vector<Stage> stages;
      for (const auto& name : r.strings()) {
        const auto s = parse_stage(name);
        if (!s) r.fail("unknown stage '" + name + "' (expected expert, sft or rl)");
        if (!stages.empty() && *s <= stages.back()) r.fail("stage chain must run expert before sft before rl");
        if (*s != chain[stages.size()])
          r.fail("stage '" + name + "' requires '" + std::string(to_string(chain[stages.size()])) +
                 "' earlier in the chain");
        stages.push_back(*s);
      }
      if (stages.empty()) r.fail("at least one stage is required");
      c.stages = std::move(stages);
    };
    k["env.id"] = [](ExperimentConfig& c, const Reader& r) { c.env.id = r.env(); };
    k["env.horizon"] = [](ExperimentConfig& c, const Reader& r) { c.env.horizon = r.small_int(1); };

    add_optimizer_keys(k, "expert", &ExperimentConfig::expert);
    k["expert.target_success"] = [](ExperimentConfig& c, const Reader& r) { c.expert.target_success = r.real(); };

    k["sft.episodes"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_episodes = r.small_int(1); };
    k["sft.max_epochs"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_max_epochs = r.small_int(1); };
    k["sft.patience"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_patience = r.small_int(1); };
    k["sft.minibatch"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_minibatch = r.small_int(1); };
    k["sft.lr"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_lr = r.real(); };
    k["sft.holdout"] = [](ExperimentConfig& c, const Reader& r) { c.sft.sft_holdout = r.real(); };
    k["sft.hidden"] = [](ExperimentConfig& c, const Reader& r) { c.sft.hidden = r.layers(); };

    add_optimizer_keys(k, "rl", &ExperimentConfig::rl);
    k["rl.algorithm"] = [](ExperimentConfig& c, const Reader& r) { c.rl.algorithm = r.algorithm(); };
    k["rl.group_size"] = [](ExperimentConfig& c, const Reader& r) { c.rl.group_size = r.small_int(1); };

    k["diagnostics.enabled"] = [](ExperimentConfig& c, const Reader& r) { c.diagnostics.enabled = r.boolean(); };
    k["diagnostics.calibration_contexts"] = [](ExperimentConfig& c, const Reader& r) {
      c.diagnostics.calibration_contexts = r.small_int(2);
    };
    k["diagnostics.calibration_k"] = [](ExperimentConfig& c, const Reader& r) {
      c.diagnostics.calibration_k = r.small_int(1);
    };
    k["diagnostics.trace_episodes"] = [](ExperimentConfig& c, const Reader& r) {
      c.diagnostics.trace_episodes = r.small_int(0);
    };
    return k;
  }();
  return table;
}

const std::map<std::string, std::string>& presets() {
  static const std::map<std::string, std::string> table{
      {"paper-cartpole",
       "[env]\nid = \"precision_cartpole\"\nhorizon = 200\n"
       "[expert]\nbatch_size = 64\ntotal_updates = 100\ntarget_success = 0.3\n"
       "[rl]\nbatch_size = 64\nclip_epsilon = 0.2\ntotal_updates = 150\npolicy_lr = 0.001\n"},
      {"paper-mountain-car",
       "[env]\nid = \"mountain_car\"\nhorizon = 1000\n"
       "[expert]\nbatch_size = 8\ntotal_updates = 100\ntarget_success = 0.5\n"
       "[rl]\nbatch_size = 8\nclip_epsilon = 0.2\ntotal_updates = 20\n"},
      {"paper-pendulum",
       "[env]\nid = \"pendulum\"\nhorizon = 1000\n"
       "[expert]\nbatch_size = 16\ntotal_updates = 300\ntarget_success = 0.5\npolicy_lr = 0.001\n"
       "[rl]\nbatch_size = 16\nclip_epsilon = 0.2\ntotal_updates = 20\n"},
      {"paper-lunar-lander",
       "[env]\nid = \"lunar_lander_lite\"\nhorizon = 1000\n"
       "[expert]\nbatch_size = 16\ntotal_updates = 100\ntarget_success = 0.5\n"
       "[rl]\nbatch_size = 16\nclip_epsilon = 0.2\ntotal_updates = 20\n"},
  };
  return table;
}

const std::vector<std::string> kSections{"env", "expert", "sft", "rl", "diagnostics"};

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

std::string format_layers(const std::vector<Eigen::Index>& hidden) {
  std::string out = "[";
  for (std::size_t i = 0; i < hidden.size(); ++i) out += (i ? ", " : "") + std::to_string(hidden[i]);
  return out + "]";
}

void write_optimizer_keys(std::ostream& out, const StageConfig& s) {
  out << "batch_size = " << s.batch_size << "\n"
      << "total_updates = " << s.total_updates << "\n"
      << "policy_lr = " << format_real(s.policy_lr) << "\n"
      << "critic_lr = " << format_real(s.critic_lr) << "\n"
      << "epochs = " << s.epochs << "\n"
      << "minibatches = " << s.minibatches << "\n"
      << "clip_epsilon = " << format_real(s.clip_epsilon) << "\n"
      << "gamma = " << format_real(s.gamma) << "\n"
      << "lambda = " << format_real(s.lambda) << "\n"
      << "entropy_coef = " << format_real(s.entropy_coef) << "\n"
      << "max_grad_norm = " << format_real(s.max_grad_norm) << "\n"
      << "eval_every = " << s.eval_every << "\n"
      << "hidden = " << format_layers(s.hidden) << "\n";
}

// SHA-1 (FIPS 180-4).
std::string sha1_hex(const std::string& message) {
  std::uint32_t h[5] = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
  std::string data = message;
  const std::uint64_t bit_len = static_cast<std::uint64_t>(message.size()) * 8;
  data += static_cast<char>(0x80);
  while (data.size() % 64 != 56) data += '\0';
  for (int i = 7; i >= 0; --i) data += static_cast<char>((bit_len >> (8 * i)) & 0xff);

  for (std::size_t chunk = 0; chunk < data.size(); chunk += 64) {
    std::uint32_t w[80];
    for (int i = 0; i < 16; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(data.data() + chunk + 4 * i);
      w[i] = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
    }
    for (int i = 16; i < 80; ++i) w[i] = std::rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t t = std::rotl(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = std::rotl(b, 30);
      b = a;
      a = t;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
  }
  char hex[41];
  for (int i = 0; i < 5; ++i) std::snprintf(hex + 8 * i, 9, "%08x", h[i]);
  return std::string(hex, 40);
}

}  // namespace

const ConfigEntry* ConfigDocument::find(const std::string& section, const std::string& key) const {
  for (const auto& e : entries)
    if (e.section == section && e.key == key) return &e;
  return nullptr;
}

void ConfigDocument::set(const std::string& section, const std::string& key, ConfigValue::Scalar value) {
  for (auto& e : entries) {
    if (e.section == section && e.key == key) {
      e.value.data = std::move(value);
      return;
    }
  }
  ConfigEntry e{section, key, {}};
  e.value.data = std::move(value);
  entries.push_back(std::move(e));
}

ConfigDocument parse_document(const std::string& text, const std::string& source) {
  ConfigDocument doc;
  doc.source = source;
  std::istringstream in(text);
  std::string raw, section;
  std::vector<std::string> seen_sections;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.starts_with("[[")) fail_at(source, line_no, "arrays of tables are not supported");
      if (line.back() != ']') fail_at(source, line_no, "malformed section header");
      const auto name = trim(std::string_view(line).substr(1, line.size() - 2));
      if (name.find('.') != std::string::npos)
        fail_at(source, line_no, "section '" + name + "' nests beyond two levels");
      if (!is_bare_key(name)) fail_at(source, line_no, "invalid section name '" + name + "'");
      if (std::find(seen_sections.begin(), seen_sections.end(), name) != seen_sections.end())
        fail_at(source, line_no, "duplicate section [" + name + "]");
      seen_sections.push_back(name);
      section = name;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail_at(source, line_no, "expected 'key = value'");
    const auto key = trim(std::string_view(line).substr(0, eq));
    if (key.find('.') != std::string::npos) fail_at(source, line_no, "dotted key '" + key + "' nests beyond two levels");
    if (!is_bare_key(key)) fail_at(source, line_no, "invalid key '" + key + "'");
    if (doc.find(section, key)) {
      const auto q = section.empty() ? key : section + "." + key;
      fail_at(source, line_no, "duplicate key '" + q + "'");
    }
    const auto rhs = std::string_view(line).substr(eq + 1);
    ValueParser vp{rhs, 0, source, line_no};
    doc.entries.push_back({section, key, vp.value()});
  }
  return doc;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [name, text] : presets()) names.push_back(name);
  return names;
}

std::string preset_for(EnvId env) {
  switch (env) {
    case EnvId::PrecisionCartpole:
      return "paper-cartpole";
    case EnvId::MountainCar:
      return "paper-mountain-car";
    case EnvId::Pendulum:
      return "paper-pendulum";
    case EnvId::LunarLanderLite:
      return "paper-lunar-lander";
  }
  throw ConfigError("no preset for env");
}

std::string preset_text(const std::string& name) {
  const auto it = presets().find(name);
  if (it == presets().end()) {
    std::string list;
    for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (expected one of " + list + ")");
  }
  return it->second;
}

ExperimentConfig resolve_config(const ConfigDocument& doc) {
  const auto& src = doc.source;
  for (const auto& e : doc.entries) {
    if (!e.section.empty() && std::find(kSections.begin(), kSections.end(), e.section) == kSections.end())
      fail_at(src, e.value.line, "unknown section [" + e.section + "]");
    if (!setters().contains(e.qualified())) fail_at(src, e.value.line, "unknown key '" + e.qualified() + "'");
  }

  ExperimentConfig scratch;
  std::optional<ConfigDocument> preset_doc;
  if (const auto* p = doc.find("", "preset")) {
    Reader r{src, *p};
    const auto name = r.string();
    try {
      preset_doc = parse_document(preset_text(name), "preset '" + name + "'");
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
  }

  std::optional<EnvId> env;
  if (preset_doc) env = Reader{preset_doc->source, *preset_doc->find("env", "id")}.env();
  if (const auto* e = doc.find("env", "id")) {
    const auto id = Reader{src, *e}.env();
    if (env && *env != id)
      Reader{src, *e}.fail("conflicts with preset env '" + std::string(to_string(*env)) + "'");
    env = id;
  }
  if (!env) fail_at(src, 0, "missing required key 'env.id' (or a preset)");
  if (!doc.find("", "seed")) fail_at(src, 0, "missing required key 'seed'");

  Algorithm algorithm = Algorithm::Sppo;
  if (const auto* a = doc.find("rl", "algorithm")) algorithm = Reader{src, *a}.algorithm();

  ExperimentConfig c;
  c.env = make_env_spec(*env);
  c.expert = make_stage_config(Stage::Expert, *env);
  c.sft = make_stage_config(Stage::Sft, *env);
  c.rl = make_stage_config(Stage::Rl, *env, algorithm);

  if (preset_doc)
    for (const auto& e : preset_doc->entries) setters().at(e.qualified())(c, Reader{preset_doc->source, e});
  for (const auto& e : doc.entries) setters().at(e.qualified())(c, Reader{src, e});

  for (auto* s : {&c.expert, &c.sft, &c.rl}) {
    s->eval_episodes = c.eval_episodes;
    s->eval_seed = c.eval_seed;
    s->workers = c.workers;
  }

  auto check = [&](const char* section, const StageConfig& s, RewardMode mode) {
    auto spec = c.env;
    spec.reward_mode = mode;
    try {
      validate(s, spec);
    } catch (const ConfigError& e) {
      fail_at(src, 0, std::string("[") + section + "] " + e.what());
    }
  };
  check("expert", c.expert, RewardMode::Dense);
  check("sft", c.sft, RewardMode::Dense);
  check("rl", c.rl, RewardMode::SparseOutcome);
  if (c.expert.target_success < 0 || c.expert.target_success > 1)
    fail_at(src, 0, "[expert] target_success must be in [0, 1]");
  return c;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  return resolve_config(parse_document(text, source));
}

std::string read_text_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  return parse_config(read_text_file(file), file.string());
}

void write_config(std::ostream& out, const ExperimentConfig& c) {
  out << "seed = " << c.seed << "\n";
  if (c.preset) out << "preset = " << quote(*c.preset) << "\n";
  out << "output_dir = " << quote(c.output_dir.string()) << "\n"
      << "eval_episodes = " << c.eval_episodes << "\n"
      << "eval_seed = " << c.eval_seed << "\n"
      << "workers = " << c.workers << "\n"
      << "stages = [";
  for (std::size_t i = 0; i < c.stages.size(); ++i) out << (i ? ", " : "") << quote(std::string(to_string(c.stages[i])));
  out << "]\n\n[env]\nid = " << quote(std::string(to_string(c.env.id))) << "\nhorizon = " << c.env.horizon << "\n";

  out << "\n[expert]\n";
  write_optimizer_keys(out, c.expert);
  out << "target_success = " << format_real(c.expert.target_success) << "\n";

  out << "\n[sft]\n"
      << "episodes = " << c.sft.sft_episodes << "\n"
      << "max_epochs = " << c.sft.sft_max_epochs << "\n"
      << "patience = " << c.sft.sft_patience << "\n"
      << "minibatch = " << c.sft.sft_minibatch << "\n"
      << "lr = " << format_real(c.sft.sft_lr) << "\n"
      << "holdout = " << format_real(c.sft.sft_holdout) << "\n"
      << "hidden = " << format_layers(c.sft.hidden) << "\n";

  out << "\n[rl]\nalgorithm = " << quote(std::string(to_string(c.rl.algorithm))) << "\n"
      << "group_size = " << c.rl.group_size << "\n";
  write_optimizer_keys(out, c.rl);

  out << "\n[diagnostics]\n"
      << "enabled = " << (c.diagnostics.enabled ? "true" : "false") << "\n"
      << "calibration_contexts = " << c.diagnostics.calibration_contexts << "\n"
      << "calibration_k = " << c.diagnostics.calibration_k << "\n"
      << "trace_episodes = " << c.diagnostics.trace_episodes << "\n";
}

std::string config_text(const ExperimentConfig& config) {
  std::ostringstream out;
  write_config(out, config);
  return out.str();
}

std::string git_blob_hash(const std::string& content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob += '\0';
  blob += content;
  return sha1_hex(blob);
}

BenchmarkConfig parse_benchmark(const std::string& text, const std::string& source) {
  const auto doc = parse_document(text, source);
  BenchmarkConfig b;
  b.overrides.source = source;
  bool has_matrix = false;
  for (const auto& e : doc.entries) {
    const Reader r{source, e};
    const auto q = e.qualified();
    if (q == "output_dir") {
      b.output_dir = r.string();
    } else if (q == "workers") {
      b.workers = r.small_int(1);
    } else if (q == "matrix.envs") {
      for (const auto& name : r.strings()) {
        const auto id = parse_env_id(name);
        if (!id) r.fail("unknown env '" + name + "'");
        b.envs.push_back(*id);
      }
    } else if (q == "matrix.algorithms") {
      for (const auto& name : r.strings()) {
        const auto a = parse_algorithm(name);
        if (!a) r.fail("unknown algorithm '" + name + "'");
        b.algorithms.push_back(*a);
      }
    } else if (q == "matrix.seeds") {
      for (auto s : r.integers(0)) b.seeds.push_back(static_cast<std::uint64_t>(s));
    } else if (e.section == "matrix") {
      fail_at(source, e.value.line, "unknown key '" + q + "'");
    } else if (q == "eval_episodes" || q == "eval_seed" || q == "stages" ||
               (!e.section.empty() && e.section != "env" && q != "rl.algorithm")) {
      b.overrides.entries.push_back(e);
    } else {
      fail_at(source, e.value.line, "unknown key '" + q + "'");
    }
    has_matrix = has_matrix || e.section == "matrix";
  }
  if (!has_matrix) fail_at(source, 0, "missing [matrix] section");
  if (b.envs.empty()) fail_at(source, 0, "matrix.envs must list at least one env");
  if (b.algorithms.empty()) fail_at(source, 0, "matrix.algorithms must list at least one algorithm");
  if (b.seeds.empty()) fail_at(source, 0, "matrix.seeds must list at least one seed");
  // Surface override errors before any cell runs.
  for (auto env : b.envs)
    for (auto alg : b.algorithms) cell_config(b, env, alg, b.seeds.front());
  return b;
}

BenchmarkConfig load_benchmark(const std::filesystem::path& file) {
  return parse_benchmark(read_text_file(file), file.string());
}

ExperimentConfig cell_config(const BenchmarkConfig& bench, EnvId env, Algorithm algorithm, std::uint64_t seed) {
  auto doc = bench.overrides;
  doc.set("", "preset", preset_for(env));
  doc.set("", "seed", static_cast<std::int64_t>(seed));
  doc.set("", "workers", static_cast<std::int64_t>(bench.workers));
  doc.set("rl", "algorithm", std::string(to_string(algorithm)));
  const auto dir = bench.output_dir / std::string(to_string(env)) / std::string(to_string(algorithm)) /
                   ("seed_" + std::to_string(seed));
  doc.set("", "output_dir", dir.string());
  return resolve_config(doc);
}

}  // namespace sppo
