#include "vitfl/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "vitfl/error.hpp"

namespace vitfl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    if constexpr (std::is_same_v<T, std::string>) out += v[i];
    else out += std::to_string(v[i]);
  }
  return out;
}

// Key/value store that hands out typed values and remembers what was used.
class Entries {
 public:
  Entries(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError("", origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError("", origin + ":" + std::to_string(lineno) + ": empty key");
      if (values_.count(key)) throw ConfigError(key, "duplicate key");
      values_[key] = trim(t.substr(eq + 1));
    }
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    std::string v = it->second;
    values_.erase(it);
    return v;
  }

  void str(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }

  void u64(const std::string& key, std::uint64_t& out) {
    if (auto v = take(key)) out = parse_u64(key, *v);
  }

  void size(const std::string& key, std::size_t& out) {
    if (auto v = take(key)) out = static_cast<std::size_t>(parse_u64(key, *v));
  }

  void real(const std::string& key, double& out) {
    if (auto v = take(key)) {
      errno = 0;
      char* end = nullptr;
      const double d = std::strtod(v->c_str(), &end);
      if (v->empty() || *end != '\0' || errno == ERANGE || !std::isfinite(d))
        throw ConfigError(key, "expected a real number, got '" + *v + "'");
      out = d;
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (*v == "true") out = true;
      else if (*v == "false") out = false;
      else throw ConfigError(key, "expected true or false, got '" + *v + "'");
    }
  }

  void strings(const std::string& key, std::vector<std::string>& out) {
    if (auto v = take(key)) out = split_list(*v);
  }

  void sizes(const std::string& key, std::vector<std::size_t>& out) {
    if (auto v = take(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
    }
  }

  void reject_prefix(const std::string& prefix, const std::string& why) {
    for (const auto& [k, v] : values_)
      if (k.rfind(prefix, 0) == 0) throw ConfigError(k, why);
  }

  void finish() const {
    if (!values_.empty()) throw ConfigError(values_.begin()->first, "unknown key");
  }

 private:
  static std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
    errno = 0;
    const unsigned long long x = std::strtoull(v.c_str(), nullptr, 10);
    if (errno == ERANGE) throw ConfigError(key, "integer out of range");
    return x;
  }

  std::map<std::string, std::string> values_;
};

void set_model_input(ExperimentConfig& c) {
  if (c.dataset.kind == DatasetKind::Cifar10) {
    c.model.channels = 3;
    c.model.height = c.model.width = 32;
    c.model.num_classes = kCifarClasses;
  } else {
    c.model.channels = c.dataset.synthetic.channels;
    c.model.height = c.dataset.synthetic.height;
    c.model.width = c.dataset.synthetic.width;
    c.model.num_classes = c.dataset.synthetic.num_classes;
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (d.kind == DatasetKind::Cifar10) {
    if (d.train_paths.empty()) throw ConfigError("dataset.train_paths", "required for cifar10");
    if (d.test_paths.empty()) throw ConfigError("dataset.test_paths", "required for cifar10");
  } else {
    if (d.synthetic.num_classes < 2) throw ConfigError("dataset.synthetic.num_classes", "must be at least 2");
    if (d.synthetic.per_class == 0) throw ConfigError("dataset.synthetic.per_class", "must be positive");
    if (d.synthetic.channels == 0 || d.synthetic.height == 0 || d.synthetic.width == 0)
      throw ConfigError("dataset.synthetic.channels", "image dimensions must be positive");
    if (!(d.synthetic.noise >= 0)) throw ConfigError("dataset.synthetic.noise", "must be non-negative");
    if (d.validation_size % d.synthetic.num_classes != 0)
      throw ConfigError("dataset.validation_size", "must be a multiple of the number of classes");
  }
  if (d.validation_size == 0) throw ConfigError("dataset.validation_size", "must be positive");

  partition.validate(model.num_classes);
  try {
    model.validate();
  } catch (const ShapeError& e) {
    throw ConfigError("model", e.what());
  }
  fl.validate();
  if (fl.strategy == Strategy::Moon) moon.validate();
  if (fl.strategy == Strategy::FedAla) ala.validate();

  if (analysis.probe_per_class == 0) throw ConfigError("analysis.probe_per_class", "must be positive");
  if (analysis.probes == 0) throw ConfigError("analysis.probes", "must be positive");
  for (std::size_t e : analysis.snapshot_epochs)
    if (e < 1 || e > fl.rounds)
      throw ConfigError("analysis.snapshot_epochs",
                        "epoch " + std::to_string(e) + " is outside [1, " + std::to_string(fl.rounds) + "]");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  Entries in(text, origin);
  ExperimentConfig c;

  in.u64("seed", c.seed);
  in.str("output_dir", c.output_dir);
  in.boolean("record_wall_time", c.record_wall_time);
  in.size("checkpoint_every", c.checkpoint_every);

  auto& d = c.dataset;
  if (auto kind = in.take("dataset.kind")) {
    if (*kind == "synthetic") d.kind = DatasetKind::Synthetic;
    else if (*kind == "cifar10") d.kind = DatasetKind::Cifar10;
    else throw ConfigError("dataset.kind", "expected synthetic or cifar10, got '" + *kind + "'");
  }
  in.strings("dataset.train_paths", d.train_paths);
  in.strings("dataset.test_paths", d.test_paths);
  in.size("dataset.validation_size", d.validation_size);
  in.size("dataset.train_limit", d.train_limit);
  d.synthetic.seed = c.seed;
  if (d.kind == DatasetKind::Cifar10) {
    in.reject_prefix("dataset.synthetic.", "only valid when dataset.kind = synthetic");
  } else {
    if (!d.train_paths.empty() || !d.test_paths.empty())
      throw ConfigError("dataset.train_paths", "only valid when dataset.kind = cifar10");
    in.size("dataset.synthetic.num_classes", d.synthetic.num_classes);
    in.size("dataset.synthetic.per_class", d.synthetic.per_class);
    in.u64("dataset.synthetic.seed", d.synthetic.seed);
    in.size("dataset.synthetic.channels", d.synthetic.channels);
    in.size("dataset.synthetic.height", d.synthetic.height);
    in.size("dataset.synthetic.width", d.synthetic.width);
    in.real("dataset.synthetic.noise", d.synthetic.noise);
    in.size("dataset.synthetic.max_shift", d.synthetic.max_shift);
  }

  auto& p = c.partition;
  if (auto s = in.take("partition.scenario")) p.scenario = scenario_from_string(*s);
  if (!in.has("partition.num_participants"))
    throw ConfigError("partition.num_participants", "required key is missing");
  in.size("partition.num_participants", p.num_participants);
  in.size("partition.labels_per_client", p.labels_per_client);
  if (in.has("partition.per_client_volume")) {
    std::size_t v = 0;
    in.size("partition.per_client_volume", v);
    p.per_client_volume = v;
  }
  in.boolean("partition.allow_overlap", p.allow_overlap);
  p.seed = c.seed;

  auto& m = c.model;
  m.arch = Arch::TinyVit;
  if (auto a = in.take("model.arch")) {
    try {
      m.arch = arch_from_string(*a);
    } catch (const ConfigError& e) {
      throw ConfigError("model.arch", e.what());
    }
  }
  set_model_input(c);
  in.size("model.projection_dim", m.projection_dim);
  in.size("model.patch_size", m.patch_size);
  in.size("model.embed_dim", m.embed_dim);
  in.size("model.num_heads", m.num_heads);
  in.size("model.num_blocks", m.num_blocks);
  in.size("model.mlp_ratio", m.mlp_ratio);
  in.size("model.num_stages", m.num_stages);
  in.size("model.base_channels", m.base_channels);
  in.size("model.blocks_per_stage", m.blocks_per_stage);
  in.sizes("model.hidden_widths", m.hidden_widths);

  auto& f = c.fl;
  in.size("fl.rounds", f.rounds);
  in.size("fl.client_epochs", f.client_epochs);
  in.size("fl.batch_size", f.batch_size);
  in.size("fl.threads", f.threads);
  if (auto s = in.take("fl.strategy")) f.strategy = strategy_from_string(*s);
  f.seed = c.seed;

  auto& o = f.optimizer;
  o = m.arch == Arch::TinyVit ? OptimizerConfig::transformer_default()
                              : OptimizerConfig::convolutional_default();
  if (auto k = in.take("optimizer.kind")) {
    try {
      const OptimizerKind kind = optimizer_kind_from_string(*k);
      if (kind != o.kind)
        o = kind == OptimizerKind::AdamW ? OptimizerConfig::transformer_default()
                                         : OptimizerConfig::convolutional_default();
    } catch (const ConfigError& e) {
      throw ConfigError("optimizer.kind", e.what());
    }
  }
  in.real("optimizer.learning_rate", o.learning_rate);
  in.real("optimizer.weight_decay", o.weight_decay);
  in.real("optimizer.momentum", o.momentum);
  in.real("optimizer.beta2", o.beta2);
  in.real("optimizer.epsilon", o.epsilon);

  if (f.strategy == Strategy::Moon) {
    in.real("moon.temperature", c.moon.temperature);
    in.real("moon.mu", c.moon.mu);
  } else {
    in.reject_prefix("moon.", "only valid when fl.strategy = moon");
  }
  if (f.strategy == Strategy::FedAla) {
    in.real("ala.sample_percent", c.ala.sample_percent);
    in.size("ala.start_layer", c.ala.start_layer);
    in.real("ala.std_threshold", c.ala.std_threshold);
    in.real("ala.learning_rate", c.ala.learning_rate);
    in.size("ala.max_iterations", c.ala.max_iterations);
    in.boolean("ala.adapt_weights", c.ala.adapt_weights);
  } else {
    in.reject_prefix("ala.", "only valid when fl.strategy = fedala");
  }

  auto& a = c.analysis;
  in.size("analysis.probe_per_class", a.probe_per_class);
  in.size("analysis.probes", a.probes);
  if (auto v = in.take("analysis.layers")) {
    a.layers = trim(*v) == "all" ? std::vector<std::string>{} : split_list(*v);
  }
  if (auto v = in.take("analysis.overall_layer")) a.overall_layer = *v == "penultimate" ? "" : *v;
  if (in.has("analysis.snapshot_epochs")) {
    in.sizes("analysis.snapshot_epochs", a.snapshot_epochs);
  } else {
    // The default epochs only apply as far as the run goes.
    std::erase_if(a.snapshot_epochs, [&](std::size_t e) { return e > f.rounds; });
  }

  in.finish();
  c.validate();
  return c;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("", "cannot read config file '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text, path.string());
}

std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  auto kv = [&](const std::string& k, const std::string& v) { os << k << " = " << v << "\n"; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };

  kv("seed", std::to_string(c.seed));
  kv("output_dir", c.output_dir);
  kv("record_wall_time", b(c.record_wall_time));
  kv("checkpoint_every", std::to_string(c.checkpoint_every));

  const auto& d = c.dataset;
  kv("dataset.kind", d.kind == DatasetKind::Cifar10 ? "cifar10" : "synthetic");
  if (d.kind == DatasetKind::Cifar10) {
    kv("dataset.train_paths", join(d.train_paths));
    kv("dataset.test_paths", join(d.test_paths));
  } else {
    kv("dataset.synthetic.num_classes", std::to_string(d.synthetic.num_classes));
    kv("dataset.synthetic.per_class", std::to_string(d.synthetic.per_class));
    kv("dataset.synthetic.seed", std::to_string(d.synthetic.seed));
    kv("dataset.synthetic.channels", std::to_string(d.synthetic.channels));
    kv("dataset.synthetic.height", std::to_string(d.synthetic.height));
    kv("dataset.synthetic.width", std::to_string(d.synthetic.width));
    kv("dataset.synthetic.noise", fmt_double(d.synthetic.noise));
    kv("dataset.synthetic.max_shift", std::to_string(d.synthetic.max_shift));
  }
  kv("dataset.validation_size", std::to_string(d.validation_size));
  kv("dataset.train_limit", std::to_string(d.train_limit));

  const auto& p = c.partition;
  kv("partition.scenario", to_string(p.scenario));
  kv("partition.num_participants", std::to_string(p.num_participants));
  kv("partition.labels_per_client", std::to_string(p.labels_per_client));
  if (p.per_client_volume) kv("partition.per_client_volume", std::to_string(*p.per_client_volume));
  kv("partition.allow_overlap", b(p.allow_overlap));

  const auto& m = c.model;
  kv("model.arch", to_string(m.arch));
  kv("model.projection_dim", std::to_string(m.projection_dim));
  kv("model.patch_size", std::to_string(m.patch_size));
  kv("model.embed_dim", std::to_string(m.embed_dim));
  kv("model.num_heads", std::to_string(m.num_heads));
  kv("model.num_blocks", std::to_string(m.num_blocks));
  kv("model.mlp_ratio", std::to_string(m.mlp_ratio));
  kv("model.num_stages", std::to_string(m.num_stages));
  kv("model.base_channels", std::to_string(m.base_channels));
  kv("model.blocks_per_stage", std::to_string(m.blocks_per_stage));
  kv("model.hidden_widths", join(m.hidden_widths));

  const auto& f = c.fl;
  kv("fl.rounds", std::to_string(f.rounds));
  kv("fl.client_epochs", std::to_string(f.client_epochs));
  kv("fl.batch_size", std::to_string(f.batch_size));
  kv("fl.threads", std::to_string(f.threads));
  kv("fl.strategy", to_string(f.strategy));
  kv("optimizer.kind", to_string(f.optimizer.kind));
  kv("optimizer.learning_rate", fmt_double(f.optimizer.learning_rate));
  kv("optimizer.weight_decay", fmt_double(f.optimizer.weight_decay));
  kv("optimizer.momentum", fmt_double(f.optimizer.momentum));
  kv("optimizer.beta2", fmt_double(f.optimizer.beta2));
  kv("optimizer.epsilon", fmt_double(f.optimizer.epsilon));
  if (f.strategy == Strategy::Moon) {
    kv("moon.temperature", fmt_double(c.moon.temperature));
    kv("moon.mu", fmt_double(c.moon.mu));
  }
  if (f.strategy == Strategy::FedAla) {
    kv("ala.sample_percent", fmt_double(c.ala.sample_percent));
    kv("ala.start_layer", std::to_string(c.ala.start_layer));
    kv("ala.std_threshold", fmt_double(c.ala.std_threshold));
    kv("ala.learning_rate", fmt_double(c.ala.learning_rate));
    kv("ala.max_iterations", std::to_string(c.ala.max_iterations));
    kv("ala.adapt_weights", b(c.ala.adapt_weights));
  }

  const auto& a = c.analysis;
  kv("analysis.probe_per_class", std::to_string(a.probe_per_class));
  kv("analysis.probes", std::to_string(a.probes));
  kv("analysis.layers", a.layers.empty() ? "all" : join(a.layers));
  kv("analysis.overall_layer", a.overall_layer.empty() ? "penultimate" : a.overall_layer);
  kv("analysis.snapshot_epochs", join(a.snapshot_epochs));
  return os.str();
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(serialize_config(cfg)); }

}  // namespace vitfl
