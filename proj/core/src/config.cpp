#include "ttc/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "ttc/errors.hpp"

namespace ttc {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

}  // namespace

Config Config::parse_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_string(ss.str());
}

Config Config::parse_string(std::string_view text) {
  Config cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    std::size_t eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'key = value', got '" + trimmed + "'");
    std::string key = trim(std::string_view(trimmed).substr(0, eq));
    std::string value = trim(std::string_view(trimmed).substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

bool Config::has(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return true;
  return false;
}

const std::string& Config::get(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return v;
  throw ConfigError("missing config key '" + key + "'");
}

void Config::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = std::move(value);
      return;
    }
  entries_.emplace_back(key, std::move(value));
}

std::string Config::get_string(const std::string& key,
                               std::string def) const {
  return has(key) ? get(key) : def;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t def) const {
  if (!has(key)) return def;
  const std::string& v = get(key);
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v +
                      "' is not an integer");
  return out;
}

std::uint64_t Config::get_u64(const std::string& key,
                              std::uint64_t def) const {
  if (!has(key)) return def;
  const std::string& v = get(key);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': '" + v +
                      "' is not an unsigned integer");
  return out;
}

double Config::get_double(const std::string& key, double def) const {
  if (!has(key)) return def;
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v +
                      "' is not a number");
  }
}

bool Config::get_bool(const std::string& key, bool def) const {
  if (!has(key)) return def;
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v +
                    "' is not a boolean");
}

std::string Config::canonical() const {
  std::vector<std::pair<std::string, std::string>> sorted = entries_;
  std::sort(sorted.begin(), sorted.end());
  std::ostringstream os;
  for (const auto& [k, v] : sorted) os << k << " = " << v << "\n";
  return os.str();
}

// ---- RunConfig --------------------------------------------------------------

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "model.image_size", "model.patch_size", "model.depth", "model.dim",
      "model.heads", "model.mlp_ratio", "model.num_classes",
      "model.layernorm_eps",
      "data.path",
      "method", "seed", "out.dir",
      "pretrained.path", "pretrained.reset_head",
      "stage1.enabled", "stage1.epochs", "stage1.lr", "stage1.batch_size",
      "stage1.optimizer", "stage1.weight_decay", "stage1.momentum",
      "stage1.schedule",
      "stage2.epochs", "stage2.lr", "stage2.batch_size", "stage2.optimizer",
      "stage2.weight_decay", "stage2.momentum", "stage2.schedule",
      "stage2.tune_ln",
      "ttc.k", "ttc.position", "ttc.depth", "ttc.selector", "ttc.score_mode",
      "ttc.bias", "ttc.tune_weights", "ttc.score_batches",
      "ttc.score_batch_size",
      "adapter.dim", "adapter.activation",
      "vpt.prompts",
      "ssf.include_embed_sites",
      "grid.lr",
  };
  return keys;
}

TrainPlan parse_stage(const Config& cfg, const std::string& prefix,
                      const TrainPlan& defaults, std::uint64_t seed) {
  TrainPlan plan = defaults;
  plan.epochs = static_cast<std::size_t>(
      cfg.get_int(prefix + ".epochs", static_cast<std::int64_t>(plan.epochs)));
  plan.lr = cfg.get_double(prefix + ".lr", plan.lr);
  plan.batch_size = static_cast<std::size_t>(cfg.get_int(
      prefix + ".batch_size", static_cast<std::int64_t>(plan.batch_size)));
  plan.optimizer = parse_optimizer(cfg.get_string(
      prefix + ".optimizer", std::string(optimizer_name(plan.optimizer))));
  plan.weight_decay =
      cfg.get_double(prefix + ".weight_decay", plan.weight_decay);
  plan.momentum = cfg.get_double(prefix + ".momentum", plan.momentum);
  plan.schedule = parse_schedule(cfg.get_string(
      prefix + ".schedule", std::string(schedule_name(plan.schedule))));
  plan.seed = seed;
  return plan;
}

std::vector<double> parse_lr_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("grid.lr: '" + item + "' is not a number");
    }
  }
  return out;
}

}  // namespace

RunConfig RunConfig::from_config(const Config& cfg) {
  for (const auto& [key, value] : cfg.entries())
    if (!known_keys().count(key))
      throw ConfigError("unknown config key '" + key + "'");

  RunConfig rc;
  rc.model.image_size = static_cast<std::size_t>(
      cfg.get_int("model.image_size", 16));
  rc.model.patch_size =
      static_cast<std::size_t>(cfg.get_int("model.patch_size", 4));
  rc.model.depth = static_cast<std::size_t>(cfg.get_int("model.depth", 2));
  rc.model.dim = static_cast<std::size_t>(cfg.get_int("model.dim", 32));
  rc.model.heads = static_cast<std::size_t>(cfg.get_int("model.heads", 4));
  rc.model.mlp_ratio = cfg.get_double("model.mlp_ratio", 4.0);
  rc.model.num_classes =
      static_cast<std::size_t>(cfg.get_int("model.num_classes", 5));
  rc.model.layernorm_eps = cfg.get_double("model.layernorm_eps", 1e-6);
  rc.model.validate();

  rc.data_path = cfg.get_string("data.path", "");
  rc.method = parse_method(cfg.get_string("method", "ttc"));
  rc.seed = cfg.get_u64("seed", 0);
  rc.out_dir = cfg.get_string("out.dir", "");
  rc.pretrained_path = cfg.get_string("pretrained.path", "");
  rc.pretrained_reset_head = cfg.get_bool("pretrained.reset_head", true);

  TrainPlan stage1_defaults;
  stage1_defaults.lr = 1e-3;
  stage1_defaults.epochs = 30;
  TrainPlan stage2_defaults;
  stage2_defaults.lr = 5e-4;
  stage2_defaults.epochs = 30;
  rc.stage1_enabled = cfg.get_bool("stage1.enabled", true);
  rc.stage1 = parse_stage(cfg, "stage1", stage1_defaults, rc.seed);
  rc.stage2 = parse_stage(cfg, "stage2", stage2_defaults,
                          SplitRng(rc.seed).split("stage2").key());
  rc.stage2_tune_ln = cfg.get_bool("stage2.tune_ln", true);

  rc.scoring.k = static_cast<std::size_t>(cfg.get_int(
      "ttc.k", static_cast<std::int64_t>(std::max<std::size_t>(
                   1, rc.model.dim / 8))));
  rc.scoring.strategy =
      parse_selection_strategy(cfg.get_string("ttc.selector", "tis"));
  rc.scoring.mode = parse_score_mode(cfg.get_string("ttc.score_mode",
                                                    "squared"));
  rc.scoring.seed = rc.seed;
  rc.scoring.max_batches = static_cast<std::size_t>(
      cfg.get_int("ttc.score_batches", 0));
  rc.scoring.batch_size = static_cast<std::size_t>(
      cfg.get_int("ttc.score_batch_size", 32));

  rc.insert.position =
      parse_insert_position(cfg.get_string("ttc.position", "after_mlp"));
  std::int64_t depth = cfg.get_int(
      "ttc.depth", static_cast<std::int64_t>(rc.model.depth));
  if (depth < 0) throw ConfigError("ttc.depth must be >= 0");
  rc.insert.depth = static_cast<std::size_t>(depth);
  rc.insert.with_bias = cfg.get_bool("ttc.bias", true);
  rc.insert.tune_weights = cfg.get_bool("ttc.tune_weights", false);
  rc.scoring.depth = rc.insert.depth;
  rc.scoring.position_mhsa =
      rc.insert.position != InsertPosition::after_mlp;
  rc.scoring.position_mlp =
      rc.insert.position != InsertPosition::after_mhsa;

  rc.adapter_dim =
      static_cast<std::size_t>(cfg.get_int("adapter.dim", 0));
  std::string act = cfg.get_string("adapter.activation", "gelu");
  if (act == "relu")
    rc.adapter_activation = Activation::relu;
  else if (act == "gelu")
    rc.adapter_activation = Activation::gelu;
  else
    throw ConfigError("adapter.activation must be relu or gelu");
  rc.vpt_prompts =
      static_cast<std::size_t>(cfg.get_int("vpt.prompts", 4));
  rc.ssf_include_embed_sites =
      cfg.get_bool("ssf.include_embed_sites", false);
  if (cfg.has("grid.lr")) rc.lr_grid = parse_lr_grid(cfg.get("grid.lr"));
  return rc;
}

std::string RunConfig::snapshot() const {
  Config cfg;
  cfg.set("model.image_size", std::to_string(model.image_size));
  cfg.set("model.patch_size", std::to_string(model.patch_size));
  cfg.set("model.depth", std::to_string(model.depth));
  cfg.set("model.dim", std::to_string(model.dim));
  cfg.set("model.heads", std::to_string(model.heads));
  {
    std::ostringstream os;
    os.precision(17);
    os << model.mlp_ratio;
    cfg.set("model.mlp_ratio", os.str());
  }
  cfg.set("model.num_classes", std::to_string(model.num_classes));
  {
    std::ostringstream os;
    os.precision(17);
    os << model.layernorm_eps;
    cfg.set("model.layernorm_eps", os.str());
  }
  cfg.set("data.path", data_path);
  cfg.set("method", std::string(method_name(method)));
  cfg.set("seed", std::to_string(seed));
  cfg.set("out.dir", out_dir);
  if (!pretrained_path.empty()) {
    cfg.set("pretrained.path", pretrained_path);
    cfg.set("pretrained.reset_head",
            pretrained_reset_head ? "true" : "false");
  }
  auto put_stage = [&](const std::string& prefix, const TrainPlan& plan) {
    cfg.set(prefix + ".epochs", std::to_string(plan.epochs));
    std::ostringstream lr;
    lr.precision(17);
    lr << plan.lr;
    cfg.set(prefix + ".lr", lr.str());
    cfg.set(prefix + ".batch_size", std::to_string(plan.batch_size));
    cfg.set(prefix + ".optimizer", std::string(optimizer_name(plan.optimizer)));
    std::ostringstream wd;
    wd.precision(17);
    wd << plan.weight_decay;
    cfg.set(prefix + ".weight_decay", wd.str());
    cfg.set(prefix + ".schedule", std::string(schedule_name(plan.schedule)));
  };
  cfg.set("stage1.enabled", stage1_enabled ? "true" : "false");
  put_stage("stage1", stage1);
  put_stage("stage2", stage2);
  cfg.set("stage2.tune_ln", stage2_tune_ln ? "true" : "false");
  cfg.set("ttc.k", std::to_string(scoring.k));
  cfg.set("ttc.selector",
          std::string(selection_strategy_name(scoring.strategy)));
  cfg.set("ttc.score_mode", std::string(score_mode_name(scoring.mode)));
  cfg.set("ttc.position", std::string(insert_position_name(insert.position)));
  cfg.set("ttc.depth", std::to_string(insert.depth));
  cfg.set("ttc.bias", insert.with_bias ? "true" : "false");
  cfg.set("ttc.tune_weights", insert.tune_weights ? "true" : "false");
  return cfg.canonical();
}

}  // namespace ttc
