#include "densessm/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace densessm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const char* end = value.data() + value.size();
  auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end || value.empty()) {
    throw ConfigError("key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) throw ConfigError("key '" + key + "' expects a number, got '" + value + "'");
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

const std::vector<std::string> kDataKeys = {"data.paths",          "data.heldout_paths", "data.synthetic_bytes",
                                            "data.heldout_bytes",  "data.synthetic_seed", "data.val_frac"};
const std::vector<std::string> kAblateKeys = {"ablate.seeds", "ablate.tables", "ablate.tokens_per_cell",
                                              "ablate.heldout_tokens"};

}  // namespace

RunConfig::RunConfig() : model(desk_config(BlockKind::dense_retnet)) {}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> k = ModelConfig::keys();
  for (const auto& v : TrainConfig::keys()) k.push_back(v);
  for (const auto& v : kDataKeys) k.push_back(v);
  for (const auto& v : kAblateKeys) k.push_back(v);
  std::sort(k.begin(), k.end());
  return k;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  auto m = model.to_map();
  m.merge(train.to_map());
  m["data.paths"] = join(data.paths);
  m["data.heldout_paths"] = join(data.heldout_paths);
  m["data.synthetic_bytes"] = std::to_string(data.synthetic_bytes);
  m["data.heldout_bytes"] = std::to_string(data.heldout_bytes);
  m["data.synthetic_seed"] = std::to_string(data.synthetic_seed);
  m["data.val_frac"] = fmt(data.val_frac);
  std::vector<std::string> seeds;
  for (auto s : ablate.seeds) seeds.push_back(std::to_string(s));
  m["ablate.seeds"] = join(seeds);
  m["ablate.tables"] = join(ablate.tables);
  m["ablate.tokens_per_cell"] = std::to_string(ablate.tokens_per_cell);
  m["ablate.heldout_tokens"] = std::to_string(ablate.heldout_tokens);
  return m;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (model.set(key, value) || train.set(key, value)) return;
  if (key == "data.paths") data.paths = split_list(value);
  else if (key == "data.heldout_paths") data.heldout_paths = split_list(value);
  else if (key == "data.synthetic_bytes") data.synthetic_bytes = to_u64(key, value);
  else if (key == "data.heldout_bytes") data.heldout_bytes = to_u64(key, value);
  else if (key == "data.synthetic_seed") data.synthetic_seed = to_u64(key, value);
  else if (key == "data.val_frac") data.val_frac = to_double(key, value);
  else if (key == "ablate.seeds") {
    ablate.seeds.clear();
    for (const auto& s : split_list(value)) ablate.seeds.push_back(to_u64(key, s));
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds needs at least one seed");
  } else if (key == "ablate.tables") {
    ablate.tables = split_list(value);
    for (const auto& t : ablate.tables) {
      if (t != "4" && t != "5" && t != "6" && t != "7") {
        throw ConfigError("ablate.tables accepts 4, 5, 6 and 7, got '" + t + "'");
      }
    }
  } else if (key == "ablate.tokens_per_cell") ablate.tokens_per_cell = to_u64(key, value);
  else if (key == "ablate.heldout_tokens") ablate.heldout_tokens = to_u64(key, value);
  else {
    std::string msg = "unknown config key '" + key + "'; valid keys:";
    for (const auto& k : keys()) msg += "\n  " + k;
    throw ConfigError(msg);
  }
}

std::string RunConfig::render() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
  return out;
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  apply_config_text(cfg, text, origin);
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

Corpus load_corpus(const DataConfig& data) {
  if (!data.paths.empty()) return ingest(data.paths, data.val_frac);
  return corpus_from_documents(synthetic_documents(data.synthetic_bytes, data.synthetic_seed, 0), data.val_frac);
}

Corpus load_heldout(const DataConfig& data) {
  if (!data.heldout_paths.empty()) return ingest(data.heldout_paths, 0.0);
  return corpus_from_documents(synthetic_documents(data.heldout_bytes, data.synthetic_seed + 1, 1), 0.0);
}

}  // namespace densessm
