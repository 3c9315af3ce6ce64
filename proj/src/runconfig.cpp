#include "s2rm/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "s2rm/errors.hpp"

namespace s2rm {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs an unsigned integer, got '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " needs a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("key " + key + " needs a boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

// One setter per known key; unknown keys fail by absence from this table.
using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& key_table() {
  static const std::map<std::string, Setter> table = {
      {"model.kind", [](RunConfig& c, const std::string&, const std::string& v) { c.kind = v; }},
      {"model.seed",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.model_seed = parse_u64(k, v); }},
      {"model.modules",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.modules = parse_int(k, v); }},
      {"model.hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.hidden = parse_int(k, v); }},
      {"model.embedding",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.embedding = parse_int(k, v);
         c.baseline.embedding = c.s2rm.embedding;
       }},
      {"model.encoding",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.encoding = parse_int(k, v);
         c.baseline.encoding = c.s2rm.encoding;
       }},
      {"model.enc_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.enc_hidden = parse_int(k, v);
         c.baseline.enc_hidden = c.s2rm.enc_hidden;
       }},
      {"model.dec_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.dec_hidden = parse_int(k, v);
         c.baseline.dec_hidden = c.s2rm.dec_hidden;
       }},
      {"model.input_heads",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.input_heads = parse_int(k, v); }},
      {"model.input_key",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.input_key = parse_int(k, v); }},
      {"model.input_value",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.input_value = parse_int(k, v); }},
      {"model.ic_heads",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.ic_heads = parse_int(k, v); }},
      {"model.ic_key",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.ic_key = parse_int(k, v); }},
      {"model.ic_value",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.ic_value = parse_int(k, v); }},
      {"model.gate_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.gate_hidden = parse_int(k, v); }},
      {"model.presoftmax_mask",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.attention.presoftmax_mask = parse_bool(k, v);
       }},
      {"model.scale_scores",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.s2rm.attention.scale_scores = parse_bool(k, v);
       }},
      {"model.baseline_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.baseline.hidden = parse_int(k, v); }},
      {"model.oracle_hidden",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.baseline.oracle_hidden = parse_int(k, v); }},
      {"kernel.epsilon",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.kernel.bandwidth = parse_double(k, v); }},
      {"kernel.tau",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.s2rm.kernel.truncation = parse_double(k, v); }},
      {"train.lr",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.lr0 = parse_double(k, v); }},
      {"train.batch",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch = parse_int(k, v); }},
      {"train.epochs",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.epochs = parse_int(k, v); }},
      {"train.plateau_factor",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.plateau_factor = parse_double(k, v); }},
      {"train.plateau_min_improve",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.train.plateau_min_improve = parse_double(k, v);
       }},
      {"train.plateau_patience",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.plateau_patience = parse_int(k, v); }},
      {"train.clip_norm",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.clip_norm = parse_double(k, v); }},
      {"train.seed",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_u64(k, v); }},
      {"data.train_seqs",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.train_seqs = parse_u64(k, v); }},
      {"data.val_seqs",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.val_seqs = parse_u64(k, v); }},
      {"data.ood_seqs",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.ood_seqs = parse_u64(k, v); }},
      {"data.frames",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.frames = parse_u64(k, v); }},
      {"data.views",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.views = parse_u64(k, v); }},
      {"data.balls",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.balls = parse_u64(k, v); }},
      {"data.gen_seed",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gen.seed = parse_u64(k, v); }},
      {"data.train", [](RunConfig& c, const std::string&, const std::string& v) { c.train_path = v; }},
      {"data.val", [](RunConfig& c, const std::string&, const std::string& v) { c.val_path = v; }},
      {"data.eval",
       [](RunConfig& c, const std::string&, const std::string& v) { c.eval_paths = split_list(v); }},
      {"data.checkpoint", [](RunConfig& c, const std::string&, const std::string& v) { c.checkpoint = v; }},
      {"eval.drop",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.drop = parse_double(k, v); }},
      {"eval.seed",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.seed = parse_u64(k, v); }},
      {"eval.fractions",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.eval.fractions = parse_double_list(k, v);
       }},
      {"eval.rollout_index",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.rollout_index = parse_u64(k, v); }},
      {"eval.rollout_seed",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.rollout_seed = parse_u64(k, v); }},
      {"run.out", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"run.threads",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.threads = parse_int(k, v); }},
  };
  return table;
}

void set_key(RunConfig& cfg, const std::string& dotted, const std::string& value) {
  auto it = key_table().find(dotted);
  if (it == key_table().end()) throw ConfigError("unknown configuration key: " + dotted);
  it->second(cfg, dotted, value);
}

}  // namespace

void RunConfig::validate() const {
  if (kind != "s2gru" && kind != "baseline-gru" && kind != "baseline-lstm" && kind != "tto")
    throw ConfigError("unknown model kind: " + kind);
  if (threads <= 0) throw ConfigError("run.threads must be positive");
  if (!(eval.drop >= 0.0 && eval.drop <= 1.0))
    throw ConfigError("eval.drop must lie in [0, 1]");
  s2rm.validate();
  baseline.validate();
  train.validate();
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("malformed section header at line " + std::to_string(line_no));
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key = value at line " + std::to_string(line_no));
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty()) throw ConfigError("key '" + key + "' appears before any section");
    set_key(cfg, section + "." + key, value);
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::string text(std::istreambuf_iterator<char>(in), {});
  return parse_config_text(text);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  if (key.find('.') == std::string::npos)
    throw ConfigError("override key must be section-qualified: " + key);
  set_key(cfg, key, value);
}

std::string render_config(const RunConfig& c) {
  std::ostringstream out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  out << "[model]\n";
  out << "kind = " << c.kind << "\n";
  out << "seed = " << c.model_seed << "\n";
  out << "modules = " << c.s2rm.modules << "\n";
  out << "hidden = " << c.s2rm.hidden << "\n";
  out << "embedding = " << c.s2rm.embedding << "\n";
  out << "encoding = " << c.s2rm.encoding << "\n";
  out << "enc_hidden = " << c.s2rm.enc_hidden << "\n";
  out << "dec_hidden = " << c.s2rm.dec_hidden << "\n";
  out << "input_heads = " << c.s2rm.input_heads << "\n";
  out << "input_key = " << c.s2rm.input_key << "\n";
  out << "input_value = " << c.s2rm.input_value << "\n";
  out << "ic_heads = " << c.s2rm.ic_heads << "\n";
  out << "ic_key = " << c.s2rm.ic_key << "\n";
  out << "ic_value = " << c.s2rm.ic_value << "\n";
  out << "gate_hidden = " << c.s2rm.gate_hidden << "\n";
  out << "presoftmax_mask = " << (c.s2rm.attention.presoftmax_mask ? "true" : "false") << "\n";
  out << "scale_scores = " << (c.s2rm.attention.scale_scores ? "true" : "false") << "\n";
  out << "baseline_hidden = " << c.baseline.hidden << "\n";
  out << "oracle_hidden = " << c.baseline.oracle_hidden << "\n";
  out << "\n[kernel]\n";
  out << "epsilon = " << num(c.s2rm.kernel.bandwidth) << "\n";
  out << "tau = " << num(c.s2rm.kernel.truncation) << "\n";
  out << "\n[train]\n";
  out << "lr = " << num(c.train.lr0) << "\n";
  out << "batch = " << c.train.batch << "\n";
  out << "epochs = " << c.train.epochs << "\n";
  out << "plateau_factor = " << num(c.train.plateau_factor) << "\n";
  out << "plateau_min_improve = " << num(c.train.plateau_min_improve) << "\n";
  out << "plateau_patience = " << c.train.plateau_patience << "\n";
  out << "clip_norm = " << num(c.train.clip_norm) << "\n";
  out << "seed = " << c.train.seed << "\n";
  out << "\n[data]\n";
  out << "train_seqs = " << c.gen.train_seqs << "\n";
  out << "val_seqs = " << c.gen.val_seqs << "\n";
  out << "ood_seqs = " << c.gen.ood_seqs << "\n";
  out << "frames = " << c.gen.frames << "\n";
  out << "views = " << c.gen.views << "\n";
  out << "balls = " << c.gen.balls << "\n";
  out << "gen_seed = " << c.gen.seed << "\n";
  if (!c.train_path.empty()) out << "train = " << c.train_path << "\n";
  if (!c.val_path.empty()) out << "val = " << c.val_path << "\n";
  if (!c.eval_paths.empty()) {
    out << "eval = ";
    for (std::size_t i = 0; i < c.eval_paths.size(); ++i)
      out << (i ? "," : "") << c.eval_paths[i];
    out << "\n";
  }
  if (!c.checkpoint.empty()) out << "checkpoint = " << c.checkpoint << "\n";
  out << "\n[eval]\n";
  out << "drop = " << num(c.eval.drop) << "\n";
  out << "seed = " << c.eval.seed << "\n";
  out << "fractions = ";
  for (std::size_t i = 0; i < c.eval.fractions.size(); ++i)
    out << (i ? "," : "") << num(c.eval.fractions[i]);
  out << "\n";
  out << "rollout_index = " << c.eval.rollout_index << "\n";
  out << "rollout_seed = " << c.eval.rollout_seed << "\n";
  out << "\n[run]\n";
  out << "out = " << c.out_dir << "\n";
  out << "threads = " << c.threads << "\n";
  return out.str();
}

}  // namespace s2rm
