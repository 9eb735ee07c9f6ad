// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace d2etr {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  adamw.validate();
  if (!(lr_drop_fraction > 0 && lr_drop_fraction <= 1)) throw ConfigError("train.lr_drop_fraction must lie in (0,1]");
  if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) throw ConfigError("train.lr_drop_factor must lie in (0,1]");
  if (clip_max_norm < 0) throw ConfigError("train.clip_max_norm must be >= 0");
  if (train_images < 0) throw ConfigError("train.images must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
}

void RunConfig::validate() const {
  if (data_train < 1) throw ConfigError("data.train must be >= 1");
  if (data_val < 0) throw ConfigError("data.val must be >= 0");
  if (generator.image_size != model.backbone.image_size)
    throw ConfigError("data.image_size must equal model.image_size");
  model.validate();
  train.validate();
  if (eval_top_k < 1) throw ConfigError("eval.top_k must be >= 1");
  if (attn_images < 1) throw ConfigError("attn.images must be >= 1");
  if (gradcheck_coords < 1) throw ConfigError("gradcheck.coords must be >= 1");
  if (!(gradcheck_tolerance > 0)) throw ConfigError("gradcheck.tolerance must be positive");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(T RunConfig::*sel) {
  return {[sel](RunConfig& c, const std::string& k, const std::string& v) { c.*sel = parse_number<T>(k, v); },
          [sel](const RunConfig& c) { return num(static_cast<double>(c.*sel)); }};
}

template <typename T, typename Get>
Field number_at(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<T>(k, v); },
          [get](const RunConfig& c) { return num(static_cast<double>(get(const_cast<RunConfig&>(c)))); }};
}

template <typename Get>
Field flag_at(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); },
          [get](const RunConfig& c) { return std::string(get(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

/// Per-stage list keys.
template <typename Member>
Field stage_list(Member StageConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) {
            const std::vector<int> vals = parse_ints(k, v);
            auto& stages = c.model.backbone.stages;
            if (vals.size() != stages.size()) {
              if (vals.size() == 1) {
                for (auto& s : stages) s.*m = vals[0];
                return;
              }
              stages.resize(vals.size(), stages.empty() ? StageConfig{} : stages.back());
            }
            for (std::size_t i = 0; i < vals.size(); ++i) stages[i].*m = vals[i];
          },
          [m](const RunConfig& c) {
            std::vector<int> vals;
            for (const auto& s : c.model.backbone.stages) vals.push_back(s.*m);
            return join(vals);
          }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = [] {
    std::vector<std::pair<std::string, Field>> v;
    v.emplace_back("seed", number(&RunConfig::seed));
    v.emplace_back("data.dir", Field{[](RunConfig& c, const std::string&, const std::string& s) { c.data_dir = s; },
                                     [](const RunConfig& c) { return c.data_dir; }});
    v.emplace_back("data.train", number(&RunConfig::data_train));
    v.emplace_back("data.val", number(&RunConfig::data_val));
    v.emplace_back("data.image_size", Field{[](RunConfig& c, const std::string& k, const std::string& s) {
                                              c.generator.image_size = c.model.backbone.image_size =
                                                  parse_number<int>(k, s);
                                            },
                                            [](const RunConfig& c) { return std::to_string(c.generator.image_size); }});
    v.emplace_back("data.min_objects", number_at<int>([](RunConfig& c) -> int& { return c.generator.min_objects; }));
    v.emplace_back("data.max_objects", number_at<int>([](RunConfig& c) -> int& { return c.generator.max_objects; }));
    v.emplace_back("data.min_side", number_at<double>([](RunConfig& c) -> double& { return c.generator.min_side; }));
    v.emplace_back("data.max_side", number_at<double>([](RunConfig& c) -> double& { return c.generator.max_side; }));
    v.emplace_back("data.noise", number_at<double>([](RunConfig& c) -> double& { return c.generator.noise; }));

    v.emplace_back("model.norm_eps", Field{[](RunConfig& c, const std::string& k, const std::string& s) {
                                             c.model.backbone.norm_eps = c.model.decoder.norm_eps =
                                                 parse_number<double>(k, s);
                                           },
                                           [](const RunConfig& c) { return num(c.model.backbone.norm_eps); }});
    v.emplace_back("model.num_classes", number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.num_classes; }));
    v.emplace_back("backbone.depths", stage_list(&StageConfig::depth));
    v.emplace_back("backbone.channels", stage_list(&StageConfig::channels));
    v.emplace_back("backbone.heads", stage_list(&StageConfig::heads));
    v.emplace_back("backbone.strides", stage_list(&StageConfig::patch_stride));
    v.emplace_back("backbone.sr_pool", stage_list(&StageConfig::sr_pool));
    v.emplace_back("backbone.mlp_ratio", stage_list(&StageConfig::mlp_ratio));
    v.emplace_back("fuse.enabled", flag_at([](RunConfig& c) -> bool& { return c.model.backbone.fusion; }));
    v.emplace_back("fuse.width", Field{[](RunConfig& c, const std::string& k, const std::string& s) {
                                         c.model.backbone.fuse_width = c.model.decoder.channels =
                                             parse_number<int>(k, s);
                                       },
                                       [](const RunConfig& c) { return std::to_string(c.model.backbone.fuse_width); }});
    v.emplace_back("fuse.depth", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.fuse_depth; }));
    v.emplace_back("fuse.heads", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.fuse_heads; }));
    v.emplace_back("fuse.pool", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.fuse_pool; }));
    v.emplace_back("fuse.mlp_ratio", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.fuse_mlp_ratio; }));
    v.emplace_back("fuse.start_level", number_at<int>([](RunConfig& c) -> int& { return c.model.backbone.fuse_start_level; }));
    v.emplace_back("fuse.normalized_query_key",
                   flag_at([](RunConfig& c) -> bool& { return c.model.backbone.normalized_query_key; }));

    v.emplace_back("decoder.layers", number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.layers; }));
    v.emplace_back("decoder.queries", number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.queries; }));
    v.emplace_back("decoder.heads", number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.heads; }));
    v.emplace_back("decoder.mlp_ratio", number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.mlp_ratio; }));
    v.emplace_back("decoder.memory",
                   Field{[](RunConfig& c, const std::string& k, const std::string& s) {
                           if (s == "multi") c.model.decoder.memory = MemoryMode::kMultiScale;
                           else if (s == "last") c.model.decoder.memory = MemoryMode::kLastScale;
                           else throw ConfigError(k + ": expected 'multi' or 'last', got '" + s + "'");
                         },
                         [](const RunConfig& c) {
                           return std::string(c.model.decoder.memory == MemoryMode::kMultiScale ? "multi" : "last");
                         }});
    v.emplace_back("decoder.memory_start_stride",
                   number_at<int>([](RunConfig& c) -> int& { return c.model.decoder.memory_start_stride; }));
    v.emplace_back("decoder.reference_points",
                   flag_at([](RunConfig& c) -> bool& { return c.model.decoder.reference_points; }));
    v.emplace_back("decoder.centerness", flag_at([](RunConfig& c) -> bool& { return c.model.decoder.centerness; }));
    v.emplace_back("decoder.alpha", number_at<double>([](RunConfig& c) -> double& { return c.model.decoder.alpha; }));
    v.emplace_back("decoder.beta", number_at<double>([](RunConfig& c) -> double& { return c.model.decoder.beta; }));

    v.emplace_back("loss.cls", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.weights.cls; }));
    v.emplace_back("loss.l1", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.weights.l1; }));
    v.emplace_back("loss.giou", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.weights.giou; }));
    v.emplace_back("loss.awr", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.weights.awr; }));
    v.emplace_back("loss.token", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.weights.token; }));
    v.emplace_back("loss.token_labeling", flag_at([](RunConfig& c) -> bool& { return c.model.token_labeling; }));
    v.emplace_back("match.cls", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.match.cls; }));
    v.emplace_back("match.l1", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.match.l1; }));
    v.emplace_back("match.giou", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.match.giou; }));
    v.emplace_back("focal.gamma", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.focal.gamma; }));
    v.emplace_back("focal.alpha", number_at<double>([](RunConfig& c) -> double& { return c.model.loss.focal.alpha; }));

    v.emplace_back("train.epochs", number_at<int>([](RunConfig& c) -> int& { return c.train.epochs; }));
    v.emplace_back("train.batch_size", number_at<int>([](RunConfig& c) -> int& { return c.train.batch_size; }));
    v.emplace_back("train.lr", number_at<double>([](RunConfig& c) -> double& { return c.train.adamw.lr; }));
    v.emplace_back("train.beta1", number_at<double>([](RunConfig& c) -> double& { return c.train.adamw.beta1; }));
    v.emplace_back("train.beta2", number_at<double>([](RunConfig& c) -> double& { return c.train.adamw.beta2; }));
    v.emplace_back("train.eps", number_at<double>([](RunConfig& c) -> double& { return c.train.adamw.eps; }));
    v.emplace_back("train.weight_decay",
                   number_at<double>([](RunConfig& c) -> double& { return c.train.adamw.weight_decay; }));
    v.emplace_back("train.lr_drop_fraction",
                   number_at<double>([](RunConfig& c) -> double& { return c.train.lr_drop_fraction; }));
    v.emplace_back("train.lr_drop_factor",
                   number_at<double>([](RunConfig& c) -> double& { return c.train.lr_drop_factor; }));
    v.emplace_back("train.clip_max_norm", number_at<double>([](RunConfig& c) -> double& { return c.train.clip_max_norm; }));
    v.emplace_back("train.hflip", flag_at([](RunConfig& c) -> bool& { return c.train.hflip; }));
    v.emplace_back("train.images", number_at<int>([](RunConfig& c) -> int& { return c.train.train_images; }));
    v.emplace_back("train.eval_every", number_at<int>([](RunConfig& c) -> int& { return c.train.eval_every; }));

    v.emplace_back("eval.top_k", number(&RunConfig::eval_top_k));
    v.emplace_back("eval.images", number(&RunConfig::eval_images));
    v.emplace_back("attn.images", number(&RunConfig::attn_images));
    v.emplace_back("gradcheck.h", number(&RunConfig::gradcheck_h));
    v.emplace_back("gradcheck.coords", number(&RunConfig::gradcheck_coords));
    v.emplace_back("gradcheck.tolerance", number(&RunConfig::gradcheck_tolerance));
    return v;
  }();
  return f;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second) throw ConfigError("config: duplicate key '" + key + "'");
  }
  return kv;
}

RunConfig make_config(const KeyValues& kv) {
  RunConfig cfg;
  for (const auto& [key, value] : kv) {
    bool found = false;
    for (const auto& [name, field] : fields()) {
      if (name != key) continue;
      field.set(cfg, key, value);
      found = true;
      break;
    }
    if (!found) throw ConfigError("config: unknown key '" + key + "'");
  }
  cfg.model.init_seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return make_config(parse_key_values(ss.str()));
}

std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace d2etr
