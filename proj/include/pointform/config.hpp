#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "pointform/data.hpp"
#include "pointform/hga.hpp"
#include "pointform/train.hpp"

namespace pf {

// one file describes a whole run; the training stages keep separate knobs
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 42;
  std::string out_dir;
  DatasetConfig data;
  EmbedConfig embed;
  ModelConfig model;
  HgaPlan plan;
  TrainConfig pretrain;
  TrainConfig tune;
  std::string teacher_path;

  void validate() const {
    check(data.count > 0, "config: data.count must be positive");
    embed.validate();
    model.validate();
    plan.validate(model.layers);
    pretrain.validate();
    tune.validate();
    check(embed.model_dim == model.dim,
          cat("config: embed.model_dim ", embed.model_dim,
              " does not match model.dim ", model.dim));
  }
};

inline RunConfig desk_preset() {
  RunConfig rc;  // struct defaults are the desk scale
  rc.preset = "desk";
  rc.plan = desk_plan();
  rc.pretrain.stage = Stage::Pretrain;
  rc.pretrain.ssl = SslChoice::Hybrid;
  rc.pretrain.steps = 200;
  rc.pretrain.batch_size = 8;
  rc.pretrain.lr = 4e-4;
  rc.tune.stage = Stage::Tune;
  rc.tune.steps = 500;
  rc.tune.batch_size = 8;
  rc.tune.lr = 1e-3;
  return rc;
}

// paper-fidelity shapes: constructible for parameter and flop accounting,
// far too large to train here
inline RunConfig paper_preset() {
  RunConfig rc = desk_preset();
  rc.preset = "paper";
  rc.data.n_points = 8192;
  rc.embed.input_points = 8192;
  rc.embed.stage_sizes = {512, 256, 128};
  rc.embed.group_k = 81;
  rc.embed.stage_dims = {288, 576, 1152, 2304};
  rc.embed.model_dim = 4096;
  rc.model.vocab = 32000;
  rc.model.dim = 4096;
  rc.model.heads = 32;
  rc.model.layers = 32;
  rc.model.ffn_mult = 3;
  rc.model.kd_dim = 1024;
  rc.plan = paper_plan();
  rc.pretrain.lr = 4e-4;
  rc.tune.lr = 2e-5;
  return rc;
}

inline RunConfig make_preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  throw ValueError(cat("config: unknown preset '", name, "'"));
}

namespace detail {

inline std::string plan_blocks_text(const HgaPlan& plan) {
  std::string out;
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    if (b) out += ' ';
    auto join = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    out += join(plan.blocks[b].aggregate_after) + '/' +
           join(plan.blocks[b].propagate_after);
  }
  return out;
}

inline std::vector<HgaBlock> parse_plan_blocks(const std::string& text) {
  std::vector<HgaBlock> blocks;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) {
    auto slash = word.find('/');
    check(slash != std::string::npos,
          cat("config: plan block '", word, "' wants agg/prop layer lists"));
    auto ints = [&word](const std::string& part) {
      std::vector<std::size_t> v;
      std::string item;
      std::istringstream ps(part);
      while (std::getline(ps, item, ',')) {
        check(!item.empty() && item.find_first_not_of("0123456789") ==
                                   std::string::npos,
              cat("config: bad layer index '", item, "' in plan '", word, "'"));
        v.push_back(std::size_t(std::stoull(item)));
      }
      return v;
    };
    blocks.push_back({ints(word.substr(0, slash)), ints(word.substr(slash + 1))});
  }
  return blocks;
}

template <class T>
T parse_number(const std::string& s, const std::string& where) {
  std::istringstream ss(s);
  T v{};
  ss >> v;
  check(bool(ss) && ss.eof(), cat("config: ", where, " wants a number, got '",
                                  s, "'"));
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& s, const std::string& where) {
  std::vector<T> out;
  std::istringstream ss(s);
  std::string word;
  while (ss >> word) out.push_back(parse_number<T>(word, where));
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& where) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ValueError(cat("config: ", where, " wants true/false, got '", s, "'"));
}

// the whole config surface: one row per key, read and write as strings so
// the ini parser, the json parser, and the echo all share it
struct ConfigKey {
  std::string section, name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add = [&k](std::string sec, std::string name, auto get, auto set) {
      k.push_back({std::move(sec), std::move(name), get, set});
    };
    auto num = [&add](std::string sec, std::string name, auto member) {
      add(sec, name,
          [member](const RunConfig& rc) {
            const auto& v = std::invoke(member, rc);
            if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>)
              return fmt_double(v);
            else
              return std::to_string(v);
          },
          [member, sec, name](RunConfig& rc, const std::string& s) {
            auto& v = std::invoke(member, rc);
            v = parse_number<std::decay_t<decltype(v)>>(s, sec + "." + name);
          });
    };

    add("run", "preset",
        [](const RunConfig& rc) { return rc.preset; },
        [](RunConfig& rc, const std::string& s) { rc.preset = s; });
    num("run", "seed", &RunConfig::seed);
    add("run", "out",
        [](const RunConfig& rc) { return rc.out_dir; },
        [](RunConfig& rc, const std::string& s) { rc.out_dir = s; });

    num("data", "count", [](auto& rc) -> auto& { return rc.data.count; });
    num("data", "points", [](auto& rc) -> auto& { return rc.data.n_points; });
    num("data", "sigma", [](auto& rc) -> auto& { return rc.data.sigma; });
    num("data", "composite_fraction",
        [](auto& rc) -> auto& { return rc.data.composite_fraction; });

    num("embed", "input_points",
        [](auto& rc) -> auto& { return rc.embed.input_points; });
    add("embed", "stage_sizes",
        [](const RunConfig& rc) {
          return cat(rc.embed.stage_sizes[0], " ", rc.embed.stage_sizes[1], " ",
                     rc.embed.stage_sizes[2]);
        },
        [](RunConfig& rc, const std::string& s) {
          auto v = parse_list<std::size_t>(s, "embed.stage_sizes");
          check(v.size() == 3, "config: embed.stage_sizes wants 3 entries");
          std::copy(v.begin(), v.end(), rc.embed.stage_sizes.begin());
        });
    num("embed", "group_k", [](auto& rc) -> auto& { return rc.embed.group_k; });
    add("embed", "stage_dims",
        [](const RunConfig& rc) {
          return cat(rc.embed.stage_dims[0], " ", rc.embed.stage_dims[1], " ",
                     rc.embed.stage_dims[2], " ", rc.embed.stage_dims[3]);
        },
        [](RunConfig& rc, const std::string& s) {
          auto v = parse_list<std::size_t>(s, "embed.stage_dims");
          check(v.size() == 4, "config: embed.stage_dims wants 4 entries");
          std::copy(v.begin(), v.end(), rc.embed.stage_dims.begin());
        });
    num("embed", "model_dim", [](auto& rc) -> auto& { return rc.embed.model_dim; });
    num("embed", "freq_bands", [](auto& rc) -> auto& { return rc.embed.freq_bands; });

    num("model", "vocab", [](auto& rc) -> auto& { return rc.model.vocab; });
    num("model", "dim", [](auto& rc) -> auto& { return rc.model.dim; });
    num("model", "heads", [](auto& rc) -> auto& { return rc.model.heads; });
    num("model", "layers", [](auto& rc) -> auto& { return rc.model.layers; });
    num("model", "ffn_mult", [](auto& rc) -> auto& { return rc.model.ffn_mult; });
    num("model", "max_text", [](auto& rc) -> auto& { return rc.model.max_text; });
    num("model", "pos_bands", [](auto& rc) -> auto& { return rc.model.pos_bands; });
    num("model", "learnable_layers",
        [](auto& rc) -> auto& { return rc.model.learnable_layers; });
    num("model", "kd_dim", [](auto& rc) -> auto& { return rc.model.kd_dim; });

    add("grid", "blocks",
        [](const RunConfig& rc) { return plan_blocks_text(rc.plan); },
        [](RunConfig& rc, const std::string& s) {
          rc.plan.blocks = parse_plan_blocks(s);
          if (rc.plan.theta.size() < rc.plan.depth())
            rc.plan.theta.assign(rc.plan.depth(), 0.0);
        });
    add("grid", "pooling",
        [](const RunConfig& rc) {
          switch (rc.plan.pooling) {
            case HgaPooling::Mean: return std::string("mean");
            case HgaPooling::Max: return std::string("max");
            case HgaPooling::MaxMean: return std::string("maxmean");
          }
          throw ValueError("config: bad pooling enum");
        },
        [](RunConfig& rc, const std::string& s) {
          if (s == "mean") rc.plan.pooling = HgaPooling::Mean;
          else if (s == "max") rc.plan.pooling = HgaPooling::Max;
          else if (s == "maxmean") rc.plan.pooling = HgaPooling::MaxMean;
          else throw ValueError(cat("config: grid.pooling '", s,
                                    "' is not mean/max/maxmean"));
        });
    add("grid", "cell_attention",
        [](const RunConfig& rc) {
          return std::string(rc.plan.cell_attention ? "true" : "false");
        },
        [](RunConfig& rc, const std::string& s) {
          rc.plan.cell_attention = parse_bool(s, "grid.cell_attention");
        });
    num("grid", "alpha", [](auto& rc) -> auto& { return rc.plan.alpha; });
    num("grid", "s_min", [](auto& rc) -> auto& { return rc.plan.s_min; });
    num("grid", "s_max", [](auto& rc) -> auto& { return rc.plan.s_max; });
    add("grid", "theta",
        [](const RunConfig& rc) {
          std::string s;
          for (std::size_t i = 0; i < rc.plan.theta.size(); ++i)
            s += (i ? " " : "") + fmt_double(rc.plan.theta[i]);
          return s;
        },
        [](RunConfig& rc, const std::string& s) {
          rc.plan.theta = parse_list<double>(s, "grid.theta");
        });

    auto train_keys = [&num, &add](const std::string& sec,
                                   TrainConfig RunConfig::* tp) {
      auto field = [tp](auto member) {
        return [tp, member](auto& rc) -> auto& {
          return std::invoke(member, std::invoke(tp, rc));
        };
      };
      num(sec, "steps", field(&TrainConfig::steps));
      num(sec, "batch", field(&TrainConfig::batch_size));
      num(sec, "lr", field(&TrainConfig::lr));
      num(sec, "weight_decay", field(&TrainConfig::weight_decay));
      num(sec, "checkpoint_every", field(&TrainConfig::checkpoint_every));
      add(sec, "schedule",
          [tp](const RunConfig& rc) {
            return std::string(std::invoke(tp, rc).schedule ==
                                       LrSchedule::Constant
                                   ? "constant"
                                   : "cosine");
          },
          [tp, sec](RunConfig& rc, const std::string& s) {
            if (s == "constant")
              std::invoke(tp, rc).schedule = LrSchedule::Constant;
            else if (s == "cosine")
              std::invoke(tp, rc).schedule = LrSchedule::Cosine;
            else
              throw ValueError(cat("config: ", sec,
                                   ".schedule '", s, "' is not cosine/constant"));
          });
      if (sec != "pretrain") return;
      add(sec, "loss",
          [tp](const RunConfig& rc) { return ssl_word(std::invoke(tp, rc).ssl); },
          [tp](RunConfig& rc, const std::string& s) {
            for (auto c : {SslChoice::Hybrid, SslChoice::MaskedFeat,
                           SslChoice::MaskedPatch, SslChoice::ReconFeat,
                           SslChoice::ReconPatch, SslChoice::Contrastive,
                           SslChoice::Kd})
              if (ssl_word(c) == s) {
                std::invoke(tp, rc).ssl = c;
                return;
              }
            throw ValueError(cat("config: pretrain.loss '", s, "' is unknown"));
          });
      num(sec, "mask_ratio", field(&TrainConfig::mask_ratio));
      add(sec, "variant",
          [tp](const RunConfig& rc) {
            return std::string(std::invoke(tp, rc).variant ==
                                       HybridVariant::Feature
                                   ? "feature"
                                   : "patch");
          },
          [tp](RunConfig& rc, const std::string& s) {
            if (s == "feature")
              std::invoke(tp, rc).variant = HybridVariant::Feature;
            else if (s == "patch")
              std::invoke(tp, rc).variant = HybridVariant::Patch;
            else
              throw ValueError(cat("config: pretrain.variant '", s,
                                   "' is not feature/patch"));
          });
      num(sec, "tau", field(&TrainConfig::tau));
      num(sec, "ce_weight", field(&TrainConfig::ce_weight));
      num(sec, "ssl_weight", field(&TrainConfig::ssl_weight));
    };
    train_keys("pretrain", &RunConfig::pretrain);
    train_keys("tune", &RunConfig::tune);

    add("paths", "teacher",
        [](const RunConfig& rc) { return rc.teacher_path; },
        [](RunConfig& rc, const std::string& s) { rc.teacher_path = s; });
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_key(const std::string& section,
                                 const std::string& name) {
  for (const auto& k : config_schema())
    if (k.section == section && k.name == name) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// full dump in the key-value format; feeding it back reproduces the config
inline std::string config_text(const RunConfig& rc) {
  std::string out;
  std::string section;
  for (const auto& k : detail::config_schema()) {
    if (k.section != section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += '[' + section + "]\n";
    }
    out += k.name + " = " + k.get(rc) + '\n';
  }
  return out;
}

// single-knob reproducibility: the root seed reaches every subsystem
inline void reseed(RunConfig& rc, std::uint64_t seed) {
  rc.seed = seed;
  rc.data.seed = seed;
  rc.pretrain.seed = seed;
  rc.tune.seed = seed;
}

// flat sections of typed keys; '#' and ';' start comments. The run.preset
// key is applied first so later keys override its defaults.
inline RunConfig parse_config_text(const std::string& text) {
  struct Item {
    std::string section, key, value;
  };
  std::vector<Item> items;
  std::string section;
  std::istringstream ss(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    auto cut = raw.find_first_of("#;");
    std::string line = detail::trim(cut == std::string::npos
                                        ? raw
                                        : raw.substr(0, cut));
    if (line.empty()) continue;
    if (line.front() == '[') {
      check(line.back() == ']', cat("config: line ", lineno,
                                    ": unterminated section header"));
      section = detail::trim(line.substr(1, line.size() - 2));
      check(!section.empty(), cat("config: line ", lineno, ": empty section"));
      continue;
    }
    auto eq = line.find('=');
    check(eq != std::string::npos,
          cat("config: line ", lineno, ": expected 'key = value'"));
    check(!section.empty(),
          cat("config: line ", lineno, ": key before any [section]"));
    items.push_back({section, detail::trim(line.substr(0, eq)),
                     detail::trim(line.substr(eq + 1))});
  }

  RunConfig rc = desk_preset();
  for (const auto& it : items)
    if (it.section == "run" && it.key == "preset") rc = make_preset(it.value);
  for (const auto& it : items) {
    const auto* key = detail::find_key(it.section, it.key);
    check(key != nullptr,
          cat("config: unknown key ", it.section, ".", it.key));
    key->set(rc, it.value);
  }
  reseed(rc, rc.seed);
  return rc;
}

// the same sections and keys as a two-level json object
inline RunConfig parse_config_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(cat("config: bad json: ", e.what()));
  }
  check(doc.is_object(), "config: json root must be an object");
  auto value_text = [](const nlohmann::json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number_unsigned())
      return std::to_string(v.get<unsigned long long>());
    if (v.is_number_float()) return detail::fmt_double(v.get<double>());
    if (v.is_array()) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i].is_string())
          s += (i ? " " : "") + v[i].get<std::string>();
        else if (v[i].is_number_float())
          s += (i ? " " : "") + detail::fmt_double(v[i].get<double>());
        else
          s += std::string(i ? " " : "") +
               std::to_string(v[i].get<long long>());
      }
      return s;
    }
    throw ValueError("config: json values must be scalars or arrays");
  };

  RunConfig rc = desk_preset();
  if (doc.contains("run") && doc["run"].contains("preset"))
    rc = make_preset(doc["run"]["preset"].get<std::string>());
  for (const auto& [section, body] : doc.items()) {
    check(body.is_object(), cat("config: section '", section,
                                "' must hold an object"));
    for (const auto& [name, value] : body.items()) {
      const auto* key = detail::find_key(section, name);
      check(key != nullptr, cat("config: unknown key ", section, ".", name));
      key->set(rc, value_text(value));
    }
  }
  reseed(rc, rc.seed);
  return rc;
}

// files starting with '{' are json, anything else is the key-value format
inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("config: cannot open ", path));
  std::stringstream buf;
  buf << is.rdbuf();
  std::string text = buf.str();
  auto first = text.find_first_not_of(" \t\r\n");
  bool json = first != std::string::npos && text[first] == '{';
  return json ? parse_config_json(text) : parse_config_text(text);
}

inline void write_resolved_config(const RunConfig& rc, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir + "/config.ini", std::ios::trunc);
  if (!os) throw IoError(cat("config: cannot write into ", dir));
  os << config_text(rc);
}

}  // namespace pf
